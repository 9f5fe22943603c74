"""Automation toolkit for EM-segmentation proofreading.

Learns merge decisions from focused-proofreading labels, triages focused-merge
tasks, and automates the orphan-link workflow: adjacency-derived merge
candidates are scored by a trained model and auto-accepted above an
error-rate-calibrated threshold. A review server feeds new human labels back
into training.
"""

__version__ = "0.1.0"
