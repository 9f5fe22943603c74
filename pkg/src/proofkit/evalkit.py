"""Evaluation and reporting: PR curves, effort-value analysis, review precision.

Everything here is a pure function over in-memory lists, so results are
reproducible by construction; report writers format deterministically and a
rerun over the same inputs emits byte-identical files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

VERDICT_RANK = {"incorrect": 0, "indeterminate": 1, "correct": 2}


class EvalError(Exception):
    pass


@dataclass(frozen=True)
class PrPoint:
    threshold: float
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float


@dataclass
class PrCurve:
    rows: list[PrPoint]
    auprc: float

    @property
    def points(self) -> list[tuple[float, float]]:
        return [(r.recall, r.precision) for r in self.rows]


def pr_curve(scored: list[tuple[float, int]]) -> PrCurve:
    """Precision-recall sweep over distinct score thresholds, descending.

    Equal scores collapse into one threshold group, so the curve does not
    depend on input order. AUPRC integrates by steps: each increase in recall
    contributes (delta recall) * precision at the new threshold.
    """
    if not scored:
        raise EvalError("empty score set")
    for _, label in scored:
        if label not in (0, 1, True, False):
            raise EvalError(f"label must be 0 or 1, got {label!r}")
    positives = sum(1 for _, lab in scored if lab)
    if positives == 0:
        raise EvalError("no positive labels: precision-recall undefined")
    ordered = sorted(scored, key=lambda t: -t[0])
    rows = []
    tp = 0
    fp = 0
    auprc = 0.0
    prev_recall = 0.0
    i = 0
    n = len(ordered)
    while i < n:
        threshold = ordered[i][0]
        while i < n and ordered[i][0] == threshold:
            if ordered[i][1]:
                tp += 1
            else:
                fp += 1
            i += 1
        precision = tp / (tp + fp)
        recall = tp / positives
        rows.append(
            PrPoint(threshold=threshold, tp=tp, fp=fp, fn=positives - tp, precision=precision, recall=recall)
        )
        auprc += (recall - prev_recall) * precision
        prev_recall = recall
    return PrCurve(rows=rows, auprc=auprc)


@dataclass
class EffortValue:
    points: list[tuple[float, float]]  # (effort fraction, value fraction)
    effort_at_90: float | None
    merge_rate: float


def effort_value(ranked_labels, merge_rate: float) -> EffortValue:
    """Value captured as a function of review effort down a ranked task list.

    value(k/n) is the recall of true merges within the top k tasks. The
    headline stat is the smallest effort reaching 90% value. A ranking with
    no positives yields a flat zero curve and no headline.
    """
    labels = [1 if lab else 0 for lab in ranked_labels]
    n = len(labels)
    total = sum(labels)
    points = [(0.0, 0.0)]
    effort_at_90 = None
    cum = 0
    for k, lab in enumerate(labels, start=1):
        cum += lab
        value = cum / total if total else 0.0
        effort = k / n
        points.append((effort, value))
        if effort_at_90 is None and total and value >= 0.9:
            effort_at_90 = effort
    return EffortValue(points=points, effort_at_90=effort_at_90, merge_rate=merge_rate)


@dataclass(frozen=True)
class ReviewAssessment:
    candidate_id: str
    reviewer: str
    verdict: str  # correct | incorrect | indeterminate

    def __post_init__(self):
        if self.verdict not in VERDICT_RANK:
            raise EvalError(f"verdict {self.verdict!r} not in {sorted(VERDICT_RANK)}")


@dataclass(frozen=True)
class ReviewPoint:
    rank: int
    candidate_id: str
    score: float
    precision: float


@dataclass
class ReviewPrecision:
    # curve name ("A", "B", ..., "combined") -> interpretation -> points
    curves: dict[str, dict[str, list[ReviewPoint]]] = field(default_factory=dict)


def _cumulative(cands: list[tuple[str, float, str]], treat_indeterminate_as: bool) -> list[ReviewPoint]:
    points = []
    good = 0
    for rank, (cid, score, verdict) in enumerate(cands, start=1):
        if verdict == "correct" or (verdict == "indeterminate" and treat_indeterminate_as):
            good += 1
        points.append(ReviewPoint(rank=rank, candidate_id=cid, score=score, precision=good / rank))
    return points


def review_precision(assessments: list[ReviewAssessment], scores: dict[str, float]) -> ReviewPrecision:
    """Cumulative precision by descending score, per reviewer and combined.

    Each curve comes in two flavors: indeterminate treated as false and as
    true, bracketing the attainable precision. The combined curve takes the
    most favorable verdict any reviewer gave a candidate.
    """
    seen = set()
    for a in assessments:
        key = (a.candidate_id, a.reviewer)
        if key in seen:
            raise EvalError(f"duplicate assessment for {key}")
        seen.add(key)
        if a.candidate_id not in scores:
            raise EvalError(f"assessment for unscored candidate {a.candidate_id}")
    by_reviewer: dict[str, dict[str, str]] = {}
    combined: dict[str, str] = {}
    for a in assessments:
        by_reviewer.setdefault(a.reviewer, {})[a.candidate_id] = a.verdict
        prev = combined.get(a.candidate_id)
        if prev is None or VERDICT_RANK[a.verdict] > VERDICT_RANK[prev]:
            combined[a.candidate_id] = a.verdict
    out = ReviewPrecision()
    groups = {name: verdicts for name, verdicts in sorted(by_reviewer.items())}
    groups["combined"] = combined
    for name, verdicts in groups.items():
        ordered = sorted(
            ((cid, scores[cid], v) for cid, v in verdicts.items()),
            key=lambda t: (-t[1], t[0]),
        )
        out.curves[name] = {
            "treat_false": _cumulative(ordered, treat_indeterminate_as=False),
            "treat_true": _cumulative(ordered, treat_indeterminate_as=True),
        }
    return out


# ------------------------------------------------------------------ reports


def write_pr_curve_csv(curve: PrCurve, path: str | Path) -> Path:
    path = Path(path)
    lines = ["threshold,tp,fp,fn,precision,recall"]
    for r in curve.rows:
        lines.append(f"{r.threshold!r},{r.tp},{r.fp},{r.fn},{r.precision!r},{r.recall!r}")
    path.write_text("\n".join(lines) + "\n")
    return path


def write_effort_value_csv(ev: EffortValue, path: str | Path) -> Path:
    path = Path(path)
    lines = ["effort,value"]
    for effort, value in ev.points:
        lines.append(f"{effort!r},{value!r}")
    path.write_text("\n".join(lines) + "\n")
    return path


def write_review_precision_csv(rp: ReviewPrecision, path: str | Path) -> Path:
    path = Path(path)
    lines = ["curve,interpretation,rank,candidate_id,score,precision"]
    for name in sorted(rp.curves):
        for interp in ("treat_false", "treat_true"):
            for p in rp.curves[name][interp]:
                lines.append(f"{name},{interp},{p.rank},{p.candidate_id},{p.score!r},{p.precision!r}")
    path.write_text("\n".join(lines) + "\n")
    return path


def write_eval_summary(summary: dict, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    return path
