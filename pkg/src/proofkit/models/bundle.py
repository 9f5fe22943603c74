"""Container tying the conv scorer and fusion layer into one model file.

File layout (`model.aprf`): magic `APRF`, one format-version byte, a
length-prefixed JSON header (config, fusion scalars, blob manifest), then the
parameter blobs as little-endian f32 in declaration order. Saving is
canonical, so identical models produce identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..evidence import CONNECTIVITY_SIZE, SHAPE_DESCRIPTOR_SIZE
from .cnn import CnnConfig, CnnParams, ModelError, cnn_forward
from .fusion import FusionParams

MAGIC = b"APRF"
FORMAT_VERSION = 1
FEATURE_LAYOUT_VERSION = 1

#: fusion input: [cnn_score, baseline_score, shape(32), connectivity(24)]
FUSION_DIM = 2 + SHAPE_DESCRIPTOR_SIZE + CONNECTIVITY_SIZE

_LOGIT_EPS = 1e-6


def _logit(p: float) -> float:
    p = min(max(float(p), _LOGIT_EPS), 1.0 - _LOGIT_EPS)
    return float(np.log(p / (1.0 - p)))


def build_fusion_input(
    cnn_score: float,
    baseline_score: float,
    shape: np.ndarray,
    connectivity: np.ndarray,
) -> np.ndarray:
    """Assemble the fusion vector; incomplete features are an error.

    The two probability scores enter in log-odds form. A well-trained conv
    net concentrates its probabilities near 0 and 1, where a linear layer
    on raw probabilities cannot tell 0.97 from 0.999; the logit keeps that
    resolution (and turns the contact-area baseline into log contact).
    """
    if shape is None or connectivity is None:
        raise ModelError("missing shape or connectivity features")
    shape = np.asarray(shape, dtype=np.float64)
    connectivity = np.asarray(connectivity, dtype=np.float64)
    if shape.shape != (SHAPE_DESCRIPTOR_SIZE,):
        raise ModelError(f"shape descriptor size {shape.shape} != {SHAPE_DESCRIPTOR_SIZE}")
    if connectivity.shape != (CONNECTIVITY_SIZE,):
        raise ModelError(f"connectivity size {connectivity.shape} != {CONNECTIVITY_SIZE}")
    return np.concatenate([[_logit(cnn_score), _logit(baseline_score)], shape, connectivity])


@dataclass
class ModelBundle:
    cnn_config: CnnConfig
    cnn_params: CnnParams
    fusion: FusionParams
    feature_layout_version: int = FEATURE_LAYOUT_VERSION
    train_fingerprint: str = ""

    def score(self, tensor, shape, connectivity, baseline_score: float) -> dict:
        """Both model scores for one candidate, each in [0, 1]."""
        if self.feature_layout_version != FEATURE_LAYOUT_VERSION:
            raise ModelError(
                f"feature layout {self.feature_layout_version} != {FEATURE_LAYOUT_VERSION}"
            )
        cnn_p = cnn_forward(self.cnn_config, self.cnn_params, tensor)
        vec = build_fusion_input(cnn_p, baseline_score, shape, connectivity)
        return {"cnn": cnn_p, "fusion": self.fusion.score(vec)}


def save_bundle(path: str | Path, bundle: ModelBundle) -> Path:
    path = Path(path)
    blobs = bundle.cnn_params.arrays() + [
        np.asarray(bundle.fusion.weights, dtype=np.float64),
        np.array([bundle.fusion.bias]),
    ]
    header = {
        "cnn_config": bundle.cnn_config.to_dict(),
        "fusion": {
            "dim": int(len(bundle.fusion.weights)),
            "lam": bundle.fusion.lam,
            "platt_a": bundle.fusion.platt_a,
            "platt_b": bundle.fusion.platt_b,
        },
        "feature_layout_version": bundle.feature_layout_version,
        "train_fingerprint": bundle.train_fingerprint,
        "blobs": [list(b.shape) for b in blobs],
    }
    head = json.dumps(header, sort_keys=True).encode()
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b.astype("<f4").tobytes())
    return path


def load_bundle(path: str | Path) -> ModelBundle:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ModelError("not a model file (bad magic)")
    version = raw[4]
    if version != FORMAT_VERSION:
        raise ModelError(f"unsupported model format version {version}")
    (head_len,) = struct.unpack("<I", raw[5:9])
    header = json.loads(raw[9 : 9 + head_len])
    config = CnnConfig.from_dict(header["cnn_config"])
    off = 9 + head_len
    blobs = []
    for shape in header["blobs"]:
        n = int(np.prod(shape)) if shape else 1
        blob = np.frombuffer(raw[off : off + 4 * n], dtype="<f4")
        if blob.size != n:
            raise ModelError("truncated model file")
        blobs.append(blob.reshape(shape).astype(np.float64))
        off += 4 * n
    params = CnnParams()
    i = 0
    for _ in config.conv_blocks:
        params.conv.append((blobs[i].astype(np.float32), blobs[i + 1].astype(np.float32)))
        i += 2
    for _ in list(config.fc_widths) + [1]:
        params.fc.append((blobs[i].astype(np.float32), blobs[i + 1].astype(np.float32)))
        i += 2
    fus = header["fusion"]
    fusion = FusionParams(
        weights=blobs[i].reshape(-1),
        bias=float(blobs[i + 1][0]),
        lam=fus["lam"],
        platt_a=fus["platt_a"],
        platt_b=fus["platt_b"],
    )
    return ModelBundle(
        cnn_config=config,
        cnn_params=params,
        fusion=fusion,
        feature_layout_version=header["feature_layout_version"],
        train_fingerprint=header["train_fingerprint"],
    )
