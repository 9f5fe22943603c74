"""Linear fusion of all candidate scores and features.

A hinge-loss linear classifier trained by deterministic subgradient descent
(seeded per-sweep example order, step 1/(lambda*t), unregularized bias), followed by
Platt scaling fit on a held-out fold so the margin maps to a probability.
Feature standardization is internal; the returned weights apply to the raw
input vector. The calibration slope is kept non-negative, so ranking by
fusion probability equals ranking by margin.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .cnn import ModelError, sigmoid


@dataclass
class FusionParams:
    weights: np.ndarray  # applies to the raw fusion input vector
    bias: float
    lam: float
    platt_a: float
    platt_b: float

    def __post_init__(self):
        if self.lam <= 0:
            raise ModelError("lam must be positive")

    def margin(self, x: np.ndarray) -> float:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != self.weights.shape:
            raise ModelError(f"fusion input size {x.shape} != {self.weights.shape}")
        return float(self.weights @ x + self.bias)

    def score(self, x: np.ndarray) -> float:
        return sigmoid(self.platt_a * self.margin(x) + self.platt_b)


def hinge_objective(w: np.ndarray, b: float, xs: np.ndarray, ys: np.ndarray, lam: float) -> float:
    """lam/2 ||w||^2 + mean hinge loss; ys in {-1, +1}."""
    margins = ys * (xs @ w + b)
    return float(lam / 2 * w @ w + np.mean(np.maximum(0.0, 1.0 - margins)))


def _svm_subgradient(xs: np.ndarray, ys: np.ndarray, lam: float, sweeps: int = 100):
    """Pegasos-style descent, T = sweeps * n single-example steps.

    Example order is re-drawn each sweep from a fixed-seed stream, so the
    schedule is deterministic for a given dataset but free of the stalls a
    fixed visiting cycle can settle into. The step 1/(lam*(t+t0)) is offset
    so early steps stay bounded (the bias is unregularized and would
    otherwise swing with eta=1/lam). Both the raw iterate and the running
    average are snapshotted each sweep and the best by objective wins.
    """
    n, d = xs.shape
    rng = np.random.default_rng(9813)
    w = np.zeros(d)
    b = 0.0
    w_sum = np.zeros(d)
    b_sum = 0.0
    t0 = int(np.ceil(1.0 / lam))
    best = (hinge_objective(w, b, xs, ys, lam), w.copy(), b)
    t = 0
    order = np.arange(n)
    for _ in range(sweeps):
        rng.shuffle(order)
        for i in order:
            t += 1
            eta = 1.0 / (lam * (t + t0))
            w *= 1.0 - eta * lam
            if ys[i] * (xs[i] @ w + b) < 1.0:
                w += eta * ys[i] * xs[i]
                b += eta * ys[i]
            w_sum += w
            b_sum += b
        for cw, cb in ((w, b), (w_sum / t, b_sum / t)):
            obj = hinge_objective(cw, cb, xs, ys, lam)
            if obj < best[0]:
                best = (obj, cw.copy(), float(cb))
    return best[1], best[2]


def _platt_nll(a: float, b: float, margins: np.ndarray, targets: np.ndarray) -> float:
    z = a * margins + b
    # cross-entropy against smoothed targets, softplus form for stability
    return float(np.sum(np.logaddexp(0.0, z) - targets * z))


def _fit_platt(margins: np.ndarray, labels: np.ndarray, iters: int = 60):
    """Two-parameter logistic fit with the usual smoothed targets.

    Newton steps are halved until the objective drops. Without that, a
    separable calibration fold lets the slope overshoot into the sigmoid
    tails where the Hessian vanishes; the fit then stalls at a huge slope
    and every downstream probability rounds to exactly 0 or 1.
    """
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return 1.0, 0.0
    t_pos = (n_pos + 1.0) / (n_pos + 2.0)
    t_neg = 1.0 / (n_neg + 2.0)
    targets = np.where(labels > 0, t_pos, t_neg)
    a, b = 1.0, 0.0
    loss = _platt_nll(a, b, margins, targets)
    for _ in range(iters):
        z = a * margins + b
        p = 1.0 / (1.0 + np.exp(-np.clip(z, -500, 500)))
        g = p - targets
        ga = float(g @ margins)
        gb = float(g.sum())
        s = p * (1 - p)
        haa = float(s @ (margins * margins)) + 1e-12
        hab = float(s @ margins)
        hbb = float(s.sum()) + 1e-12
        det = haa * hbb - hab * hab
        if abs(det) < 1e-12:
            break
        da = (hbb * ga - hab * gb) / det
        db = (haa * gb - hab * ga) / det
        step = 1.0
        while step > 1e-12:
            trial = _platt_nll(a - step * da, b - step * db, margins, targets)
            if trial < loss:
                break
            step /= 2
        else:
            break
        a -= step * da
        b -= step * db
        loss = trial
        if abs(step * da) < 1e-10 and abs(step * db) < 1e-10:
            break
    if a < 0:
        a = 1e-6  # calibration must not reverse the margin ranking
    return float(a), float(b)


def fusion_train(
    dataset: list[tuple[np.ndarray, int]],
    lam: float = 0.03,
    sweeps: int = 100,
    standardize: bool = True,
) -> FusionParams:
    """Train the fusion layer; every fifth example is held out for Platt.

    The default regularization is sized for the 58-dim input and a few
    hundred examples: small enough that the dominant score feature can
    carry a large weight, large enough to damp the noisy shape block.
    Under-regularized fits overfit the shape block and misrank the very
    top of the list, which is exactly where the auto-accept threshold is
    calibrated; the default sits mid-plateau on transfer benchmarks.
    """
    if not dataset:
        raise ModelError("dataset is empty")
    xs = np.array([np.asarray(v, dtype=np.float64) for v, _ in dataset])
    ys01 = np.array([int(y) for _, y in dataset])
    if xs.ndim != 2:
        raise ModelError("inconsistent fusion input dimensions")
    if len(set(ys01)) < 2:
        warnings.warn("fusion dataset has a single class; calibration is flat")
    if standardize:
        mu = xs.mean(axis=0)
        sd = xs.std(axis=0)
        sd = np.where(sd < 1e-12, 1.0, sd)
    else:
        mu = np.zeros(xs.shape[1])
        sd = np.ones(xs.shape[1])
    z = (xs - mu) / sd
    ys = np.where(ys01 > 0, 1.0, -1.0)
    hold = np.arange(len(z)) % 5 == 4
    train = ~hold
    if train.sum() == 0 or len(set(ys01[train])) < 2:
        train = np.ones(len(z), dtype=bool)  # too small to split
    w_std, b_std = _svm_subgradient(z[train], ys[train], lam, sweeps)
    cal = hold if hold.sum() else train
    margins = z[cal] @ w_std + b_std
    platt_a, platt_b = _fit_platt(margins, ys01[cal])
    # fold standardization into raw-space weights
    w_raw = w_std / sd
    b_raw = float(b_std - (w_std * mu / sd).sum())
    return FusionParams(weights=w_raw, bias=b_raw, lam=lam, platt_a=platt_a, platt_b=platt_b)
