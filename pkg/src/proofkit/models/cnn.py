"""Small trainable 3D convolutional scorer, written directly on numpy.

Architecture: a stack of conv blocks (3x3x3 same-padding convolution, ReLU,
2x max-pool) followed by fully connected layers ending in a single logit.
Convolutions run as an im2col unrolling plus one matrix product, which is
what makes CPU training of the default corpus practical; the backward pass
reuses the same machinery (input gradients are a correlation of the padded
output gradient with flipped, channel-transposed kernels).

Training is plain SGD with momentum on binary cross-entropy. Everything is
deterministic given the config seed: initialization, epoch shuffles, and the
optional axis-flip augmentation all draw from seeded generators.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from ..evidence import EvidenceTensor
from ..seeds import derive_seed


class ModelError(Exception):
    pass


@dataclass(frozen=True)
class CnnConfig:
    input_edge: int = 33
    in_channels: int = 4
    conv_blocks: tuple[int, ...] = (8, 16, 32)  # filters; kernel 3, pool 2
    fc_widths: tuple[int, ...] = (64,)
    seed: int = 0
    augment_flips: bool = True

    def __post_init__(self):
        if self.input_edge % 2 == 0 or self.input_edge < 1:
            raise ModelError("input_edge must be odd and positive")
        e = self.input_edge
        for _ in self.conv_blocks:
            e = e // 2
            if e < 1:
                raise ModelError("pooling reduces spatial extent below 1")

    def spatial_extents(self) -> list[int]:
        out = [self.input_edge]
        for _ in self.conv_blocks:
            out.append(out[-1] // 2)
        return out

    def flat_dim(self) -> int:
        e = self.spatial_extents()[-1]
        ch = self.conv_blocks[-1] if self.conv_blocks else self.in_channels
        return ch * e * e * e

    def to_dict(self) -> dict:
        return {
            "input_edge": self.input_edge,
            "in_channels": self.in_channels,
            "conv_blocks": list(self.conv_blocks),
            "fc_widths": list(self.fc_widths),
            "seed": self.seed,
            "augment_flips": self.augment_flips,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CnnConfig":
        return cls(
            input_edge=d["input_edge"],
            in_channels=d["in_channels"],
            conv_blocks=tuple(d["conv_blocks"]),
            fc_widths=tuple(d["fc_widths"]),
            seed=d["seed"],
            augment_flips=d["augment_flips"],
        )


@dataclass
class CnnParams:
    conv: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    fc: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    def arrays(self) -> list[np.ndarray]:
        """All parameter tensors in declaration order (serialization order)."""
        out = []
        for w, b in self.conv + self.fc:
            out.extend([w, b])
        return out

    def astype(self, dtype) -> "CnnParams":
        return CnnParams(
            conv=[(w.astype(dtype), b.astype(dtype)) for w, b in self.conv],
            fc=[(w.astype(dtype), b.astype(dtype)) for w, b in self.fc],
        )


def init_params(config: CnnConfig, dtype=np.float32) -> CnnParams:
    """He fan-in initialization from the config seed; biases start at zero."""
    rng = np.random.default_rng(config.seed)
    params = CnnParams()
    c_in = config.in_channels
    for f in config.conv_blocks:
        std = np.sqrt(2.0 / (c_in * 27))
        w = rng.normal(0.0, std, size=(f, c_in, 3, 3, 3))
        params.conv.append((w.astype(dtype), np.zeros(f, dtype=dtype)))
        c_in = f
    d_in = config.flat_dim()
    for width in list(config.fc_widths) + [1]:
        std = np.sqrt(2.0 / d_in)
        w = rng.normal(0.0, std, size=(width, d_in))
        params.fc.append((w.astype(dtype), np.zeros(width, dtype=dtype)))
        d_in = width
    return params


def _im2col(x: np.ndarray) -> np.ndarray:
    """(C, E, E, E) -> (C*27, E^3) with one-voxel zero padding, 3^3 offsets."""
    c, e = x.shape[0], x.shape[1]
    xp = np.zeros((c, e + 2, e + 2, e + 2), dtype=x.dtype)
    xp[:, 1:-1, 1:-1, 1:-1] = x
    col = np.empty((c, 27, e * e * e), dtype=x.dtype)
    o = 0
    for dx in range(3):
        for dy in range(3):
            for dz in range(3):
                col[:, o] = xp[:, dx : dx + e, dy : dy + e, dz : dz + e].reshape(c, -1)
                o += 1
    return col.reshape(c * 27, -1)


def _conv_forward(w: np.ndarray, b: np.ndarray, x: np.ndarray):
    f = w.shape[0]
    e = x.shape[1]
    col = _im2col(x)
    out = (w.reshape(f, -1) @ col + b[:, None]).reshape(f, e, e, e)
    return out, col


def _conv_backward(w: np.ndarray, col: np.ndarray, dy: np.ndarray):
    f, c = w.shape[0], w.shape[1]
    e = dy.shape[1]
    dy_flat = dy.reshape(f, -1)
    dw = (dy_flat @ col.T).reshape(w.shape)
    db = dy_flat.sum(axis=1)
    # input gradient: correlate padded dy with flipped, channel-swapped kernels
    k = w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4).reshape(c, -1)
    dx = (k @ _im2col(dy)).reshape(c, e, e, e)
    return dw, db, dx


def _pool_forward(x: np.ndarray):
    f, e = x.shape[0], x.shape[1]
    h = e // 2
    t = x[:, : 2 * h, : 2 * h, : 2 * h]
    t = t.reshape(f, h, 2, h, 2, h, 2).transpose(0, 1, 3, 5, 2, 4, 6).reshape(f, h * h * h, 8)
    arg = t.argmax(axis=2)
    out = np.take_along_axis(t, arg[:, :, None], axis=2)[:, :, 0].reshape(f, h, h, h)
    return out, arg, e


def _pool_backward(dy: np.ndarray, arg: np.ndarray, e_in: int):
    f, h = dy.shape[0], dy.shape[1]
    t = np.zeros((f, h * h * h, 8), dtype=dy.dtype)
    np.put_along_axis(t, arg[:, :, None], dy.reshape(f, -1, 1), axis=2)
    t = t.reshape(f, h, h, h, 2, 2, 2).transpose(0, 1, 4, 2, 5, 3, 6).reshape(f, 2 * h, 2 * h, 2 * h)
    dx = np.zeros((f, e_in, e_in, e_in), dtype=dy.dtype)
    dx[:, : 2 * h, : 2 * h, : 2 * h] = t
    return dx


def _as_input(x, config: CnnConfig, dtype) -> np.ndarray:
    if isinstance(x, EvidenceTensor):
        x = x.data
    x = np.asarray(x, dtype=dtype)
    e = config.input_edge
    if x.shape != (config.in_channels, e, e, e):
        raise ModelError(f"input shape {x.shape} != ({config.in_channels}, {e}, {e}, {e})")
    return x


def forward_logit(config: CnnConfig, params: CnnParams, x, cache=None) -> float:
    """Single-example forward pass; pass a list as cache to enable backward."""
    dtype = params.conv[0][0].dtype if params.conv else params.fc[0][0].dtype
    a = _as_input(x, config, dtype)
    for w, b in params.conv:
        z, col = _conv_forward(w, b, a)
        r = np.maximum(z, 0)
        p, arg, e_in = _pool_forward(r)
        if cache is not None:
            cache.append(("conv", col, z, arg, e_in))
        a = p
    v = a.reshape(-1)
    for i, (w, b) in enumerate(params.fc):
        z = w @ v + b
        if i < len(params.fc) - 1:
            r = np.maximum(z, 0)
        else:
            r = z
        if cache is not None:
            cache.append(("fc", v, z, a.shape if i == 0 else None))
        v = r
    return float(v[0])


def bce_loss(logit: float, label: float) -> float:
    return float(np.logaddexp(0.0, logit) - label * logit)


def sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + np.exp(-z))
    t = np.exp(z)
    return float(t / (1.0 + t))


def backward(config: CnnConfig, params: CnnParams, cache: list, dlogit: float) -> CnnParams:
    """Gradients of the scalar logit-derivative through the cached pass."""
    grads = CnnParams(
        conv=[(np.zeros_like(w), np.zeros_like(b)) for w, b in params.conv],
        fc=[(np.zeros_like(w), np.zeros_like(b)) for w, b in params.fc],
    )
    dtype = grads.fc[-1][0].dtype
    dv = np.array([dlogit], dtype=dtype)
    pre_flat_shape = None
    for i in range(len(params.fc) - 1, -1, -1):
        kind, v, z, shape0 = cache[len(params.conv) + i]
        if i < len(params.fc) - 1:
            dv = dv * (z > 0)
        w, _ = params.fc[i]
        grads.fc[i] = (np.outer(dv, v), dv.copy())
        dv = w.T @ dv
        if shape0 is not None:
            pre_flat_shape = shape0
    da = dv.reshape(pre_flat_shape)
    for i in range(len(params.conv) - 1, -1, -1):
        kind, col, z, arg, e_in = cache[i]
        dr = _pool_backward(da, arg, e_in)
        dz = dr * (z > 0)
        w, _ = params.conv[i]
        dw, db, da = _conv_backward(w, col, dz)
        grads.conv[i] = (dw, db)
    return grads


def loss_and_grads(config: CnnConfig, params: CnnParams, x, label: float):
    cache: list = []
    logit = forward_logit(config, params, x, cache)
    loss = bce_loss(logit, label)
    dlogit = sigmoid(logit) - label
    return loss, backward(config, params, cache, dlogit)


def cnn_forward(config: CnnConfig, params: CnnParams, x) -> float:
    """Merge probability for one evidence tensor."""
    return sigmoid(forward_logit(config, params, x))


DEFAULT_HYPER = {"lr": 0.01, "momentum": 0.9, "batch": 16, "epochs": 16}


def _maybe_flip(x: np.ndarray, rng) -> np.ndarray:
    for axis in (1, 2, 3):
        if rng.random() < 0.5:
            x = np.flip(x, axis=axis)
    return x


def cnn_train(
    config: CnnConfig,
    dataset: list[tuple],
    hyper: dict | None = None,
) -> tuple[CnnParams, list[dict]]:
    """SGD+momentum on BCE; returns params and per-epoch loss history."""
    if not dataset:
        raise ModelError("dataset is empty")
    for _, y in dataset:
        if y not in (0, 1, 0.0, 1.0):
            raise ModelError(f"label {y!r} not in {{0, 1}}")
    h = dict(DEFAULT_HYPER)
    if hyper:
        h.update(hyper)
    params = init_params(config, dtype=np.float32)
    velocity = CnnParams(
        conv=[(np.zeros_like(w), np.zeros_like(b)) for w, b in params.conv],
        fc=[(np.zeros_like(w), np.zeros_like(b)) for w, b in params.fc],
    )
    shuffle_rng = np.random.default_rng(derive_seed(config.seed, "shuffle"))
    flip_rng = np.random.default_rng(derive_seed(config.seed, "augment"))
    xs = [_as_input(x, config, np.float32) for x, _ in dataset]
    ys = [float(y) for _, y in dataset]
    n = len(xs)
    history = []
    for epoch in range(int(h["epochs"])):
        t0 = time.time()
        # halve the step every 6 epochs; the fixed rate oscillates once the
        # loss flattens
        lr = float(h["lr"]) * 0.5 ** (epoch // 6)
        order = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, int(h["batch"])):
            idx = order[start : start + int(h["batch"])]
            batch_grads = None
            for i in idx:
                x = xs[i]
                if config.augment_flips:
                    x = _maybe_flip(x, flip_rng)
                loss, g = loss_and_grads(config, params, x, ys[i])
                total += loss
                if batch_grads is None:
                    batch_grads = g
                else:
                    for acc, new in (
                        (batch_grads.conv, g.conv),
                        (batch_grads.fc, g.fc),
                    ):
                        for j, (dw, db) in enumerate(new):
                            acc[j][0][...] += dw
                            acc[j][1][...] += db
            scale = 1.0 / len(idx)
            for pl, vl, gl in (
                (params.conv, velocity.conv, batch_grads.conv),
                (params.fc, velocity.fc, batch_grads.fc),
            ):
                for j in range(len(pl)):
                    for slot in (0, 1):
                        vl[j][slot][...] = (
                            h["momentum"] * vl[j][slot] - lr * scale * gl[j][slot]
                        )
                        pl[j][slot][...] += vl[j][slot]
        mean_loss = total / n
        if not np.isfinite(mean_loss):
            raise ModelError(f"training diverged: epoch {epoch} loss {mean_loss}")
        history.append({"epoch": epoch, "loss": float(mean_loss), "seconds": time.time() - t0})
    return params, history


def grad_check(config: CnnConfig, sample=None, h: float = 1e-5) -> float:
    """Max relative error of analytic vs central finite-difference gradients.

    Runs in f64 over every parameter of a (small) config. The relative error
    of a pair (a, n) is |a - n| / max(|a| + |n|, 1e-8).
    """
    rng = np.random.default_rng(config.seed)
    if sample is None:
        e = config.input_edge
        x = rng.random((config.in_channels, e, e, e))
        label = 1.0
    else:
        x, label = sample
        x = np.asarray(x, dtype=np.float64)
    params = init_params(config, dtype=np.float64)
    _, grads = loss_and_grads(config, params, x, label)

    def loss_at() -> float:
        return bce_loss(forward_logit(config, params, x), label)

    worst = 0.0
    for p_arr, g_arr in zip(params.arrays(), grads.arrays()):
        flat_p = p_arr.reshape(-1)
        flat_g = g_arr.reshape(-1)
        for i in range(flat_p.size):
            keep = flat_p[i]
            flat_p[i] = keep + h
            up = loss_at()
            flat_p[i] = keep - h
            down = loss_at()
            flat_p[i] = keep
            numeric = (up - down) / (2 * h)
            denom = max(abs(flat_g[i]) + abs(numeric), 1e-8)
            worst = max(worst, abs(flat_g[i] - numeric) / denom)
    return worst
