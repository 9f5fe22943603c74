"""Per-candidate model inputs.

Three evidence sources for a merge candidate (a, b):

* a 4-channel local tensor around the contact point (grayscale, mask of a,
  mask of b, synapse proximity), consumed by the convolutional scorer;
* a 32-entry point-cloud shape descriptor over a wide, downsampled context;
* a 24-entry synapse-connectivity vector comparing the partner structure of
  the two bodies.

Everything here is a pure function of its inputs; per-candidate randomness
(point sampling) derives from a caller seed XOR the candidate id.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .adjacency import MergeCandidate
from .synth import SynapseRecord
from .volumes import GrayVolume, LabelVolume, Voxel, extract_subvolume

DEFAULT_EDGE = 33
DEFAULT_PROX_RADIUS_NM = 80.0
DEFAULT_CONTEXT_EDGE = 300
DEFAULT_POINT_FACTOR = 4
DEFAULT_N_POINTS = 2048
SHAPE_DESCRIPTOR_SIZE = 32
CONNECTIVITY_SIZE = 24


class EvidenceError(Exception):
    pass


def candidate_seed(seed: int, candidate_id: str) -> int:
    """Per-candidate stream: run seed XOR the candidate's 64-bit id prefix."""
    return (seed ^ int(candidate_id, 16)) & 0xFFFFFFFFFFFFFFFF


@dataclass
class EvidenceTensor:
    """Channels: 0 grayscale/255, 1 mask of a, 2 mask of b, 3 synapse proximity."""

    data: np.ndarray  # (4, edge, edge, edge) float32 in [0, 1]
    edge: int
    center: Voxel

    def __post_init__(self):
        if self.data.shape != (4, self.edge, self.edge, self.edge):
            raise EvidenceError(f"tensor shape {self.data.shape} != (4, {self.edge}^3)")


def extract_evidence(
    gray: GrayVolume,
    labels: LabelVolume,
    synapses: list[SynapseRecord],
    cand: MergeCandidate,
    edge: int = DEFAULT_EDGE,
    prox_radius_nm: float = DEFAULT_PROX_RADIUS_NM,
) -> EvidenceTensor:
    """Cut the 4-channel cube centered on the candidate's contact point.

    Regions outside the volume are zero-filled in every channel. The synapse
    channel marks voxels within prox_radius_nm of any T-bar or PSD site.
    """
    if edge % 2 == 0:
        raise EvidenceError("edge must be odd")
    center = cand.edge.rep_location
    g = extract_subvolume(gray, center, edge).astype(np.float32) / 255.0
    lab = extract_subvolume(labels, center, edge)
    data = np.zeros((4, edge, edge, edge), dtype=np.float32)
    data[0] = g
    data[1] = lab == cand.edge.a
    data[2] = lab == cand.edge.b
    if synapses:
        half = edge // 2
        start = np.array([center.x - half, center.y - half, center.z - half])
        nm = np.asarray(gray.meta.voxel_size_nm, dtype=np.float64)
        r_vox = prox_radius_nm / nm
        sites = np.array(
            [list(s.tbar) for s in synapses]
            + [list(p) for s in synapses for p in s.psds],
            dtype=np.float64,
        )
        near = np.all(np.abs(sites - (start + half)) <= half + r_vox, axis=1)
        if near.any():
            ax = (start[0] + np.arange(edge))[:, None, None]
            ay = (start[1] + np.arange(edge))[None, :, None]
            az = (start[2] + np.arange(edge))[None, None, :]
            r2 = prox_radius_nm * prox_radius_nm
            prox = np.zeros((edge, edge, edge), dtype=bool)
            for s in sites[near]:
                d2 = (
                    ((ax - s[0]) * nm[0]) ** 2
                    + ((ay - s[1]) * nm[1]) ** 2
                    + ((az - s[2]) * nm[2]) ** 2
                )
                prox |= d2 <= r2
            dims = gray.meta.dims
            prox &= (ax >= 0) & (ax < dims[0])
            prox &= (ay >= 0) & (ay < dims[1])
            prox &= (az >= 0) & (az < dims[2])
            data[3] = prox
    return EvidenceTensor(data=data, edge=edge, center=center)


def sample_points(
    labels: LabelVolume,
    cand: MergeCandidate,
    context_edge: int = DEFAULT_CONTEXT_EDGE,
    point_factor: int = DEFAULT_POINT_FACTOR,
    n_points: int = DEFAULT_N_POINTS,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Sample half the points from each segment inside the context cube.

    `labels` must already be downsampled by point_factor; the candidate's
    full-resolution contact location is mapped onto that grid here. Points
    come back as integer coordinates relative to the cube center, sampled
    without replacement when a segment has enough voxels, with replacement
    otherwise, and empty for a segment absent from the cube.
    """
    if n_points % 2 != 0:
        raise EvidenceError("n_points must be even")
    rng = np.random.default_rng(seed)
    rep = cand.edge.rep_location
    center = np.array([rep.x // point_factor, rep.y // point_factor, rep.z // point_factor])
    dims = np.array(labels.meta.dims)
    lo = np.maximum(center - context_edge // 2, 0)
    hi = np.minimum(center - context_edge // 2 + context_edge, dims)
    region = labels.data[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]]
    k = n_points // 2
    out = []
    for seg in (cand.edge.a, cand.edge.b):
        coords = np.argwhere(region == seg)
        if len(coords) == 0:
            out.append(np.empty((0, 3), dtype=np.int64))
            continue
        if len(coords) >= k:
            idx = rng.choice(len(coords), size=k, replace=False)
        else:
            idx = rng.choice(len(coords), size=k, replace=True)
        out.append((coords[idx] + lo - center).astype(np.int64))
    return out[0], out[1]


def _cloud_stats(points: np.ndarray):
    """Sorted covariance eigenvalues (descending) and the principal axis."""
    if len(points) < 2:
        return np.zeros(3), None
    p = points.astype(np.float64)
    c = p - p.mean(axis=0)
    cov = c.T @ c / len(p)
    w, v = np.linalg.eigh(cov)
    w = np.clip(w[::-1], 0.0, None)
    axis = v[:, 2]
    if w[0] <= 1e-12:
        return np.zeros(3), None
    return w, axis


def _abs_cos(u: np.ndarray | None, v: np.ndarray | None) -> float:
    if u is None or v is None:
        return 0.0
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu < 1e-12 or nv < 1e-12:
        return 0.0
    return float(abs(np.dot(u, v)) / (nu * nv))


def shape_descriptor(
    points_a: np.ndarray,
    points_b: np.ndarray,
    cand: MergeCandidate,
    context_edge: int = DEFAULT_CONTEXT_EDGE,
) -> np.ndarray:
    """32-entry geometry summary of the two sampled clouds.

    Layout:
      0-2   covariance eigenvalues of a, descending, normalized to sum 1
      3-5   same for b
      6-9   linearity (l1-l2)/l1 and planarity (l2-l3)/l1 for a, then b
      10-13 centroid offset (b - a)/context_edge, then its magnitude
      14    |cos| between the principal axes
      15-16 |cos| between the offset and each principal axis
      17    contact size as a fraction of context_edge^2, capped at 1
      18-19 occupied share of each cloud's bounding box
      20-27 8-bin radial histogram of all points around the contact center
      28-29 log-scaled point counts
      30-31 mean point distance from center, normalized

    Entries tied to an empty or degenerate cloud are zero; the histogram sums
    to 1 whenever any points exist.
    """
    d = np.zeros(SHAPE_DESCRIPTOR_SIZE, dtype=np.float64)
    ev_a, ax_a = _cloud_stats(points_a)
    ev_b, ax_b = _cloud_stats(points_b)
    for base, ev in ((0, ev_a), (3, ev_b)):
        s = ev.sum()
        if s > 0:
            d[base : base + 3] = ev / s
    for base, ev in ((6, ev_a), (8, ev_b)):
        if ev[0] > 0:
            d[base] = (ev[0] - ev[1]) / ev[0]
            d[base + 1] = (ev[1] - ev[2]) / ev[0]
    offset = None
    if len(points_a) and len(points_b):
        offset = points_b.mean(axis=0) - points_a.mean(axis=0)
        d[10:13] = offset / context_edge
        d[13] = np.linalg.norm(offset) / context_edge
    d[14] = _abs_cos(ax_a, ax_b)
    d[15] = _abs_cos(offset, ax_a)
    d[16] = _abs_cos(offset, ax_b)
    d[17] = min(1.0, cand.edge.contact_voxels / float(context_edge) ** 2)
    for slot, pts in ((18, points_a), (19, points_b)):
        if len(pts):
            uniq = np.unique(pts, axis=0)
            ext = uniq.max(axis=0) - uniq.min(axis=0) + 1
            d[slot] = len(uniq) / float(np.prod(ext))
    pooled = (
        np.concatenate([points_a, points_b])
        if len(points_a) or len(points_b)
        else np.empty((0, 3))
    )
    rmax = context_edge * np.sqrt(3.0) / 2.0
    if len(pooled):
        r = np.linalg.norm(pooled.astype(np.float64), axis=1)
        hist, _ = np.histogram(np.minimum(r, rmax), bins=8, range=(0.0, rmax))
        d[20:28] = hist / len(pooled)
    scale = np.log1p(float(context_edge) ** 3)
    d[28] = np.log1p(len(points_a)) / scale
    d[29] = np.log1p(len(points_b)) / scale
    for slot, pts in ((30, points_a), (31, points_b)):
        if len(pts):
            d[slot] = np.linalg.norm(pts.astype(np.float64), axis=1).mean() / rmax
    return d


class ConnectionTable:
    """Synapse connections resolved to current bodies, one row per (tbar, psd).

    Build once per body state and reuse across candidates; connectivity
    feature extraction over a raw synapse list builds a throwaway table.
    """

    def __init__(self, synapses: list[SynapseRecord], body_state):
        pre, post = [], []
        for s in synapses:
            pr = body_state.find(s.pre_fragment)
            for pf in s.post_fragments:
                pre.append(pr)
                post.append(body_state.find(pf))
        self.pre = np.array(pre, dtype=np.int64)
        self.post = np.array(post, dtype=np.int64)
        roots = np.unique(np.concatenate([self.pre, self.post])) if pre else np.empty(0, np.int64)
        ident = {int(r): bool(body_state.is_identified(int(r))) for r in roots}
        self.pre_ident = np.array([ident[int(r)] for r in self.pre], dtype=bool)
        self.post_ident = np.array([ident[int(r)] for r in self.post], dtype=bool)


def _top_partners(partners: np.ndarray, counts: np.ndarray, k: int = 3) -> list[int]:
    order = sorted(range(len(partners)), key=lambda i: (-counts[i], partners[i]))
    return [int(partners[i]) for i in order[:k]]


def _top_types(partners, counts, types, k: int = 3) -> list[str]:
    agg: Counter = Counter()
    for p, c in zip(partners, counts):
        t = types.get(int(p))
        if t is not None:
            agg[t] += int(c)
    order = sorted(agg.items(), key=lambda kv: (-kv[1], kv[0]))
    return [t for t, _ in order[:k]]


def _overlap(list_a: list, list_b: list) -> tuple[int, float]:
    n = len(set(list_a) & set(list_b))
    denom = min(len(list_a), len(list_b))
    return n, (n / denom if denom else 0.0)


def connectivity_features(
    synapses: "list[SynapseRecord] | ConnectionTable",
    body_state,
    types: dict[int, str],
    a: int,
    b: int,
) -> np.ndarray:
    """24-entry partner-structure comparison of the bodies holding a and b.

    Layout (counts, then the matching fractions):
      0-3   total inputs/outputs of a, then of b
      4-7   inputs/outputs involving identified partners, same order
      8-9   top-3 shared input / output partners (body level)
      10-11 the same at cell-type level (types keyed by body root)
      12-15 in/out share of each body's total connections
      16-19 identified share of each count in 4-7
      20-23 overlaps 8-11 over the smaller top list, 0 when either is empty
    """
    table = synapses if isinstance(synapses, ConnectionTable) else ConnectionTable(synapses, body_state)
    root_a = body_state.find(a)
    root_b = body_state.find(b)
    f = np.zeros(CONNECTIVITY_SIZE, dtype=np.float64)
    tops = {}
    for side, root in ((0, root_a), (1, root_b)):
        in_mask = table.post == root
        out_mask = table.pre == root
        n_in, n_out = int(in_mask.sum()), int(out_mask.sum())
        f[0 + 2 * side] = n_in
        f[1 + 2 * side] = n_out
        f[4 + 2 * side] = int(table.pre_ident[in_mask].sum())
        f[5 + 2 * side] = int(table.post_ident[out_mask].sum())
        in_p, in_c = np.unique(table.pre[in_mask], return_counts=True)
        out_p, out_c = np.unique(table.post[out_mask], return_counts=True)
        tops[side] = (
            _top_partners(in_p, in_c),
            _top_partners(out_p, out_c),
            _top_types(in_p, in_c, types),
            _top_types(out_p, out_c, types),
        )
        total = n_in + n_out
        if total:
            f[12 + 2 * side] = n_in / total
            f[13 + 2 * side] = n_out / total
        if n_in:
            f[16 + 2 * side] = f[4 + 2 * side] / n_in
        if n_out:
            f[17 + 2 * side] = f[5 + 2 * side] / n_out
    for j in range(4):
        f[8 + j], f[20 + j] = _overlap(tops[0][j], tops[1][j])
    return f


def write_features(path: str | Path, rows: list[dict]) -> Path:
    """features.jsonl: one {"id", "shape", "connectivity"} object per line."""
    path = Path(path)
    with path.open("w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    return path


def read_features(path: str | Path) -> dict[str, dict]:
    out = {}
    for line in Path(path).read_text().splitlines():
        rec = json.loads(line)
        out[rec["id"]] = rec
    return out


class EvidenceWriter:
    """Fixed-size little-endian f32 tensor records plus a JSON offset index."""

    def __init__(self, bin_path: str | Path, idx_path: str | Path, edge: int):
        self.bin_path = Path(bin_path)
        self.idx_path = Path(idx_path)
        self.edge = edge
        self._fh = self.bin_path.open("wb")
        self._index: dict[str, int] = {}

    def add(self, candidate_id: str, tensor: EvidenceTensor):
        if tensor.edge != self.edge:
            raise EvidenceError(f"tensor edge {tensor.edge} != store edge {self.edge}")
        self._index[candidate_id] = self._fh.tell()
        self._fh.write(tensor.data.astype("<f4").tobytes())

    def close(self):
        self._fh.close()
        doc = {"edge": self.edge, "offsets": self._index}
        self.idx_path.write_text(json.dumps(doc, sort_keys=True))

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class EvidenceStore:
    """Read-side of the tensor records written by EvidenceWriter."""

    def __init__(self, bin_path: str | Path, idx_path: str | Path):
        doc = json.loads(Path(idx_path).read_text())
        self.edge = doc["edge"]
        self.offsets = doc["offsets"]
        self._bytes = Path(bin_path).read_bytes()
        self.record_size = 4 * self.edge**3 * 4

    def __contains__(self, candidate_id: str) -> bool:
        return candidate_id in self.offsets

    def ids(self) -> list[str]:
        return sorted(self.offsets)

    def load(self, candidate_id: str, center: Voxel = Voxel(0, 0, 0)) -> EvidenceTensor:
        try:
            off = self.offsets[candidate_id]
        except KeyError:
            raise EvidenceError(f"no evidence for candidate {candidate_id}") from None
        raw = self._bytes[off : off + self.record_size]
        if len(raw) != self.record_size:
            raise EvidenceError("truncated evidence record")
        e = self.edge
        data = np.frombuffer(raw, dtype="<f4").reshape(4, e, e, e).copy()
        return EvidenceTensor(data=data, edge=e, center=center)
