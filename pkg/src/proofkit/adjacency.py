"""Segment spatial-adjacency table and merge-candidate generation.

Contact is 6-connectivity: every face-adjacent voxel pair with two distinct
non-zero labels contributes one count to the (a, b) edge, a < b. The volume is
partitioned into blocks extended by one voxel in each positive axis direction
and scanned block-parallel; each pair is owned by exactly one block (the one
containing its lower voxel), so the merged table is independent of block size
and worker count.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .volumes import LabelVolume, Voxel, downsample

BASELINE_KAPPA = 50.0

_OFFSETS_27 = [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)]


class AdjacencyError(Exception):
    pass


@dataclass(frozen=True)
class AdjacencyEdge:
    a: int
    b: int
    contact_voxels: int
    rep_location: Voxel  # full-resolution coordinates
    factor: int

    def __post_init__(self):
        if self.a == 0 or self.b == 0 or self.a >= self.b:
            raise AdjacencyError(f"edge labels must satisfy 0 < a < b, got ({self.a}, {self.b})")
        if self.contact_voxels < 1:
            raise AdjacencyError("contact_voxels must be >= 1")


@dataclass(frozen=True)
class CandidateFilter:
    workflow: str = "focused"  # focused | orphan
    min_contact: int = 1

    def __post_init__(self):
        if self.workflow not in ("focused", "orphan"):
            raise AdjacencyError(f"unknown workflow {self.workflow!r}")


@dataclass
class MergeCandidate:
    edge: AdjacencyEdge
    id: str
    scores: dict[str, float] = field(default_factory=dict)
    workflow: str = "focused"


def candidate_id(a: int, b: int, rep: Voxel) -> str:
    """Stable candidate id: hash of (a, b, rep_location), identical across runs."""
    key = f"{a}:{b}:{rep[0]}:{rep[1]}:{rep[2]}".encode()
    return hashlib.sha256(key).hexdigest()[:16]


def _block_starts(dim: int, block_edge: int) -> range:
    return range(0, dim, block_edge)


def _scan_block(data: np.ndarray, start: tuple[int, int, int], block_edge: int):
    """Collect boundary pairs whose lower voxel lies in this block.

    Returns (lo, hi, ax, ay, az) arrays: canonical labels plus the coordinates
    of the pair's a-side voxel (the one holding the smaller label).
    """
    X, Y, Z = data.shape
    x0, y0, z0 = start
    x1 = min(x0 + block_edge, X)
    y1 = min(y0 + block_edge, Y)
    z1 = min(z0 + block_edge, Z)
    ext = data[x0 : min(x1 + 1, X), y0 : min(y1 + 1, Y), z0 : min(z1 + 1, Z)]
    cs = (x1 - x0, y1 - y0, z1 - z0)
    out = []
    for axis in range(3):
        n = list(cs)
        # pairs (p, p+e_axis): drop the last plane when the block abuts the
        # volume boundary (no extension layer exists there)
        full_dim = (X, Y, Z)[axis]
        blk_end = (x1, y1, z1)[axis]
        n[axis] = cs[axis] - 1 if blk_end >= full_dim else cs[axis]
        if n[axis] <= 0:
            continue
        a_view = ext[: n[0], : n[1], : n[2]]
        shifted = [slice(0, n[0]), slice(0, n[1]), slice(0, n[2])]
        shifted[axis] = slice(1, n[axis] + 1)
        b_view = ext[tuple(shifted)]
        mask = (a_view != b_view) & (a_view != 0) & (b_view != 0)
        if not mask.any():
            continue
        px, py, pz = np.nonzero(mask)
        la = a_view[mask].astype(np.int64)
        lb = b_view[mask].astype(np.int64)
        gx = px.astype(np.int64) + x0
        gy = py.astype(np.int64) + y0
        gz = pz.astype(np.int64) + z0
        # a-side voxel: q = p + e_axis when the smaller label sits on the far side
        swap = la > lb
        qx, qy, qz = gx.copy(), gy.copy(), gz.copy()
        off = np.zeros(3, dtype=np.int64)
        off[axis] = 1
        qx[swap] += off[0]
        qy[swap] += off[1]
        qz[swap] += off[2]
        lo = np.where(swap, lb, la)
        hi = np.where(swap, la, lb)
        out.append((lo, hi, np.where(swap, qx, gx), np.where(swap, qy, gy), np.where(swap, qz, gz)))
    if not out:
        empty = np.empty(0, dtype=np.int64)
        return (empty,) * 5
    return tuple(np.concatenate(parts) for parts in zip(*out))


def _rep_for_group(xs: np.ndarray, ys: np.ndarray, zs: np.ndarray, dims) -> tuple[int, int, int]:
    """Pick the a-side voxel whose 3^3 neighborhood holds the most boundary pairs.

    Pair membership is counted by the pair's a-side voxel; ties resolve to the
    lexicographically smallest (x, y, z).
    """
    # pack shifted coordinates so every +-1 neighbor key stays in range
    sy = dims[1] + 2
    sz = dims[2] + 2
    keys = (xs + 1) * (sy * sz) + (ys + 1) * sz + (zs + 1)
    uvox, ucnt = np.unique(keys, return_counts=True)
    nsum = np.zeros(len(uvox), dtype=np.int64)
    for dx, dy, dz in _OFFSETS_27:
        nk = uvox + dx * (sy * sz) + dy * sz + dz
        idx = np.searchsorted(uvox, nk)
        idx_c = np.minimum(idx, len(uvox) - 1)
        hit = uvox[idx_c] == nk
        nsum += np.where(hit, ucnt[idx_c], 0)
    best = int(np.argmax(nsum))  # first max = smallest packed key = lexicographic min
    k = int(uvox[best])
    x = k // (sy * sz) - 1
    y = (k // sz) % sy - 1
    z = k % sz - 1
    return x, y, z


def compute_adjacency(
    v: LabelVolume,
    factor: int = 1,
    block_edge: int = 64,
    threads: int | None = None,
) -> list[AdjacencyEdge]:
    """Compute the full adjacency table of v at the given downsample factor.

    Representative locations are reported at full resolution:
    rep_full = rep_downsampled * factor + floor(factor / 2) per axis.
    """
    if block_edge < 16:
        raise AdjacencyError(f"block_edge must be >= 16, got {block_edge}")
    ds = downsample(v, factor) if factor != 1 else v
    data = ds.data
    X, Y, Z = data.shape
    starts = [
        (x0, y0, z0)
        for z0 in _block_starts(Z, block_edge)
        for y0 in _block_starts(Y, block_edge)
        for x0 in _block_starts(X, block_edge)
    ]
    if threads is not None and threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda s: _scan_block(data, s, block_edge), starts))
    else:
        results = [_scan_block(data, s, block_edge) for s in starts]
    parts = [np.concatenate(cols) for cols in zip(*results)]
    lo, hi, xs, ys, zs = parts
    if lo.size == 0:
        return []
    order = np.lexsort((hi, lo))
    lo, hi, xs, ys, zs = lo[order], hi[order], xs[order], ys[order], zs[order]
    boundary = np.flatnonzero(np.append(True, (lo[1:] != lo[:-1]) | (hi[1:] != hi[:-1])))
    group_ends = np.append(boundary[1:], lo.shape[0])
    half = factor // 2
    edges = []
    for g0, g1 in zip(boundary, group_ends):
        rx, ry, rz = _rep_for_group(xs[g0:g1], ys[g0:g1], zs[g0:g1], (X, Y, Z))
        edges.append(
            AdjacencyEdge(
                a=int(lo[g0]),
                b=int(hi[g0]),
                contact_voxels=int(g1 - g0),
                rep_location=Voxel(rx * factor + half, ry * factor + half, rz * factor + half),
                factor=factor,
            )
        )
    return edges


def candidates_for(
    edges: Sequence[AdjacencyEdge],
    filt: CandidateFilter,
    body_state=None,
    kappa: float = BASELINE_KAPPA,
) -> list[MergeCandidate]:
    """Turn adjacency edges into scored merge candidates.

    focused: every edge with contact_voxels >= min_contact.
    orphan: edges joining two distinct bodies where exactly one side belongs to
    an identified body (requires a body_state with find/is_identified).

    The attached baseline score is contact / (contact + kappa), a stand-in for
    agglomeration confidence that grows with contact area.
    """
    if filt.workflow == "orphan" and body_state is None:
        raise AdjacencyError("orphan candidate filter requires a body state")
    out = []
    for e in edges:
        if e.contact_voxels < filt.min_contact:
            continue
        if filt.workflow == "orphan":
            try:
                ra = body_state.find(e.a)
                rb = body_state.find(e.b)
            except KeyError as exc:
                raise AdjacencyError(f"edge references unknown fragment: {exc}") from exc
            if ra == rb:
                continue
            if body_state.is_identified(ra) == body_state.is_identified(rb):
                continue
        baseline = e.contact_voxels / (e.contact_voxels + kappa)
        out.append(
            MergeCandidate(
                edge=e,
                id=candidate_id(e.a, e.b, e.rep_location),
                scores={"baseline": baseline},
                workflow=filt.workflow,
            )
        )
    return out


TSV_HEADER = "a\tb\tcontact_voxels\trep_x\trep_y\trep_z\tfactor"


def write_adjacency_tsv(edges: Iterable[AdjacencyEdge], path: str | Path) -> Path:
    path = Path(path)
    lines = [TSV_HEADER]
    for e in edges:
        r = e.rep_location
        lines.append(f"{e.a}\t{e.b}\t{e.contact_voxels}\t{r.x}\t{r.y}\t{r.z}\t{e.factor}")
    path.write_text("\n".join(lines) + "\n")
    return path


def read_adjacency_tsv(path: str | Path) -> list[AdjacencyEdge]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != TSV_HEADER:
        raise AdjacencyError(f"bad adjacency table header in {path}")
    edges = []
    for line in lines[1:]:
        a, b, cv, rx, ry, rz, f = line.split("\t")
        edges.append(
            AdjacencyEdge(int(a), int(b), int(cv), Voxel(int(rx), int(ry), int(rz)), int(f))
        )
    return edges


def write_candidates(cands: Iterable[MergeCandidate], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w") as fh:
        for c in cands:
            e = c.edge
            rec = {
                "id": c.id,
                "a": e.a,
                "b": e.b,
                "contact_voxels": e.contact_voxels,
                "rep": [e.rep_location.x, e.rep_location.y, e.rep_location.z],
                "factor": e.factor,
                "scores": {k: float(v) for k, v in sorted(c.scores.items())},
                "workflow": c.workflow,
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def read_candidates(path: str | Path) -> list[MergeCandidate]:
    out = []
    for line in Path(path).read_text().splitlines():
        rec = json.loads(line)
        edge = AdjacencyEdge(
            rec["a"], rec["b"], rec["contact_voxels"], Voxel(*rec["rep"]), rec["factor"]
        )
        out.append(
            MergeCandidate(edge=edge, id=rec["id"], scores=rec["scores"], workflow=rec["workflow"])
        )
    return out
