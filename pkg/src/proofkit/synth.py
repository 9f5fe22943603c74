"""Deterministic synthetic connectome generator.

Builds ground-truth neurons as random-walk tubes (space partitioned by
distance to the walk skeletons), renders grayscale with dark membranes at
neuron boundaries plus Gaussian noise, corrupts the segmentation with planar
cuts to create known false splits, and places synapses at contact sites
between distinct neurons. Everything is reproducible from the config seed.

A fraction of cut interfaces is rendered membrane-dark (false membranes), so
grayscale alone cannot separate all true merges from genuine boundaries.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .adjacency import AdjacencyEdge, compute_adjacency
from .volumes import GrayVolume, LabelVolume, Voxel

MEMBRANE_INTENSITY = 60.0
INTERIOR_INTENSITY = 150.0
BACKGROUND_INTENSITY = 25.0
CUT_BAND_HALF_WIDTH = 1.2
IDENTIFIED_VOXEL_SHARE = 0.5  # neuron keeps >= this share in one fragment


class SynthError(Exception):
    pass


@dataclass(frozen=True)
class SynthConfig:
    dims: tuple[int, int, int]
    neuron_count: int
    seed: int
    tube_radius_vox: tuple[float, float] = (3.5, 7.0)
    split_count: int = 0
    synapse_density: float = 20.0  # expected synapses per 1000 boundary voxel pairs
    noise_sigma: float = 8.0
    p_false_membrane: float = 0.3
    type_count: int = 5
    step_len: float = 2.0
    turn_sigma: float = 0.18  # walk tortuosity; ~0 gives straight tubes
    walk_steps: int | None = None  # default: 2.4 * max(dims) steps
    min_cut_voxels: int = 600
    cut_separation_vox: float = 14.0

    def __post_init__(self):
        if self.neuron_count < 1:
            raise SynthError("neuron_count must be >= 1")
        if self.split_count < 0:
            raise SynthError("split_count must be >= 0")
        if self.synapse_density < 0 or self.noise_sigma < 0:
            raise SynthError("densities must be >= 0")


#: Desk-scale corpus used by the end-to-end runs (seed still mandatory).
DEFAULT_CORPUS = dict(dims=(256, 256, 256), neuron_count=60, split_count=400)


@dataclass
class SynapseRecord:
    tbar: Voxel
    psds: list[Voxel]
    pre_fragment: int
    post_fragments: list[int]


@dataclass
class GroundTruth:
    neuron_volume: LabelVolume | None
    fragment_volume: LabelVolume | None
    fragment_to_neuron: dict[int, int]
    true_merge_edges: set[tuple[int, int]]
    synapses: list[SynapseRecord]
    neuron_types: dict[int, str]
    identified_fragments: set[int] = field(default_factory=set)

    def same_neuron(self, a: int, b: int) -> bool:
        try:
            return self.fragment_to_neuron[a] == self.fragment_to_neuron[b]
        except KeyError as exc:
            raise SynthError(f"unknown fragment id {exc}") from exc


def _random_unit(rng) -> np.ndarray:
    while True:
        v = rng.normal(size=3)
        n = float(np.linalg.norm(v))
        if n > 1e-6:
            return v / n


def _walk_skeletons(cfg: SynthConfig, rng):
    """Random-walk tube skeletons; returns per-neuron point and direction arrays."""
    dims = np.asarray(cfg.dims, dtype=np.float64)
    margin = min(6.0, float(dims.min()) / 4)
    steps = cfg.walk_steps if cfg.walk_steps is not None else int(2.4 * max(cfg.dims))
    points, dirs = [], []
    for _ in range(cfg.neuron_count):
        pos = rng.uniform(margin, dims - margin)
        d = _random_unit(rng)
        pts = np.empty((steps, 3))
        dds = np.empty((steps, 3))
        for s in range(steps):
            d = d + rng.normal(0.0, cfg.turn_sigma, size=3)
            n = float(np.linalg.norm(d))
            d = d / n if n > 1e-6 else _random_unit(rng)
            nxt = pos + d * cfg.step_len
            for ax in range(3):  # reflect at the walls
                if nxt[ax] < margin or nxt[ax] > dims[ax] - margin:
                    d[ax] = -d[ax]
                    nxt[ax] = pos[ax] + d[ax] * cfg.step_len
            pos = np.clip(nxt, 1.0, dims - 2.0)
            pts[s] = pos
            dds[s] = d
        points.append(pts)
        dirs.append(dds)
    return points, dirs


def _carve_neurons(cfg: SynthConfig, rng, skel_points):
    """Partition space among skeletons by nearest point, capped per-neuron radius."""
    shape = cfg.dims
    owner_seed = np.zeros(shape, dtype=np.int32)
    for i, pts in enumerate(skel_points):
        vox = np.floor(pts).astype(np.int64)
        owner_seed[vox[:, 0], vox[:, 1], vox[:, 2]] = i + 1
    dist, (ix, iy, iz) = ndimage.distance_transform_edt(
        owner_seed == 0, return_indices=True
    )
    owner = owner_seed[ix, iy, iz]
    radius = rng.uniform(cfg.tube_radius_vox[0], cfg.tube_radius_vox[1], size=cfg.neuron_count)
    cap = np.concatenate(([0.0], radius))[owner]
    neuron = np.where(dist <= cap, owner, 0).astype(np.int32)
    return neuron


class _FragmentIndex:
    """Tracks per-fragment flat voxel indices so cuts avoid full-volume scans."""

    def __init__(self, frag_flat: np.ndarray):
        order = np.argsort(frag_flat, kind="stable")
        sorted_ids = frag_flat[order]
        boundaries = np.flatnonzero(np.append(True, sorted_ids[1:] != sorted_ids[:-1]))
        ends = np.append(boundaries[1:], len(sorted_ids))
        self.voxels: dict[int, np.ndarray] = {}
        for b, e in zip(boundaries, ends):
            fid = int(sorted_ids[b])
            if fid != 0:
                self.voxels[fid] = order[b:e].copy()

    def count(self, fid: int) -> int:
        return len(self.voxels[fid])

    def split(self, fid: int, mask_a: np.ndarray, id_a: int, id_b: int):
        vox = self.voxels.pop(fid)
        self.voxels[id_a] = vox[mask_a]
        self.voxels[id_b] = vox[~mask_a]


def _apply_cuts(cfg: SynthConfig, rng, neuron, skel_points, skel_dirs):
    """Planar cuts that chip pieces off fragment ends.

    Returns (fragment volume, fragment_to_neuron, false-membrane voxel indices).
    Anchors are skeleton points near either end of the target fragment's tube,
    kept apart from earlier anchors of the same neuron, so the parent keeps
    the bulk of its voxels; most neurons then retain one dominant fragment
    and a chip's true partner stays identified, mirroring how real
    oversegmentation splits small pieces off processes. A wandering tube can
    cross the cutting plane more than once, so the chip is the connected
    component around the anchor on the tube-end side of the plane; the piece
    must resolve fully inside a local box or the attempt is retried.
    """
    dims = cfg.dims
    frag = neuron.astype(np.int32).copy()
    frag_flat = frag.reshape(-1)
    index = _FragmentIndex(frag_flat)
    frag_to_neuron = {fid: fid for fid in index.voxels}
    next_id = cfg.neuron_count + 1
    anchors_by_neuron: dict[int, list[np.ndarray]] = {}
    false_membrane_voxels = []
    pad = 3.0 * cfg.tube_radius_vox[1]

    sy, sz = dims[1], dims[2]

    def coords_of(flat_idx):
        x = flat_idx // (sy * sz)
        y = (flat_idx // sz) % sy
        z = flat_idx % sz
        return x, y, z

    failures = 0
    done = 0
    while done < cfg.split_count:
        if failures > 200 + 20 * cfg.split_count:
            raise SynthError(
                f"config infeasible: placed {done}/{cfg.split_count} cuts "
                "before exhausting the retry budget"
            )
        eligible = [f for f, v in index.voxels.items() if len(v) >= cfg.min_cut_voxels]
        if not eligible:
            failures += 1
            if cfg.min_cut_voxels <= 2:
                raise SynthError("config infeasible: no fragment large enough to cut")
            continue
        eligible.sort()
        weights = np.array([index.count(f) for f in eligible], dtype=np.float64)
        fid = int(rng.choice(eligible, p=weights / weights.sum()))
        nid = frag_to_neuron[fid]
        pts = skel_points[nid - 1]
        dirs = skel_dirs[nid - 1]
        prev = anchors_by_neuron.get(nid, [])
        pvox = np.floor(pts).astype(np.int64)
        inside = frag[pvox[:, 0], pvox[:, 1], pvox[:, 2]] == fid
        valid = inside.copy()
        if prev:
            gaps = np.linalg.norm(pts[:, None, :] - np.asarray(prev)[None, :, :], axis=2)
            valid &= gaps.min(axis=1) >= cfg.cut_separation_vox
        pool = np.flatnonzero(valid)
        occupied = np.flatnonzero(inside)
        if len(pool) == 0:
            failures += 1
            continue
        span = int(rng.integers(10, 51))
        if rng.random() < 0.5:
            tip_idx = int(occupied[0])
            window = pool[pool <= tip_idx + span]
        else:
            tip_idx = int(occupied[-1])
            window = pool[pool >= tip_idx - span]
        if len(window) == 0:
            failures += 1
            continue
        k = int(rng.choice(window))
        anchor = pts[k]
        d = dirs[k] + rng.normal(0.0, 0.08, size=3)
        n = float(np.linalg.norm(d))
        normal = d / n if n > 1e-6 else _random_unit(rng)
        tip = pvox[tip_idx].astype(np.float64)
        tip_sign = float((tip - anchor) @ normal)
        if abs(tip_sign) < 1e-9:
            failures += 1
            continue
        vox = index.voxels[fid]
        x, y, z = coords_of(vox)
        signed = (
            (x - anchor[0]) * normal[0]
            + (y - anchor[1]) * normal[1]
            + (z - anchor[2]) * normal[2]
        )
        # chip = connected piece on the tube-end side of the plane, resolved
        # inside a box around the chip's skeleton segment
        spine = pts[min(tip_idx, k) : max(tip_idx, k) + 1]
        lo = np.maximum(np.floor(spine.min(axis=0) - pad).astype(np.int64), 0)
        hi = np.minimum(np.ceil(spine.max(axis=0) + pad).astype(np.int64) + 1, dims)
        side = signed * np.sign(tip_sign) > 0.0
        inbox = (
            (x >= lo[0]) & (x < hi[0])
            & (y >= lo[1]) & (y < hi[1])
            & (z >= lo[2]) & (z < hi[2])
        )
        sel = np.flatnonzero(side & inbox)
        grid = np.zeros(tuple(hi - lo), dtype=bool)
        gx, gy, gz = x[sel] - lo[0], y[sel] - lo[1], z[sel] - lo[2]
        grid[gx, gy, gz] = True
        tip_local = tuple(pvox[tip_idx] - lo)
        if not grid[tip_local]:
            failures += 1
            continue
        labels, _ = ndimage.label(grid)
        comp = labels == labels[tip_local]
        escaped = any(
            (lo[ax] > 0 and np.take(comp, 0, axis=ax).any())
            or (hi[ax] < dims[ax] and np.take(comp, -1, axis=ax).any())
            for ax in range(3)
        )
        if escaped:
            failures += 1
            continue
        chip = np.zeros(len(vox), dtype=bool)
        chip[sel[comp[gx, gy, gz]]] = True
        n_chip = int(chip.sum())
        if n_chip < 40 or len(vox) - n_chip < 40:
            failures += 1
            continue
        id_a, id_b = next_id, next_id + 1
        next_id += 2
        frag_flat[vox[chip]] = id_a
        frag_flat[vox[~chip]] = id_b
        if rng.random() < cfg.p_false_membrane:
            d2 = (x - anchor[0]) ** 2 + (y - anchor[1]) ** 2 + (z - anchor[2]) ** 2
            face = (np.abs(signed) <= CUT_BAND_HALF_WIDTH) & (d2 <= pad * pad)
            false_membrane_voxels.append(vox[face])
        index.split(fid, chip, id_a, id_b)
        del frag_to_neuron[fid]
        frag_to_neuron[id_a] = nid
        frag_to_neuron[id_b] = nid
        anchors_by_neuron.setdefault(nid, []).append(anchor.copy())
        done += 1

    fm = (
        np.concatenate(false_membrane_voxels)
        if false_membrane_voxels
        else np.empty(0, dtype=np.int64)
    )
    return frag, frag_to_neuron, index, fm


def _neuron_boundary_pairs(neuron: np.ndarray):
    """All face-adjacent voxel pairs with two distinct non-zero neuron ids."""
    ps, qs = [], []
    for axis in range(3):
        sl_a = [slice(None)] * 3
        sl_b = [slice(None)] * 3
        sl_a[axis] = slice(0, -1)
        sl_b[axis] = slice(1, None)
        A = neuron[tuple(sl_a)]
        B = neuron[tuple(sl_b)]
        mask = (A != B) & (A != 0) & (B != 0)
        px, py, pz = np.nonzero(mask)
        off = np.zeros(3, dtype=np.int64)
        off[axis] = 1
        p = np.stack([px, py, pz], axis=1)
        ps.append(p)
        qs.append(p + off)
    return np.concatenate(ps), np.concatenate(qs)


def _place_synapses(cfg: SynthConfig, rng, neuron, frag, pairs_p, pairs_q):
    """Sample T-bar/PSD sites from inter-neuron boundary contacts."""
    n_pairs = len(pairs_p)
    if n_pairs == 0 or cfg.synapse_density == 0:
        return []
    expected = cfg.synapse_density * n_pairs / 1000.0
    count = min(n_pairs, int(rng.poisson(expected)))
    if count == 0:
        return []
    chosen = rng.choice(n_pairs, size=count, replace=False)
    chosen.sort()
    X, Y, Z = neuron.shape
    synapses = []
    for i in chosen:
        p, q = pairs_p[i], pairs_q[i]
        if rng.random() < 0.5:
            p, q = q, p  # pre/post orientation
        pre_n = int(neuron[p[0], p[1], p[2]])
        psds = [Voxel(int(q[0]), int(q[1]), int(q[2]))]
        # extra PSDs: other boundary partners among the T-bar's 6-neighbors
        if rng.random() < 0.35:
            for ax in range(3):
                for d in (-1, 1):
                    r = p.copy()
                    r[ax] += d
                    if not (0 <= r[0] < X and 0 <= r[1] < Y and 0 <= r[2] < Z):
                        continue
                    rn = int(neuron[r[0], r[1], r[2]])
                    rv = Voxel(int(r[0]), int(r[1]), int(r[2]))
                    if rn != 0 and rn != pre_n and rv not in psds:
                        psds.append(rv)
                        break
                if len(psds) > 1:
                    break
        synapses.append(
            SynapseRecord(
                tbar=Voxel(int(p[0]), int(p[1]), int(p[2])),
                psds=psds,
                pre_fragment=int(frag[p[0], p[1], p[2]]),
                post_fragments=[int(frag[v.x, v.y, v.z]) for v in psds],
            )
        )
    return synapses


def _render_gray(cfg: SynthConfig, rng, neuron, false_membrane_flat):
    interior = np.full(cfg.dims, BACKGROUND_INTENSITY, dtype=np.float32)
    per_neuron = INTERIOR_INTENSITY + rng.uniform(-12.0, 12.0, size=cfg.neuron_count)
    lut = np.concatenate(([BACKGROUND_INTENSITY], per_neuron)).astype(np.float32)
    interior = lut[neuron]
    boundary = np.zeros(cfg.dims, dtype=bool)
    for axis in range(3):
        sl_a = [slice(None)] * 3
        sl_b = [slice(None)] * 3
        sl_a[axis] = slice(0, -1)
        sl_b[axis] = slice(1, None)
        A = neuron[tuple(sl_a)]
        B = neuron[tuple(sl_b)]
        diff = A != B
        boundary[tuple(sl_a)] |= diff
        boundary[tuple(sl_b)] |= diff
    boundary &= neuron != 0
    gray = interior
    gray[boundary] = MEMBRANE_INTENSITY
    gray.reshape(-1)[false_membrane_flat] = MEMBRANE_INTENSITY
    gray = gray + rng.normal(0.0, cfg.noise_sigma, size=cfg.dims).astype(np.float32)
    return np.clip(np.rint(gray), 0, 255).astype(np.uint8), boundary


def generate(cfg: SynthConfig) -> tuple[GroundTruth, GrayVolume]:
    """Generate a ground-truth corpus plus rendered grayscale, deterministically."""
    rng = np.random.default_rng(cfg.seed)
    skel_points, skel_dirs = _walk_skeletons(cfg, rng)
    neuron = _carve_neurons(cfg, rng, skel_points)
    if not np.any(neuron):
        raise SynthError("config infeasible: no neuron voxels carved")
    frag, frag_to_neuron, index, false_membrane = _apply_cuts(
        cfg, rng, neuron, skel_points, skel_dirs
    )
    pairs_p, pairs_q = _neuron_boundary_pairs(neuron)
    synapses = _place_synapses(cfg, rng, neuron, frag, pairs_p, pairs_q)
    gray, _ = _render_gray(cfg, rng, neuron, false_membrane)

    neuron_counts = {nid: 0 for nid in range(1, cfg.neuron_count + 1)}
    for fid, vox in index.voxels.items():
        neuron_counts[frag_to_neuron[fid]] += len(vox)
    identified = {
        fid
        for fid, vox in index.voxels.items()
        if len(vox) >= IDENTIFIED_VOXEL_SHARE * neuron_counts[frag_to_neuron[fid]]
    }

    type_order = list(range(1, cfg.neuron_count + 1))
    rng.shuffle(type_order)
    neuron_types = {nid: f"T{i % cfg.type_count}" for i, nid in enumerate(type_order)}

    fragment_volume = LabelVolume.from_array(frag.astype(np.uint64))
    true_edges = {
        (e.a, e.b)
        for e in compute_adjacency(fragment_volume, factor=1)
        if frag_to_neuron[e.a] == frag_to_neuron[e.b]
    }

    gt = GroundTruth(
        neuron_volume=LabelVolume.from_array(neuron.astype(np.uint64)),
        fragment_volume=fragment_volume,
        fragment_to_neuron=frag_to_neuron,
        true_merge_edges=true_edges,
        synapses=synapses,
        neuron_types=neuron_types,
        identified_fragments=identified,
    )
    return gt, GrayVolume.from_array(gray)


def label_candidates(
    gt: GroundTruth, edges: list[AdjacencyEdge]
) -> list[tuple[AdjacencyEdge, str]]:
    """Label each edge merge/no_merge by whether both fragments share a neuron."""
    return [(e, "merge" if gt.same_neuron(e.a, e.b) else "no_merge") for e in edges]


def write_synapses(synapses: list[SynapseRecord], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w") as fh:
        for s in synapses:
            rec = {
                "tbar": list(s.tbar),
                "psds": [list(p) for p in s.psds],
                "pre_fragment": s.pre_fragment,
                "post_fragments": s.post_fragments,
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def read_synapses(path: str | Path) -> list[SynapseRecord]:
    out = []
    for line in Path(path).read_text().splitlines():
        rec = json.loads(line)
        out.append(
            SynapseRecord(
                tbar=Voxel(*rec["tbar"]),
                psds=[Voxel(*p) for p in rec["psds"]],
                pre_fragment=rec["pre_fragment"],
                post_fragments=rec["post_fragments"],
            )
        )
    return out


def write_truth(gt: GroundTruth, path: str | Path) -> Path:
    path = Path(path)
    doc = {
        "fragment_to_neuron": {str(k): v for k, v in sorted(gt.fragment_to_neuron.items())},
        "true_merge_edges": sorted([a, b] for a, b in gt.true_merge_edges),
        "neuron_types": {str(k): v for k, v in sorted(gt.neuron_types.items())},
        "identified_fragments": sorted(gt.identified_fragments),
    }
    path.write_text(json.dumps(doc, sort_keys=True, indent=1))
    return path


def read_truth(path: str | Path) -> GroundTruth:
    """Load the truth table only; volumes and synapses are stored separately."""
    doc = json.loads(Path(path).read_text())
    return GroundTruth(
        neuron_volume=None,
        fragment_volume=None,
        fragment_to_neuron={int(k): v for k, v in doc["fragment_to_neuron"].items()},
        true_merge_edges={(a, b) for a, b in doc["true_merge_edges"]},
        synapses=[],
        neuron_types={int(k): v for k, v in doc["neuron_types"].items()},
        identified_fragments=set(doc["identified_fragments"]),
    )
