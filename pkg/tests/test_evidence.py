"""Evidence extraction against naive per-voxel and closed-form oracles."""

from __future__ import annotations

import numpy as np
import pytest

from proofkit.adjacency import AdjacencyEdge, MergeCandidate, candidate_id
from proofkit.evidence import (
    CONNECTIVITY_SIZE,
    SHAPE_DESCRIPTOR_SIZE,
    ConnectionTable,
    EvidenceError,
    EvidenceStore,
    EvidenceTensor,
    EvidenceWriter,
    candidate_seed,
    connectivity_features,
    extract_evidence,
    read_features,
    sample_points,
    shape_descriptor,
    write_features,
)
from proofkit.synth import SynapseRecord
from proofkit.volumes import GrayVolume, LabelVolume, Voxel


def make_candidate(a, b, rep, contact=10):
    edge = AdjacencyEdge(a=a, b=b, contact_voxels=contact, rep_location=rep, factor=1)
    return MergeCandidate(
        edge=edge, id=candidate_id(a, b, rep), scores={}, workflow="focused"
    )


def random_volumes(rng, dims=(20, 20, 20), n_labels=4):
    labels = rng.integers(0, n_labels + 1, size=dims).astype(np.uint64)
    gray = rng.integers(0, 256, size=dims).astype(np.uint8)
    return GrayVolume.from_array(gray), LabelVolume.from_array(labels)


class StubBodyState:
    def __init__(self, parent=None, identified=()):
        self.parent = parent or {}
        self.identified = set(identified)

    def find(self, f):
        return self.parent.get(f, f)

    def is_identified(self, f):
        return self.find(f) in self.identified


def naive_tensor(gray, labels, synapses, cand, edge, radius_nm):
    """Per-voxel recomputation of all four channels."""
    c = cand.edge.rep_location
    h = edge // 2
    dims = gray.meta.dims
    nm = gray.meta.voxel_size_nm
    sites = [tuple(s.tbar) for s in synapses] + [
        tuple(p) for s in synapses for p in s.psds
    ]
    out = np.zeros((4, edge, edge, edge), dtype=np.float32)
    for i in range(edge):
        for j in range(edge):
            for k in range(edge):
                g = (c.x - h + i, c.y - h + j, c.z - h + k)
                if not all(0 <= g[ax] < dims[ax] for ax in range(3)):
                    continue
                out[0, i, j, k] = gray.data[g] / 255.0
                lv = labels.data[g]
                out[1, i, j, k] = lv == cand.edge.a
                out[2, i, j, k] = lv == cand.edge.b
                for s in sites:
                    d2 = sum(((g[ax] - s[ax]) * nm[ax]) ** 2 for ax in range(3))
                    if d2 <= radius_nm * radius_nm:
                        out[3, i, j, k] = 1.0
                        break
    return out


def test_center_voxel_masks():
    labels = np.zeros((9, 9, 9), dtype=np.uint64)
    labels[4, 4, 4] = 3
    labels[5, 4, 4] = 7
    gray = GrayVolume.from_array(np.full((9, 9, 9), 100, dtype=np.uint8))
    cand = make_candidate(3, 7, Voxel(4, 4, 4))
    t = extract_evidence(gray, LabelVolume.from_array(labels), [], cand, edge=9)
    assert t.data[1, 4, 4, 4] == 1.0
    assert t.data[2, 4, 4, 4] == 0.0
    assert t.data[2, 5, 4, 4] == 1.0


def test_masks_disjoint_and_gray_scaled():
    rng = np.random.default_rng(0)
    gray, labels = random_volumes(rng)
    cand = make_candidate(1, 2, Voxel(10, 10, 10))
    t = extract_evidence(gray, labels, [], cand, edge=9)
    assert not np.any((t.data[1] > 0) & (t.data[2] > 0))
    assert t.data[0].max() <= 1.0
    assert np.all(t.data[3] == 0.0)


def test_tensor_matches_naive_oracle():
    rng = np.random.default_rng(3)
    for trial in range(5):
        gray, labels = random_volumes(rng)
        synapses = [
            SynapseRecord(
                tbar=Voxel(*rng.integers(0, 20, 3)),
                psds=[Voxel(*rng.integers(0, 20, 3))],
                pre_fragment=1,
                post_fragments=[2],
            )
            for _ in range(3)
        ]
        rep = Voxel(*rng.integers(0, 20, 3))
        cand = make_candidate(1, 2, rep)
        t = extract_evidence(gray, labels, synapses, cand, edge=9, prox_radius_nm=24.0)
        want = naive_tensor(gray, labels, synapses, cand, 9, 24.0)
        assert np.array_equal(t.data, want)


def test_zero_fill_at_corner():
    rng = np.random.default_rng(1)
    gray, labels = random_volumes(rng)
    cand = make_candidate(1, 2, Voxel(0, 0, 0))
    t = extract_evidence(gray, labels, [], cand, edge=9)
    assert np.all(t.data[:, :4, :, :] == 0.0)  # x < 0 region zero-filled


def test_translation_consistency():
    rng = np.random.default_rng(5)
    gray, labels = random_volumes(rng, dims=(16, 16, 16))
    big_g = np.zeros((22, 22, 22), dtype=np.uint8)
    big_l = np.zeros((22, 22, 22), dtype=np.uint64)
    big_g[3:19, 3:19, 3:19] = gray.data
    big_l[3:19, 3:19, 3:19] = labels.data
    syn = [
        SynapseRecord(
            tbar=Voxel(8, 8, 8), psds=[Voxel(8, 9, 8)], pre_fragment=1, post_fragments=[2]
        )
    ]
    syn_shift = [
        SynapseRecord(
            tbar=Voxel(11, 11, 11),
            psds=[Voxel(11, 12, 11)],
            pre_fragment=1,
            post_fragments=[2],
        )
    ]
    t1 = extract_evidence(
        gray, labels, syn, make_candidate(1, 2, Voxel(8, 8, 8)), edge=9
    )
    t2 = extract_evidence(
        GrayVolume.from_array(big_g),
        LabelVolume.from_array(big_l),
        syn_shift,
        make_candidate(1, 2, Voxel(11, 11, 11)),
        edge=9,
    )
    assert np.array_equal(t1.data, t2.data)


def test_even_edge_rejected():
    rng = np.random.default_rng(2)
    gray, labels = random_volumes(rng)
    with pytest.raises(EvidenceError):
        extract_evidence(gray, labels, [], make_candidate(1, 2, Voxel(5, 5, 5)), edge=8)


def seg_volume():
    labels = np.zeros((30, 30, 30), dtype=np.uint64)
    labels[5:10, 5:10, 5:10] = 4  # 125 voxels
    labels[10:12, 5:7, 5:7] = 9  # 8 voxels
    return LabelVolume.from_array(labels)


def test_sample_points_exact_cover():
    vol = seg_volume()
    cand = make_candidate(4, 9, Voxel(9, 6, 6))
    pa, pb = sample_points(vol, cand, context_edge=30, point_factor=1, n_points=16, seed=1)
    assert len(pa) == 8 and len(pb) == 8
    # segment 9 has exactly 8 voxels: every one sampled exactly once
    got = {tuple(p) for p in pb}
    assert len(got) == 8
    center = np.array([9, 6, 6])
    for p in pb:
        v = center + np.asarray(p)
        assert vol.data[v[0], v[1], v[2]] == 9


def test_sample_points_halves_and_membership():
    vol = seg_volume()
    cand = make_candidate(4, 9, Voxel(9, 6, 6))
    pa, pb = sample_points(vol, cand, context_edge=20, point_factor=1, n_points=8, seed=2)
    assert len(pa) == 4 and len(pb) == 4
    center = np.array([9, 6, 6])
    for p in pa:
        v = center + np.asarray(p)
        assert vol.data[v[0], v[1], v[2]] == 4


def test_sample_points_determinism_and_replacement():
    vol = seg_volume()
    cand = make_candidate(4, 9, Voxel(9, 6, 6))
    a1, b1 = sample_points(vol, cand, context_edge=30, point_factor=1, n_points=64, seed=9)
    a2, b2 = sample_points(vol, cand, context_edge=30, point_factor=1, n_points=64, seed=9)
    assert np.array_equal(a1, a2) and np.array_equal(b1, b2)
    # 32 > 8 voxels of segment 9: sampling falls back to replacement
    assert len(b1) == 32
    assert len({tuple(p) for p in b1}) <= 8


def test_sample_points_absent_segment_and_odd_n():
    vol = seg_volume()
    cand = make_candidate(4, 777, Voxel(9, 6, 6))
    pa, pb = sample_points(vol, cand, context_edge=30, point_factor=1, n_points=8, seed=3)
    assert len(pa) == 4 and len(pb) == 0
    with pytest.raises(EvidenceError):
        sample_points(vol, cand, context_edge=30, point_factor=1, n_points=7, seed=3)


def test_sample_points_factor_maps_rep():
    labels = np.zeros((10, 10, 10), dtype=np.uint64)
    labels[2, 2, 2] = 4
    labels[2, 3, 2] = 9
    vol = LabelVolume.from_array(labels)  # stands for a factor-4 grid
    cand = make_candidate(4, 9, Voxel(9, 9, 9))  # full-res rep -> (2,2,2)
    pa, pb = sample_points(vol, cand, context_edge=6, point_factor=4, n_points=2, seed=0)
    assert np.array_equal(pa, [[0, 0, 0]])
    assert np.array_equal(pb, [[0, 1, 0]])


def eig3_closed_form(M):
    """Trigonometric eigenvalues of a symmetric 3x3 matrix, descending."""
    q = np.trace(M) / 3.0
    p1 = M[0, 1] ** 2 + M[0, 2] ** 2 + M[1, 2] ** 2
    p2 = sum((M[i, i] - q) ** 2 for i in range(3)) + 2 * p1
    p = np.sqrt(p2 / 6.0)
    if p < 1e-14:
        return np.array([q, q, q])
    B = (M - q * np.eye(3)) / p
    r = np.clip(np.linalg.det(B) / 2.0, -1.0, 1.0)
    phi = np.arccos(r) / 3.0
    e1 = q + 2 * p * np.cos(phi)
    e3 = q + 2 * p * np.cos(phi + 2 * np.pi / 3)
    return np.array([e1, 3 * q - e1 - e3, e3])


def test_descriptor_eigenvalues_match_closed_form():
    rng = np.random.default_rng(7)
    cand = make_candidate(1, 2, Voxel(0, 0, 0), contact=25)
    for _ in range(20):
        pa = rng.integers(-40, 40, size=(60, 3))
        pb = rng.integers(-40, 40, size=(60, 3))
        d = shape_descriptor(pa, pb, cand, context_edge=100)
        for base, pts in ((0, pa), (3, pb)):
            c = pts - pts.mean(axis=0)
            cov = c.T @ c / len(pts)
            ev = np.clip(eig3_closed_form(cov), 0, None)
            assert np.allclose(d[base : base + 3], ev / ev.sum(), atol=1e-9)


def test_descriptor_empty_and_size():
    cand = make_candidate(1, 2, Voxel(0, 0, 0), contact=50)
    empty = np.empty((0, 3), dtype=np.int64)
    d = shape_descriptor(empty, empty, cand, context_edge=100)
    assert d.shape == (SHAPE_DESCRIPTOR_SIZE,)
    assert d[17] == 50 / 100.0**2
    d17 = d.copy()
    d17[17] = 0
    assert np.all(d17 == 0.0)


def test_descriptor_mirror_symmetry():
    rng = np.random.default_rng(11)
    pa = rng.integers(5, 30, size=(50, 3))
    pb = -pa
    cand = make_candidate(1, 2, Voxel(0, 0, 0))
    d = shape_descriptor(pa, pb, cand, context_edge=100)
    one_sided = np.linalg.norm(pa.mean(axis=0))
    assert d[13] == pytest.approx(2 * one_sided / 100)
    assert d[14] == pytest.approx(1.0)
    assert d[20:28].sum() == pytest.approx(1.0)


def test_descriptor_permutation_invariant():
    rng = np.random.default_rng(13)
    pa = rng.integers(-20, 20, size=(40, 3))
    pb = rng.integers(-20, 20, size=(40, 3))
    cand = make_candidate(1, 2, Voxel(0, 0, 0))
    d1 = shape_descriptor(pa, pb, cand, context_edge=80)
    d2 = shape_descriptor(pa[rng.permutation(40)], pb[rng.permutation(40)], cand, 80)
    assert np.allclose(d1, d2, atol=1e-12)
    assert np.all(np.isfinite(d1))


def test_descriptor_single_point():
    cand = make_candidate(1, 2, Voxel(0, 0, 0))
    pa = np.array([[3, 0, 0]])
    pb = np.array([[0, 4, 0]])
    d = shape_descriptor(pa, pb, cand, context_edge=100)
    assert np.all(np.isfinite(d))
    assert d[0:10].sum() == 0.0  # degenerate clouds carry no pca terms
    assert d[18] == 1.0 and d[19] == 1.0
    assert d[13] == pytest.approx(5 / 100)


def syn(pre, posts, tbar=(0, 0, 0)):
    return SynapseRecord(
        tbar=Voxel(*tbar),
        psds=[Voxel(0, 0, i + 1) for i in range(len(posts))],
        pre_fragment=pre,
        post_fragments=list(posts),
    )


def naive_connectivity(synapses, bs, types, a, b):
    """Independent recount of the 24-entry vector from raw records."""
    out = np.zeros(CONNECTIVITY_SIZE)
    tops = {}
    for side, seg in ((0, a), (1, b)):
        root = bs.find(seg)
        n_in = n_out = id_in = id_out = 0
        in_part: dict[int, int] = {}
        out_part: dict[int, int] = {}
        for s in synapses:
            pre = bs.find(s.pre_fragment)
            for pf in s.post_fragments:
                post = bs.find(pf)
                if post == root:
                    n_in += 1
                    id_in += bs.is_identified(pre)
                    in_part[pre] = in_part.get(pre, 0) + 1
                if pre == root:
                    n_out += 1
                    id_out += bs.is_identified(post)
                    out_part[post] = out_part.get(post, 0) + 1
        out[0 + 2 * side], out[1 + 2 * side] = n_in, n_out
        out[4 + 2 * side], out[5 + 2 * side] = id_in, id_out

        def topk(d):
            return [p for p, _ in sorted(d.items(), key=lambda kv: (-kv[1], kv[0]))[:3]]

        def topk_types(d):
            agg: dict[str, int] = {}
            for p, c in d.items():
                t = types.get(p)
                if t is not None:
                    agg[t] = agg.get(t, 0) + c
            return [t for t, _ in sorted(agg.items(), key=lambda kv: (-kv[1], kv[0]))[:3]]

        tops[side] = (topk(in_part), topk(out_part), topk_types(in_part), topk_types(out_part))
        if n_in + n_out:
            out[12 + 2 * side] = n_in / (n_in + n_out)
            out[13 + 2 * side] = n_out / (n_in + n_out)
        if n_in:
            out[16 + 2 * side] = id_in / n_in
        if n_out:
            out[17 + 2 * side] = id_out / n_out
    for j in range(4):
        ov = len(set(tops[0][j]) & set(tops[1][j]))
        out[8 + j] = ov
        denom = min(len(tops[0][j]), len(tops[1][j]))
        out[20 + j] = ov / denom if denom else 0.0
    return out


def test_connectivity_no_shared_partners():
    synapses = [syn(1, [5]), syn(2, [6])]
    f = connectivity_features(synapses, StubBodyState(), {}, 1, 2)
    assert np.all(f[8:12] == 0.0)
    assert f[1] == 1.0 and f[3] == 1.0  # one output each


def test_connectivity_single_shared_output():
    synapses = [syn(1, [9]), syn(2, [9])]
    f = connectivity_features(synapses, StubBodyState(), {}, 1, 2)
    assert f[9] == 1.0  # shared output partner count
    assert f[21] == 1.0  # and its fraction


def test_connectivity_swap_symmetry():
    rng = np.random.default_rng(17)
    synapses = [
        syn(int(rng.integers(1, 8)), [int(rng.integers(1, 8)) for _ in range(2)])
        for _ in range(30)
    ]
    bs = StubBodyState(identified={3, 4})
    types = {i: f"T{i % 3}" for i in range(1, 8)}
    fab = connectivity_features(synapses, bs, types, 1, 2)
    fba = connectivity_features(synapses, bs, types, 2, 1)
    swap = np.arange(CONNECTIVITY_SIZE)
    for base in (0, 4, 12, 16):
        swap[[base, base + 1, base + 2, base + 3]] = [base + 2, base + 3, base, base + 1]
    assert np.allclose(fab, fba[swap])


def test_connectivity_matches_recount_oracle():
    rng = np.random.default_rng(19)
    for trial in range(10):
        synapses = [
            syn(int(rng.integers(1, 10)), [int(x) for x in rng.integers(1, 10, rng.integers(1, 3))])
            for _ in range(40)
        ]
        merged = {5: 4, 7: 6}
        bs = StubBodyState(parent=merged, identified={2, 4})
        types = {i: f"T{i % 4}" for i in range(1, 10)}
        a, b = int(rng.integers(1, 10)), int(rng.integers(1, 10))
        got = connectivity_features(synapses, bs, types, a, b)
        want = naive_connectivity(synapses, bs, types, a, b)
        assert np.allclose(got, want), (trial, a, b)
        table = ConnectionTable(synapses, bs)
        assert np.allclose(connectivity_features(table, bs, types, a, b), got)


def test_connectivity_identified_counts():
    synapses = [syn(3, [1]), syn(4, [1]), syn(1, [3])]
    bs = StubBodyState(identified={3})
    f = connectivity_features(synapses, bs, {}, 1, 2)
    assert f[0] == 2.0  # inputs of a
    assert f[4] == 1.0  # one from an identified body
    assert f[16] == 0.5
    assert f[5] == 1.0  # output of a lands on identified 3


def test_candidate_seed_stable():
    s1 = candidate_seed(42, "00ff00ff00ff00ff")
    s2 = candidate_seed(42, "00ff00ff00ff00ff")
    assert s1 == s2
    assert candidate_seed(43, "00ff00ff00ff00ff") != s1


def test_evidence_store_roundtrip(tmp_path):
    rng = np.random.default_rng(23)
    tensors = {}
    with EvidenceWriter(tmp_path / "evidence.bin", tmp_path / "evidence.idx", edge=9) as w:
        for i in range(5):
            data = rng.random((4, 9, 9, 9)).astype(np.float32)
            t = EvidenceTensor(data=data, edge=9, center=Voxel(i, i, i))
            cid = f"{i:016x}"
            tensors[cid] = data
            w.add(cid, t)
    store = EvidenceStore(tmp_path / "evidence.bin", tmp_path / "evidence.idx")
    assert store.ids() == sorted(tensors)
    for cid, data in tensors.items():
        assert np.array_equal(store.load(cid).data, data)
    with pytest.raises(EvidenceError):
        store.load("ffffffffffffffff")


def test_features_jsonl_roundtrip(tmp_path):
    rows = [
        {"id": "aa", "shape": [0.1] * 3, "connectivity": [1.0, 0.0]},
        {"id": "bb", "shape": [0.2] * 3, "connectivity": [0.0, 2.0]},
    ]
    write_features(tmp_path / "features.jsonl", rows)
    back = read_features(tmp_path / "features.jsonl")
    assert back["aa"]["shape"] == [0.1] * 3
    assert back["bb"]["connectivity"] == [0.0, 2.0]
