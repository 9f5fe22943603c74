import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from proofkit.evalkit import (
    EvalError,
    ReviewAssessment,
    effort_value,
    pr_curve,
    review_precision,
    write_effort_value_csv,
    write_eval_summary,
    write_pr_curve_csv,
    write_review_precision_csv,
)

# ---------------------------------------------------------------- pr_curve


def test_hand_enumerated_three_point_curve():
    curve = pr_curve([(0.9, 1), (0.8, 0), (0.7, 1)])
    assert curve.points == [(0.5, 1.0), (0.5, 0.5), (1.0, pytest.approx(2 / 3))]
    # area: 0.5 * 1.0 for the first recall step, 0.5 * 2/3 for the second
    assert curve.auprc == pytest.approx(0.5 + 0.5 * 2 / 3)


def test_perfect_separation_is_flat_one():
    scored = [(0.9, 1), (0.8, 1), (0.2, 0), (0.1, 0)]
    curve = pr_curve(scored)
    assert all(r.precision == 1.0 for r in curve.rows if r.recall > 0 and r.threshold >= 0.8)
    assert curve.rows[1].recall == 1.0 and curve.rows[1].precision == 1.0
    assert curve.auprc == pytest.approx(1.0)


def test_no_positives_raises():
    with pytest.raises(EvalError, match="no positive"):
        pr_curve([(0.5, 0), (0.4, 0)])


def test_empty_raises():
    with pytest.raises(EvalError):
        pr_curve([])


def test_bad_label_raises():
    with pytest.raises(EvalError):
        pr_curve([(0.5, 2)])


def oracle_curve(scored):
    scores = np.array([s for s, _ in scored], dtype=float)
    labels = np.array([bool(l) for _, l in scored])
    total = int(labels.sum())
    rows = []
    prev_recall = 0.0
    auprc = 0.0
    for t in sorted(set(scores.tolist()), reverse=True):
        pred = scores >= t
        tp = int((pred & labels).sum())
        fp = int((pred & ~labels).sum())
        precision = tp / (tp + fp)
        recall = tp / total
        rows.append((t, tp, fp, total - tp, precision, recall))
        auprc += (recall - prev_recall) * precision
        prev_recall = recall
    return rows, auprc


def test_curve_matches_exhaustive_oracle_1000_sets():
    rng = np.random.default_rng(404)
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        # coarse score grid so equal-score groups actually occur
        scores = rng.integers(0, 10, size=n) / 10.0
        labels = rng.integers(0, 2, size=n)
        if labels.sum() == 0:
            labels[int(rng.integers(0, n))] = 1
        scored = list(zip(scores.tolist(), labels.tolist()))
        curve = pr_curve(scored)
        rows, auprc = oracle_curve(scored)
        got = [(r.threshold, r.tp, r.fp, r.fn, r.precision, r.recall) for r in curve.rows]
        assert got == rows
        assert curve.auprc == pytest.approx(auprc, abs=1e-12)


def test_curve_is_input_order_invariant():
    rng = np.random.default_rng(7)
    scored = [(float(s), int(l)) for s, l in zip(rng.integers(0, 5, 30) / 5.0, rng.integers(0, 2, 30))]
    if not any(l for _, l in scored):
        scored[0] = (scored[0][0], 1)
    base = pr_curve(scored)
    for seed in range(5):
        shuffled = list(scored)
        np.random.default_rng(seed).shuffle(shuffled)
        other = pr_curve([(float(s), int(l)) for s, l in shuffled])
        assert other.rows == base.rows
        assert other.auprc == base.auprc


@settings(max_examples=60, deadline=None)
@given(
    st.lists(
        st.tuples(st.sampled_from([0.1, 0.3, 0.5, 0.7, 0.9]), st.integers(min_value=0, max_value=1)),
        min_size=1,
        max_size=40,
    )
)
def test_recall_monotone_and_auprc_bounded(scored):
    if not any(lab for _, lab in scored):
        scored = scored + [(0.5, 1)]
    curve = pr_curve(scored)
    recalls = [r.recall for r in curve.rows]
    assert recalls == sorted(recalls)
    assert 0.0 <= curve.auprc <= 1.0 + 1e-12


# ---------------------------------------------------------------- effort_value


def test_effort_value_endpoints():
    ev = effort_value([1, 0, 1, 0], merge_rate=0.5)
    assert ev.points[0] == (0.0, 0.0)
    assert ev.points[-1] == (1.0, 1.0)


def test_perfect_ranking_captures_all_value_at_merge_rate():
    labels = [1] * 20 + [0] * 80
    ev = effort_value(labels, merge_rate=0.2)
    at_20 = dict(ev.points)[0.2]
    assert at_20 == 1.0
    # 90% of the merges arrive after 18 of 100 tasks
    assert ev.effort_at_90 == pytest.approx(0.18)


def test_random_ranking_value_tracks_effort():
    diffs = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        labels = (rng.random(400) < 0.2).astype(int)
        if labels.sum() == 0:
            labels[0] = 1
        rng.shuffle(labels)
        ev = effort_value(labels.tolist(), merge_rate=0.2)
        for effort, value in ev.points[:: len(ev.points) // 8]:
            diffs.append(abs(value - effort))
    assert float(np.mean(diffs)) < 0.1


def test_no_positives_flat_zero_no_headline():
    ev = effort_value([0, 0, 0], merge_rate=0.0)
    assert all(v == 0.0 for _, v in ev.points)
    assert ev.effort_at_90 is None


def test_equal_precision_recall_means_predictions_equal_positives():
    # at precision 0.9 and recall 0.9 the false positives exactly replace the
    # false negatives, so the model proposes as many merges as truly exist
    n, positives = 1000, 200
    scores = [1.0 - (i + 1) / (n + 1) for i in range(n)]
    labels = [0] * n
    for i in range(180):
        labels[i] = 1  # true merges inside the top-200 cut
    for i in range(200, 220):
        labels[i] = 1  # the 20 missed merges below the cut
    curve = pr_curve(list(zip(scores, labels)))
    row = next(r for r in curve.rows if r.tp + r.fp == 200)
    assert row.precision == pytest.approx(0.9)
    assert row.recall == pytest.approx(0.9)
    assert row.tp + row.fp == positives


# ---------------------------------------------------------------- review precision


def assess(cid, reviewer, verdict):
    return ReviewAssessment(candidate_id=cid, reviewer=reviewer, verdict=verdict)


def test_all_correct_curves_are_one():
    ass = [assess(f"c{i}", r, "correct") for i in range(5) for r in ("A", "B")]
    scores = {f"c{i}": 0.9 - i * 0.1 for i in range(5)}
    rp = review_precision(ass, scores)
    for name in ("A", "B", "combined"):
        for interp in ("treat_false", "treat_true"):
            assert all(p.precision == 1.0 for p in rp.curves[name][interp])


def test_all_indeterminate_reviewer_spans_zero_to_one():
    ass = [assess(f"c{i}", "A", "indeterminate") for i in range(4)]
    scores = {f"c{i}": 0.5 + i * 0.01 for i in range(4)}
    rp = review_precision(ass, scores)
    assert all(p.precision == 0.0 for p in rp.curves["A"]["treat_false"])
    assert all(p.precision == 1.0 for p in rp.curves["A"]["treat_true"])


def test_verdict_validation():
    with pytest.raises(EvalError):
        assess("c", "A", "sure")


def test_duplicate_assessment_raises():
    ass = [assess("c0", "A", "correct"), assess("c0", "A", "incorrect")]
    with pytest.raises(EvalError, match="duplicate"):
        review_precision(ass, {"c0": 0.5})


def test_unscored_assessment_raises():
    with pytest.raises(EvalError, match="unscored"):
        review_precision([assess("c0", "A", "correct")], {})


def test_combined_takes_most_favorable_verdict():
    ass = [
        assess("c0", "A", "incorrect"),
        assess("c0", "B", "correct"),
        assess("c1", "A", "indeterminate"),
        assess("c1", "B", "incorrect"),
    ]
    scores = {"c0": 0.9, "c1": 0.8}
    rp = review_precision(ass, scores)
    combined_false = [p.precision for p in rp.curves["combined"]["treat_false"]]
    combined_true = [p.precision for p in rp.curves["combined"]["treat_true"]]
    # c0 resolves correct either way; c1 resolves indeterminate
    assert combined_false == [1.0, 0.5]
    assert combined_true == [1.0, 1.0]


VERDICTS = ["correct", "incorrect", "indeterminate"]


@settings(max_examples=40, deadline=None)
@given(st.data())
def test_combined_equals_max_verdict_recount(data):
    n = data.draw(st.integers(min_value=1, max_value=8))
    cids = [f"c{i:02d}" for i in range(n)]
    scores = {cid: data.draw(st.sampled_from([0.2, 0.4, 0.6, 0.8])) for cid in cids}
    ass = []
    table = {}
    for cid in cids:
        for reviewer in ("A", "B"):
            if data.draw(st.booleans()):
                verdict = data.draw(st.sampled_from(VERDICTS))
                ass.append(assess(cid, reviewer, verdict))
                rank = {"incorrect": 0, "indeterminate": 1, "correct": 2}
                if cid not in table or rank[verdict] > rank[table[cid]]:
                    table[cid] = verdict
    if not ass:
        return
    rp = review_precision(ass, scores)
    ordered = sorted(table, key=lambda c: (-scores[c], c))
    for interp, as_true in (("treat_false", False), ("treat_true", True)):
        good = 0
        for rank_i, cid in enumerate(ordered, start=1):
            v = table[cid]
            good += v == "correct" or (v == "indeterminate" and as_true)
            got = rp.curves["combined"][interp][rank_i - 1]
            assert got.candidate_id == cid
            assert got.precision == pytest.approx(good / rank_i)
    # pessimistic reading never beats the optimistic one
    for name in rp.curves:
        for lo, hi in zip(rp.curves[name]["treat_false"], rp.curves[name]["treat_true"]):
            assert lo.precision <= hi.precision + 1e-12


# ---------------------------------------------------------------- reports


def test_reports_are_byte_identical(tmp_path):
    curve = pr_curve([(0.9, 1), (0.8, 0), (0.7, 1)])
    ev = effort_value([1, 0, 1], merge_rate=0.5)
    rp = review_precision(
        [assess("c0", "A", "correct"), assess("c1", "B", "indeterminate")],
        {"c0": 0.9, "c1": 0.8},
    )
    blobs = []
    for run in range(2):
        d = tmp_path / f"run{run}"
        d.mkdir()
        write_pr_curve_csv(curve, d / "pr_curve.csv")
        write_effort_value_csv(ev, d / "effort_value.csv")
        write_review_precision_csv(rp, d / "review_precision.csv")
        write_eval_summary({"auprc": curve.auprc, "effort_at_90": ev.effort_at_90}, d / "eval_summary.json")
        blobs.append(
            tuple((d / name).read_bytes() for name in ("pr_curve.csv", "effort_value.csv", "review_precision.csv", "eval_summary.json"))
        )
    assert blobs[0] == blobs[1]


def test_pr_csv_shape(tmp_path):
    curve = pr_curve([(0.9, 1), (0.8, 0), (0.7, 1)])
    p = write_pr_curve_csv(curve, tmp_path / "pr.csv")
    lines = p.read_text().strip().split("\n")
    assert lines[0] == "threshold,tp,fp,fn,precision,recall"
    assert lines[1] == "0.9,1,0,1,1.0,0.5"
    assert len(lines) == 4


def test_summary_json_sorted_keys(tmp_path):
    p = write_eval_summary({"zeta": 1, "alpha": 2}, tmp_path / "s.json")
    text = p.read_text()
    assert text.index('"alpha"') < text.index('"zeta"')
