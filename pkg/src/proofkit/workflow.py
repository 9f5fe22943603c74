"""Proofreading workflow engine.

Body state is a union-find over fragment ids, rebuilt deterministically by
replaying the append-only decision log. On top of it sit the three workflow
operations: triage (rank focused-merge tasks by score), threshold calibration
(conservative one-sided Wilson bound on the error rate), and the orphan-link
pass that auto-accepts the best-scoring edge from each small orphan body to
an identified neighbor.

Auto decisions carry a fixed timestamp so a rerun of the same pipeline writes
a byte-identical log; wall-clock time only enters through human decisions.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from statistics import NormalDist

from .adjacency import AdjacencyEdge, candidate_id

VERDICTS = ("merge", "no_merge", "indeterminate")
AUTO_TIMESTAMP = "1970-01-01T00:00:00Z"


class WorkflowError(Exception):
    pass


@dataclass(frozen=True)
class Decision:
    candidate_id: str
    verdict: str
    source: str  # human:<reviewer> | auto:<model-fingerprint>
    timestamp: str
    sequence: int

    def __post_init__(self):
        if self.verdict not in VERDICTS:
            raise WorkflowError(f"verdict {self.verdict!r} not in {VERDICTS}")

    def to_json(self) -> str:
        return json.dumps(
            {
                "candidate_id": self.candidate_id,
                "verdict": self.verdict,
                "source": self.source,
                "timestamp": self.timestamp,
                "sequence": self.sequence,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> "Decision":
        d = json.loads(line)
        return cls(
            candidate_id=d["candidate_id"],
            verdict=d["verdict"],
            source=d["source"],
            timestamp=d["timestamp"],
            sequence=d["sequence"],
        )


class BodyState:
    """Union-find over fragments with identified flags and synapse weights.

    Flags and weights live on roots: a union sums the weights and keeps the
    body identified if either side was.
    """

    def __init__(self, fragments, identified=(), synapse_weights=None):
        self._parent: dict[int, int] = {int(f): int(f) for f in fragments}
        self._size: dict[int, int] = {f: 1 for f in self._parent}
        self._weight: dict[int, int] = {f: 0 for f in self._parent}
        if synapse_weights:
            for f, w in synapse_weights.items():
                self._weight[self.find(f)] += int(w)
        self._identified: set[int] = set()
        for f in identified:
            self._identified.add(self.find(f))

    def find(self, f: int) -> int:
        try:
            root = self._parent[f]
        except KeyError:
            raise WorkflowError(f"unknown fragment {f}") from None
        while self._parent[root] != root:
            root = self._parent[root]
        while self._parent[f] != root:  # path compression
            self._parent[f], f = root, self._parent[f]
        return root

    def union(self, a: int, b: int) -> int:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return ra
        if self._size[ra] < self._size[rb] or (self._size[ra] == self._size[rb] and rb < ra):
            ra, rb = rb, ra
        self._parent[rb] = ra
        self._size[ra] += self._size[rb]
        self._weight[ra] += self._weight[rb]
        if rb in self._identified:
            self._identified.discard(rb)
            self._identified.add(ra)
        return ra

    def is_identified(self, f: int) -> bool:
        return self.find(f) in self._identified

    def mark_identified(self, f: int):
        self._identified.add(self.find(f))

    def synapse_weight(self, f: int) -> int:
        return self._weight[self.find(f)]

    def fragments(self) -> list[int]:
        return sorted(self._parent)

    def bodies(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for f in self._parent:
            out.setdefault(self.find(f), []).append(f)
        return {r: sorted(ms) for r, ms in out.items()}

    def members(self, f: int) -> list[int]:
        root = self.find(f)
        return sorted(g for g in self._parent if self.find(g) == root)

    def copy(self) -> "BodyState":
        out = BodyState([])
        out._parent = dict(self._parent)
        out._size = dict(self._size)
        out._weight = dict(self._weight)
        out._identified = set(self._identified)
        return out


def make_body_state(fragments, identified=(), synapses=()) -> BodyState:
    """Fresh body state with per-fragment synapse weights (T-bars + PSDs)."""
    weights: dict[int, int] = {}
    for s in synapses:
        weights[s.pre_fragment] = weights.get(s.pre_fragment, 0) + 1
        for pf in s.post_fragments:
            weights[pf] = weights.get(pf, 0) + 1
    return BodyState(fragments, identified=identified, synapse_weights=weights)


def replay(
    log: list[Decision],
    fragments,
    candidates: dict[str, AdjacencyEdge],
    identified=(),
    synapses=(),
) -> BodyState:
    """Rebuild body state from the decision log; merge verdicts union."""
    state = make_body_state(fragments, identified=identified, synapses=synapses)
    prev = None
    for d in log:
        if prev is not None and d.sequence != prev + 1:
            raise WorkflowError(f"sequence gap: {prev} -> {d.sequence}")
        prev = d.sequence
        try:
            edge = candidates[d.candidate_id]
        except KeyError:
            raise WorkflowError(f"unknown candidate {d.candidate_id}") from None
        if d.verdict == "merge":
            state.union(edge.a, edge.b)
    return state


def triage(candidates, scores: dict[str, float], budget_fraction: float, truth=None):
    """Rank candidates by fusion score (ties by id) and cut at the budget.

    Returns (top tasks, captured value). Value is the fraction of all true
    merge candidates that land inside the budget; None without ground truth,
    1.0 when the truth set marks no candidate as a true merge.
    """
    for c in candidates:
        if c.id not in scores:
            raise WorkflowError(f"candidate {c.id} has no score")
    ranked = sorted(candidates, key=lambda c: (-scores[c.id], c.id))
    k = math.ceil(budget_fraction * len(ranked)) if ranked else 0
    k = max(0, min(len(ranked), k))
    tasks = ranked[:k]
    value = None
    if truth is not None:
        positives = [c for c in ranked if (c.edge.a, c.edge.b) in truth]
        if not positives:
            value = 1.0
        else:
            inside = sum(1 for c in tasks if (c.edge.a, c.edge.b) in truth)
            value = inside / len(positives)
    return tasks, value


def wilson_upper(errors: int, n: int, confidence: float = 0.95) -> float:
    """One-sided Wilson score upper bound on the error proportion."""
    if n == 0:
        return 1.0
    z = NormalDist().inv_cdf(confidence)
    p = errors / n
    z2 = z * z
    center = p + z2 / (2 * n)
    spread = z * ((p * (1 - p) / n + z2 / (4 * n * n)) ** 0.5)
    return (center + spread) / (1 + z2 / n)


def calibrate_threshold(
    labeled_sample: list[tuple[float, bool]],
    target_error: float,
    confidence: float = 0.95,
):
    """Smallest score whose >=tau subset keeps the Wilson error bound under
    target; None when no threshold qualifies."""
    if not labeled_sample:
        raise WorkflowError("labeled sample is empty")
    if not 0 < target_error < 1:
        raise WorkflowError("target_error must be in (0, 1)")
    ordered = sorted(labeled_sample, key=lambda t: -t[0])
    best = None
    n = 0
    errors = 0
    i = 0
    while i < len(ordered):
        score = ordered[i][0]
        while i < len(ordered) and ordered[i][0] == score:
            n += 1
            errors += not ordered[i][1]
            i += 1
        if wilson_upper(errors, n, confidence) <= target_error:
            best = score  # keep descending: the last qualifying score is smallest
    return best


@dataclass(frozen=True)
class OrphanPolicy:
    accept_threshold: float
    weight_min: int = 10
    weight_max: int = 100
    max_merges_per_orphan: int = 1
    passes: int = 1

    def __post_init__(self):
        if not 0 < self.accept_threshold < 1:
            raise WorkflowError("accept_threshold must be in (0, 1)")
        if self.weight_min > self.weight_max:
            raise WorkflowError("weight_min must be <= weight_max")


@dataclass
class OrphanProposal:
    orphan_root: int
    candidate_id: str
    a: int
    b: int
    score: float
    accepted: bool


@dataclass
class OrphanRunReport:
    proposals: list[OrphanProposal] = field(default_factory=list)
    decisions: list[Decision] = field(default_factory=list)

    @property
    def accepted(self) -> list[OrphanProposal]:
        return [p for p in self.proposals if p.accepted]


def orphan_link_run(
    state: BodyState,
    edges: list[AdjacencyEdge],
    policy: OrphanPolicy,
    score_fn,
    model_fingerprint: str = "model",
    start_sequence: int = 1,
) -> OrphanRunReport:
    """Propose and auto-accept orphan links; mutates state, returns the log.

    An orphan is a non-identified body whose synapse weight falls in the
    policy window. Per pass, each orphan's adjacency edges to identified
    bodies are scored, the best one (score, then candidate id) is proposed,
    and it is accepted when the score clears the threshold. Accepted merges
    become auto decisions; the body state updates between passes.
    """
    report = OrphanRunReport()
    seq = start_sequence
    for _ in range(policy.passes):
        incident: dict[int, list[AdjacencyEdge]] = {}
        for e in edges:
            ra, rb = state.find(e.a), state.find(e.b)
            if ra == rb:
                continue
            for orphan_side, other in ((ra, rb), (rb, ra)):
                if state.is_identified(orphan_side) or not state.is_identified(other):
                    continue
                w = state.synapse_weight(orphan_side)
                if policy.weight_min <= w <= policy.weight_max:
                    incident.setdefault(orphan_side, []).append(e)
        chosen = []
        for root in sorted(incident):
            scored = []
            for e in incident[root]:
                cid = candidate_id(e.a, e.b, e.rep_location)
                scored.append((-float(score_fn(e)), cid, e))
            scored.sort()
            neg_score, cid, e = scored[0]
            chosen.append((root, cid, e, -neg_score))
        for root, cid, e, score in chosen:
            accepted = score >= policy.accept_threshold and state.find(e.a) != state.find(e.b)
            report.proposals.append(
                OrphanProposal(
                    orphan_root=root,
                    candidate_id=cid,
                    a=e.a,
                    b=e.b,
                    score=score,
                    accepted=accepted,
                )
            )
            if accepted:
                state.union(e.a, e.b)
                report.decisions.append(
                    Decision(
                        candidate_id=cid,
                        verdict="merge",
                        source=f"auto:{model_fingerprint}",
                        timestamp=AUTO_TIMESTAMP,
                        sequence=seq,
                    )
                )
                seq += 1
    return report


def completeness(state: BodyState, synapses) -> float:
    """Share of (tbar, psd) connections with both endpoints identified."""
    total = 0
    done = 0
    for s in synapses:
        pre_ok = state.is_identified(s.pre_fragment)
        for pf in s.post_fragments:
            total += 1
            if pre_ok and state.is_identified(pf):
                done += 1
    return done / total if total else 0.0


def completeness_report(
    state_before: BodyState,
    state_after: BodyState,
    synapses,
    report: OrphanRunReport,
) -> dict:
    """Before/after accounting for an orphan-link run."""

    def counts(state):
        total = 0
        done = 0
        for s in synapses:
            pre_ok = state.is_identified(s.pre_fragment)
            for pf in s.post_fragments:
                total += 1
                done += pre_ok and state.is_identified(pf)
        return total, done

    total, done_before = counts(state_before)
    _, done_after = counts(state_after)
    tbars_added = 0
    psds_added = 0
    merged_roots = {p.orphan_root for p in report.accepted}
    merged_fragments = set()
    for root in merged_roots:
        merged_fragments.update(state_before.members(root))
    for s in synapses:
        tbars_added += s.pre_fragment in merged_fragments
        psds_added += sum(pf in merged_fragments for pf in s.post_fragments)
    return {
        "connections_total": total,
        "connections_identified_before": done_before,
        "connections_identified_after": done_after,
        "completeness_before": done_before / total if total else 0.0,
        "completeness_after": done_after / total if total else 0.0,
        "proposed_merges": len(report.proposals),
        "accepted_merges": len(report.accepted),
        "tbars_added": tbars_added,
        "psds_added": psds_added,
    }


def write_decisions(path: str | Path, decisions: list[Decision]) -> Path:
    path = Path(path)
    with path.open("w") as fh:
        for d in decisions:
            fh.write(d.to_json() + "\n")
    return path


def append_decision(path: str | Path, decision: Decision):
    with Path(path).open("a") as fh:
        fh.write(decision.to_json() + "\n")


def read_decisions(path: str | Path) -> list[Decision]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            out.append(Decision.from_json(line))
    return out


def labels_from_decisions(decisions, include_auto: bool = False) -> dict[str, int]:
    """Binary training labels straight from a decision log.

    merge -> 1, no_merge -> 0, indeterminate dropped. Auto-accepted merges
    are excluded by default so retraining never feeds the model its own
    output back as ground truth.
    """
    labels: dict[str, int] = {}
    for d in decisions:
        if not include_auto and not d.source.startswith("human:"):
            continue
        if d.verdict == "merge":
            labels[d.candidate_id] = 1
        elif d.verdict == "no_merge":
            labels[d.candidate_id] = 0
    return labels
