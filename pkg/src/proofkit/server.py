"""HTTP review service: task leasing, decision logging, context imagery.

The server owns the decision log. Every mutation (lease grant, decision
append) runs under one lock, so sequence numbers are gap-free no matter how
many reviewers hammer the API concurrently. Reviews are leased for 300 s and
renewed whenever the holder re-polls; an expired lease makes the candidate
available again.

Slice responses are deterministic: the PNG encoder sees the same uint8 array
for the same request, and mask runs are computed from the stored evidence
tensor, so repeated requests are byte-identical.
"""

from __future__ import annotations

import base64
import io
import threading
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from fastapi import FastAPI
from fastapi.responses import JSONResponse, Response
from fastapi.staticfiles import StaticFiles
from PIL import Image
from pydantic import BaseModel

from .adjacency import BASELINE_KAPPA, MergeCandidate, read_candidates
from .evalkit import EvalError, pr_curve
from .evidence import EvidenceStore
from .workflow import (
    VERDICTS,
    Decision,
    append_decision,
    make_body_state,
    read_decisions,
)

LEASE_TTL_SECONDS = 300.0


class ServerError(Exception):
    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


def _iso(ts: float) -> str:
    return datetime.fromtimestamp(ts, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _score_key(c: MergeCandidate) -> tuple:
    s = c.scores.get("fusion", c.scores.get("baseline", 0.0))
    return (-s, c.id)


class TaskStore:
    """All mutable review state behind one lock."""

    def __init__(
        self,
        candidates: list[MergeCandidate],
        fragments,
        identified=(),
        synapses=(),
        evidence: EvidenceStore | None = None,
        log_path: str | Path | None = None,
        truth_labels: dict[str, bool] | None = None,
        now_fn=time.time,
    ):
        self.candidates = {c.id: c for c in candidates}
        if len(self.candidates) != len(candidates):
            raise ServerError(500, "bad_state", "duplicate candidate ids")
        self._queue = sorted(candidates, key=_score_key)
        self.state = make_body_state(fragments, identified=identified, synapses=synapses)
        self.evidence = evidence
        self.log_path = Path(log_path) if log_path else None
        self.truth_labels = truth_labels
        self.now = now_fn
        self._lock = threading.Lock()
        self.decisions: list[Decision] = []
        self.decided: dict[str, Decision] = {}
        self.leases: dict[str, tuple[str, float]] = {}  # candidate -> (reviewer, expiry)
        if self.log_path and self.log_path.exists():
            for d in read_decisions(self.log_path):
                self._apply(d)

    def _apply(self, d: Decision):
        self.decisions.append(d)
        self.decided[d.candidate_id] = d
        if d.verdict == "merge":
            edge = self.candidates[d.candidate_id].edge
            self.state.union(edge.a, edge.b)

    def next_task(self, workflow: str, reviewer: str):
        with self._lock:
            now = self.now()
            for cid, (holder, expiry) in self.leases.items():
                cand = self.candidates[cid]
                if (
                    holder == reviewer
                    and expiry > now
                    and cid not in self.decided
                    and cand.workflow == workflow
                ):
                    self.leases[cid] = (reviewer, now + LEASE_TTL_SECONDS)
                    return cand, _iso(now + LEASE_TTL_SECONDS)
            for cand in self._queue:
                if cand.workflow != workflow or cand.id in self.decided:
                    continue
                lease = self.leases.get(cand.id)
                if lease and lease[1] > now and lease[0] != reviewer:
                    continue
                self.leases[cand.id] = (reviewer, now + LEASE_TTL_SECONDS)
                return cand, _iso(now + LEASE_TTL_SECONDS)
            return None, None

    def submit(self, candidate_id: str, verdict: str, reviewer: str):
        if verdict not in VERDICTS:
            raise ServerError(400, "bad_verdict", f"verdict must be one of {list(VERDICTS)}")
        if not reviewer:
            raise ServerError(400, "bad_reviewer", "reviewer must be non-empty")
        with self._lock:
            if candidate_id not in self.candidates:
                raise ServerError(404, "unknown_candidate", f"no candidate {candidate_id}")
            prior = self.decided.get(candidate_id)
            if prior is not None:
                return prior.sequence, True
            d = Decision(
                candidate_id=candidate_id,
                verdict=verdict,
                source=f"human:{reviewer}",
                timestamp=_iso(self.now()),
                sequence=len(self.decisions) + 1,
            )
            if self.log_path:
                append_decision(self.log_path, d)
            self._apply(d)
            self.leases.pop(candidate_id, None)
            return d.sequence, False

    def stats(self) -> dict:
        with self._lock:
            counts = {v: 0 for v in VERDICTS}
            for d in self.decisions:
                counts[d.verdict] += 1
            decided = len(self.decisions)
            merge_rate = counts["merge"] / decided if decided else None
            return {
                "total": len(self.candidates),
                "decided": decided,
                "pending": len(self.candidates) - decided,
                "merge_rate": merge_rate,
                "verdicts": counts,
            }

    def eval_pr(self) -> dict:
        if not self.truth_labels:
            return {"available": False}
        scored = []
        for cid, cand in self.candidates.items():
            if cid in self.truth_labels and "fusion" in cand.scores:
                scored.append((cand.scores["fusion"], int(self.truth_labels[cid])))
        try:
            curve = pr_curve(scored)
        except EvalError:
            return {"available": False}
        return {
            "available": True,
            "auprc": curve.auprc,
            "points": [[r.recall, r.precision] for r in curve.rows],
            "thresholds": [r.threshold for r in curve.rows],
        }

    def slice_payload(self, candidate_id: str, axis: str, index: int) -> dict:
        if self.evidence is None:
            raise ServerError(503, "no_evidence", "evidence store not loaded")
        if candidate_id not in self.candidates:
            raise ServerError(404, "unknown_candidate", f"no candidate {candidate_id}")
        if candidate_id not in self.evidence:
            raise ServerError(404, "no_evidence", f"no evidence for candidate {candidate_id}")
        if axis not in ("x", "y", "z"):
            raise ServerError(400, "bad_axis", "axis must be x, y or z")
        edge = self.evidence.edge
        if not 0 <= index < edge:
            raise ServerError(400, "bad_index", f"index must be in [0, {edge})")
        tensor = self.evidence.load(candidate_id)
        ai = "xyz".index(axis)
        sl = np.take(tensor.data, index, axis=1 + ai)  # (4, E, E)
        # image rows follow the later of the two remaining axes, columns the
        # earlier one, so an axis-z slice shows x horizontally and y vertically
        gray = np.clip(np.rint(sl[0].T * 255.0), 0, 255).astype(np.uint8)
        buf = io.BytesIO()
        Image.fromarray(gray, mode="L").save(buf, format="PNG")
        png = buf.getvalue()
        masks = {}
        for name, channel in (("a", 1), ("b", 2), ("synapse", 3)):
            flat = (sl[channel].T > 0.5).ravel()
            runs = []
            start = None
            for i, v in enumerate(flat):
                if v and start is None:
                    start = i
                elif not v and start is not None:
                    runs.append([start, i - start])
                    start = None
            if start is not None:
                runs.append([start, len(flat) - start])
            masks[name] = {"shape": [gray.shape[0], gray.shape[1]], "runs": runs}
        return {
            "candidate_id": candidate_id,
            "axis": axis,
            "index": index,
            "edge": edge,
            "png": base64.b64encode(png).decode("ascii"),
            "masks": masks,
        }


class DecisionIn(BaseModel):
    verdict: str
    reviewer: str


def create_app(store: TaskStore, console_dir: str | Path | None = None) -> FastAPI:
    app = FastAPI(title="proofkit review service")

    @app.exception_handler(ServerError)
    async def server_error(_, exc: ServerError):
        return JSONResponse(status_code=exc.status, content={"error": exc.code, "message": exc.message})

    @app.get("/api/tasks/next")
    def next_task(workflow: str = "focused", reviewer: str = ""):
        if not reviewer:
            raise ServerError(400, "bad_reviewer", "reviewer query parameter is required")
        cand, expires = store.next_task(workflow, reviewer)
        stats = store.stats()
        if cand is None:
            return {"empty": True, "queue": stats}
        e = cand.edge
        return {
            "empty": False,
            "candidate": {
                "id": cand.id,
                "a": e.a,
                "b": e.b,
                "contact_voxels": e.contact_voxels,
                "rep": [e.rep_location.x, e.rep_location.y, e.rep_location.z],
                "scores": cand.scores,
                "workflow": cand.workflow,
            },
            "lease": {"reviewer": reviewer, "expires_at": expires},
            "queue": stats,
        }

    @app.post("/api/tasks/{candidate_id}/decision")
    def submit(candidate_id: str, body: DecisionIn):
        seq, duplicate = store.submit(candidate_id, body.verdict, body.reviewer)
        return {"candidate_id": candidate_id, "sequence": seq, "duplicate": duplicate}

    @app.get("/api/candidates/{candidate_id}/slices")
    def slices(candidate_id: str, axis: str = "z", index: int = 0, format: str = "json"):
        payload = store.slice_payload(candidate_id, axis, index)
        if format == "png":
            return Response(content=base64.b64decode(payload["png"]), media_type="image/png")
        if format != "json":
            raise ServerError(400, "bad_format", "format must be json or png")
        return payload

    @app.get("/api/stats")
    def stats():
        return store.stats()

    @app.get("/api/eval/pr")
    def eval_pr():
        return store.eval_pr()

    if console_dir is not None and Path(console_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(console_dir), html=True), name="console")

    return app


def load_store(
    data_dir: str | Path,
    model_path: str | Path | None = None,
    now_fn=time.time,
) -> TaskStore:
    """Assemble a TaskStore from a pipeline data directory.

    Prefers scored.jsonl over candidates.jsonl; also expects truth.json,
    synapses.jsonl and the evidence pair. Missing fusion scores are filled in
    from the model bundle when one is supplied.
    """
    from .evidence import read_features
    from .models import load_bundle
    from .synth import read_synapses, read_truth

    data_dir = Path(data_dir)
    cand_path = data_dir / "scored.jsonl"
    if not cand_path.exists():
        cand_path = data_dir / "candidates.jsonl"
    candidates = read_candidates(cand_path)
    truth = read_truth(data_dir / "truth.json")
    synapses_path = data_dir / "synapses.jsonl"
    synapses = read_synapses(synapses_path) if synapses_path.exists() else []
    evidence = None
    bin_path = data_dir / "evidence.bin"
    idx_path = data_dir / "evidence_idx.json"
    if bin_path.exists() and idx_path.exists():
        evidence = EvidenceStore(bin_path, idx_path)
    feats_path = data_dir / "features.jsonl"
    if model_path is not None and evidence is not None and feats_path.exists():
        bundle = load_bundle(model_path)
        feats = read_features(feats_path)
        for c in candidates:
            if "fusion" in c.scores or c.id not in evidence or c.id not in feats:
                continue
            f = feats[c.id]
            baseline = c.scores.get(
                "baseline", c.edge.contact_voxels / (c.edge.contact_voxels + BASELINE_KAPPA)
            )
            c.scores.update(
                bundle.score(
                    evidence.load(c.id),
                    np.asarray(f["shape"], dtype=np.float64),
                    np.asarray(f["connectivity"], dtype=np.float64),
                    baseline,
                )
            )
    fragments = sorted(truth.fragment_to_neuron)
    labels = {}
    for c in candidates:
        labels[c.id] = (c.edge.a, c.edge.b) in truth.true_merge_edges
    return TaskStore(
        candidates,
        fragments,
        identified=sorted(truth.identified_fragments),
        synapses=synapses,
        evidence=evidence,
        log_path=data_dir / "decisions.jsonl",
        truth_labels=labels,
        now_fn=now_fn,
    )
