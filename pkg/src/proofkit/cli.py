"""Pipeline driver: every stage of the proofreading toolkit as a subcommand.

All randomness flows from one --seed; each stage derives its own stream by
hashing the stage name, so stages can rerun independently and still agree
with a full pipeline run. Reruns over unchanged inputs write byte-identical
artifacts, and no stage rewrites its own inputs.

Failures print a single JSON line {"error": code, "message": ...} to stderr
and exit 1.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from .adjacency import (
    AdjacencyError,
    CandidateFilter,
    candidate_id,
    candidates_for,
    compute_adjacency,
    read_adjacency_tsv,
    read_candidates,
    write_adjacency_tsv,
    write_candidates,
)
from .evalkit import (
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
from .evidence import (
    DEFAULT_CONTEXT_EDGE,
    DEFAULT_EDGE,
    DEFAULT_N_POINTS,
    DEFAULT_POINT_FACTOR,
    DEFAULT_PROX_RADIUS_NM,
    ConnectionTable,
    EvidenceError,
    EvidenceStore,
    EvidenceWriter,
    candidate_seed,
    connectivity_features,
    extract_evidence,
    read_features,
    sample_points,
    shape_descriptor,
    write_features,
)
from .models import (
    CnnConfig,
    FUSION_DIM,
    FusionParams,
    ModelBundle,
    ModelError,
    build_fusion_input,
    cnn_forward,
    cnn_train,
    fusion_train,
    load_bundle,
    save_bundle,
)
from .models.cnn import DEFAULT_HYPER
from .seeds import derive_seed
from .server import ServerError, create_app, load_store
from .synth import SynthConfig, SynthError, generate, read_synapses, read_truth, write_synapses, write_truth
from .volumes import VolumeError, downsample, read_volume, write_volume
from .workflow import (
    OrphanPolicy,
    WorkflowError,
    append_decision,
    calibrate_threshold,
    completeness_report,
    labels_from_decisions,
    make_body_state,
    orphan_link_run,
    read_decisions,
    replay,
    triage,
)


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


_ERROR_CODES = [
    (CliError, None),
    (VolumeError, "volume"),
    (AdjacencyError, "adjacency"),
    (SynthError, "synthgen"),
    (EvidenceError, "evidence"),
    (ModelError, "model"),
    (WorkflowError, "workflow"),
    (EvalError, "eval"),
    (ServerError, "server"),
    (FileNotFoundError, "missing_file"),
    (json.JSONDecodeError, "bad_json"),
]


SECTION_KEYS = {
    "gen": {
        "dims", "neuron_count", "split_count", "synapse_density", "noise_sigma",
        "p_false_membrane", "type_count", "tube_radius_vox", "turn_sigma",
        "step_len", "walk_steps", "min_cut_voxels", "cut_separation_vox",
    },
    "adjacency": {"factor", "block_edge"},
    "candidates": {"workflow", "min_contact"},
    "features": {"edge", "context_edge", "n_points", "point_factor", "prox_radius_nm"},
    "train_cnn": {"epochs", "lr", "momentum", "batch", "examples", "augment_flips", "labels"},
    "train_fusion": {"lam", "sweeps", "labels"},
    "score": set(),
    "triage": {"budget"},
    "calibrate": {"target_error", "confidence", "sample_size"},
    "orphan_link": {"tau", "weight_min", "weight_max", "passes"},
    "eval": set(),
    "serve": {"port", "host"},
}


class RunConfig:
    """Merged view of the JSON config file and command line flags."""

    def __init__(self, data_dir: Path, seed: int, threads: int | None, sections: dict):
        self.data_dir = data_dir
        self.seed = seed
        self.threads = threads
        self.sections = sections

    def get(self, section: str, key: str, flag_value, default):
        if flag_value is not None:
            return flag_value
        return self.sections.get(section, {}).get(key, default)


def _load_config(args) -> RunConfig:
    doc = {}
    if args.config:
        doc = json.loads(Path(args.config).read_text())
        if not isinstance(doc, dict):
            raise CliError("config", "config file must hold a JSON object")
    allowed_top = {"data_dir", "seed", "threads"} | set(SECTION_KEYS)
    for key in doc:
        if key not in allowed_top:
            raise CliError("config", f"unknown config key {key!r}")
    sections = {}
    for name, keys in SECTION_KEYS.items():
        block = doc.get(name, {})
        if not isinstance(block, dict):
            raise CliError("config", f"config section {name!r} must be an object")
        for key in block:
            if key not in keys:
                raise CliError("config", f"unknown key {key!r} in config section {name!r}")
        sections[name] = block
    data_dir = args.data_dir or doc.get("data_dir")
    if not data_dir:
        raise CliError("config", "data_dir is required (flag --data-dir or config)")
    seed = args.seed if args.seed is not None else doc.get("seed")
    if seed is None:
        raise CliError("config", "seed is required (flag --seed or config)")
    threads = args.threads if args.threads is not None else doc.get("threads")
    if threads is not None and threads < 1:
        raise CliError("config", "threads must be >= 1")
    return RunConfig(Path(data_dir), int(seed), threads, sections)


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise CliError("missing_file", f"{what} not found at {path}; run the producing stage first")
    return path


def _parse_dims(text: str) -> tuple[int, int, int]:
    parts = text.split(",")
    if len(parts) != 3:
        raise CliError("config", f"dims must be X,Y,Z, got {text!r}")
    return tuple(int(p) for p in parts)


def _truth(cfg: RunConfig):
    return read_truth(_require(cfg.data_dir / "truth.json", "truth table"))


def _synapses(cfg: RunConfig):
    return read_synapses(_require(cfg.data_dir / "synapses.jsonl", "synapse table"))


def _scored(cfg: RunConfig):
    return read_candidates(_require(cfg.data_dir / "scored.jsonl", "scored candidates"))


def _evidence_store(cfg: RunConfig) -> EvidenceStore:
    return EvidenceStore(
        _require(cfg.data_dir / "evidence.bin", "evidence tensors"),
        _require(cfg.data_dir / "evidence_idx.json", "evidence index"),
    )


def _emit(**fields):
    print(json.dumps(fields, sort_keys=True))


# ------------------------------------------------------------------- stages


def cmd_gen(cfg: RunConfig, args) -> int:
    g = lambda key, flag, default: cfg.get("gen", key, flag, default)
    dims = _parse_dims(args.dims) if args.dims else tuple(g("dims", None, (256, 256, 256)))
    extras = {
        k: v
        for k, v in cfg.sections["gen"].items()
        if k not in ("dims", "neuron_count", "split_count")
    }
    scfg = SynthConfig(
        dims=dims,
        neuron_count=int(g("neuron_count", args.neurons, 60)),
        split_count=int(g("split_count", args.splits, 400)),
        seed=derive_seed(cfg.seed, "gen"),
        **extras,
    )
    gt, gray = generate(scfg)
    cfg.data_dir.mkdir(parents=True, exist_ok=True)
    write_volume(gray, cfg.data_dir / "gray")
    write_volume(gt.fragment_volume, cfg.data_dir / "labels")
    write_synapses(gt.synapses, cfg.data_dir / "synapses.jsonl")
    write_truth(gt, cfg.data_dir / "truth.json")
    _emit(
        stage="gen",
        dims=list(dims),
        fragments=len(gt.fragment_to_neuron),
        identified=len(gt.identified_fragments),
        true_edges=len(gt.true_merge_edges),
        synapses=len(gt.synapses),
    )
    return 0


def cmd_adjacency(cfg: RunConfig, args) -> int:
    labels = read_volume(_require(cfg.data_dir / "labels", "label volume"))
    factor = int(cfg.get("adjacency", "factor", args.factor, 8))
    block_edge = int(cfg.get("adjacency", "block_edge", args.block_edge, 64))
    edges = compute_adjacency(labels, factor=factor, block_edge=block_edge, threads=cfg.threads)
    write_adjacency_tsv(edges, cfg.data_dir / "adjacency.tsv")
    _emit(stage="adjacency", factor=factor, edges=len(edges))
    return 0


def cmd_candidates(cfg: RunConfig, args) -> int:
    edges = read_adjacency_tsv(_require(cfg.data_dir / "adjacency.tsv", "adjacency table"))
    workflow = cfg.get("candidates", "workflow", args.workflow, "focused")
    min_contact = int(cfg.get("candidates", "min_contact", args.min_contact, 1))
    filt = CandidateFilter(workflow=workflow, min_contact=min_contact)
    body_state = None
    if workflow == "orphan":
        truth = _truth(cfg)
        body_state = make_body_state(
            sorted(truth.fragment_to_neuron),
            identified=sorted(truth.identified_fragments),
            synapses=_synapses(cfg),
        )
    cands = candidates_for(edges, filt, body_state)
    write_candidates(cands, cfg.data_dir / "candidates.jsonl")
    _emit(stage="candidates", workflow=workflow, candidates=len(cands))
    return 0


def cmd_features(cfg: RunConfig, args) -> int:
    gray = read_volume(_require(cfg.data_dir / "gray", "grayscale volume"))
    labels = read_volume(_require(cfg.data_dir / "labels", "label volume"))
    synapses = _synapses(cfg)
    truth = _truth(cfg)
    cands = read_candidates(_require(cfg.data_dir / "candidates.jsonl", "candidates"))
    edge = int(cfg.get("features", "edge", args.edge, DEFAULT_EDGE))
    context_edge = int(cfg.get("features", "context_edge", None, DEFAULT_CONTEXT_EDGE))
    n_points = int(cfg.get("features", "n_points", None, DEFAULT_N_POINTS))
    point_factor = int(cfg.get("features", "point_factor", None, DEFAULT_POINT_FACTOR))
    prox = float(cfg.get("features", "prox_radius_nm", None, DEFAULT_PROX_RADIUS_NM))
    labels_small = downsample(labels, point_factor)
    state = make_body_state(
        sorted(truth.fragment_to_neuron),
        identified=sorted(truth.identified_fragments),
        synapses=synapses,
    )
    table = ConnectionTable(synapses, state)
    types = {
        fid: truth.neuron_types[nid]
        for fid, nid in truth.fragment_to_neuron.items()
        if nid in truth.neuron_types
    }
    stage_seed = derive_seed(cfg.seed, "features")
    writer = EvidenceWriter(cfg.data_dir / "evidence.bin", cfg.data_dir / "evidence_idx.json", edge=edge)
    rows = []
    for c in cands:
        tensor = extract_evidence(gray, labels, synapses, c, edge=edge, prox_radius_nm=prox)
        writer.add(c.id, tensor)
        pts_a, pts_b = sample_points(
            labels_small,
            c,
            context_edge=context_edge,
            point_factor=point_factor,
            n_points=n_points,
            seed=candidate_seed(stage_seed, c.id),
        )
        shape = shape_descriptor(pts_a, pts_b, c, context_edge=context_edge)
        conn = connectivity_features(table, state, types, c.edge.a, c.edge.b)
        rows.append(
            {
                "id": c.id,
                "shape": [float(v) for v in shape],
                "connectivity": [float(v) for v in conn],
            }
        )
    writer.close()
    write_features(cfg.data_dir / "features.jsonl", rows)
    _emit(stage="features", candidates=len(rows), edge=edge)
    return 0


def _labels_by_id(cands, truth) -> dict[str, int]:
    return {c.id: int(truth.same_neuron(c.edge.a, c.edge.b)) for c in cands}


def _training_labels(cfg: RunConfig, stage: str, cands, mode: str) -> dict[str, int]:
    """Label source for the train stages: synthetic truth, or reviewer
    verdicts from the decision log (the in-the-loop path)."""
    if mode == "truth":
        return _labels_by_id(cands, _truth(cfg))
    if mode != "decisions":
        raise CliError(stage, f"unknown label source {mode!r}")
    log_path = _require(cfg.data_dir / "decisions.jsonl", "decision log")
    labels = labels_from_decisions(read_decisions(log_path))
    if not labels:
        raise CliError(stage, "decision log has no merge or no_merge verdicts")
    return labels


def _cnn_pool(cands):
    """Even split by id hash: three quarters train the conv net, the held-out
    quarter trains the fusion layer on scores the net never saw in training."""
    return [c for c in cands if int(c.id, 16) % 4 != 3]


def _fusion_pool(cands):
    return [c for c in cands if int(c.id, 16) % 4 == 3]


def _balanced_ids(pool_ids: list[str], labels: dict[str, int], total: int, rng) -> list[tuple[str, int]]:
    pos = sorted(cid for cid in pool_ids if labels[cid])
    neg = sorted(cid for cid in pool_ids if not labels[cid])
    if not pos or not neg:
        raise CliError("train", "training pool needs both true and false merge candidates")
    half = total // 2

    def draw(ids, k):
        if len(ids) >= k:
            return [ids[i] for i in rng.choice(len(ids), size=k, replace=False)]
        extra = [ids[i] for i in rng.choice(len(ids), size=k - len(ids), replace=True)]
        return list(ids) + extra

    chosen = [(cid, 1) for cid in draw(pos, half)] + [(cid, 0) for cid in draw(neg, total - half)]
    return chosen


def cmd_train_cnn(cfg: RunConfig, args) -> int:
    cands = read_candidates(_require(cfg.data_dir / "candidates.jsonl", "candidates"))
    store = _evidence_store(cfg)
    label_mode = cfg.get("train_cnn", "labels", args.labels, "truth")
    labels = _training_labels(cfg, "train", cands, label_mode)
    pool = [c.id for c in _cnn_pool(cands) if c.id in store and c.id in labels]
    examples = int(cfg.get("train_cnn", "examples", args.examples, 2000))
    rng = np.random.default_rng(derive_seed(cfg.seed, "train-cnn:balance"))
    chosen = _balanced_ids(pool, labels, examples, rng)
    dataset = [(store.load(cid).data, y) for cid, y in chosen]
    config = CnnConfig(
        input_edge=store.edge,
        seed=derive_seed(cfg.seed, "train-cnn"),
        augment_flips=bool(cfg.get("train_cnn", "augment_flips", None, True)),
    )
    hyper = {
        "lr": float(cfg.get("train_cnn", "lr", args.lr, DEFAULT_HYPER["lr"])),
        "momentum": float(cfg.get("train_cnn", "momentum", None, DEFAULT_HYPER["momentum"])),
        "batch": int(cfg.get("train_cnn", "batch", args.batch, DEFAULT_HYPER["batch"])),
        "epochs": int(cfg.get("train_cnn", "epochs", args.epochs, DEFAULT_HYPER["epochs"])),
    }
    params, history = cnn_train(config, dataset, hyper)
    placeholder = FusionParams(
        weights=np.zeros(FUSION_DIM), bias=0.0, lam=1e-3, platt_a=1.0, platt_b=0.0
    )
    bundle = ModelBundle(
        cnn_config=config, cnn_params=params, fusion=placeholder, train_fingerprint="cnn-only"
    )
    save_bundle(cfg.data_dir / "model_cnn.aprf", bundle)
    _emit(
        stage="train-cnn",
        examples=len(dataset),
        epochs=hyper["epochs"],
        final_loss=round(history[-1]["loss"], 6),
    )
    return 0


def cmd_train_fusion(cfg: RunConfig, args) -> int:
    base = load_bundle(_require(cfg.data_dir / "model_cnn.aprf", "conv net checkpoint"))
    cands = read_candidates(_require(cfg.data_dir / "candidates.jsonl", "candidates"))
    store = _evidence_store(cfg)
    feats = read_features(_require(cfg.data_dir / "features.jsonl", "feature table"))
    label_mode = cfg.get("train_fusion", "labels", args.labels, "truth")
    labels = _training_labels(cfg, "train", cands, label_mode)
    pool = sorted(
        (c for c in _fusion_pool(cands) if c.id in store and c.id in feats and c.id in labels),
        key=lambda c: c.id,
    )
    if not pool:
        raise CliError("train", "fusion pool is empty")
    dataset = []
    for c in pool:
        cnn_p = cnn_forward(base.cnn_config, base.cnn_params, store.load(c.id))
        vec = build_fusion_input(
            cnn_p,
            c.scores["baseline"],
            np.asarray(feats[c.id]["shape"]),
            np.asarray(feats[c.id]["connectivity"]),
        )
        dataset.append((vec, labels[c.id]))
    lam = float(cfg.get("train_fusion", "lam", args.lam, 0.03))
    sweeps = int(cfg.get("train_fusion", "sweeps", args.sweeps, 100))
    fusion = fusion_train(dataset, lam=lam, sweeps=sweeps)
    digest = hashlib.sha256(
        f"{cfg.seed}:{len(dataset)}:{','.join(c.id for c in pool)}".encode()
    ).hexdigest()[:12]
    bundle = ModelBundle(
        cnn_config=base.cnn_config,
        cnn_params=base.cnn_params,
        fusion=fusion,
        train_fingerprint=digest,
    )
    save_bundle(cfg.data_dir / "model.aprf", bundle)
    _emit(stage="train-fusion", examples=len(dataset), fingerprint=digest)
    return 0


def cmd_score(cfg: RunConfig, args) -> int:
    bundle = load_bundle(_require(cfg.data_dir / "model.aprf", "model bundle"))
    cands = read_candidates(_require(cfg.data_dir / "candidates.jsonl", "candidates"))
    store = _evidence_store(cfg)
    feats = read_features(_require(cfg.data_dir / "features.jsonl", "feature table"))
    for c in cands:
        if c.id not in store or c.id not in feats:
            raise CliError("score", f"candidate {c.id} is missing evidence or features")
        f = feats[c.id]
        c.scores.update(
            bundle.score(
                store.load(c.id),
                np.asarray(f["shape"]),
                np.asarray(f["connectivity"]),
                c.scores["baseline"],
            )
        )
    write_candidates(cands, cfg.data_dir / "scored.jsonl")
    _emit(stage="score", candidates=len(cands), fingerprint=bundle.train_fingerprint)
    return 0


def cmd_triage(cfg: RunConfig, args) -> int:
    cands = _scored(cfg)
    budget = float(cfg.get("triage", "budget", args.budget, 0.2))
    scores = {}
    for c in cands:
        if "fusion" not in c.scores:
            raise CliError("triage", f"candidate {c.id} has no fusion score; run score first")
        scores[c.id] = c.scores["fusion"]
    truth_pairs = None
    if (cfg.data_dir / "truth.json").exists():
        truth = _truth(cfg)
        truth_pairs = {
            (c.edge.a, c.edge.b) for c in cands if truth.same_neuron(c.edge.a, c.edge.b)
        }
    tasks, value = triage(cands, scores, budget, truth=truth_pairs)
    lines = ["rank,candidate_id,a,b,fusion"]
    for rank, c in enumerate(tasks, start=1):
        lines.append(f"{rank},{c.id},{c.edge.a},{c.edge.b},{scores[c.id]!r}")
    (cfg.data_dir / "triage.csv").write_text("\n".join(lines) + "\n")
    summary = {
        "budget": budget,
        "candidates": len(cands),
        "tasks": len(tasks),
        "captured_value": value,
    }
    (cfg.data_dir / "triage_summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    _emit(stage="triage", budget=budget, tasks=len(tasks), captured_value=value)
    return 0


def cmd_calibrate(cfg: RunConfig, args) -> int:
    cands = _scored(cfg)
    truth = _truth(cfg)
    target = float(cfg.get("calibrate", "target_error", args.target_error, 0.03))
    confidence = float(cfg.get("calibrate", "confidence", None, 0.95))
    sample_size = int(cfg.get("calibrate", "sample_size", args.sample_size, 500))
    for c in cands:
        if "fusion" not in c.scores:
            raise CliError("calibrate", f"candidate {c.id} has no fusion score")
    # label the top of the ranking: the threshold lives in the auto-accept
    # region, so review effort goes to the candidates it could admit
    ranked = sorted(cands, key=lambda c: (-c.scores["fusion"], c.id))
    k = min(sample_size, len(ranked))
    sample = [
        (c.scores["fusion"], truth.same_neuron(c.edge.a, c.edge.b)) for c in ranked[:k]
    ]
    tau = calibrate_threshold(sample, target_error=target, confidence=confidence)
    doc = {
        "tau": tau,
        "target_error": target,
        "confidence": confidence,
        "sample_size": k,
        "attainable": tau is not None,
    }
    (cfg.data_dir / "calibration.json").write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    _emit(stage="calibrate", tau=tau, sample_size=k)
    return 0


def cmd_orphan_link(cfg: RunConfig, args) -> int:
    cands = _scored(cfg)
    truth = _truth(cfg)
    synapses = _synapses(cfg)
    tau = args.tau if args.tau is not None else cfg.sections["orphan_link"].get("tau")
    if tau is None:
        cal_path = _require(cfg.data_dir / "calibration.json", "calibration (or pass --tau)")
        cal = json.loads(cal_path.read_text())
        tau = cal["tau"]
        if tau is None:
            raise CliError(
                "orphan_link", "calibration found no attainable threshold; refusing to auto-merge"
            )
    policy = OrphanPolicy(
        accept_threshold=float(tau),
        weight_min=int(cfg.get("orphan_link", "weight_min", args.weight_min, 10)),
        weight_max=int(cfg.get("orphan_link", "weight_max", args.weight_max, 100)),
        passes=int(cfg.get("orphan_link", "passes", args.passes, 3)),
    )
    fragments = sorted(truth.fragment_to_neuron)
    identified = sorted(truth.identified_fragments)
    cand_map = {c.id: c.edge for c in cands}
    log_path = cfg.data_dir / "decisions.jsonl"
    existing = read_decisions(log_path) if log_path.exists() else []
    state = replay(existing, fragments, cand_map, identified=identified, synapses=synapses)
    before = state.copy()
    scores = {}
    for c in cands:
        if "fusion" not in c.scores:
            raise CliError("orphan_link", f"candidate {c.id} has no fusion score")
        scores[c.id] = c.scores["fusion"]

    def score_fn(e):
        cid = candidate_id(e.a, e.b, e.rep_location)
        try:
            return scores[cid]
        except KeyError:
            raise CliError("orphan_link", f"edge ({e.a},{e.b}) has no scored candidate") from None

    model_path = Path(args.model) if args.model else cfg.data_dir / "model.aprf"
    fingerprint = "unscored"
    if model_path.exists():
        fingerprint = load_bundle(model_path).train_fingerprint or "model"
    report = orphan_link_run(
        state,
        [c.edge for c in cands],
        policy,
        score_fn,
        model_fingerprint=fingerprint,
        start_sequence=len(existing) + 1,
    )
    for d in report.decisions:
        append_decision(log_path, d)
    doc = completeness_report(before, state, synapses, report)
    doc["tau"] = policy.accept_threshold
    doc["passes"] = policy.passes
    (cfg.data_dir / "completeness_report.json").write_text(
        json.dumps(doc, sort_keys=True, indent=2) + "\n"
    )
    _emit(
        stage="orphan-link",
        proposed=doc["proposed_merges"],
        accepted=doc["accepted_merges"],
        completeness_before=round(doc["completeness_before"], 6),
        completeness_after=round(doc["completeness_after"], 6),
    )
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    cands = _scored(cfg)
    truth = _truth(cfg)
    labels = _labels_by_id(cands, truth)
    summary = {"candidates": len(cands), "true_merges": sum(labels.values())}
    summary["merge_rate"] = summary["true_merges"] / len(cands) if cands else 0.0
    curve = None
    for kind in ("baseline", "cnn", "fusion"):
        scored = [(c.scores[kind], labels[c.id]) for c in cands if kind in c.scores]
        if not scored or not any(lab for _, lab in scored):
            continue
        kind_curve = pr_curve(scored)
        summary[f"auprc_{kind}"] = kind_curve.auprc
        if kind == "fusion":
            curve = kind_curve
    if curve is not None:
        write_pr_curve_csv(curve, cfg.data_dir / "pr_curve.csv")
        ranked = sorted(cands, key=lambda c: (-c.scores["fusion"], c.id))
        ev = effort_value([labels[c.id] for c in ranked], merge_rate=summary["merge_rate"])
        write_effort_value_csv(ev, cfg.data_dir / "effort_value.csv")
        summary["effort_at_90"] = ev.effort_at_90
    if args.assessments:
        rows = []
        for line in Path(args.assessments).read_text().splitlines():
            if line.strip():
                rec = json.loads(line)
                rows.append(
                    ReviewAssessment(
                        candidate_id=rec["candidate_id"],
                        reviewer=rec["reviewer"],
                        verdict=rec["verdict"],
                    )
                )
        rp = review_precision(rows, {c.id: c.scores["fusion"] for c in cands})
        write_review_precision_csv(rp, cfg.data_dir / "review_precision.csv")
        summary["assessments"] = len(rows)
    write_eval_summary(summary, cfg.data_dir / "eval_summary.json")
    _emit(stage="eval", **{k: v for k, v in summary.items() if k.startswith("auprc") or k == "effort_at_90"})
    return 0


def cmd_serve(cfg: RunConfig, args) -> int:
    import uvicorn

    model_path = Path(args.model) if args.model else cfg.data_dir / "model.aprf"
    store = load_store(cfg.data_dir, model_path=model_path if model_path.exists() else None)
    console_dir = Path(args.console_dir) if args.console_dir else None
    app = create_app(store, console_dir=console_dir)
    port = int(cfg.get("serve", "port", args.port, 7700))
    host = cfg.get("serve", "host", args.host, "127.0.0.1")
    uvicorn.run(app, host=host, port=port, log_level="warning")
    return 0


# ------------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run config; flags override its values")
    common.add_argument("--data-dir", help="pipeline artifact directory")
    common.add_argument("--seed", type=int, help="master seed; each stage derives its own stream")
    common.add_argument("--threads", type=int, help="worker cap for stages that parallelize")

    p = _Parser(prog="proofkit", description="segmentation proofreading pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("gen", parents=[common], help="generate a synthetic corpus")
    sp.add_argument("--dims", help="volume extent as X,Y,Z voxels")
    sp.add_argument("--neurons", type=int, help="neuron count")
    sp.add_argument("--splits", type=int, help="artificial split count")
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("adjacency", parents=[common], help="compute the contact table")
    sp.add_argument("--factor", type=int, help="downsample factor (default 8)")
    sp.add_argument("--block-edge", type=int, dest="block_edge", help="processing block edge")
    sp.set_defaults(func=cmd_adjacency)

    sp = sub.add_parser("candidates", parents=[common], help="turn contacts into merge candidates")
    sp.add_argument("--workflow", choices=["focused", "orphan"], help="candidate filter")
    sp.add_argument("--min-contact", type=int, dest="min_contact", help="minimum contact voxels")
    sp.set_defaults(func=cmd_candidates)

    sp = sub.add_parser("features", parents=[common], help="extract evidence tensors and descriptors")
    sp.add_argument("--edge", type=int, help="evidence cube edge (odd)")
    sp.set_defaults(func=cmd_features)

    sp = sub.add_parser("train-cnn", parents=[common], help="train the conv scorer")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--batch", type=int)
    sp.add_argument("--examples", type=int, help="balanced training set size")
    sp.add_argument("--labels", choices=["truth", "decisions"], help="label source (default truth)")
    sp.set_defaults(func=cmd_train_cnn)

    sp = sub.add_parser("train-fusion", parents=[common], help="train the fusion layer")
    sp.add_argument("--lam", type=float, help="hinge regularization")
    sp.add_argument("--sweeps", type=int, help="training sweeps over the pool")
    sp.add_argument("--labels", choices=["truth", "decisions"], help="label source (default truth)")
    sp.set_defaults(func=cmd_train_fusion)

    sp = sub.add_parser("score", parents=[common], help="score all candidates with the bundle")
    sp.set_defaults(func=cmd_score)

    sp = sub.add_parser("triage", parents=[common], help="rank candidates for review")
    sp.add_argument("--budget", type=float, help="review budget as a fraction")
    sp.set_defaults(func=cmd_triage)

    sp = sub.add_parser("calibrate", parents=[common], help="pick the auto-accept threshold")
    sp.add_argument("--target-error", type=float, dest="target_error")
    sp.add_argument("--sample-size", type=int, dest="sample_size")
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("orphan-link", parents=[common], help="auto-merge small orphan bodies")
    sp.add_argument("--tau", type=float, help="accept threshold; overrides calibration.json")
    sp.add_argument("--weight-min", type=int, dest="weight_min")
    sp.add_argument("--weight-max", type=int, dest="weight_max")
    sp.add_argument("--passes", type=int)
    sp.add_argument("--model", help="model bundle for the decision fingerprint")
    sp.set_defaults(func=cmd_orphan_link)

    sp = sub.add_parser("eval", parents=[common], help="write PR, effort-value and review reports")
    sp.add_argument("--assessments", help="review assessments JSONL for the precision report")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("serve", parents=[common], help="run the review HTTP service")
    sp.add_argument("--port", type=int, help="listen port (default 7700)")
    sp.add_argument("--host", help="bind address")
    sp.add_argument("--model", help="model bundle for filling in scores")
    sp.add_argument("--console-dir", dest="console_dir", help="static console files to serve at /")
    sp.set_defaults(func=cmd_serve)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _load_config(args)
        return args.func(cfg, args)
    except CliError as e:
        sys.stderr.write(json.dumps({"error": e.code, "message": str(e)}) + "\n")
        return 1
    except tuple(cls for cls, _ in _ERROR_CODES[1:]) as e:
        code = next(code for cls, code in _ERROR_CODES[1:] if isinstance(e, cls))
        sys.stderr.write(json.dumps({"error": code, "message": str(e)}) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
