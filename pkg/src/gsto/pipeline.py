"""Stage functions behind the CLI: each reads declared inputs, writes declared artifacts.

Every stage validates its inputs before doing any work, writes artifacts via a
temporary file plus rename, and leaves a manifest in ``out_dir`` echoing the
resolved configuration.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import os
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .config import PATH_KEYS, RunConfig
from .data import (
    PAD,
    build_splits,
    emit_pair_labels,
    generate_synthetic,
    generator_config_dict,
    read_corpus,
    read_pairs,
    read_world,
    user_histories,
    write_corpus,
    write_pairs,
    write_world,
)
from .errors import ContractViolation, MissingInputError
from .evaluation import evaluate, evaluate_cb, intention_prior, mad_diagnostic
from .model import GSTO, ModelConfig, load_checkpoint, regularize_tables, save_checkpoint
from .numerics import Tensor, finite_diff_check
from .objective import HistoryIndex, PositivityMonitor, batch_loss, fit, make_batch
from .relation_graph import (
    RelationGraph,
    build_graph,
    file_hash,
    identity_graph,
    normalize_adjacency,
    oracle_graph,
    read_graph,
    recovery_fraction,
    train_relation_model,
    write_graph,
)

log = logging.getLogger(__name__)


class ArtifactMismatch(ContractViolation):
    """An input artifact was produced under different settings than requested."""


# ---------------------------------------------------------------- plumbing


def require(*paths: Path):
    missing = [str(p) for p in paths if not Path(p).is_file()]
    if missing:
        raise MissingInputError("missing input: " + ", ".join(missing))


@contextmanager
def atomic(path: Path):
    """Yield a temporary sibling path; rename it over ``path`` only on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def write_json(path: Path, payload: dict):
    with atomic(path) as tmp:
        tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def write_manifest(cfg: RunConfig, command: str, inputs, outputs, extra=None) -> Path:
    manifest = {
        "command": command,
        "version": __version__,
        "seed": cfg.seed,
        "config_hash": cfg.hash(),
        "config": cfg.to_dict(),
        "inputs": {str(p): file_hash(p) for p in inputs},
        "outputs": {str(p): file_hash(p) for p in outputs},
    }
    manifest.update(extra or {})
    path = Path(cfg.out_dir) / f"manifest-{command}.json"
    write_json(path, manifest)
    return path


def _header(cfg: RunConfig, stage: str, **extra) -> dict:
    return {"stage": stage, "config_hash": cfg.hash(), "seed": cfg.seed, **extra}


def num_intentions_of(header: dict, events) -> int:
    gen = header.get("generator") or {}
    if "num_intentions" in gen:
        return int(gen["num_intentions"])
    return max(e.intention for e in events)


# ---------------------------------------------------------------- stages


def gen_data(cfg: RunConfig) -> dict:
    gen = cfg.generator()
    events, world = generate_synthetic(gen)
    pairs = emit_pair_labels(world, events, neg_ratio=cfg.neg_ratio, seed=cfg.seed)
    header = _header(cfg, "gen-data", generator=generator_config_dict(gen))
    paths = {k: cfg.path(k) for k in ("corpus_path", "world_path", "pairs_path")}
    with atomic(paths["corpus_path"]) as tmp:
        write_corpus(tmp, events, header)
    with atomic(paths["world_path"]) as tmp:
        write_world(tmp, world, header)
    with atomic(paths["pairs_path"]) as tmp:
        write_pairs(tmp, pairs, header)
    write_manifest(cfg, "gen-data", [], paths.values(),
                   {"events": len(events), "pairs": len(pairs), "relations": len(world.relations)})
    return {"events": len(events), "pairs": len(pairs), "paths": paths}


def graph_from_config(cfg: RunConfig, world, pairs_path: Path | None):
    mode = cfg.graph_mode
    M = world.num_intentions
    if mode == "identity":
        return identity_graph(M), {}
    if mode == "oracle":
        return oracle_graph(world), {}
    model, history = train_relation_model(read_pairs(pairs_path), M, cfg.relation())
    graph = build_graph(model, cfg.k)
    info = {
        "relation_loss_initial": history[0],
        "relation_loss_final": history[-1],
        "recovery_fraction": recovery_fraction(graph, world.relations),
    }
    return graph, info


def build_graph_stage(cfg: RunConfig) -> dict:
    world_path, pairs_path = cfg.path("world_path"), cfg.path("pairs_path")
    require(world_path, *([pairs_path] if cfg.graph_mode == "trained" else []))
    world = read_world(world_path)
    graph, info = graph_from_config(cfg, world, pairs_path)
    out = cfg.path("graph_path")
    with atomic(out) as tmp:
        write_graph(tmp, graph, _header(cfg, "build-graph", **info))
    inputs = [world_path] + ([pairs_path] if cfg.graph_mode == "trained" else [])
    write_manifest(cfg, "build-graph", inputs, [out], {"edges": len(graph.edges), **info})
    return {"edges": len(graph.edges), "path": out, **info}


def load_graph_checked(path: Path, num_intentions: int) -> tuple[RelationGraph, str]:
    graph, header = read_graph(path)
    if graph.num_nodes != num_intentions:
        raise ArtifactMismatch(f"graph has {graph.num_nodes} nodes, corpus has {num_intentions} intentions")
    return graph, file_hash(path)


def _load_corpus(cfg: RunConfig):
    events, header = read_corpus(cfg.path("corpus_path"))
    if not events:
        raise ContractViolation("corpus is empty")
    M = num_intentions_of(header, events)
    splits = build_splits(events, cfg.scenario, max_len=cfg.max_len, seed=cfg.seed)
    return events, M, splits


def train_stage(cfg: RunConfig) -> dict:
    corpus_path, graph_path = cfg.path("corpus_path"), cfg.path("graph_path")
    use_graph = cfg.effective_graph_mode != "identity"
    require(corpus_path, *([graph_path] if use_graph else []))
    events, M, splits = _load_corpus(cfg)
    histories = user_histories(events)
    adjacency, graph_hash = None, "identity"
    if use_graph:
        graph, graph_hash = load_graph_checked(graph_path, M)
        adjacency = None if graph.is_identity else graph.normalized
    model = GSTO(cfg.model(M))
    tcfg = cfg.train()
    monitor = PositivityMonitor()
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def val_fn(m):
        return evaluate(m, splits.val, adjacency, histories, cfg.seed, "val").metrics["ndcg@10"]

    log_path = out_dir / "train_log.csv"
    header = _header(cfg, "train", graph_hash=graph_hash)
    with atomic(log_path) as tmp:
        result = fit(model, splits.train, adjacency, HistoryIndex(histories, M), tcfg, val_fn,
                     tmp, header, monitor, out_dir)
    model.load_state_dict(result.best_state)
    meta = {
        **header,
        "best_epoch": result.best_epoch,
        "best_val_ndcg10": result.best_val_ndcg,
        "positivity_checks": monitor.checks,
        "positivity_violations": monitor.violations,
        "scenario": cfg.scenario,
    }
    ckpt = cfg.path("checkpoint_path")
    with atomic(ckpt) as tmp:
        save_checkpoint(tmp, model, meta)
    inputs = [corpus_path] + ([graph_path] if use_graph else [])
    write_manifest(cfg, "train", inputs, [ckpt, log_path], {"splits": splits.manifest(), "meta": meta})
    return {"checkpoint": ckpt, "meta": meta, "history": result.history, "val_history": result.val_history}


def eval_stage(cfg: RunConfig) -> dict:
    corpus_path, ckpt_path, graph_path = (cfg.path(k) for k in ("corpus_path", "checkpoint_path", "graph_path"))
    needs = [corpus_path]
    meta = {}
    if cfg.method == "gsto":
        needs.append(ckpt_path)
        require(*needs)
        _, meta = load_checkpoint(ckpt_path)
        if meta.get("graph_hash", "identity") != "identity":
            needs.append(graph_path)
    require(*needs)
    events, M, splits = _load_corpus(cfg)
    histories = user_histories(events)
    seqs = splits.get(cfg.split)
    if cfg.method == "cb":
        report = evaluate_cb(intention_prior(splits.train), seqs, histories, M, cfg.seed, cfg.split)
        graph_hash = None
    else:
        model, meta = load_checkpoint(ckpt_path)
        if model.cfg.num_intentions != M:
            raise ArtifactMismatch(f"checkpoint covers {model.cfg.num_intentions} intentions, corpus has {M}")
        graph_hash = meta.get("graph_hash", "identity")
        adjacency = None
        if graph_hash != "identity":
            graph, actual = load_graph_checked(graph_path, M)
            if actual != graph_hash:
                raise ArtifactMismatch(
                    f"checkpoint was trained on graph {graph_hash[:12]}, {graph_path} is {actual[:12]}"
                )
            adjacency = None if graph.is_identity else graph.normalized
        report = evaluate(model, seqs, adjacency, histories, cfg.seed, cfg.split)
    payload = report.to_dict()
    payload["config_hash"] = cfg.hash()
    payload["config"] = {k: v for k, v in cfg.to_dict().items() if k not in PATH_KEYS}
    payload["scenario"] = cfg.scenario
    payload["ablate"] = cfg.ablate or None
    if graph_hash is not None:
        payload["graph_hash"] = graph_hash
    out = cfg.path("report_path")
    write_json(out, payload)
    outputs = [out]
    if cfg.per_user_csv:
        per_user = out.with_name(out.stem + "_per_user.csv")
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["user", "key", "label", "rank"])
        for s, r in zip(seqs, report.ranks):
            w.writerow([s.user, s.key, s.label, r])
        with atomic(per_user) as tmp:
            tmp.write_text(f"# {json.dumps({'config_hash': cfg.hash()})}\n" + buf.getvalue())
        outputs.append(per_user)
    write_manifest(cfg, "eval", needs, outputs)
    return payload


# ---------------------------------------------------------------- diagnostics


def toy_problem(seed: int = 0, M: int = 6, d: int = 4, L: int = 5):
    """A tiny full model, batch and graph for checking the complete training loss."""
    rng = np.random.default_rng(seed)
    model = GSTO(ModelConfig(num_intentions=M, dim=d, max_len=L, gcn_layers=1, blocks=1, init_scale=0.5, seed=seed))
    # move every parameter off its symmetric initial value
    for p in model.param_list():
        p.data = p.data + rng.normal(0.0, 0.3, p.shape)
    A = np.eye(M)
    for i in range(M):
        for j in range(i + 1, M):
            if rng.random() < 0.4:
                A[i, j] = A[j, i] = rng.uniform(0.2, 1.0)
    adjacency = normalize_adjacency(A)
    ids = np.array([[0, 1, 3, 2, 5], [4, 6, 1, 2, 3], [0, 0, 2, 6, 1]])
    targets = np.array([[0, 3, 2, 5, 4], [6, 1, 2, 3, 5], [0, 0, 6, 1, 0]])
    negs = np.where(targets[..., None] != PAD, rng.integers(1, M + 1, size=targets.shape + (2,)), 1)
    drop_seed = int(rng.integers(2**31))

    def loss_fn():
        # a fresh generator per call keeps the dropout mask fixed across evaluations
        return batch_loss(model, adjacency, ids, targets, negs, True, np.random.default_rng(drop_seed))

    return model, loss_fn


def gradcheck(seed: int = 0, num_coords: int = 200, tol: float = 1e-4):
    model, loss_fn = toy_problem(seed)
    params = model.param_list()
    total = sum(p.size for p in params)
    return finite_diff_check(loss_fn, params, h=1e-5, tol=tol, num_coords=min(num_coords, total), seed=seed)


def gradcheck_stage(cfg: RunConfig) -> dict:
    res = gradcheck(cfg.seed, cfg.gradcheck_coords)
    payload = {
        "config_hash": cfg.hash(),
        "passed": bool(res.passed),
        "max_rel_error": res.max_rel_error,
        "num_checked": res.num_checked,
        "tolerance": 1e-4,
    }
    out = Path(cfg.out_dir) / "gradcheck.json"
    write_json(out, payload)
    write_manifest(cfg, "gradcheck", [], [out])
    return payload


def mad_by_depth(model: GSTO, adjacency: np.ndarray, depths=(1, 2)) -> dict[int, float]:
    """MAD of the regularized ``[mean | raw covariance]`` table at each GCN depth.

    Layers beyond the trained ones reuse the trained tables with an identity
    weight, so deeper outputs differ only by extra propagation.
    """
    T_mu = model.params["T_mu"]
    T_sigma = model.params.get("T_sigma")
    if T_sigma is None:
        T_sigma = Tensor(np.zeros_like(T_mu.data))
    trained = model.gcn_weights()
    eye = Tensor(np.eye(2 * model.cfg.dim))
    out = {}
    for depth in depths:
        weights = [trained[l] if l < len(trained) else eye for l in range(depth)]
        mu, sigma = regularize_tables(T_mu, T_sigma, adjacency, weights, model.cfg.gcn_activation)
        out[depth] = mad_diagnostic(np.concatenate([mu.data, sigma.data], axis=1))
    return out


def mad_stage(cfg: RunConfig) -> dict:
    ckpt_path, graph_path = cfg.path("checkpoint_path"), cfg.path("graph_path")
    require(ckpt_path, graph_path)
    model, meta = load_checkpoint(ckpt_path)
    graph, actual = load_graph_checked(graph_path, model.cfg.num_intentions)
    expected = meta.get("graph_hash", "identity")
    if expected not in ("identity", actual):
        raise ArtifactMismatch(f"checkpoint was trained on graph {expected[:12]}, {graph_path} is {actual[:12]}")
    values = mad_by_depth(model, graph.normalized)
    out = Path(cfg.out_dir) / "mad.csv"
    with atomic(out) as tmp:
        with open(tmp, "w", newline="") as f:
            f.write(f"# {json.dumps({'config_hash': cfg.hash(), 'graph_hash': actual}, sort_keys=True)}\n")
            w = csv.writer(f)
            w.writerow(["gcn_layers", "mad"])
            for depth, v in values.items():
                w.writerow([depth, repr(v)])
    write_manifest(cfg, "mad", [ckpt_path, graph_path], [out])
    return {"mad": values, "path": out}
