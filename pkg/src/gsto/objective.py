"""Wasserstein distance, the BPR-over-distances loss, and the training loop."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .data import PAD, LabeledSequence
from .errors import ConfigError, ContractViolation, NonFiniteError, TrainingDiverged
from .model import GSTO, GaussianEmbedding, pad_left
from .numerics import Adam, Tensor, forward_backward

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 128
    max_epochs: int = 50
    negatives_per_position: int = 1
    seed: int = 0
    disable_graph_regularizer: bool = False
    deterministic_embeddings: bool = False
    eval_every: int = 1

    def validate(self):
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.batch_size < 1 or self.negatives_per_position < 1:
            raise ConfigError("batch_size and negatives_per_position must be >= 1")


# ---------------------------------------------------------------- distance and loss


def wasserstein_sq(a: GaussianEmbedding, b: GaussianEmbedding) -> float:
    """Squared 2-Wasserstein distance between diagonal Gaussians.

    ``||mu_a - mu_b||^2 + sum_k (sqrt(var_a,k) - sqrt(var_b,k))^2``; exact for
    diagonal covariances because the matrix square roots commute.
    """
    va, vb = np.asarray(a.cov_diag, float), np.asarray(b.cov_diag, float)
    if (va <= 0).any() or (vb <= 0).any():
        raise ContractViolation("wasserstein_sq needs strictly positive variances")
    dm = np.asarray(a.mean, float) - np.asarray(b.mean, float)
    ds = np.sqrt(va) - np.sqrt(vb)
    return float(dm @ dm + ds @ ds)


def wasserstein_sq_tensor(mu_a: Tensor, var_a, mu_b: Tensor, var_b) -> Tensor:
    """Batched version over the last axis. ``var_*`` None means point embeddings."""
    d = nx.sum_(nx.square(nx.sub(mu_a, mu_b)), axis=-1)
    if var_a is None:
        return d
    return nx.add(d, nx.sum_(nx.square(nx.sub(nx.sqrt(var_a), nx.sqrt(var_b))), axis=-1))


def wasserstein_sq_numpy(mu_a, var_a, mu_b, var_b) -> np.ndarray:
    d = ((mu_a - mu_b) ** 2).sum(axis=-1)
    if var_a is None:
        return d
    return d + ((np.sqrt(var_a) - np.sqrt(var_b)) ** 2).sum(axis=-1)


def bpr_wasserstein_loss(d_pos: Tensor, d_neg: Tensor) -> Tensor:
    """Elementwise ``-log sigmoid(d_neg - d_pos)``: small when the positive is closer."""
    return nx.scale(nx.log_sigmoid(nx.sub(d_neg, d_pos)), -1.0)


# ---------------------------------------------------------------- negatives


def sample_negatives(history, num_intentions: int, count: int, rng) -> np.ndarray:
    """Uniform draw without replacement from ids the user never interacted with."""
    hist = np.zeros(num_intentions + 1, dtype=bool)
    hist[list(history)] = True
    pool = np.flatnonzero(~hist[1:]) + 1
    if len(pool) < count:
        raise ContractViolation(f"only {len(pool)} eligible negatives for {count} requested")
    return np.sort(rng.choice(pool, size=count, replace=False))


class HistoryIndex:
    """Boolean user x intention matrix for vectorized negative sampling."""

    def __init__(self, histories: dict[int, set[int]], num_intentions: int):
        self.users = sorted(histories)
        self.row = {u: r for r, u in enumerate(self.users)}
        self.num_intentions = num_intentions
        self.matrix = np.zeros((len(self.users), num_intentions + 1), dtype=bool)
        for u, items in histories.items():
            self.matrix[self.row[u], list(items)] = True
        self.matrix[:, PAD] = True
        self.histories = histories

    def sample(self, users, shape, rng) -> np.ndarray:
        """Negatives of ``shape[1:]`` per user (with replacement across positions)."""
        rows = np.array([self.row[u] for u in users])
        out = rng.integers(1, self.num_intentions + 1, size=shape)
        rr = np.broadcast_to(rows.reshape((-1,) + (1,) * (len(shape) - 1)), shape)
        bad = self.matrix[rr, out]
        while bad.any():
            out[bad] = rng.integers(1, self.num_intentions + 1, size=int(bad.sum()))
            bad = self.matrix[rr, out]
        return out


# ---------------------------------------------------------------- training


@dataclass
class PositivityMonitor:
    """Counts covariance entries fed to the distance and any that are not > 0."""

    checks: int = 0
    violations: int = 0
    min_seen: float = float("inf")

    def observe(self, var: np.ndarray | None):
        if var is None:
            return
        self.checks += var.size
        self.violations += int((var <= 0).sum())
        self.min_seen = min(self.min_seen, float(var.min()))


def batch_loss(model: GSTO, adjacency, ids, targets, negs, training=False, rng=None, monitor=None) -> Tensor:
    """Mean BPR-Wasserstein loss over positions with a target, for one batch."""
    tables = model.regularized_tables(adjacency)
    mean, var, _ = model.encode(ids, tables, training=training, rng=rng)
    weight = (targets != PAD).astype(np.float64)
    n_pos = weight.sum()
    if n_pos == 0:
        raise ContractViolation("batch has no target positions")
    live = targets != PAD

    def guard(v):
        # a variance that overflowed or underflowed to 0 means training broke down
        if v is None:
            return
        if monitor is not None:
            monitor.observe(v.data[live])
        if not (np.isfinite(v.data).all() and (v.data > 0).all()):
            raise NonFiniteError("covariance left the open interval (0, inf)")

    pos_mu, pos_var = model.target_gaussians(tables, targets)
    guard(var)
    guard(pos_var)
    d_pos = wasserstein_sq_tensor(mean, var, pos_mu, pos_var)
    total = None
    k = negs.shape[-1]
    for j in range(k):
        neg_mu, neg_var = model.target_gaussians(tables, negs[..., j])
        guard(neg_var)
        per = bpr_wasserstein_loss(d_pos, wasserstein_sq_tensor(mean, var, neg_mu, neg_var))
        term = nx.sum_(nx.mul(per, Tensor(weight)))
        total = term if total is None else nx.add(total, term)
    return nx.scale(total, 1.0 / (n_pos * k))


def make_batch(seqs: list[LabeledSequence], max_len: int):
    ids = pad_left([s.inputs for s in seqs], max_len, tight=True)
    targets = pad_left([s.targets for s in seqs], max_len, tight=True)
    # pad_left aligns both on the right edge; inputs and targets share length
    return ids, targets


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    grad_norm: float
    seconds: float


def train_epoch(
    model: GSTO,
    opt: Adam,
    train_seqs: list[LabeledSequence],
    adjacency,
    history: HistoryIndex,
    cfg: TrainConfig,
    epoch: int,
    monitor: PositivityMonitor | None = None,
    dump_dir=None,
) -> EpochStats:
    """One pass over the training sequences with one Adam step per batch.

    Batch order, negatives and dropout all derive from ``(seed, epoch)``.
    """
    start = time.perf_counter()
    rng = np.random.default_rng([cfg.seed, epoch])
    seqs = [s for s in train_seqs if any(t != PAD for t in s.targets)]
    order = rng.permutation(len(seqs))
    params = model.param_list()
    losses, weights, norms = [], [], []
    for b0 in range(0, len(seqs), cfg.batch_size):
        batch = [seqs[i] for i in order[b0 : b0 + cfg.batch_size]]
        ids, targets = make_batch(batch, model.cfg.max_len)
        negs = history.sample([s.user for s in batch], targets.shape + (cfg.negatives_per_position,), rng)
        try:
            # overflow surfaces as NonFiniteError; numpy warnings would only duplicate it
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = forward_backward(
                    lambda: batch_loss(model, adjacency, ids, targets, negs, True, rng, monitor), params
                )
        except NonFiniteError as exc:
            dump = _dump_batch(dump_dir, epoch, b0, ids, targets, negs)
            raise TrainingDiverged(f"non-finite value in epoch {epoch}: {exc}", dump) from exc
        opt.step(grads)
        n = float((targets != PAD).sum())
        losses.append(loss * n)
        weights.append(n)
        norms.append(float(np.sqrt(sum((g * g).sum() for g in grads))))
    return EpochStats(epoch, sum(losses) / max(sum(weights), 1.0), float(np.mean(norms)) if norms else 0.0,
                      time.perf_counter() - start)


def _dump_batch(dump_dir, epoch, offset, ids, targets, negs):
    if dump_dir is None:
        return None
    path = Path(dump_dir) / f"diverged_epoch{epoch}_batch{offset}.json"
    path.write_text(json.dumps({"ids": ids.tolist(), "targets": targets.tolist(), "negatives": negs.tolist()}))
    return str(path)


@dataclass
class FitResult:
    best_state: dict
    best_epoch: int
    best_val_ndcg: float
    history: list = field(default_factory=list)
    val_history: list = field(default_factory=list)


def fit(
    model: GSTO,
    train_seqs,
    adjacency,
    history: HistoryIndex,
    cfg: TrainConfig,
    val_fn=None,
    log_path=None,
    log_header: dict | None = None,
    monitor: PositivityMonitor | None = None,
    dump_dir=None,
) -> FitResult:
    """Train for ``max_epochs``; keep the parameters with the best VAL NDCG@10.

    ``val_fn(model) -> float`` scores the current parameters. Without it the
    final parameters are kept.
    """
    cfg.validate()
    opt = Adam(model.param_list(), lr=cfg.learning_rate)
    result = FitResult(model.state_dict(), -1, float("-inf"))
    writer, fh = None, None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        if log_header is not None:
            fh.write("# " + json.dumps(log_header, sort_keys=True) + "\n")
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_loss", "grad_norm", "seconds"])
    try:
        for epoch in range(cfg.max_epochs):
            stats = train_epoch(model, opt, train_seqs, adjacency, history, cfg, epoch, monitor, dump_dir)
            result.history.append(stats)
            if writer:
                writer.writerow([epoch, repr(stats.mean_loss), repr(stats.grad_norm), f"{stats.seconds:.3f}"])
                fh.flush()
            log.info("epoch %d loss %.5f grad %.4f (%.1fs)", epoch, stats.mean_loss, stats.grad_norm, stats.seconds)
            if val_fn is not None and ((epoch + 1) % cfg.eval_every == 0 or epoch == cfg.max_epochs - 1):
                score = val_fn(model)
                result.val_history.append((epoch, score))
                if score > result.best_val_ndcg:
                    result.best_val_ndcg, result.best_epoch = score, epoch
                    result.best_state = model.state_dict()
        if val_fn is None:
            result.best_state, result.best_epoch = model.state_dict(), cfg.max_epochs - 1
    finally:
        if fh:
            fh.close()
    return result
