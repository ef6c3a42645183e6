"""Ranking metrics under the 101-candidate protocol, the count-based baseline, and MAD."""
from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .data import LabeledSequence
from .errors import ContractViolation
from .model import GSTO, covariance_activation, pad_left
from .objective import wasserstein_sq_numpy

log = logging.getLogger(__name__)

CUTOFFS = (1, 2, 5, 10)
METRICS = ("hit@1", "hit@2", "hit@5", "hit@10", "ndcg@10")
NUM_NEGATIVES = 100


def hit_at_k(rank: int, k: int) -> int:
    if rank < 1:
        raise ContractViolation("rank is 1-based")
    return int(rank <= k)


def ndcg_at_10(rank: int) -> float:
    if rank < 1:
        raise ContractViolation("rank is 1-based")
    return 1.0 / math.log2(rank + 1) if rank <= 10 else 0.0


def rank_of(ground_truth: int, candidates: np.ndarray, distances: np.ndarray) -> int:
    """1-based rank of ``ground_truth`` sorting by distance, ties by lower id."""
    candidates = np.asarray(candidates)
    distances = np.asarray(distances)
    hit = np.flatnonzero(candidates == ground_truth)
    if len(hit) != 1:
        raise ContractViolation("ground truth must appear exactly once among candidates")
    d = distances[hit[0]]
    closer = distances < d
    tied = (distances == d) & (candidates < ground_truth)
    return 1 + int(closer.sum()) + int(tied.sum())


def candidate_set(user: int, key: int, ground_truth: int, history, num_intentions: int, seed: int,
                  num_negatives: int = NUM_NEGATIVES):
    """Ground truth followed by up to ``num_negatives`` uniform unseen ids.

    The draw depends only on ``(seed, user, key)``. Returns (ids, shortfall).
    """
    if ground_truth not in history:
        history = set(history) | {ground_truth}
    seen = np.zeros(num_intentions + 1, dtype=bool)
    seen[list(history)] = True
    pool = np.flatnonzero(~seen[1:]) + 1
    n = min(num_negatives, len(pool))
    rng = np.random.default_rng([seed, user, key])
    negs = np.sort(rng.choice(pool, size=n, replace=False))
    return np.concatenate([[ground_truth], negs]).astype(np.int64), num_negatives - n


def rank_candidates(pref, ground_truth, history, tables, user=0, key=0, seed=0, num_negatives=NUM_NEGATIVES):
    """Rank of the ground truth among its candidate set for one preference Gaussian.

    ``tables`` is (mean rows, variance rows or None) indexed by id - 1.
    Returns (rank, shortfall).
    """
    mu_tab, var_tab = tables
    ids, shortfall = candidate_set(user, key, ground_truth, history, len(mu_tab), seed, num_negatives)
    var_p = None if var_tab is None else np.asarray(pref.cov_diag)[None]
    d = wasserstein_sq_numpy(np.asarray(pref.mean)[None], var_p, mu_tab[ids - 1],
                             None if var_tab is None else var_tab[ids - 1])
    return rank_of(ground_truth, ids, d), shortfall


@dataclass
class EvalReport:
    metrics: dict
    num_users: int
    seed: int
    split: str
    method: str = "gsto"
    shortfall: int = 0
    ranks: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        vals = [self.metrics[f"hit@{k}"] for k in CUTOFFS]
        if any(a > b for a, b in zip(vals, vals[1:])):
            raise ContractViolation("hit rates must be nested")
        if not all(0.0 <= v <= 1.0 for v in self.metrics.values()):
            raise ContractViolation("metrics must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "split": self.split,
            "seed": self.seed,
            "num_users": self.num_users,
            "candidate_shortfall": self.shortfall,
            "metrics": {m: self.metrics[m] for m in METRICS},
        }


def report_from_ranks(ranks, seed, split, method, shortfall=0) -> EvalReport:
    if not ranks:
        raise ContractViolation("cannot evaluate an empty split")
    n = len(ranks)
    metrics = {f"hit@{k}": sum(hit_at_k(r, k) for r in ranks) / n for k in CUTOFFS}
    metrics["ndcg@10"] = sum(ndcg_at_10(r) for r in ranks) / n
    return EvalReport(metrics, n, seed, split, method, shortfall, list(ranks))


def _check_nonempty(seqs):
    if not seqs:
        raise ContractViolation("cannot evaluate an empty split")
    for s in seqs:
        if not s.inputs:
            raise ContractViolation(f"sequence of user {s.user} has no inputs")


def evaluate(model: GSTO, seqs: list[LabeledSequence], adjacency, histories: dict, seed: int = 0,
             split: str = "test", batch_size: int = 256) -> EvalReport:
    """Rank each label among 100 unseen negatives using the last-position preference."""
    _check_nonempty(seqs)
    tables = model.regularized_tables(adjacency)
    mu_tab = tables[0].data
    var_tab = None
    if tables[1] is not None:
        var_tab = covariance_activation(tables[1]).data
    ranks, shortfall = [], 0
    L = model.cfg.max_len
    for b0 in range(0, len(seqs), batch_size):
        batch = seqs[b0 : b0 + batch_size]
        mean, var, _ = model.encode(pad_left([s.inputs for s in batch], L, tight=True), tables)
        p_mu = mean.data[:, -1]
        p_var = None if var is None else var.data[:, -1]
        for r, s in enumerate(batch):
            ids, short = candidate_set(s.user, s.key, s.label, histories.get(s.user, ()), len(mu_tab), seed)
            shortfall += short
            d = wasserstein_sq_numpy(
                p_mu[r][None], None if p_var is None else p_var[r][None],
                mu_tab[ids - 1], None if var_tab is None else var_tab[ids - 1],
            )
            ranks.append(rank_of(s.label, ids, d))
    return report_from_ranks(ranks, seed, split, "gsto", shortfall)


# ---------------------------------------------------------------- count-based baseline


def intention_prior(train_seqs: list[LabeledSequence]) -> Counter:
    counts = Counter()
    for s in train_seqs:
        counts.update(s.inputs)
    return counts


def cb_scores(prior: Counter, sequence: list[int], candidates) -> np.ndarray:
    """prior(m) * likelihood(m | sequence), both plain frequencies."""
    total = sum(prior.values()) or 1
    local = Counter(sequence)
    n = len(sequence) or 1
    return np.array([prior.get(int(m), 0) / total * local.get(int(m), 0) / n for m in candidates])


def cb_baseline(prior: Counter, sequence: list[int], candidates) -> list[int]:
    """Candidates ranked by posterior score, highest first, ties by lower id."""
    scores = cb_scores(prior, sequence, candidates)
    order = sorted(range(len(candidates)), key=lambda i: (-scores[i], int(candidates[i])))
    return [int(candidates[i]) for i in order]


def evaluate_cb(prior: Counter, seqs, histories, num_intentions, seed=0, split="test") -> EvalReport:
    _check_nonempty(seqs)
    ranks, shortfall = [], 0
    for s in seqs:
        ids, short = candidate_set(s.user, s.key, s.label, histories.get(s.user, ()), num_intentions, seed)
        shortfall += short
        # negate so that "smaller is better" matches rank_of
        ranks.append(rank_of(s.label, ids, -cb_scores(prior, s.inputs, ids)))
    return report_from_ranks(ranks, seed, split, "cb", shortfall)


# ---------------------------------------------------------------- smoothness


def mad_diagnostic(X: np.ndarray) -> float:
    """Mean over nodes of the average cosine distance to every other node."""
    X = np.asarray(X, dtype=np.float64)
    norms = np.linalg.norm(X, axis=1)
    keep = norms > 0
    if (~keep).any():
        log.warning("mad_diagnostic skipped %d zero rows", int((~keep).sum()))
    Xn = X[keep] / norms[keep, None]
    n = len(Xn)
    if n < 2:
        raise ContractViolation("mad_diagnostic needs at least two nonzero rows")
    dist = 1.0 - np.clip(Xn @ Xn.T, -1.0, 1.0)
    np.fill_diagonal(dist, 0.0)
    return float((dist.sum(axis=1) / (n - 1)).mean())
