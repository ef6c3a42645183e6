"""Complementary-relation embeddings and the intention relation graph.

A pair model learns, per intention, an embedding and a complementary
embedding from co-purchase style labels with a margin hinge loss. Edge
scores are cosines between one intention's complementary embedding and
another's embedding; the top-k scores per node become a sparse undirected
graph with self-loops, normalized as ``D^-1/2 A D^-1/2``.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractViolation
from .numerics import Adam, Tensor, forward_backward

log = logging.getLogger(__name__)


@dataclass
class RelationConfig:
    dim: int = 32
    base_distance: float = 2.0  # lambda
    margin: float = 1.0  # epsilon
    lr: float = 1e-2
    epochs: int = 100
    batch_size: int = 512
    init_scale: float = 0.1
    seed: int = 0


class RelationModel:
    def __init__(self, num_intentions: int, cfg: RelationConfig | None = None):
        cfg = cfg or RelationConfig()
        rng = np.random.default_rng(cfg.seed)
        d = cfg.dim
        self.cfg = cfg
        self.num_intentions = num_intentions
        # row r holds intention id r + 1
        self.phi = Tensor(rng.normal(0.0, cfg.init_scale, (num_intentions, d)), True, "phi")
        self.phi_c = Tensor(rng.normal(0.0, cfg.init_scale, (num_intentions, d)), True, "phi_c")
        # identity start keeps the transformed embedding aligned with phi, which is
        # what makes the cosine edge score between phi_c and phi meaningful
        self.W1 = Tensor(np.eye(d), True, "W1")
        self.b1 = Tensor(np.zeros(d), True, "b1")
        self.W2 = Tensor(np.eye(d), True, "W2")
        self.b2 = Tensor(np.zeros(d), True, "b2")

    @property
    def params(self):
        return [self.phi, self.phi_c, self.W1, self.b1, self.W2, self.b2]

    def transform(self, phi_rows: Tensor) -> Tensor:
        return transform_embedding(phi_rows, self.W1, self.b1, self.W2, self.b2)

    def pair_losses(self, i_ids, j_ids, y) -> Tensor:
        gamma = self.transform(nx.take(self.phi, np.asarray(i_ids) - 1))
        comp = nx.take(self.phi_c, np.asarray(j_ids) - 1)
        return pair_hinge_loss(gamma, comp, y, self.cfg.base_distance, self.cfg.margin)

    def squared_distances(self, i_ids, j_ids) -> np.ndarray:
        gamma = self.transform(Tensor(self.phi.data[np.asarray(i_ids) - 1])).data
        return ((gamma - self.phi_c.data[np.asarray(j_ids) - 1]) ** 2).sum(axis=-1)


def transform_embedding(phi: Tensor, W1: Tensor, b1: Tensor, W2: Tensor, b2: Tensor) -> Tensor:
    """Two-layer FFN: ``relu(phi W1 + b1) W2 + b2``."""
    return nx.add_bias(nx.matmul(nx.relu(nx.add_bias(nx.matmul(phi, W1), b1)), W2), b2)


def pair_hinge_loss(gamma: Tensor, comp: Tensor, y, base_distance: float, margin: float) -> Tensor:
    """Per-pair ``max(0, margin - y (base_distance - ||gamma - comp||^2))``."""
    y = np.asarray(y, dtype=np.float64)
    if not np.isin(y, (-1.0, 1.0)).all():
        raise ContractViolation("pair labels must be +1 or -1")
    sq = nx.sum_(nx.square(nx.sub(gamma, comp)), axis=-1)
    base = Tensor(np.full(sq.shape, base_distance))
    signed = nx.mul(nx.sub(base, sq), Tensor(np.broadcast_to(y, sq.shape)))
    return nx.relu(nx.sub(Tensor(np.full(sq.shape, margin)), signed))


def train_relation_model(pairs, num_intentions: int, cfg: RelationConfig | None = None):
    """Minimize the mean hinge loss with Adam; returns (model, per-epoch mean losses).

    The first history entry is the loss at initialization.
    """
    cfg = cfg or RelationConfig()
    model = RelationModel(num_intentions, cfg)
    arr = np.asarray(pairs, dtype=np.int64).reshape(-1, 3)
    if len(arr) == 0:
        raise ContractViolation("no pair labels to train on")
    if len(np.unique(arr[:, 2])) < 2:
        log.warning("pair labels contain a single class; training anyway")
    opt = Adam(model.params, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed + 1)

    def mean_loss(rows):
        return nx.mean(model.pair_losses(rows[:, 0], rows[:, 1], rows[:, 2]))

    history = [mean_loss(arr).item()]
    for _ in range(cfg.epochs):
        order = rng.permutation(len(arr))
        for start in range(0, len(arr), cfg.batch_size):
            rows = arr[order[start : start + cfg.batch_size]]
            _, grads = forward_backward(lambda: mean_loss(rows), model.params)
            opt.step(grads)
        history.append(mean_loss(arr).item())
    return model, history


def edge_weight(comp_i, phi_j) -> float:
    """Cosine between intention i's complementary embedding and j's embedding."""
    a, b = np.asarray(comp_i, dtype=np.float64), np.asarray(phi_j, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ContractViolation("edge_weight needs nonzero vectors")
    return float(a @ b / (na * nb))


def edge_weight_matrix(phi_c: np.ndarray, phi: np.ndarray) -> np.ndarray:
    nc = np.linalg.norm(phi_c, axis=1, keepdims=True)
    npn = np.linalg.norm(phi, axis=1, keepdims=True)
    if (nc == 0).any() or (npn == 0).any():
        raise ContractViolation("edge_weight needs nonzero vectors")
    return (phi_c / nc) @ (phi / npn).T


# ---------------------------------------------------------------- graph


def normalize_adjacency(A: np.ndarray) -> np.ndarray:
    deg = A.sum(axis=1)
    if (deg <= 0).any():
        raise ContractViolation("every node needs positive degree")
    inv = 1.0 / np.sqrt(deg)
    return inv[:, None] * A * inv[None, :]


@dataclass
class RelationGraph:
    num_nodes: int
    edges: list[tuple[int, int, float]]  # intention ids, i < j, self-loops implied
    k: int = 0
    mode: str = "trained"
    symmetrization: str = "max"
    adjacency: np.ndarray = field(init=False, repr=False)
    normalized: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        A = np.eye(self.num_nodes)
        for i, j, w in self.edges:
            if i == j or not (1 <= i <= self.num_nodes and 1 <= j <= self.num_nodes):
                raise ContractViolation(f"bad edge ({i}, {j})")
            A[i - 1, j - 1] = A[j - 1, i - 1] = w
        self.adjacency = A
        self.normalized = normalize_adjacency(A)

    @property
    def is_identity(self) -> bool:
        return self.mode == "identity"

    def edge_set(self) -> set[tuple[int, int]]:
        return {(i, j) for i, j, w in self.edges if w > 0}


def build_graph(model: RelationModel, k: int = 10) -> RelationGraph:
    """Top-k cosine neighbours per node, negatives clipped, symmetrized by max."""
    M = model.num_intentions
    if not 1 <= k < M:
        raise ConfigError(f"k must be in [1, {M - 1}], got {k}")
    scores = edge_weight_matrix(model.phi_c.data, model.phi.data)
    np.fill_diagonal(scores, -np.inf)
    # stable sort: ties resolved by lower id
    top = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    W = np.zeros((M, M))
    rows = np.repeat(np.arange(M), k)
    W[rows, top.ravel()] = np.clip(scores[rows, top.ravel()], 0.0, None)
    W = np.maximum(W, W.T)
    iu, ju = np.nonzero(np.triu(W, 1))
    edges = [(int(i) + 1, int(j) + 1, float(W[i, j])) for i, j in zip(iu, ju)]
    return RelationGraph(M, edges, k=k, mode="trained")


def oracle_graph(world) -> RelationGraph:
    edges = [(a, b, 1.0) for a, b in sorted(world.relations)]
    return RelationGraph(world.num_intentions, edges, k=0, mode="oracle")


def identity_graph(num_nodes: int) -> RelationGraph:
    return RelationGraph(num_nodes, [], k=0, mode="identity")


def recovery_fraction(graph: RelationGraph, relations) -> float:
    if not relations:
        return 1.0
    found = graph.edge_set()
    return sum(1 for p in relations if tuple(p) in found) / len(relations)


# ---------------------------------------------------------------- file format


def write_graph(path, graph: RelationGraph, extra_header: dict | None = None) -> None:
    header = {
        "M": graph.num_nodes,
        "k": graph.k,
        "mode": graph.mode,
        "symmetrization": graph.symmetrization,
        "self_loops": 1.0,
    }
    header.update(extra_header or {})
    with open(path, "w") as f:
        f.write("# " + json.dumps(header, sort_keys=True) + "\n")
        for i, j, w in graph.edges:
            f.write(f"{i}\t{j}\t{w!r}\n")


def read_graph(path) -> tuple[RelationGraph, dict]:
    header, edges = None, []
    with open(path) as f:
        for line in f:
            if line.startswith("#"):
                header = json.loads(line[1:])
                continue
            if line.strip():
                i, j, w = line.split("\t")
                edges.append((int(i), int(j), float(w)))
    if header is None:
        raise ContractViolation(f"{path}: missing graph header")
    g = RelationGraph(header["M"], edges, k=header["k"], mode=header["mode"])
    g.symmetrization = header.get("symmetrization", "max")
    return g, header


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        h.update(f.read())
    return h.hexdigest()
