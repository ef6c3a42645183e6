"""Stochastic embeddings, the graph regularizer, and the mean/covariance Transformers.

Every intention is a diagonal Gaussian: a mean row and a raw covariance row,
with the variance realized as ``elu(raw) + 1``. A GCN over the relation graph
smooths the concatenated ``[mean | raw covariance]`` table, sequences are
embedded by lookup plus positional rows, and two Transformers that share no
weights turn each prefix into a preference Gaussian.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .data import PAD, LabeledSequence
from .errors import ConfigError, ContractViolation
from .numerics import Tensor

GCN_ACTIVATIONS = ("linear", "elu", "relu")
CKPT_FORMAT = "gsto-checkpoint/1"


@dataclass
class ModelConfig:
    num_intentions: int
    dim: int = 64
    max_len: int = 50
    gcn_layers: int = 1
    gcn_activation: str = "linear"
    blocks: int = 2
    dropout: float = 0.2
    init_scale: float = 0.02
    deterministic: bool = False  # drop the covariance pathway entirely
    seed: int = 0

    def validate(self):
        if self.gcn_activation not in GCN_ACTIVATIONS:
            raise ConfigError(f"gcn_activation must be one of {GCN_ACTIVATIONS}")
        if self.dim < 1 or self.max_len < 1 or self.blocks < 1 or self.gcn_layers < 0:
            raise ConfigError("dim, max_len and blocks must be positive; gcn_layers >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")


@dataclass
class GaussianEmbedding:
    mean: np.ndarray
    cov_diag: np.ndarray

    def __post_init__(self):
        if (np.asarray(self.cov_diag) <= 0).any():
            raise ContractViolation("covariance diagonal must be strictly positive")


def covariance_activation(raw: Tensor) -> Tensor:
    return nx.elu_plus_one(raw)


def _xavier(rng, n_in, n_out):
    lim = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-lim, lim, (n_in, n_out))


class GSTO:
    """All trainable state. Parameters live in ``self.params`` keyed by name.

    Table row ``r`` holds intention id ``r + 1``; the padding id has no row and
    is masked wherever it appears.
    """

    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        M, d, L = cfg.num_intentions, cfg.dim, cfg.max_len
        p = {}
        p["T_mu"] = rng.normal(0.0, cfg.init_scale, (M, d))
        p["P_mu"] = rng.normal(0.0, cfg.init_scale, (L, d))
        if not cfg.deterministic:
            p["T_sigma"] = rng.normal(0.0, cfg.init_scale, (M, d))
            p["P_sigma"] = rng.normal(0.0, cfg.init_scale, (L, d))
        for layer in range(cfg.gcn_layers):
            p[f"gcn.{layer}.W"] = np.eye(2 * d)
        for br in self.branches:
            for b in range(cfg.blocks):
                pre = f"{br}.{b}."
                for name in ("Wq", "Wk", "Wv", "W1", "W2"):
                    p[pre + name] = _xavier(rng, d, d)
                p[pre + "b1"] = np.zeros(d)
                p[pre + "b2"] = np.zeros(d)
                for ln in ("ln1", "ln2"):
                    p[pre + ln + ".g"] = np.ones(d)
                    p[pre + ln + ".b"] = np.zeros(d)
        self.params = {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}

    @property
    def branches(self):
        return ("mu",) if self.cfg.deterministic else ("mu", "sigma")

    def param_list(self):
        return list(self.params.values())

    # ------------------------------------------------------------ regularizer

    def gcn_weights(self) -> list[Tensor]:
        return [self.params[f"gcn.{l}.W"] for l in range(self.cfg.gcn_layers)]

    def regularized_tables(self, adjacency: np.ndarray | None, layers: int | None = None):
        """Returns (T̂_mu, T̂_sigma_raw); T̂_sigma_raw is None in deterministic mode.

        ``adjacency`` None skips propagation altogether (no graph regularizer).
        """
        T_mu = self.params["T_mu"]
        if self.cfg.deterministic:
            T_sigma = Tensor(np.zeros_like(T_mu.data))
        else:
            T_sigma = self.params["T_sigma"]
        if adjacency is None:
            return T_mu, (None if self.cfg.deterministic else T_sigma)
        weights = self.gcn_weights()
        if layers is not None:
            weights = weights[:layers]
        out_mu, out_sigma = regularize_tables(T_mu, T_sigma, adjacency, weights, self.cfg.gcn_activation)
        return out_mu, (None if self.cfg.deterministic else out_sigma)

    # ------------------------------------------------------------ encoder

    def encode(self, ids: np.ndarray, tables, training: bool = False, rng=None):
        """Per-position preference Gaussians for a left-padded id batch ``(B, L)``.

        Returns (mean, variance or None, valid mask). Variance is already
        passed through ``elu + 1``.
        """
        ids = np.asarray(ids)
        if ids.ndim != 2 or ids.shape[1] > self.cfg.max_len:
            raise ContractViolation(f"ids must be (B, <= {self.cfg.max_len}), got {ids.shape}")
        if ids.size and (ids.min() < 0 or ids.max() > self.cfg.num_intentions):
            raise ContractViolation("intention id out of table range")
        valid = ids != PAD
        T_mu, T_sigma = tables
        drop = self.cfg.dropout if training else 0.0
        if drop and rng is None:
            raise ContractViolation("training with dropout needs an rng")

        out = {}
        for br, table in (("mu", T_mu), ("sigma", T_sigma)):
            if br not in self.branches:
                continue
            x = embed_sequence(ids, table, self.params[f"P_{br}"])
            for b in range(self.cfg.blocks):
                x = dual_attention_block(x, self.params, f"{br}.{b}.", valid, drop, rng)
            out[br] = x
        mean = out["mu"]
        var = covariance_activation(out["sigma"]) if "sigma" in out else None
        return mean, var, valid

    def target_gaussians(self, tables, ids: np.ndarray):
        """Regularized intention Gaussians for arbitrary ids (padding rows clipped)."""
        T_mu, T_sigma = tables
        rows = np.maximum(np.asarray(ids) - 1, 0)
        mu = nx.take(T_mu, rows)
        var = None if T_sigma is None else covariance_activation(nx.take(T_sigma, rows))
        return mu, var

    # ------------------------------------------------------------ persistence

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        missing = set(self.params) ^ set(state)
        if missing:
            raise ContractViolation(f"state mismatch on {sorted(missing)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ContractViolation(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)


def regularize_tables(T_mu: Tensor, T_sigma: Tensor, adjacency: np.ndarray, weights, activation="linear"):
    """GCN over ``X0 = [T_mu | T_sigma]``: ``X(l) = act(Ã X(l-1) W(l-1))``."""
    M, d = T_mu.shape
    if T_sigma.shape != (M, d) or adjacency.shape != (M, M):
        raise ContractViolation(
            f"regularize_tables: tables {T_mu.shape}/{T_sigma.shape}, adjacency {adjacency.shape}"
        )
    A = Tensor(adjacency)
    x = nx.concat([T_mu, T_sigma], axis=-1)
    for W in weights:
        if W.shape != (2 * d, 2 * d):
            raise ContractViolation(f"GCN weight must be {(2 * d, 2 * d)}, got {W.shape}")
        x = nx.matmul(A, nx.matmul(x, W))
        if activation == "elu":
            x = nx.elu(x)
        elif activation == "relu":
            x = nx.relu(x)
    return nx.slice_last(x, 0, d), nx.slice_last(x, d, 2 * d)


def embed_sequence(ids: np.ndarray, table: Tensor, positional: Tensor) -> Tensor:
    """Lookup plus positional rows for each slot; padding slots are zeroed."""
    B, W = ids.shape
    L = positional.shape[0]
    if W > L:
        raise ContractViolation(f"sequence width {W} exceeds {L} positions")
    valid = ids != PAD
    rows = nx.take(table, np.maximum(ids - 1, 0))
    # slots are right-aligned: the last slot is always position L - 1, so a
    # narrower left-padded batch sees exactly the same positions
    pos = nx.take(positional, np.broadcast_to(np.arange(L - W, L), (B, W)))
    return _mask_rows(nx.add(rows, pos), valid)


def _mask_rows(x: Tensor, valid: np.ndarray) -> Tensor:
    m = np.broadcast_to(valid[..., None], x.shape).astype(np.float64)
    return nx.mul(x, Tensor(m))


def attention_mask(valid: np.ndarray) -> np.ndarray:
    """Boolean ``(B, L, L)``: query t sees keys <= t that are not padding."""
    B, L = valid.shape
    causal = np.tril(np.ones((L, L), dtype=bool))
    return causal[None] & valid[:, None, :]


def _dropout(x: Tensor, rate: float, rng) -> Tensor:
    if not rate:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return nx.mul(x, Tensor(keep))


def attention_weights(x: Tensor, Wq: Tensor, Wk: Tensor, mask: np.ndarray) -> Tensor:
    d = x.shape[-1]
    q = nx.matmul(x, Wq)
    k = nx.matmul(x, Wk)
    scores = nx.scale(nx.matmul(q, nx.transpose(k)), 1.0 / np.sqrt(d))
    return nx.softmax(scores, mask)


def dual_attention_block(x: Tensor, params, prefix: str, valid: np.ndarray, dropout=0.0, rng=None) -> Tensor:
    """One post-norm block of a single branch: causal self-attention, then FFN."""
    p = lambda name: params[prefix + name]
    attn = attention_weights(x, p("Wq"), p("Wk"), attention_mask(valid))
    z = nx.matmul(attn, nx.matmul(x, p("Wv")))
    h = nx.layer_norm(nx.add(x, _dropout(z, dropout, rng)), p("ln1.g"), p("ln1.b"))
    f = nx.add_bias(nx.matmul(nx.elu(nx.add_bias(nx.matmul(h, p("W1")), p("b1"))), p("W2")), p("b2"))
    out = nx.layer_norm(nx.add(h, _dropout(f, dropout, rng)), p("ln2.g"), p("ln2.b"))
    return _mask_rows(out, valid)


def pad_left(seqs: list[list[int]], max_len: int, tight: bool = False) -> np.ndarray:
    """Left-pad (and left-truncate) to ``max_len``; ``tight`` shrinks the width to the longest row."""
    width = max_len
    if tight:
        width = max(1, min(max_len, max((len(s) for s in seqs), default=1)))
    out = np.zeros((len(seqs), width), dtype=np.int64)
    for r, s in enumerate(seqs):
        s = s[-width:]
        if s:
            out[r, width - len(s):] = s
    return out


def infer_preference(model: GSTO, seq: LabeledSequence | list[int], adjacency=None) -> list[GaussianEmbedding]:
    """Preference Gaussian for every non-padding position of one sequence."""
    ids = seq.inputs if isinstance(seq, LabeledSequence) else list(seq)
    if not ids:
        raise ContractViolation("empty sequence")
    batch = pad_left([ids], model.cfg.max_len)
    mean, var, valid = model.encode(batch, model.regularized_tables(adjacency))
    keep = valid[0]
    mu = mean.data[0][keep]
    if var is None:
        return [GaussianEmbedding(m, np.ones_like(m)) for m in mu]
    return [GaussianEmbedding(m, v) for m, v in zip(mu, var.data[0][keep])]


def save_checkpoint(path, model: GSTO, meta: dict) -> None:
    header = {"format": CKPT_FORMAT, "model_config": asdict(model.cfg), **meta}
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    with open(path, "wb") as f:
        np.savez(f, __meta__=np.array(json.dumps(header, sort_keys=True)), **arrays)


def load_checkpoint(path) -> tuple[GSTO, dict]:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["__meta__"]))
        if header.get("format") != CKPT_FORMAT:
            raise ContractViolation(f"{path}: unsupported checkpoint format {header.get('format')!r}")
        state = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
    model = GSTO(ModelConfig(**header["model_config"]))
    model.load_state_dict(state)
    return model, header
