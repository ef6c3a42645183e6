"""Flat ``key = value`` run configuration shared by every CLI stage."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .data import SCENARIOS, GeneratorConfig
from .errors import ConfigError, MissingInputError
from .model import GCN_ACTIVATIONS, ModelConfig
from .objective import TrainConfig
from .relation_graph import RelationConfig

GRAPH_MODES = ("trained", "oracle", "identity")
METHODS = ("gsto", "cb")
ABLATIONS = ("", "no-gr", "no-sr")
SPLITS = ("val", "test")

# keys that only say where files live; they do not change any computed number
PATH_KEYS = (
    "out_dir",
    "corpus_path",
    "world_path",
    "pairs_path",
    "graph_path",
    "checkpoint_path",
    "report_path",
)

DEFAULT_NAMES = {
    "corpus_path": "corpus.jsonl",
    "world_path": "world.json",
    "pairs_path": "pairs.tsv",
    "graph_path": "graph.tsv",
    "checkpoint_path": "checkpoint.npz",
    "report_path": "report.json",
}


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "run"
    corpus_path: str = ""
    world_path: str = ""
    pairs_path: str = ""
    graph_path: str = ""
    checkpoint_path: str = ""
    report_path: str = ""
    # synthetic corpus
    num_users: int = 2000
    num_intentions: int = 500
    num_clusters: int = 20
    complements_per_intention: int = 2
    min_length: int = 5
    mean_length: int = 20
    max_length: int = 60
    p_stay: float = 0.75
    p_noise: float = 0.15
    popularity_skew: float = 1.0
    purchase_rate: float = 0.1
    gap_rate: float = 0.08
    neg_ratio: int = 2
    # relation graph
    graph_mode: str = "trained"
    k: int = 10
    relation_dim: int = 32
    relation_epochs: int = 100
    relation_lr: float = 1e-2
    # sequence model
    scenario: str = "original"
    dim: int = 64
    max_len: int = 50
    gcn_layers: int = 1
    gcn_activation: str = "linear"
    blocks: int = 2
    dropout: float = 0.2
    init_scale: float = 0.02
    learning_rate: float = 1e-4
    batch_size: int = 128
    epochs: int = 50
    negatives_per_position: int = 1
    ablate: str = ""
    # evaluation
    method: str = "gsto"
    split: str = "test"
    per_user_csv: bool = False
    gradcheck_coords: int = 200

    def validate(self):
        checks = [
            (self.graph_mode in GRAPH_MODES, f"graph_mode must be one of {GRAPH_MODES}"),
            (self.method in METHODS, f"method must be one of {METHODS}"),
            (self.ablate in ABLATIONS, f"ablate must be one of {ABLATIONS[1:]} or empty"),
            (self.scenario in SCENARIOS, f"scenario must be one of {SCENARIOS}"),
            (self.split in SPLITS, f"split must be one of {SPLITS}"),
            (self.gcn_activation in GCN_ACTIVATIONS, f"gcn_activation must be one of {GCN_ACTIVATIONS}"),
            (self.epochs >= 1, "epochs must be >= 1"),
            (self.gradcheck_coords >= 1, "gradcheck_coords must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        self.generator().validate()
        self.model(self.num_intentions).validate()
        self.train().validate()
        if not 1 <= self.k < self.num_intentions:
            raise ConfigError(f"k must be in [1, {self.num_intentions - 1}]")
        return self

    # ------------------------------------------------------------ derived configs

    @property
    def effective_graph_mode(self) -> str:
        return "identity" if self.ablate == "no-gr" else self.graph_mode

    def path(self, key: str) -> Path:
        value = getattr(self, key)
        return Path(value) if value else Path(self.out_dir) / DEFAULT_NAMES[key]

    def generator(self) -> GeneratorConfig:
        names = {f.name for f in fields(GeneratorConfig)}
        return GeneratorConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def relation(self) -> RelationConfig:
        return RelationConfig(dim=self.relation_dim, epochs=self.relation_epochs, lr=self.relation_lr, seed=self.seed)

    def model(self, num_intentions: int) -> ModelConfig:
        return ModelConfig(
            num_intentions=num_intentions,
            dim=self.dim,
            max_len=self.max_len,
            gcn_layers=self.gcn_layers,
            gcn_activation=self.gcn_activation,
            blocks=self.blocks,
            dropout=self.dropout,
            init_scale=self.init_scale,
            deterministic=self.ablate == "no-sr",
            seed=self.seed,
        )

    def train(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            max_epochs=self.epochs,
            negatives_per_position=self.negatives_per_position,
            seed=self.seed,
            disable_graph_regularizer=self.ablate == "no-gr",
            deterministic_embeddings=self.ablate == "no-sr",
        )

    # ------------------------------------------------------------ identity

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        """sha256 over every non-path key, so relocating a run keeps its hash."""
        payload = {k: v for k, v in sorted(asdict(self).items()) if k not in PATH_KEYS}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def _coerce(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw.strip("\"'")


def apply_pairs(cfg: RunConfig, pairs: list[tuple[str, str]], origin: str = "override") -> RunConfig:
    defaults = cfg.to_dict()
    for key, raw in pairs:
        key = key.strip().replace("-", "_")
        if key not in defaults:
            raise ConfigError(f"unknown config key {key!r} ({origin})")
        setattr(cfg, key, _coerce(key, raw, defaults[key]))
    return cfg


def parse_lines(lines, origin: str = "config") -> list[tuple[str, str]]:
    pairs = []
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{n}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        pairs.append((key, value))
    return pairs


def load_config(path=None, overrides: list[str] | None = None, ablate: str | None = None) -> RunConfig:
    """Defaults, then the config file, then ``key=value`` overrides, then ``--ablate``."""
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise MissingInputError(f"config file not found: {p}")
        apply_pairs(cfg, parse_lines(p.read_text().splitlines(), str(p)), str(p))
    if overrides:
        apply_pairs(cfg, parse_lines(overrides, "override"))
    if ablate is not None:
        cfg.ablate = ablate
    return cfg.validate()


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items())
