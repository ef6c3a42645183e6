"""Interaction events, the synthetic corpus generator, and scenario splits.

Intention ids start at 1; id 0 is the padding id. Sequences are stored
unpadded (most recent event last) and padded on the left only when batched.
"""
from __future__ import annotations

import json
import logging
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ConfigError, ContractViolation

log = logging.getLogger(__name__)

PAD = 0
CLICK = "C"
PURCHASE = "P"
TRAIN, VAL, TEST = "train", "val", "test"
DAY = 86400


@dataclass(frozen=True, order=True)
class Event:
    user: int
    timestamp: int
    intention: int
    action: str = CLICK

    def __post_init__(self):
        if self.intention == PAD or self.intention < 0:
            raise ContractViolation(f"intention id must be >= 1, got {self.intention}")
        if self.action not in (CLICK, PURCHASE):
            raise ContractViolation(f"unknown action {self.action!r}")

    def to_json(self) -> str:
        return json.dumps(
            {"u": self.user, "m": self.intention, "t": self.timestamp, "a": self.action},
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, line: str) -> "Event":
        d = json.loads(line)
        return cls(user=d["u"], timestamp=d["t"], intention=d["m"], action=d["a"])


@dataclass
class LabeledSequence:
    """One model input.

    For TRAIN, ``targets`` aligns with ``inputs`` (next-step ids, 0 where the
    position has no target). For VAL/TEST, ``targets`` holds the single label.
    """

    user: int
    inputs: list[int]
    targets: list[int]
    split: str
    key: int = 0  # disambiguates several sequences of one user (24h fragments, purchases)

    @property
    def label(self) -> int:
        if self.split == TRAIN:
            raise ContractViolation("TRAIN sequences carry per-position targets, not a label")
        return self.targets[0]


@dataclass
class Splits:
    train: list[LabeledSequence] = field(default_factory=list)
    val: list[LabeledSequence] = field(default_factory=list)
    test: list[LabeledSequence] = field(default_factory=list)
    dropped: Counter = field(default_factory=Counter)

    def get(self, name: str) -> list[LabeledSequence]:
        return {TRAIN: self.train, VAL: self.val, TEST: self.test}[name]

    def manifest(self) -> dict:
        return {
            "users": {
                name: sorted({s.user for s in self.get(name)}) for name in (TRAIN, VAL, TEST)
            },
            "counts": {name: len(self.get(name)) for name in (TRAIN, VAL, TEST)},
            "dropped": dict(sorted(self.dropped.items())),
        }


# ---------------------------------------------------------------- generator


@dataclass
class GeneratorConfig:
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
    seed: int = 0

    def validate(self):
        for name in ("p_stay", "p_noise", "purchase_rate", "gap_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name}={v} is not a probability")
        if self.p_stay + self.p_noise > 1.0 + 1e-12:
            raise ConfigError("p_stay + p_noise must not exceed 1")
        if self.num_intentions < self.num_clusters:
            raise ConfigError("num_intentions must be >= num_clusters")
        if self.num_clusters < 1 or self.num_users < 1:
            raise ConfigError("need at least one cluster and one user")
        if not 1 <= self.min_length <= self.mean_length <= self.max_length:
            raise ConfigError("need 1 <= min_length <= mean_length <= max_length")


@dataclass
class PlantedWorld:
    """Ground truth behind a synthetic corpus."""

    cluster_of: list[int]  # index = intention id; entry 0 (padding) is -1
    relations: set[tuple[int, int]]  # unordered complement pairs stored as (lo, hi)
    user_cluster: dict[int, int]
    seed: int

    @property
    def num_intentions(self) -> int:
        return len(self.cluster_of) - 1

    def neighbors(self) -> dict[int, list[int]]:
        nb = defaultdict(list)
        for a, b in sorted(self.relations):
            nb[a].append(b)
            nb[b].append(a)
        return nb

    def to_json(self) -> str:
        return json.dumps(
            {
                "cluster_of": self.cluster_of,
                "relations": sorted(self.relations),
                "user_cluster": {str(k): v for k, v in sorted(self.user_cluster.items())},
                "seed": self.seed,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "PlantedWorld":
        d = json.loads(text)
        return cls(
            cluster_of=d["cluster_of"],
            relations={tuple(p) for p in d["relations"]},
            user_cluster={int(k): v for k, v in d["user_cluster"].items()},
            seed=d["seed"],
        )


def generate_synthetic(cfg: GeneratorConfig) -> tuple[list[Event], PlantedWorld]:
    """Cluster-Markov corpus with planted cross-cluster complements.

    Each user has a dominant cluster. Every event is drawn from that cluster
    (probability ``p_stay``, popularity-weighted), uniformly over all
    intentions (``p_noise``), or otherwise from the planted complements of the
    previous event (uniform when there is no previous event or it has no
    complements). Complements link each intention to intentions of its
    partner cluster, so the in-cluster share of events stays close to
    ``p_stay``.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    M, C = cfg.num_intentions, cfg.num_clusters

    cluster_of = [-1] * (M + 1)
    for k, m in enumerate(rng.permutation(M) + 1):
        cluster_of[int(m)] = k % C
    members = [sorted(m for m in range(1, M + 1) if cluster_of[m] == c) for c in range(C)]
    popularity = []
    for c in range(C):
        w = 1.0 / (rng.permutation(len(members[c])) + 1.0) ** cfg.popularity_skew
        popularity.append(w / w.sum())

    relations = set()
    if C > 1:
        for c in range(C):
            # clusters come in complementary pairs (0-1, 2-3, ...); an odd last one pairs with 0
            partner = members[c ^ 1] if (c ^ 1) < C else members[(c + 1) % C]
            k = min(cfg.complements_per_intention, len(partner))
            for m in members[c]:
                for j in rng.choice(partner, size=k, replace=False):
                    relations.add((min(m, int(j)), max(m, int(j))))
    world = PlantedWorld(cluster_of, relations, {}, cfg.seed)
    nb = world.neighbors()

    events = []
    base = 1_600_000_000
    for u in range(cfg.num_users):
        c = int(rng.integers(C))
        world.user_cluster[u] = c
        n = int(np.clip(cfg.min_length + rng.poisson(cfg.mean_length - cfg.min_length), cfg.min_length, cfg.max_length))
        t = base + int(rng.integers(0, 30 * DAY))
        prev = None
        for _ in range(n):
            r = rng.random()
            if r < cfg.p_stay:
                m = int(rng.choice(members[c], p=popularity[c]))
            elif r < cfg.p_stay + cfg.p_noise or not nb.get(prev):
                m = int(rng.integers(1, M + 1))
            else:
                m = int(rng.choice(nb[prev]))
            rate = cfg.purchase_rate if cluster_of[m] == c else cfg.purchase_rate / 5
            action = PURCHASE if rng.random() < rate else CLICK
            events.append(Event(u, t, m, action))
            prev = m
            if rng.random() < cfg.gap_rate:
                t += int(rng.uniform(25 * 3600, 96 * 3600))
            else:
                t += int(rng.exponential(1200.0))
    return events, world


# ---------------------------------------------------------------- corpus helpers


def group_by_user(events: Iterable[Event]) -> dict[int, list[Event]]:
    users = defaultdict(list)
    for e in events:
        users[e.user].append(e)
    for u, evs in users.items():
        evs.sort(key=lambda e: e.timestamp)
    return dict(sorted(users.items()))


def user_histories(events: Iterable[Event]) -> dict[int, set[int]]:
    hist = defaultdict(set)
    for e in events:
        hist[e.user].add(e.intention)
    return dict(hist)


# ---------------------------------------------------------------- splits


def split_leave_one_out(user: int, ids: list[int], max_len: int = 50, key: int = 0):
    """Last id is the TEST label, second to last the VAL label.

    TRAIN covers the remaining prefix with next-step targets inside it, so
    neither held-out label is ever a training target. Returns None when the
    sequence has fewer than 3 events.
    """
    if len(ids) < 3:
        return None
    rest = list(ids[:-2])
    train = LabeledSequence(user, rest[-max_len:], (rest[1:] + [PAD])[-max_len:], TRAIN, key)
    val = LabeledSequence(user, rest[-max_len:], [ids[-2]], VAL, key)
    test = LabeledSequence(user, list(ids[:-1])[-max_len:], [ids[-1]], TEST, key)
    return train, val, test


def fragment_by_gap(events: list[Event], gap_threshold: int = DAY) -> list[list[Event]]:
    if not events:
        return []
    frags = [[events[0]]]
    for prev, cur in zip(events, events[1:]):
        if cur.timestamp < prev.timestamp:
            raise ContractViolation("timestamps must be non-decreasing within a user")
        if cur.timestamp - prev.timestamp > gap_threshold:
            frags.append([])
        frags[-1].append(cur)
    return frags


def build_original(events: list[Event], max_len: int = 50) -> Splits:
    out = Splits()
    for u, evs in group_by_user(events).items():
        triple = split_leave_one_out(u, [e.intention for e in evs], max_len)
        if triple is None:
            out.dropped["short_users"] += 1
            out.dropped["short_events"] += len(evs)
            continue
        for s, bucket in zip(triple, (out.train, out.val, out.test)):
            bucket.append(s)
    _log_drops("original", out)
    return out


def build_24h(events: list[Event], max_len: int = 50, gap_threshold: int = DAY) -> Splits:
    out = Splits()
    for u, evs in group_by_user(events).items():
        for k, frag in enumerate(fragment_by_gap(evs, gap_threshold)):
            triple = split_leave_one_out(u, [e.intention for e in frag], max_len, key=k)
            if triple is None:
                out.dropped["short_fragments"] += 1
                out.dropped["short_events"] += len(frag)
                continue
            out.dropped["kept_events"] += len(frag)
            for s, bucket in zip(triple, (out.train, out.val, out.test)):
                bucket.append(s)
    _log_drops("24h", out)
    return out


def build_purchase(
    events: list[Event], max_len: int = 50, fractions=(0.8, 0.1, 0.1), seed: int = 0
) -> Splits:
    """One sequence per purchase: the preceding events predict the purchased id.

    Events after a user's last purchase are discarded. Users, not sequences,
    are partitioned into TRAIN/VAL/TEST.
    """
    out = Splits()
    per_user = {}
    for u, evs in group_by_user(events).items():
        ids = [e.intention for e in evs]
        seqs = []
        for k, e in enumerate(evs):
            if e.action != PURCHASE:
                continue
            if k == 0:
                out.dropped["purchase_without_history"] += 1
                continue
            seqs.append((k, ids[:k], ids[k]))
        if not seqs:
            out.dropped["users_without_purchase"] += 1
            continue
        per_user[u] = seqs

    users = sorted(per_user)
    order = np.random.default_rng(seed).permutation(len(users))
    n_train = int(round(fractions[0] * len(users)))
    n_val = int(round(fractions[1] * len(users)))
    for rank, idx in enumerate(order):
        u = users[idx]
        split = TRAIN if rank < n_train else VAL if rank < n_train + n_val else TEST
        for k, prefix, label in per_user[u]:
            inputs = prefix[-max_len:]
            if split == TRAIN:
                targets = (prefix[1:] + [label])[-max_len:]
                out.train.append(LabeledSequence(u, inputs, targets, TRAIN, k))
            else:
                out.get(split).append(LabeledSequence(u, inputs, [label], split, k))
    for name in (TRAIN, VAL, TEST):
        out.get(name).sort(key=lambda s: (s.user, s.key))
    _log_drops("purchase", out)
    return out


SCENARIOS = ("original", "24h", "purchase")


def build_splits(events, scenario: str, max_len: int = 50, gap_threshold: int = DAY, seed: int = 0) -> Splits:
    if scenario == "original":
        return build_original(events, max_len)
    if scenario == "24h":
        return build_24h(events, max_len, gap_threshold)
    if scenario == "purchase":
        return build_purchase(events, max_len, seed=seed)
    raise ConfigError(f"unknown scenario {scenario!r}; expected one of {SCENARIOS}")


def _log_drops(name, splits):
    if splits.dropped:
        log.info("%s split dropped: %s", name, dict(splits.dropped))


# ---------------------------------------------------------------- pair labels


def emit_pair_labels(world: PlantedWorld, events: list[Event], neg_ratio: int = 2, seed: int = 0):
    """Distant-supervision pairs for the relation model.

    Positives are planted complement pairs whose two intentions co-occur in
    at least one user's history, emitted in both orientations. Negatives are
    distinct ordered pairs outside the planted set, ``neg_ratio`` per positive.
    """
    hist = user_histories(events)
    seen_together = set()
    for items in hist.values():
        for a in items:
            for b in items:
                if a < b:
                    seen_together.add((a, b))
    positives = []
    for a, b in sorted(world.relations & seen_together):
        positives += [(a, b, 1), (b, a, 1)]

    M = world.num_intentions
    rng = np.random.default_rng(seed)
    chosen = set()
    negatives = []
    need = neg_ratio * len(positives)
    while len(negatives) < need:
        i, j = (int(v) for v in rng.integers(1, M + 1, size=2))
        if i == j or (min(i, j), max(i, j)) in world.relations or (i, j) in chosen:
            continue
        chosen.add((i, j))
        negatives.append((i, j, -1))
    return positives + negatives


# ---------------------------------------------------------------- file formats


def write_corpus(path, events: list[Event], header: dict | None = None) -> None:
    with open(path, "w") as f:
        if header is not None:
            f.write(json.dumps({"_header": header}, sort_keys=True) + "\n")
        for e in events:
            f.write(e.to_json() + "\n")


def read_corpus(path) -> tuple[list[Event], dict]:
    events, header = [], {}
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            if line.startswith('{"_header"'):
                header = json.loads(line)["_header"]
                continue
            events.append(Event.from_json(line))
    return events, header


def write_pairs(path, pairs, header: dict | None = None) -> None:
    with open(path, "w") as f:
        if header is not None:
            f.write("# " + json.dumps(header, sort_keys=True) + "\n")
        for i, j, y in pairs:
            f.write(f"{i}\t{j}\t{'+1' if y > 0 else '-1'}\n")


def read_pairs(path):
    pairs = []
    with open(path) as f:
        for line in f:
            if line.startswith("#") or not line.strip():
                continue
            i, j, y = line.rstrip("\n").split("\t")
            pairs.append((int(i), int(j), int(y)))
    return pairs


def write_world(path, world: PlantedWorld, header: dict | None = None) -> None:
    payload = json.loads(world.to_json())
    if header is not None:
        payload["_header"] = header
    Path(path).write_text(json.dumps(payload, sort_keys=True))


def read_world(path) -> PlantedWorld:
    return PlantedWorld.from_json(Path(path).read_text())


def generator_config_dict(cfg: GeneratorConfig) -> dict:
    return asdict(cfg)
