"""Round-by-round orchestration of clients, pools, attacks, aggregation and consensus.

Every architecture shares the same client-sampling, attacker-assignment and
local-training randomness for a given ``master_seed``; only the aggregation
and consensus step differs. Comparisons between architectures are therefore
paired.
"""

from __future__ import annotations

import hashlib
import logging
import math
import struct
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import aggregate, chain
from .attack import BACKDOOR, NONE, AttackSpec, attacker_local_train, boost_update
from .data import (
    Dataset,
    build_backdoor_test,
    generate_synthetic,
    holdout_split,
    load_dataset,
    partition_iid,
    split_validation,
)
from .errors import ArgumentError, ConfigError, IntegrityError
from .mlcore import Arch, Model, TrainSpec, evaluate_accuracy, init_model, sgd_train

logger = logging.getLogger(__name__)

CLIENT_SERVER = "client-server"
POW = "pow"
POS = "pos"
POFL = "pofl"
KFC = "kfc"
KRUM_CS = "krum-cs"
TRIMMED_CS = "trimmedmean-cs"
ARCHITECTURES = (CLIENT_SERVER, POW, POS, POFL, KFC, KRUM_CS, TRIMMED_CS)
CHAIN_ARCHS = frozenset({POW, POS, POFL, KFC})
POOLED_ARCHS = frozenset({POFL, KFC})

SCENARIOS = ("none", "A", "B")

U64 = 2**64 - 1


def _encode(part) -> bytes:
    if isinstance(part, str):
        raw = part.encode("utf-8")
        return struct.pack("<I", len(raw)) + raw
    return struct.pack("<Q", int(part) & U64)


def round_seed(master_seed: int, t: int) -> int:
    """First 64 bits (little-endian) of SHA-256(u64le(master) || u64le(t))."""
    digest = hashlib.sha256(struct.pack("<QQ", master_seed & U64, t & U64)).digest()
    return int.from_bytes(digest[:8], "little")


def derive_seed(*parts) -> int:
    digest = hashlib.sha256(b"".join(_encode(p) for p in parts)).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass(frozen=True)
class DataSpec:
    """Where the examples come from and how they are split.

    ``seed=None`` derives the generation/split seed from the master seed.
    """

    source: str = "synthetic"
    k: int = 3
    p: int = 16
    n_per_class: int = 500
    spread: float = 0.25
    seed: int | None = None
    path: str | None = None
    test_fraction: float = 0.2
    validation_fraction: float = 0.2

    def __post_init__(self):
        if self.source not in ("synthetic", "csv"):
            raise ConfigError(f"unknown data source {self.source!r}")
        if self.source == "csv" and not self.path:
            raise ConfigError("csv data source needs a path")
        for name in ("test_fraction", "validation_fraction"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1)")


@dataclass(frozen=True)
class SimConfig:
    architecture: str = POFL
    n_clients: int = 30
    n_pools: int = 3
    # int -> participants per pool; float in (0, 1] -> fraction of each roster;
    # None -> 10% of the roster, at least 3 (at least f + 3 under Krum)
    clients_per_round: int | float | None = None
    scenario: str = "none"
    attack: AttackSpec = field(default_factory=AttackSpec)
    rounds: int = 30
    train: TrainSpec = field(default_factory=TrainSpec)
    krum_f: int = 1
    trim_fraction: float = 0.1
    eta: float = 1.0
    master_seed: int = 0
    data: DataSpec = field(default_factory=DataSpec)
    model: str = "softmax-linear"
    hidden: int = 16
    pow_difficulty: int = 8
    stakes: tuple[float, ...] | None = None
    accuracy_goal: float | None = None
    max_retries: int = 0
    backdoor_exclude_target: bool = True

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        if self.n_pools < 1:
            raise ConfigError("n_pools must be >= 1")
        if self.n_clients < self.n_pools:
            raise ConfigError("need at least one client per pool")
        if self.scenario == "B" and self.attack.kind == NONE:
            raise ConfigError("scenario B needs an attack")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if not self.eta > 0:
            raise ConfigError("eta must be > 0")
        if self.krum_f < 0:
            raise ConfigError("krum_f must be >= 0")
        if self.stakes is not None and len(self.stakes) != self.n_pools:
            raise ConfigError("need one stake per miner")
        if self.max_retries < 0:
            raise ConfigError("max_retries must be >= 0")
        cpr = self.clients_per_round
        if cpr is not None:
            if isinstance(cpr, float) and not 0.0 < cpr <= 1.0:
                raise ConfigError("fractional clients_per_round must lie in (0, 1]")
            if isinstance(cpr, int) and cpr < 1:
                raise ConfigError("clients_per_round must be >= 1")

    @property
    def arch(self) -> Arch:
        k, p = self.data.k, self.data.p
        if self.model == "mlp1":
            return Arch.mlp1(p, self.hidden, k)
        return Arch(self.model, p, k)

    @property
    def is_chain(self) -> bool:
        return self.architecture in CHAIN_ARCHS

    @property
    def is_pooled(self) -> bool:
        return self.architecture in POOLED_ARCHS


@dataclass(frozen=True)
class MinerMetrics:
    miner_id: int
    original_acc: float
    backdoor_acc: float | None
    validation_acc: float


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    winner_miner: int | None
    per_miner: tuple[MinerMetrics, ...]
    original_acc: float
    backdoor_acc: float | None
    validation_acc: float
    participants: tuple[tuple[int, ...], ...] = ()
    attackers: frozenset[int] = frozenset()
    krum_selected: tuple[int, ...] = ()

    def same_metrics(self, other: "RoundMetrics") -> bool:
        return (
            self.round == other.round
            and self.per_miner == other.per_miner
            and self.original_acc == other.original_acc
            and self.backdoor_acc == other.backdoor_acc
            and self.validation_acc == other.validation_acc
        )


def accuracy_10(values: Sequence[float]) -> float:
    """Mean of the final min(10, T) per-round accuracies."""
    if len(values) == 0:
        raise ArgumentError("empty series")
    tail = list(values)[-10:]
    return sum(tail) / len(tail)


@dataclass
class MetricsSeries:
    architecture: str
    rounds: list[RoundMetrics] = field(default_factory=list)
    ledger: chain.Ledger | None = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.rounds)

    def original(self) -> list[float]:
        return [r.original_acc for r in self.rounds]

    def backdoor(self) -> list[float] | None:
        if not self.rounds or self.rounds[0].backdoor_acc is None:
            return None
        return [r.backdoor_acc for r in self.rounds]

    @property
    def accuracy(self) -> float:
        return self.rounds[-1].original_acc

    @property
    def accuracy_10(self) -> float:
        return accuracy_10(self.original())

    @property
    def backdoor_accuracy(self) -> float | None:
        return self.rounds[-1].backdoor_acc

    @property
    def backdoor_accuracy_10(self) -> float | None:
        b = self.backdoor()
        return None if b is None else accuracy_10(b)

    def summary(self) -> dict:
        out = {"original": {"accuracy": self.accuracy, "accuracy_10": self.accuracy_10}}
        if self.backdoor() is not None:
            out["backdoor"] = {
                "accuracy": self.backdoor_accuracy,
                "accuracy_10": self.backdoor_accuracy_10,
            }
        return out


@dataclass
class SimState:
    """Fixed data for a run plus the evolving global model and ledger."""

    config: SimConfig
    train: Dataset
    validation: Dataset
    test: Dataset
    backdoor_test: Dataset | None
    shards: list[np.ndarray]
    pools: list[np.ndarray]
    miners: list[chain.MinerState]
    global_params: np.ndarray
    ledger: chain.Ledger | None
    t: int = 0


def _load_examples(config: SimConfig) -> Dataset:
    spec = config.data
    if spec.source == "csv":
        ds = load_dataset(spec.path)
        if (ds.num_classes, ds.feature_dim) != (spec.k, spec.p):
            raise ConfigError(
                f"dataset has k={ds.num_classes}, p={ds.feature_dim}; config says "
                f"k={spec.k}, p={spec.p}"
            )
        return ds
    seed = spec.seed if spec.seed is not None else derive_seed(config.master_seed, "data")
    return generate_synthetic(spec.k, spec.p, spec.n_per_class, spec.spread, seed)


def prepare(config: SimConfig) -> SimState:
    """Build datasets, shards, pools, the initial model and (for chains) the genesis block."""
    base = config.master_seed
    full = _load_examples(config)
    test_full, train = holdout_split(full, config.data.test_fraction, derive_seed(base, "holdout"))
    validation, test = split_validation(
        test_full, config.data.validation_fraction, derive_seed(base, "validation")
    )
    if len(validation) == 0 or len(test) == 0:
        raise ConfigError("dataset too small for the requested splits")
    shards = partition_iid(train, config.n_clients, derive_seed(base, "partition"))
    pools = np.array_split(np.arange(config.n_clients), config.n_pools)
    stakes = config.stakes or (1.0,) * config.n_pools
    miners = [
        chain.MinerState(i, float(stakes[i]), tuple(int(c) for c in pools[i]))
        for i in range(config.n_pools)
    ]

    backdoor_test = None
    if config.attack.kind == BACKDOOR:
        pattern = config.attack.pattern
        pattern.check(config.data.p, config.data.k)
        backdoor_test = build_backdoor_test(test, pattern, config.backdoor_exclude_target)

    model = init_model(config.arch, derive_seed(base, "init"))
    params = np.array(model.params)
    ledger = chain.Ledger.create(params) if config.is_chain else None
    return SimState(
        config, train, validation, test, backdoor_test, shards, list(pools), miners, params, ledger
    )


def participants_per_pool(config: SimConfig, roster_size: int) -> int:
    cpr = config.clients_per_round
    floor = 3
    if config.architecture == KFC:
        floor = config.krum_f + 3
    if cpr is None:
        m = max(floor, math.ceil(0.1 * roster_size))
    elif isinstance(cpr, float):
        m = max(1, round(cpr * roster_size))
    else:
        m = cpr
    m = min(m, roster_size)
    if config.architecture == KFC and m < config.krum_f + 3:
        raise ConfigError(
            f"KFC pools need >= {config.krum_f + 3} participants for f={config.krum_f}, "
            f"got {m}"
        )
    return m


def sample_participants(state: SimState, seed: int) -> list[tuple[int, ...]]:
    rng = np.random.default_rng(derive_seed(seed, "sample"))
    out = []
    for roster in state.pools:
        m = participants_per_pool(state.config, len(roster))
        chosen = rng.choice(roster, size=m, replace=False)
        out.append(tuple(sorted(int(c) for c in chosen)))
    return out


def assign_attackers(
    scenario: str, pools: Sequence[Sequence[int]], seed: int
) -> frozenset[int]:
    """Scenario A: one attacker in one pool; B: one attacker in every pool."""
    if scenario == "none":
        return frozenset()
    rng = np.random.default_rng(derive_seed(seed, "attackers"))
    if scenario == "A":
        nonempty = [i for i, p in enumerate(pools) if len(p) > 0]
        if not nonempty:
            raise ConfigError("no participants to corrupt")
        pool = pools[nonempty[int(rng.integers(len(nonempty)))]]
        return frozenset({int(pool[int(rng.integers(len(pool)))])})
    if scenario == "B":
        chosen = set()
        for i, pool in enumerate(pools):
            if len(pool) == 0:
                raise ConfigError(f"scenario B needs every pool populated; pool {i} is empty")
            chosen.add(int(pool[int(rng.integers(len(pool)))]))
        return frozenset(chosen)
    raise ConfigError(f"unknown scenario {scenario!r}")


def _train_group(
    state: SimState, group: Sequence[int], attackers: frozenset[int], seed: int
) -> list[np.ndarray]:
    """Local vectors submitted by one aggregation group, in client-id order."""
    config = state.config
    g_model = Model(config.arch, state.global_params)
    n = len(group)
    n_adv = sum(1 for c in group if c in attackers)
    out = []
    for c in group:
        spec = replace(config.train, seed=derive_seed(seed, "train", c))
        shard = state.train.subset(state.shards[c])
        if c in attackers and config.attack.kind != NONE:
            v = attacker_local_train(config.attack, shard, g_model, spec)
            if config.attack.boosted:
                v = boost_update(v, state.global_params, n, config.eta, n_adv)
        else:
            v = np.array(sgd_train(g_model, shard, spec).params)
        out.append(v)
    return out


def _evaluate(state: SimState, miner_id: int, params) -> MinerMetrics:
    model = Model(state.config.arch, params)
    backdoor = None
    if state.backdoor_test is not None and len(state.backdoor_test) > 0:
        backdoor = evaluate_accuracy(model, state.backdoor_test)
    return MinerMetrics(
        miner_id,
        evaluate_accuracy(model, state.test),
        backdoor,
        evaluate_accuracy(model, state.validation),
    )


def _pooled_round(state: SimState, participants, attackers, seed):
    config = state.config
    pool_models: list[np.ndarray] = []
    krum_selected: list[int] = []
    for group in participants:
        locals_ = _train_group(state, group, attackers, seed)
        if config.architecture == KFC:
            idx, params = aggregate.krum_aggregate(
                state.global_params, locals_, config.krum_f, config.eta
            )
            krum_selected.append(group[idx])
        else:
            params = aggregate.fedavg(state.global_params, locals_, config.eta)
        pool_models.append(params)
    winner, accs = chain.pofl_select(pool_models, state.validation, config.arch)
    return pool_models, winner, accs, tuple(krum_selected)


def run_round(
    state: SimState, attackers: frozenset[int] | None = None
) -> tuple[SimState, RoundMetrics]:
    """Advance ``state`` by one learning round (mutates and returns it).

    ``attackers`` overrides the scenario's seeded choice; ids not sampled this
    round are ignored.
    """
    config = state.config
    t = state.t + 1
    seed = round_seed(config.master_seed, t)
    participants = sample_participants(state, seed)
    if attackers is None:
        attackers = assign_attackers(config.scenario, participants, seed)
    else:
        sampled = {c for group in participants for c in group}
        attackers = frozenset(int(c) for c in attackers if c in sampled)
    everyone = tuple(c for group in participants for c in group)
    krum_selected: tuple[int, ...] = ()

    if config.is_pooled:
        pool_models, winner, accs, krum_selected = _pooled_round(
            state, participants, attackers, seed
        )
        retries = 0
        while (
            config.accuracy_goal is not None
            and accs[winner] < config.accuracy_goal
            and retries < config.max_retries
        ):
            retries += 1
            pool_models, winner, accs, krum_selected = _pooled_round(
                state, participants, attackers, derive_seed(seed, "retry", retries)
            )
        new_global = pool_models[winner]
        if not chain.verify_claim(new_global, accs[winner], state.validation, config.arch):
            raise IntegrityError(f"round {t}: winning miner {winner} overstated its accuracy")
        per_miner = tuple(_evaluate(state, i, p) for i, p in enumerate(pool_models))
    else:
        locals_ = _train_group(state, everyone, attackers, seed)
        winner = None
        if config.architecture == KRUM_CS:
            idx, new_global = aggregate.krum_aggregate(
                state.global_params, locals_, config.krum_f, config.eta
            )
            krum_selected = (everyone[idx],)
        elif config.architecture == TRIMMED_CS:
            new_global = aggregate.trimmed_mean_aggregate(
                state.global_params, locals_, config.trim_fraction, config.eta
            )
        else:
            if config.architecture == POW:
                winner = chain.pow_select(state.miners, config.pow_difficulty, seed)
            elif config.architecture == POS:
                winner = chain.pos_select(state.miners, t - 1)
            new_global = aggregate.fedavg(state.global_params, locals_, config.eta)
        per_miner = (_evaluate(state, 0 if winner is None else winner, new_global),)

    best = max(per_miner, key=lambda m: (m.validation_acc, -m.miner_id))
    if state.ledger is not None:
        state.ledger.append(t, winner, new_global, best.validation_acc)

    state.global_params = np.array(new_global, dtype=np.float64)
    state.t = t
    metrics = RoundMetrics(
        round=t,
        winner_miner=winner,
        per_miner=per_miner,
        original_acc=best.original_acc,
        backdoor_acc=best.backdoor_acc,
        validation_acc=best.validation_acc,
        participants=tuple(participants),
        attackers=attackers,
        krum_selected=krum_selected,
    )
    logger.debug(
        "%s round %d: winner=%s original=%.4f backdoor=%s",
        config.architecture, t, winner, best.original_acc, best.backdoor_acc,
    )
    return state, metrics


def run_simulation(config: SimConfig) -> MetricsSeries:
    state = prepare(config)
    series = MetricsSeries(config.architecture, ledger=state.ledger)
    for _ in range(config.rounds):
        state, metrics = run_round(state)
        series.rounds.append(metrics)
    return series
