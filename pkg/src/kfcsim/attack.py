"""Adversarial client behaviour: label flipping, pattern-key backdoors, model replacement."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, PatternKey, flip_labels, poison_backdoor
from .errors import ConfigError, ShapeError
from .mlcore import Model, TrainSpec, sgd_train

NONE = "none"
BYZANTINE_FLIP = "byzantine-flip"
BACKDOOR = "backdoor"
ATTACK_KINDS = (NONE, BYZANTINE_FLIP, BACKDOOR)


@dataclass(frozen=True)
class AttackSpec:
    kind: str = NONE
    pattern: PatternKey | None = None
    flip_fraction: float = 1.0
    poison_fraction: float = 1.0
    # None -> True for backdoor, False for label flipping
    boost: bool | None = None
    n_attackers_in_round: int = 1

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ConfigError(f"unknown attack kind {self.kind!r}")
        if self.kind == BACKDOOR and self.pattern is None:
            raise ConfigError("backdoor attack requires a pattern")
        if self.kind == BYZANTINE_FLIP and not 0.0 < self.flip_fraction <= 1.0:
            raise ConfigError("flip_fraction must lie in (0, 1]")
        if not 0.0 < self.poison_fraction <= 1.0:
            raise ConfigError("poison_fraction must lie in (0, 1]")
        if self.n_attackers_in_round < 1:
            raise ConfigError("n_attackers_in_round must be >= 1")

    @property
    def boosted(self) -> bool:
        if self.kind == NONE:
            return False
        if self.boost is None:
            return self.kind == BACKDOOR
        return self.boost


def attacker_local_train(
    behavior: AttackSpec, shard: Dataset, global_model: Model, spec: TrainSpec
) -> np.ndarray:
    """Train the attacker's local model on its poisoned shard; returns V_adv."""
    if behavior.kind == BYZANTINE_FLIP:
        shard = flip_labels(shard, behavior.flip_fraction, spec.seed)
    elif behavior.kind == BACKDOOR:
        if behavior.pattern is None:
            raise ConfigError("backdoor attack requires a pattern")
        shard = poison_backdoor(shard, behavior.pattern, behavior.poison_fraction, spec.seed)
    return np.array(sgd_train(global_model, shard, spec).params)


def boost_update(v_adv, v_global, n: int, eta: float = 1.0, n_attackers: int = 1) -> np.ndarray:
    """The vector an attacker submits so that FedAvg lands on ``v_adv``.

    V_G + (beta / a) (V_adv - V_G) with beta = n / eta and ``a`` attackers
    sharing the same aggregation.
    """
    v_adv = np.asarray(v_adv, dtype=np.float64)
    v_global = np.asarray(v_global, dtype=np.float64)
    if v_adv.shape != v_global.shape:
        raise ShapeError(f"adversarial dim {v_adv.shape} vs global {v_global.shape}")
    if n < 1 or n_attackers < 1:
        raise ConfigError("n and n_attackers must be >= 1")
    if not eta > 0:
        raise ConfigError("eta must be > 0")
    beta = n / eta
    return v_global + (beta / n_attackers) * (v_adv - v_global)
