"""Desk-scale simulator of blockchain-coordinated federated learning under attack.

Compares client-server FedAvg, PoW/PoS-coupled chains, Krum, trimmed mean,
proof-of-federated-learning (PoFL) pooled mining and KFC (Krum inside each
pool, PoFL across pools) against label-flipping and pattern-key backdoor
attackers.
"""

from .errors import (
    ArgumentError,
    ConfigError,
    IntegrityError,
    ParseError,
    ShapeError,
    SimError,
)
from .sim import MetricsSeries, RoundMetrics, SimConfig, accuracy_10, run_simulation

__all__ = [
    "ArgumentError",
    "ConfigError",
    "IntegrityError",
    "MetricsSeries",
    "ParseError",
    "RoundMetrics",
    "ShapeError",
    "SimConfig",
    "SimError",
    "accuracy_10",
    "run_simulation",
]
