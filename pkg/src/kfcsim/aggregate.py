"""Aggregation rules over flat parameter vectors: FedAvg, Krum, trimmed mean."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError


def _stack(vectors: Sequence[np.ndarray]) -> np.ndarray:
    if len(vectors) == 0:
        raise ConfigError("need at least one vector")
    arrs = [np.asarray(v, dtype=np.float64) for v in vectors]
    dim = arrs[0].shape
    for a in arrs:
        if a.ndim != 1 or a.shape != dim:
            raise ShapeError(f"vector of shape {a.shape} does not match {dim}")
    return np.stack(arrs)


def fedavg(global_params, locals_: Sequence[np.ndarray], eta: float = 1.0) -> np.ndarray:
    """V_G + (eta / n) * sum_i (V_i - V_G), summed in client order."""
    if not eta > 0:
        raise ConfigError("server learning rate must be > 0")
    g = np.asarray(global_params, dtype=np.float64)
    L = _stack(locals_)
    if L.shape[1:] != g.shape:
        raise ShapeError(f"locals of dim {L.shape[1:]} vs global {g.shape}")
    total = np.zeros_like(g)
    for row in L:
        total += row - g
    return g + (eta / len(L)) * total


def _check_krum(n: int, f: int) -> int:
    if f < 0:
        raise ConfigError("f must be >= 0")
    m = n - f - 2
    if m < 1:
        raise ConfigError(f"Krum needs n - f - 2 >= 1 (n={n}, f={f})")
    return m


def pairwise_sq_distances(vectors: Sequence[np.ndarray]) -> np.ndarray:
    V = _stack(vectors)
    n = V.shape[0]
    D = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            diff = V[i] - V[j]
            D[i, j] = D[j, i] = float(diff @ diff)
    return D


def _scores_from_distances(D: np.ndarray, m: int) -> np.ndarray:
    n = D.shape[0]
    scores = np.empty(n)
    for i in range(n):
        others = np.array([j for j in range(n) if j != i])
        # stable sort keeps the lower index first among equal distances
        nearest = others[np.argsort(D[i, others], kind="stable")[:m]]
        scores[i] = D[i, nearest].sum()
    return scores


def krum_scores(vectors: Sequence[np.ndarray], f: int = 1) -> np.ndarray:
    n = len(vectors)
    m = _check_krum(n, f)
    return _scores_from_distances(pairwise_sq_distances(vectors), m)


def krum_score(vectors: Sequence[np.ndarray], i: int, f: int = 1) -> float:
    """Sum of squared distances from vector ``i`` to its n-f-2 nearest neighbours."""
    n = len(vectors)
    if not 0 <= i < n:
        raise ConfigError(f"index {i} out of range for {n} vectors")
    return float(krum_scores(vectors, f)[i])


def krum_select(vectors: Sequence[np.ndarray], f: int = 1) -> tuple[int, np.ndarray]:
    """Index and value of the minimum-score vector (lowest index on ties)."""
    scores = krum_scores(vectors, f)
    idx = int(np.argmin(scores))
    return idx, np.array(vectors[idx], dtype=np.float64)


def trimmed_mean(vectors: Sequence[np.ndarray], trim_fraction: float = 0.1) -> np.ndarray:
    """Coordinate-wise mean after dropping floor(n * trim) values from each end."""
    if not 0.0 <= trim_fraction < 0.5:
        raise ConfigError(f"trim_fraction must lie in [0, 0.5), got {trim_fraction}")
    V = _stack(vectors)
    n = V.shape[0]
    t = math.floor(n * trim_fraction)
    if n - 2 * t <= 0:
        raise ConfigError(f"trimming {t} from each end of {n} values leaves nothing")
    S = np.sort(V, axis=0)
    return S[t : n - t].mean(axis=0)


def krum_aggregate(global_params, locals_, f: int = 1, eta: float = 1.0):
    """Move the global model toward the Krum-selected local; returns (index, params)."""
    idx, chosen = krum_select(locals_, f)
    g = np.asarray(global_params, dtype=np.float64)
    if eta == 1.0:
        return idx, chosen
    return idx, g + eta * (chosen - g)


def trimmed_mean_aggregate(global_params, locals_, trim_fraction: float = 0.1, eta: float = 1.0):
    tm = trimmed_mean(locals_, trim_fraction)
    g = np.asarray(global_params, dtype=np.float64)
    if eta == 1.0:
        return tm
    return g + eta * (tm - g)
