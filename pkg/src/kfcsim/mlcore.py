"""Small trainable classifiers with analytic gradients.

Two architectures are supported, both operating on a flat float64 parameter
vector so that aggregation rules can treat every model as a point in R^d:

* ``softmax-linear``: logits = W x + b, with W of shape (k, p).
* ``mlp1``: one tanh hidden layer of width h, then a linear softmax head.

Parameter layout is row-major ``W`` followed by ``b`` (and for ``mlp1`` the
hidden layer block comes first).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from .errors import ArgumentError, ConfigError, ShapeError

if TYPE_CHECKING:
    from .data import Dataset

INIT_RANGE = 0.05

SOFTMAX_LINEAR = "softmax-linear"
MLP1 = "mlp1"


@dataclass(frozen=True)
class Arch:
    kind: str
    p: int
    k: int
    hidden: int = 0

    def __post_init__(self):
        if self.kind not in (SOFTMAX_LINEAR, MLP1):
            raise ConfigError(f"unknown architecture {self.kind!r}")
        if self.p < 1 or self.k < 1:
            raise ConfigError(f"invalid dimensions p={self.p}, k={self.k}")
        if self.kind == MLP1 and self.hidden < 1:
            raise ConfigError(f"mlp1 needs hidden >= 1, got {self.hidden}")

    @classmethod
    def softmax_linear(cls, p: int, k: int) -> "Arch":
        return cls(SOFTMAX_LINEAR, p, k)

    @classmethod
    def mlp1(cls, p: int, hidden: int, k: int) -> "Arch":
        return cls(MLP1, p, k, hidden)

    @property
    def dim(self) -> int:
        if self.kind == SOFTMAX_LINEAR:
            return self.k * (self.p + 1)
        h = self.hidden
        return h * (self.p + 1) + self.k * (h + 1)


@dataclass(frozen=True)
class Model:
    arch: Arch
    params: np.ndarray = field(repr=False)

    def __post_init__(self):
        params = np.array(self.params, dtype=np.float64)
        if params.ndim != 1 or params.shape[0] != self.arch.dim:
            raise ShapeError(
                f"params of shape {params.shape} do not match arch dim {self.arch.dim}"
            )
        params.setflags(write=False)
        object.__setattr__(self, "params", params)

    def with_params(self, params: np.ndarray) -> "Model":
        return Model(self.arch, params)


@dataclass(frozen=True)
class TrainSpec:
    epochs: int = 5
    learning_rate: float = 0.5
    batch_size: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")


def init_model(arch: Arch, seed: int) -> Model:
    rng = np.random.default_rng(seed)
    return Model(arch, rng.uniform(-INIT_RANGE, INIT_RANGE, size=arch.dim))


def _unpack(arch: Arch, params: np.ndarray):
    p, k = arch.p, arch.k
    if arch.kind == SOFTMAX_LINEAR:
        W = params[: k * p].reshape(k, p)
        b = params[k * p :]
        return W, b
    h = arch.hidden
    o = 0
    W1 = params[o : o + h * p].reshape(h, p)
    o += h * p
    b1 = params[o : o + h]
    o += h
    W2 = params[o : o + k * h].reshape(k, h)
    o += k * h
    b2 = params[o : o + k]
    return W1, b1, W2, b2


def _as_matrix(arch: Arch, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != arch.p:
        raise ShapeError(f"expected {arch.p} features, got shape {X.shape}")
    return X


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def logits(model: Model, X) -> np.ndarray:
    """Raw class scores for a batch ``X`` of shape (n, p)."""
    X = _as_matrix(model.arch, X)
    if model.arch.kind == SOFTMAX_LINEAR:
        W, b = _unpack(model.arch, model.params)
        return X @ W.T + b
    W1, b1, W2, b2 = _unpack(model.arch, model.params)
    return np.tanh(X @ W1.T + b1) @ W2.T + b2


def predict_proba(model: Model, features) -> np.ndarray:
    """Class probabilities; a single vector in gives a length-k vector out."""
    single = np.ndim(features) == 1
    probs = np.exp(_log_softmax(logits(model, features)))
    probs /= probs.sum(axis=1, keepdims=True)
    return probs[0] if single else probs


def predict(model: Model, features) -> np.ndarray | int:
    # np.argmax returns the first maximum, so ties go to the lowest class index.
    single = np.ndim(features) == 1
    labels = np.argmax(logits(model, features), axis=1)
    return int(labels[0]) if single else labels


def loss_and_grad_arrays(model: Model, X, y) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the flat params."""
    arch = model.arch
    X = _as_matrix(arch, X)
    y = np.asarray(y, dtype=np.int64)
    n = X.shape[0]
    if n == 0:
        raise ArgumentError("empty batch")
    if y.shape != (n,):
        raise ShapeError(f"labels shape {y.shape} does not match batch size {n}")

    if arch.kind == SOFTMAX_LINEAR:
        W, b = _unpack(arch, model.params)
        z = X @ W.T + b
    else:
        W1, b1, W2, b2 = _unpack(arch, model.params)
        a = np.tanh(X @ W1.T + b1)
        z = a @ W2.T + b2

    logp = _log_softmax(z)
    loss = -float(logp[np.arange(n), y].mean())
    dz = np.exp(logp)
    dz[np.arange(n), y] -= 1.0
    dz /= n

    if arch.kind == SOFTMAX_LINEAR:
        grad = np.concatenate([(dz.T @ X).ravel(), dz.sum(axis=0)])
    else:
        dW2 = dz.T @ a
        db2 = dz.sum(axis=0)
        da = dz @ W2
        dpre = da * (1.0 - a * a)
        dW1 = dpre.T @ X
        db1 = dpre.sum(axis=0)
        grad = np.concatenate([dW1.ravel(), db1, dW2.ravel(), db2])
    return loss, grad


def loss_and_grad(model: Model, batch: "Dataset") -> tuple[float, np.ndarray]:
    if len(batch) == 0:
        raise ArgumentError("empty batch")
    return loss_and_grad_arrays(model, batch.X, batch.y)


def sgd_train(model: Model, dataset: "Dataset", spec: TrainSpec) -> Model:
    """Plain minibatch SGD; shuffles once per epoch with ``spec.seed``.

    Returns a new model, the input is left untouched.
    """
    n = len(dataset)
    if n == 0:
        raise ArgumentError("cannot train on an empty dataset")
    params = np.array(model.params, dtype=np.float64)
    rng = np.random.default_rng(spec.seed)
    X, y = dataset.X, dataset.y
    work = Model(model.arch, params)
    for _ in range(spec.epochs):
        order = rng.permutation(n)
        for start in range(0, n, spec.batch_size):
            idx = order[start : start + spec.batch_size]
            _, grad = loss_and_grad_arrays(work, X[idx], y[idx])
            params = params - spec.learning_rate * grad
            work = Model(model.arch, params)
    if not np.all(np.isfinite(params)):
        raise FloatingPointError("training diverged to non-finite parameters")
    return work


def evaluate_accuracy(model: Model, dataset: "Dataset") -> float:
    if len(dataset) == 0:
        raise ArgumentError("cannot evaluate on an empty dataset")
    return float(np.mean(predict(model, dataset.X) == dataset.y))
