"""Single-hidden-layer tanh MLP with softmax output, written directly in numpy.

Parameters live in one flat float64 vector laid out as
``[W1 (hidden x inputs), b1 (hidden), W2 (classes x hidden), b2 (classes)]``
so that averaging and transmission act on a single array.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import ConfigurationError, EmptyInputError, NumericError, ShapeError

PROB_FLOOR = 1e-12
INIT_SCALE = 0.1


@dataclass(frozen=True)
class Architecture:
    n_inputs: int
    n_hidden: int
    n_classes: int

    def __post_init__(self):
        if min(self.n_inputs, self.n_hidden, self.n_classes) <= 0:
            raise ConfigurationError(f"architecture dims must be positive, got {self}")

    @property
    def n_params(self) -> int:
        h, d, c = self.n_hidden, self.n_inputs, self.n_classes
        return h * d + h + c * h + c

    def split(self, vec: np.ndarray):
        """Return (W1, b1, W2, b2) as views into ``vec``."""
        h, d, c = self.n_hidden, self.n_inputs, self.n_classes
        i = 0
        W1 = vec[i : i + h * d].reshape(h, d)
        i += h * d
        b1 = vec[i : i + h]
        i += h
        W2 = vec[i : i + c * h].reshape(c, h)
        i += c * h
        b2 = vec[i : i + c]
        return W1, b1, W2, b2


@dataclass(frozen=True, eq=False)
class ModelParams:
    arch: Architecture
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.values.shape != (self.arch.n_params,):
            raise ShapeError(
                f"parameter vector has shape {self.values.shape}, expected ({self.arch.n_params},)"
            )

    def copy(self) -> ModelParams:
        return ModelParams(self.arch, self.values.copy())

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return self.arch == other.arch and np.array_equal(self.values, other.values)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 32
    lr: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")
        if not self.lr >= 0:
            raise ConfigurationError(f"learning rate must be nonnegative, got {self.lr}")


def init_params(arch: Architecture, seed: int) -> ModelParams:
    """Uniform(-0.1, 0.1) weights and zero biases, reproducible from ``seed``."""
    rng = np.random.default_rng(seed)
    vec = np.zeros(arch.n_params)
    W1, _, W2, _ = arch.split(vec)
    W1[...] = rng.uniform(-INIT_SCALE, INIT_SCALE, size=W1.shape)
    W2[...] = rng.uniform(-INIT_SCALE, INIT_SCALE, size=W2.shape)
    return ModelParams(arch, vec)


def _check_inputs(arch: Architecture, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != arch.n_inputs:
        raise ShapeError(f"inputs of shape {X.shape} do not match n_inputs={arch.n_inputs}")
    return X


def _forward(arch: Architecture, vec: np.ndarray, X: np.ndarray):
    W1, b1, W2, b2 = arch.split(vec)
    hidden = np.tanh(X @ W1.T + b1)
    logits = hidden @ W2.T + b2
    logits -= logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)
    return hidden, probs


def predict_proba(p: ModelParams, X: np.ndarray) -> np.ndarray:
    """Class probabilities for a single feature vector or a 2-D batch."""
    single = np.ndim(X) == 1
    X = _check_inputs(p.arch, X)
    _, probs = _forward(p.arch, p.values, X)
    return probs[0] if single else probs


predict = predict_proba


def predict_labels(p: ModelParams, X: np.ndarray) -> np.ndarray:
    return np.argmax(predict_proba(p, _check_inputs(p.arch, X)), axis=1)


def _per_example_nll(p: ModelParams, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    probs = predict_proba(p, X)
    picked = probs[np.arange(len(y)), y]
    return -np.log(np.clip(picked, PROB_FLOOR, 1.0))


def _as_labels(y, n: int, n_classes: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if y.shape != (n,):
        raise ShapeError(f"labels shape {y.shape} does not match {n} examples")
    if n and (y.min() < 0 or y.max() >= n_classes):
        raise ShapeError(f"labels outside [0, {n_classes})")
    return y


def loss(p: ModelParams, X: np.ndarray, y: np.ndarray) -> float:
    """Mean cross-entropy of the true class."""
    X = _check_inputs(p.arch, X)
    if len(X) == 0:
        raise EmptyInputError("loss of an empty batch")
    y = _as_labels(y, len(X), p.arch.n_classes)
    return float(_per_example_nll(p, X, y).mean())


def group_loss(p: ModelParams, X: np.ndarray, y: np.ndarray, groups: np.ndarray, s: int) -> float | None:
    """Mean cross-entropy restricted to examples of group ``s``; None if the group is absent."""
    mask = np.asarray(groups) == s
    if not mask.any():
        return None
    X = _check_inputs(p.arch, X)
    return loss(p, X[mask], np.asarray(y)[mask])


def group_losses(p: ModelParams, X, y, groups) -> tuple[float, dict[int, float]]:
    """Overall loss plus the loss of every group present, from a single forward pass."""
    _, overall, by_group = evaluate(p, X, y, groups)
    return overall, by_group


def evaluate(p: ModelParams, X, y, groups) -> tuple[np.ndarray, float, dict[int, float]]:
    """Predicted labels, overall loss and per-group losses from one forward pass."""
    X = _check_inputs(p.arch, X)
    if len(X) == 0:
        raise EmptyInputError("evaluate on an empty batch")
    y = _as_labels(y, len(X), p.arch.n_classes)
    groups = np.asarray(groups)
    _, probs = _forward(p.arch, p.values, X)
    nll = -np.log(np.clip(probs[np.arange(len(y)), y], PROB_FLOOR, 1.0))
    by_group = {int(s): float(nll[groups == s].mean()) for s in np.unique(groups)}
    return np.argmax(probs, axis=1), float(nll.mean()), by_group


def _grad_into(arch: Architecture, vec: np.ndarray, X: np.ndarray, onehot: np.ndarray, out: np.ndarray) -> None:
    W1, b1, W2, b2 = arch.split(vec)
    gW1, gb1, gW2, gb2 = arch.split(out)
    hidden = np.tanh(X @ W1.T + b1)
    logits = hidden @ W2.T + b2
    logits -= logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)
    dlogits = (probs - onehot) / len(X)
    np.dot(dlogits.T, hidden, out=gW2)
    dlogits.sum(axis=0, out=gb2)
    dhidden = (dlogits @ W2) * (1.0 - hidden * hidden)
    np.dot(dhidden.T, X, out=gW1)
    dhidden.sum(axis=0, out=gb1)


def gradient(p: ModelParams, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Backpropagated gradient of :func:`loss`, shaped like ``p.values``."""
    X = _check_inputs(p.arch, X)
    if len(X) == 0:
        raise EmptyInputError("gradient of an empty batch")
    y = _as_labels(y, len(X), p.arch.n_classes)
    onehot = np.eye(p.arch.n_classes)[y]
    out = np.empty_like(p.values)
    _grad_into(p.arch, p.values, X, onehot, out)
    return out


def local_train(p: ModelParams, X: np.ndarray, y: np.ndarray, cfg: TrainConfig) -> ModelParams:
    """Minibatch SGD for ``cfg.epochs`` epochs; returns a new ModelParams.

    Each epoch visits the data in a fresh permutation drawn from
    ``default_rng(cfg.seed)``; the last batch of an epoch may be short.
    """
    arch = p.arch
    X = np.ascontiguousarray(_check_inputs(arch, X))
    n = len(X)
    if n == 0:
        raise EmptyInputError("local_train on empty data")
    y = _as_labels(y, n, arch.n_classes)
    onehot = np.eye(arch.n_classes)[y]
    rng = np.random.default_rng(cfg.seed)
    orders = np.stack([rng.permutation(n) for _ in range(cfg.epochs)])
    vec = p.values.copy()
    status = _sgd_kernel(vec, X, onehot, orders, cfg.batch_size, float(cfg.lr), arch.n_hidden)
    if status >= 0:
        n_batches = -(-n // cfg.batch_size)
        epoch, batch = divmod(int(status), n_batches)
        raise NumericError(f"non-finite gradient at epoch {epoch}, batch {batch}")
    return ModelParams(arch, vec)


@njit(cache=True, nogil=True)
def _sgd_kernel(vec, X, onehot, orders, batch_size, lr, n_hidden):
    """In-place minibatch SGD over precomputed epoch orders.

    Returns -1 on success, else ``epoch * n_batches + batch`` of the first
    non-finite gradient.
    """
    n, d = X.shape
    c = onehot.shape[1]
    h = n_hidden
    o_b1 = h * d
    o_W2 = o_b1 + h
    o_b2 = o_W2 + c * h
    n_batches = (n + batch_size - 1) // batch_size
    hid = np.empty((batch_size, h))
    dlog = np.empty((batch_size, c))
    grad = np.empty(vec.shape[0])
    for e in range(orders.shape[0]):
        for b in range(n_batches):
            start = b * batch_size
            stop = min(start + batch_size, n)
            m = stop - start
            grad[:] = 0.0
            for r in range(m):
                i = orders[e, start + r]
                for j in range(h):
                    z = vec[o_b1 + j]
                    for f in range(d):
                        z += vec[j * d + f] * X[i, f]
                    hid[r, j] = np.tanh(z)
                mx = -np.inf
                for k in range(c):
                    z = vec[o_b2 + k]
                    for j in range(h):
                        z += vec[o_W2 + k * h + j] * hid[r, j]
                    dlog[r, k] = z
                    if z > mx:
                        mx = z
                tot = 0.0
                for k in range(c):
                    dlog[r, k] = np.exp(dlog[r, k] - mx)
                    tot += dlog[r, k]
                for k in range(c):
                    dlog[r, k] = (dlog[r, k] / tot - onehot[i, k]) / m
            for r in range(m):
                i = orders[e, start + r]
                for k in range(c):
                    g = dlog[r, k]
                    grad[o_b2 + k] += g
                    for j in range(h):
                        grad[o_W2 + k * h + j] += g * hid[r, j]
                for j in range(h):
                    back = 0.0
                    for k in range(c):
                        back += dlog[r, k] * vec[o_W2 + k * h + j]
                    back *= 1.0 - hid[r, j] * hid[r, j]
                    grad[o_b1 + j] += back
                    for f in range(d):
                        grad[j * d + f] += back * X[i, f]
            s = 0.0
            for q in range(grad.shape[0]):
                s += grad[q]
            if not np.isfinite(s):
                return e * n_batches + b
            for q in range(grad.shape[0]):
                vec[q] -= lr * grad[q]
    return -1


def weighted_average(models: list[ModelParams], weights: list[float]) -> ModelParams:
    """Convex combination of parameter vectors, summed in list order."""
    if not models:
        raise EmptyInputError("weighted_average needs at least one model")
    if len(models) != len(weights):
        raise ShapeError("models and weights differ in length")
    arch = models[0].arch
    if any(m.arch != arch for m in models):
        raise ShapeError("cannot average models with different architectures")
    w = [float(x) for x in weights]
    if any(x < 0 for x in w):
        raise ConfigurationError("averaging weights must be nonnegative")
    total = sum(w)
    if total <= 0:
        raise ConfigurationError("averaging weights sum to zero")
    acc = np.zeros(arch.n_params)
    for m, wi in zip(models, w):
        acc += (wi / total) * m.values
    return ModelParams(arch, acc)
