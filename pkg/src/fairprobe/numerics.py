"""Dense numeric helpers shared by every head and objective.

Storage is float32 (embedding files, checkpoints); all arithmetic here runs
in float64 so that gradient checks stay tight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import DataError, NumericError

PROB_FLOOR = 1e-12
LOG_FLOOR = math.log(PROB_FLOOR)

Params = dict[str, np.ndarray]


def _require_finite(a: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite values in {what}")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax over the last axis (log-sum-exp stabilised)."""
    z = np.asarray(logits, dtype=np.float64)
    _require_finite(z, "softmax input")
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(v: np.ndarray) -> np.ndarray:
    """Softmax over the last axis; accepts a vector or a batch of rows."""
    z = np.asarray(v, dtype=np.float64)
    _require_finite(z, "softmax input")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def entropy_from_log(logp: np.ndarray) -> np.ndarray:
    """Shannon entropy (nats) of each row given its log-probabilities."""
    return -(np.exp(logp) * logp).sum(axis=-1)


def weighted_cross_entropy(probs: np.ndarray, label: int, weight: float = 1.0) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= label < probs.shape[-1]:
        raise NumericError(f"label {label} out of range for {probs.shape[-1]} classes")
    return float(-weight * math.log(max(probs[label], PROB_FLOOR)))


@dataclass
class GradientBundle:
    """Loss value, per-parameter gradients and the named loss components.

    ``terms`` holds each component of a composite objective separately so the
    per-player games (adversarial heads, gradient reversal) can be checked
    against finite differences. ``state`` carries side outputs such as the
    updated GroupDRO weights.
    """

    loss: float
    grads: Params
    terms: dict[str, float] = field(default_factory=dict)
    state: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not math.isfinite(self.loss):
            raise NumericError(f"non-finite loss {self.loss}")


def finite_difference_check(
    loss_fn: Callable[[Params], tuple[float, Mapping[str, np.ndarray]]],
    params: Mapping[str, np.ndarray],
    epsilon: float = 1e-6,
) -> float:
    """Compare analytic gradients with central differences.

    ``loss_fn(params)`` returns ``(loss, grads)``; only parameters present in
    ``grads`` are perturbed. The error for each parameter is
    ``||analytic - numeric|| / (||numeric|| + 1e-8)`` and the maximum over
    parameters is returned.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-6, 1e-3]")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    loss_a, grads = loss_fn(base)
    loss_b, _ = loss_fn({k: v.copy() for k, v in base.items()})
    if loss_a != loss_b:
        raise NumericError("loss_fn is not deterministic")

    worst = 0.0
    for name, analytic in grads.items():
        analytic = np.asarray(analytic, dtype=np.float64)
        if analytic.shape != base[name].shape:
            raise NumericError(f"gradient shape mismatch for {name}")
        numeric = np.zeros_like(analytic)
        flat = base[name].reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up, _ = loss_fn(base)
            flat[i] = orig - epsilon
            down, _ = loss_fn(base)
            flat[i] = orig
            num_flat[i] = (up - down) / (2.0 * epsilon)
        err = np.linalg.norm(analytic - numeric) / (np.linalg.norm(numeric) + 1e-8)
        worst = max(worst, float(err))
    return worst


@dataclass
class OptimizerState:
    learning_rate: float
    kind: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.kind!r}")


def optimizer_step(state: OptimizerState, params: Mapping[str, np.ndarray],
                   grads: Mapping[str, np.ndarray]) -> Params:
    """Return updated parameters; Adam moments in ``state`` are advanced in place.

    Parameters without a gradient entry are passed through unchanged.
    """
    for name, g in grads.items():
        if name not in params or np.shape(g) != np.shape(params[name]):
            raise NumericError(f"gradient/parameter shape mismatch for {name}")
    lr = state.learning_rate
    out = dict(params)
    if state.kind == "sgd":
        for name, g in grads.items():
            out[name] = params[name] - lr * g
        return out

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, g in grads.items():
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(g, dtype=np.float64)
            v = np.zeros_like(g, dtype=np.float64)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        out[name] = params[name] - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class PCAResult:
    projection: np.ndarray
    explained_variance_ratio: np.ndarray
    components: np.ndarray
    mean: np.ndarray


def pca_project(X: np.ndarray, target_dims: int = 2) -> PCAResult:
    """Project mean-centred rows of ``X`` onto the leading covariance eigenvectors.

    Each component's sign is fixed so its largest-magnitude loading is
    positive, which makes the output reproducible across LAPACK builds.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2 or X.shape[1] < target_dims:
        raise DataError("need at least 2 rows and target_dims columns")
    _require_finite(X, "pca input")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / (X.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order[:target_dims]]
    pivot = np.argmax(np.abs(evecs), axis=0)
    signs = np.sign(evecs[pivot, np.arange(target_dims)])
    signs[signs == 0] = 1.0
    evecs = evecs * signs
    total = evals.sum()
    ratio = evals[:target_dims] / total if total > 0 else np.zeros(target_dims)
    return PCAResult(Xc @ evecs, ratio, evecs.T, mean)
