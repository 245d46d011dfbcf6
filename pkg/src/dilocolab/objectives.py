"""Small differentiable objectives with exact gradients.

Every batch is a 2-D float array with one sample per row, so sharding a
batch is always a row split regardless of the objective.
"""

from __future__ import annotations

import numpy as np


class Objective:
    """Interface shared by the desk-scale objectives."""

    dim: int
    name = "objective"

    def loss(self, theta: np.ndarray, batch: np.ndarray) -> float:
        raise NotImplementedError

    def grad(self, theta: np.ndarray, batch: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def sample(self, stream: np.random.Generator, count: int) -> np.ndarray:
        raise NotImplementedError

    def heldout(self, stream: np.random.Generator, count: int) -> np.ndarray:
        return self.sample(stream, count)

    def init(self, stream: np.random.Generator) -> np.ndarray:
        return np.zeros(self.dim)


class NoisyQuadratic(Objective):
    """``f(theta) = 0.5 * sum(a * (theta - opt)**2)`` observed through noise.

    A batch holds ``count`` noise vectors drawn from N(0, sigma^2 I); the
    batch loss adds ``mean(z) . (theta - opt)`` so the stochastic gradient
    is the exact gradient plus noise with scale ``sigma / sqrt(count)``.
    """

    name = "quadratic"

    def __init__(self, curvature, optimum, sigma: float = 1.0):
        self.curvature = np.asarray(curvature, dtype=np.float64)
        self.optimum = np.asarray(optimum, dtype=np.float64)
        if self.curvature.shape != self.optimum.shape or self.curvature.ndim != 1:
            raise ValueError("curvature and optimum must be 1-D arrays of equal length")
        if np.any(self.curvature <= 0):
            raise ValueError("curvature must be positive")
        if sigma < 0:
            raise ValueError("sigma must be non-negative")
        self.sigma = float(sigma)
        self.dim = self.curvature.size

    @classmethod
    def create(cls, dim: int, seed: int = 0, sigma: float = 1.0, condition: float = 100.0):
        """Log-spaced curvatures from 1 down to ``1/condition``; random optimum."""
        rng = np.random.default_rng([seed, 17])
        curvature = np.logspace(0.0, -np.log10(condition), dim) if dim > 1 else np.ones(1)
        return cls(curvature, rng.normal(size=dim), sigma)

    def _noise_mean(self, batch):
        if batch is None or len(batch) == 0:
            return 0.0
        return batch.mean(axis=0)

    def value(self, theta):
        diff = theta - self.optimum
        return 0.5 * float(np.dot(self.curvature * diff, diff))

    def loss(self, theta, batch):
        diff = theta - self.optimum
        return 0.5 * float(np.dot(self.curvature * diff, diff)) + float(
            np.dot(np.broadcast_to(self._noise_mean(batch), diff.shape), diff)
        )

    def grad(self, theta, batch):
        return self.curvature * (theta - self.optimum) + self._noise_mean(batch)

    def sample(self, stream, count):
        return self.sigma * stream.standard_normal((count, self.dim))

    def heldout(self, stream, count):
        # Noise-free evaluation keeps eval losses positive for log-domain fits.
        return np.zeros((1, self.dim))


def closed_form_optimum(obj: NoisyQuadratic) -> tuple[np.ndarray, float]:
    return obj.optimum.copy(), obj.value(obj.optimum)


class TinyMLP(Objective):
    """One tanh hidden layer with softmax cross-entropy on a Gaussian mixture.

    Parameters are a flat vector ``[W1, b1, W2, b2]``. Batch rows are the
    input features followed by the integer class label stored as a float.
    """

    name = "mlp"

    def __init__(self, in_dim: int = 4, hidden: int = 8, classes: int = 3, seed: int = 0, spread: float = 2.0):
        self.in_dim, self.hidden, self.classes = in_dim, hidden, classes
        self.centers = np.random.default_rng([seed, 29]).normal(scale=spread, size=(classes, in_dim))
        self._shapes = [(hidden, in_dim), (hidden,), (classes, hidden), (classes,)]
        self._sizes = [int(np.prod(s)) for s in self._shapes]
        self.dim = sum(self._sizes)

    def unpack(self, theta):
        parts, offset = [], 0
        for shape, size in zip(self._shapes, self._sizes):
            parts.append(theta[offset : offset + size].reshape(shape))
            offset += size
        return parts

    def init(self, stream):
        w1 = stream.normal(scale=1.0 / np.sqrt(self.in_dim), size=self._shapes[0])
        w2 = stream.normal(scale=1.0 / np.sqrt(self.hidden), size=self._shapes[2])
        return np.concatenate([w1.ravel(), np.zeros(self.hidden), w2.ravel(), np.zeros(self.classes)])

    def sample(self, stream, count):
        labels = stream.integers(0, self.classes, size=count)
        x = self.centers[labels] + stream.standard_normal((count, self.in_dim))
        return np.column_stack([x, labels.astype(np.float64)])

    def _forward(self, theta, batch):
        w1, b1, w2, b2 = self.unpack(theta)
        x, y = batch[:, : self.in_dim], batch[:, self.in_dim].astype(int)
        h = np.tanh(x @ w1.T + b1)
        logits = h @ w2.T + b2
        logits -= logits.max(axis=1, keepdims=True)
        logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
        return x, y, h, logp

    def loss(self, theta, batch):
        _, y, _, logp = self._forward(theta, batch)
        return float(-logp[np.arange(len(y)), y].mean())

    def grad(self, theta, batch):
        w1, b1, w2, b2 = self.unpack(theta)
        x, y, h, logp = self._forward(theta, batch)
        count = len(y)
        dlogits = np.exp(logp)
        dlogits[np.arange(count), y] -= 1.0
        dlogits /= count
        gw2 = dlogits.T @ h
        gb2 = dlogits.sum(axis=0)
        dpre = (dlogits @ w2) * (1.0 - h * h)
        gw1 = dpre.T @ x
        gb1 = dpre.sum(axis=0)
        return np.concatenate([gw1.ravel(), gb1, gw2.ravel(), gb2])


def finite_diff_check(obj: Objective, theta, batch, h: float = 1e-5, floor: float = 1e-8) -> float:
    """Max over coordinates of |analytic - central difference| / max(|a|, |b|, floor)."""
    if h <= 0:
        raise ValueError("step must be positive")
    theta = np.asarray(theta, dtype=np.float64)
    analytic = obj.grad(theta, batch)
    numeric = np.empty_like(theta)
    for i in range(theta.size):
        step = np.zeros_like(theta)
        step[i] = h
        numeric[i] = (obj.loss(theta + step, batch) - obj.loss(theta - step, batch)) / (2 * h)
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(diff / scale)) if theta.size else 0.0


def make_objective(kind: str, **params) -> Objective:
    """Build an objective from config-style keyword arguments."""
    if kind == "quadratic":
        return NoisyQuadratic.create(
            dim=int(params.get("dim", 16)),
            seed=int(params.get("seed", 0)),
            sigma=float(params.get("sigma", 1.0)),
            condition=float(params.get("condition", 100.0)),
        )
    if kind == "mlp":
        return TinyMLP(
            in_dim=int(params.get("in_dim", 4)),
            hidden=int(params.get("hidden", 8)),
            classes=int(params.get("classes", 3)),
            seed=int(params.get("seed", 0)),
            spread=float(params.get("spread", 2.0)),
        )
    raise ValueError(f"unknown objective {kind!r}")
