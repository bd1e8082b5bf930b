"""Noise predictors: the interface the engine calls plus analytic stand-ins for a trained network."""

from __future__ import annotations

import math
from typing import Hashable, Protocol, runtime_checkable

import numpy as np

from .core import as_latent

# Conditioning is passed through untouched; any hashable tag works.
ConditioningRef = Hashable


@runtime_checkable
class NoisePredictor(Protocol):
    def evaluate(self, z: np.ndarray, t: float, c: ConditioningRef = None) -> np.ndarray: ...


def default_fd_epsilon(z: np.ndarray) -> float:
    return 1e-5 * (1.0 + float(np.max(np.abs(z))))


class ToyShiftedGaussian:
    """Probability-flow field of a unit Gaussian shifted by ``a`` and decaying as ``a*exp(-t)``."""

    def __init__(self, a: float):
        if a == 0 or not math.isfinite(a):
            raise ValueError("shift a must be a nonzero finite number")
        self.a = float(a)

    def evaluate(self, z, t, c=None):
        z = np.asarray(z, dtype=np.float64)
        return np.full(z.shape, -self.a * math.exp(-t))

    def jvp(self, z, t, c, direction):
        return np.zeros_like(np.asarray(direction, dtype=np.float64))

    def vjp(self, z, t, c, cotangent):
        return np.zeros_like(np.asarray(cotangent, dtype=np.float64))


class LinearPredictor:
    """``eps(z) = M @ z`` on the flattened latent; its Jacobian is exactly ``M``."""

    def __init__(self, matrix):
        m = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"matrix must be square, got shape {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("matrix entries must be finite")
        self.matrix = m

    def _apply(self, m, v):
        v = np.asarray(v, dtype=np.float64)
        if v.size != m.shape[1]:
            raise ValueError(f"dimension mismatch: matrix is {m.shape}, latent has {v.size} entries")
        return (m @ v.reshape(-1)).reshape(v.shape)

    def evaluate(self, z, t=None, c=None):
        return self._apply(self.matrix, z)

    def jvp(self, z, t, c, direction):
        return self._apply(self.matrix, direction)

    def vjp(self, z, t, c, cotangent):
        return self._apply(self.matrix.T, cotangent)

    @classmethod
    def scaled_orthogonal(cls, dim: int, scale: float, seed: int) -> "LinearPredictor":
        """``scale * Q`` with ``Q`` a seeded random orthogonal matrix: every singular value equals ``scale``."""
        rng = np.random.default_rng(seed)
        q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
        q = q * np.sign(np.diag(r))
        return cls(scale * q)


class SeededNonlinear:
    """Smooth random-feature surrogate ``A @ tanh(B @ z / scale + b1*sin(t) + b2*cos(t))``.

    ``A`` is normalized to spectral norm ``gain`` and ``B`` to spectral norm 1, so
    the Jacobian norm never exceeds ``gain / scale``. Values are reproducible to
    roundoff; BLAS-dependent summation order can move the last bits across platforms.
    """

    def __init__(self, dim: int, seed: int, width: int = 32, scale: float = 1.0, gain: float = 0.5):
        if dim <= 0 or width <= 0:
            raise ValueError("dim and width must be positive")
        if not scale > 0:
            raise ValueError("smoothness scale must be positive")
        self.dim, self.seed, self.width, self.scale, self.gain = dim, seed, width, float(scale), float(gain)
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((dim, width))
        b = rng.standard_normal((width, dim))
        self.A = gain * a / np.linalg.norm(a, 2)
        self.B = b / np.linalg.norm(b, 2)
        self.b_sin = rng.standard_normal(width)
        self.b_cos = rng.standard_normal(width)

    def _pre(self, z, t):
        flat = np.asarray(z, dtype=np.float64).reshape(-1)
        if flat.size != self.dim:
            raise ValueError(f"dimension mismatch: predictor has dim {self.dim}, latent has {flat.size} entries")
        t = 0.0 if t is None else float(t)
        return self.B @ flat / self.scale + self.b_sin * math.sin(t) + self.b_cos * math.cos(t)

    def evaluate(self, z, t=None, c=None):
        z = np.asarray(z, dtype=np.float64)
        return (self.A @ np.tanh(self._pre(z, t))).reshape(z.shape)

    def jvp(self, z, t, c, direction):
        d = np.asarray(direction, dtype=np.float64)
        sech2 = 1.0 - np.tanh(self._pre(z, t)) ** 2
        return (self.A @ (sech2 * (self.B @ d.reshape(-1)) / self.scale)).reshape(d.shape)

    def vjp(self, z, t, c, cotangent):
        u = np.asarray(cotangent, dtype=np.float64)
        sech2 = 1.0 - np.tanh(self._pre(z, t)) ** 2
        return (self.B.T @ (sech2 * (self.A.T @ u.reshape(-1))) / self.scale).reshape(u.shape)


class FiniteDifferenceOnly:
    """Hides a predictor's analytic derivatives so callers fall back to finite differences."""

    def __init__(self, inner: NoisePredictor):
        self.inner = inner

    def evaluate(self, z, t=None, c=None):
        return self.inner.evaluate(z, t, c)


class CountingPredictor:
    """Wraps a predictor and counts ``evaluate`` calls."""

    def __init__(self, inner: NoisePredictor):
        self.inner = inner
        self.calls = 0

    def evaluate(self, z, t=None, c=None):
        self.calls += 1
        return self.inner.evaluate(z, t, c)

    def __getattr__(self, name):
        # derivatives pass straight through and are not counted
        return getattr(self.inner, name)


def predictor_jvp(predictor, z, t, c, direction, fd_epsilon: float | None = None) -> np.ndarray:
    """Jacobian-vector product of ``predictor`` at ``z``.

    Uses the predictor's own ``jvp`` when it has one, otherwise a central
    difference ``(f(z + e*v) - f(z - e*v)) / (2e)``.
    """
    z = np.asarray(z, dtype=np.float64)
    v = np.asarray(direction, dtype=np.float64)
    if v.shape != z.shape:
        raise ValueError(f"direction shape {v.shape} does not match latent shape {z.shape}")
    if hasattr(predictor, "jvp"):
        out = predictor.jvp(z, t, c, v)
    else:
        eps = default_fd_epsilon(z) if fd_epsilon is None else fd_epsilon
        if not eps > 0:
            raise ValueError("fd_epsilon must be positive")
        out = (predictor.evaluate(z + eps * v, t, c) - predictor.evaluate(z - eps * v, t, c)) / (2.0 * eps)
    out = np.asarray(out, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("JVP overflow")
    return out


def forward_difference_jvp(predictor, z, t, c, direction, fd_epsilon: float | None = None) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    eps = default_fd_epsilon(z) if fd_epsilon is None else fd_epsilon
    return (predictor.evaluate(z + eps * direction, t, c) - predictor.evaluate(z, t, c)) / eps


def predictor_vjp(predictor, z, t, c, cotangent, fd_epsilon: float | None = None) -> np.ndarray:
    """Vector-Jacobian product ``J^T u``.

    Without an analytic ``vjp`` this differentiates ``<u, f(z)>`` coordinate by
    coordinate with central differences, costing ``2 * z.size`` evaluations.
    """
    z = np.asarray(z, dtype=np.float64)
    u = np.asarray(cotangent, dtype=np.float64)
    if hasattr(predictor, "vjp"):
        out = np.asarray(predictor.vjp(z, t, c, u), dtype=np.float64)
    else:
        eps = default_fd_epsilon(z) if fd_epsilon is None else fd_epsilon
        flat = z.reshape(-1)
        out = np.empty(flat.size)
        for i in range(flat.size):
            e = np.zeros_like(flat)
            e[i] = eps
            plus = predictor.evaluate((flat + e).reshape(z.shape), t, c)
            minus = predictor.evaluate((flat - e).reshape(z.shape), t, c)
            out[i] = np.vdot(u, plus - minus) / (2.0 * eps)
        out = out.reshape(z.shape)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("VJP overflow")
    return out


def build_predictor(spec: dict, dim: int):
    """Construct a predictor from a ``predictor.*`` config mapping."""
    kind = spec.get("kind")
    if kind == "toy":
        return ToyShiftedGaussian(spec.get("a", 1.0))
    if kind == "linear":
        if "matrix" in spec:
            return LinearPredictor(spec["matrix"])
        return LinearPredictor.scaled_orthogonal(dim, spec.get("scale", 0.5), spec.get("seed", 0))
    if kind == "seeded_nonlinear":
        return SeededNonlinear(
            dim,
            seed=spec.get("seed", 0),
            width=spec.get("width", 32),
            scale=spec.get("scale", 1.0),
            gain=spec.get("gain", 0.5),
        )
    raise ValueError(f"predictor.kind: unknown predictor kind {kind!r}")
