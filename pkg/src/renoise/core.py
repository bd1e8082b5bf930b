"""Numeric building blocks: latents, sampler step parameters, schedules and seeded noise."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

# Latents are plain float64 ndarrays; shape and row-major data live on the array.
Latent = np.ndarray

VP_TOLERANCE = 1e-9
_KINDS = ("ddim", "ancestral", "euler_ode")


def as_latent(x, name: str = "latent") -> np.ndarray:
    """Coerce ``x`` to a finite float64 array with a non-degenerate shape."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0 or arr.size == 0:
        raise ValueError(f"{name}: degenerate shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{name}: non-finite entries")
    return arr


@dataclass(frozen=True)
class StepParams:
    """Coefficients of one sampler step ``z_prev = phi*z + psi*eps_model + rho*eps``."""

    phi: float
    psi: float
    rho: float = 0.0

    def __post_init__(self):
        for name in ("phi", "psi", "rho"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise ValueError(f"{name} must be finite, got {value}")
        if self.phi == 0.0:
            raise ValueError("phi must be nonzero")
        if self.rho < 0.0:
            raise ValueError(f"rho must be >= 0, got {self.rho}")

    @property
    def deterministic(self) -> bool:
        return self.rho == 0.0


@dataclass(frozen=True)
class Schedule:
    """Per-step sampler coefficients plus the forward-noising coefficients.

    Index ``i`` describes the step between noise levels ``i + 1`` (noisier) and ``i``.
    ``timesteps[i]`` is the time handed to the noise predictor for that step.
    """

    kind: str
    timesteps: tuple[float, ...]
    steps: tuple[StepParams, ...]
    alpha: tuple[float, ...]
    sigma: tuple[float, ...]

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        n = len(self.steps)
        if n == 0:
            raise ValueError("schedule must have at least one step")
        if not (len(self.timesteps) == len(self.alpha) == len(self.sigma) == n):
            raise ValueError("timesteps, steps, alpha and sigma must have equal length")
        diffs = np.diff(np.asarray(self.timesteps, dtype=np.float64))
        if n > 1 and not (np.all(diffs > 0) or np.all(diffs < 0)):
            raise ValueError("timesteps must be strictly monotone")
        for a, s in zip(self.alpha, self.sigma):
            if not (0.0 < a <= 1.0) or s < 0.0:
                raise ValueError(f"invalid forward coefficients alpha={a}, sigma={s}")
            if self.variance_preserving and abs(a * a + s * s - 1.0) > VP_TOLERANCE:
                raise ValueError(f"alpha^2 + sigma^2 = {a * a + s * s} is not 1")

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def variance_preserving(self) -> bool:
        return self.kind != "euler_ode"

    @property
    def deterministic(self) -> bool:
        return all(p.deterministic for p in self.steps)

    def to_text(self) -> str:
        return schedule_to_text(self)


def _check_alpha_bar(alpha_bar: Sequence[float]) -> np.ndarray:
    abar = np.asarray(alpha_bar, dtype=np.float64)
    if abar.ndim != 1 or abar.size == 0:
        raise ValueError("alpha_bar must be a non-empty 1-d sequence")
    if np.any(~np.isfinite(abar)) or np.any(abar <= 0.0) or np.any(abar > 1.0):
        raise ValueError("alpha_bar entries must lie in (0, 1]")
    if np.any(np.diff(abar) >= 0.0):
        raise ValueError("alpha_bar must be strictly decreasing")
    return abar


def ddim_step_params(abar_t: float, abar_prev: float, eta: float = 0.0) -> StepParams:
    """Coefficients of the DDIM update from level ``abar_t`` to ``abar_prev``.

    ``eta`` scales the injected noise (0 is deterministic DDIM, 1 is DDPM-like).
    """
    phi = math.sqrt(abar_prev / abar_t)
    if eta > 0.0 and abar_t < abar_prev:
        rho = eta * math.sqrt((1.0 - abar_prev) / (1.0 - abar_t)) * math.sqrt(1.0 - abar_t / abar_prev)
    else:
        rho = 0.0
    direction = math.sqrt(max(1.0 - abar_prev - rho * rho, 0.0))
    psi = direction - phi * math.sqrt(1.0 - abar_t)
    return StepParams(phi, psi, rho)


def _vp_schedule(kind: str, abar: np.ndarray, eta: float) -> Schedule:
    prev = np.concatenate([[1.0], abar[:-1]])
    steps = tuple(ddim_step_params(float(a), float(p), eta) for a, p in zip(abar, prev))
    return Schedule(
        kind=kind,
        timesteps=tuple(float(i) for i in range(1, len(abar) + 1)),
        steps=steps,
        alpha=tuple(float(math.sqrt(a)) for a in abar),
        sigma=tuple(float(math.sqrt(1.0 - a)) for a in abar),
    )


def build_ddim_schedule(alpha_bar: Sequence[float]) -> Schedule:
    """Deterministic DDIM schedule over ``alpha_bar = [abar_1, ..., abar_T]``.

    The clean level ``abar_0`` is taken to be 1.
    """
    return _vp_schedule("ddim", _check_alpha_bar(alpha_bar), 0.0)


def build_ancestral_schedule(alpha_bar: Sequence[float], eta: float = 1.0) -> Schedule:
    """Stochastic schedule injecting ``eta``-scaled ancestral noise at every step but the last.

    The final denoising step (index 0) never injects noise.
    """
    if not 0.0 < eta <= 1.0:
        raise ValueError(f"eta must lie in (0, 1], got {eta}")
    sched = _vp_schedule("ancestral", _check_alpha_bar(alpha_bar), eta)
    first = sched.steps[0]
    steps = (StepParams(first.phi, first.psi, 0.0),) + sched.steps[1:]
    return Schedule(sched.kind, sched.timesteps, steps, sched.alpha, sched.sigma)


def build_euler_ode_schedule(times: Sequence[float], step_sizes: Sequence[float]) -> Schedule:
    """Wrap explicit Euler stepping of ``dz/dt = f(t, z)`` into sampler form.

    Inversion integrates forward in time by ``h``; denoising undoes it, so each
    step is ``z_prev = z - h * f(t, z)`` with ``f`` evaluated at ``times[i]``,
    the later time of step ``i``.
    """
    h = [float(x) for x in step_sizes]
    if len(h) == 0 or len(h) != len(times):
        raise ValueError("times and step_sizes must be non-empty and of equal length")
    for x in h:
        if not (math.isfinite(x) and x > 0.0):
            raise ValueError(f"step sizes must be positive, got {x}")
    n = len(h)
    return Schedule(
        kind="euler_ode",
        timesteps=tuple(float(t) for t in times),
        steps=tuple(StepParams(1.0, -x, 0.0) for x in h),
        alpha=(1.0,) * n,
        sigma=(0.0,) * n,
    )


def euler_times(t0: float, step_sizes: Sequence[float]) -> list[float]:
    """Later time of each step on the grid starting at ``t0``."""
    return [float(t) for t in t0 + np.cumsum(np.asarray(step_sizes, dtype=np.float64))]


def _fmt(x: float) -> str:
    return format(x, ".17g")


def schedule_to_text(sched: Schedule) -> str:
    cols = {
        "timesteps": list(sched.timesteps),
        "phi": [p.phi for p in sched.steps],
        "psi": [p.psi for p in sched.steps],
        "rho": [p.rho for p in sched.steps],
        "alpha": list(sched.alpha),
        "sigma": list(sched.sigma),
    }
    lines = ["{", f'  "kind": {json.dumps(sched.kind)},']
    items = list(cols.items())
    for i, (key, values) in enumerate(items):
        sep = "," if i < len(items) - 1 else ""
        lines.append(f'  "{key}": [{", ".join(_fmt(v) for v in values)}]{sep}')
    lines.append("}")
    return "\n".join(lines) + "\n"


def schedule_from_text(text: str) -> Schedule:
    doc = json.loads(text)
    missing = {"kind", "timesteps", "phi", "psi", "rho", "alpha", "sigma"} - doc.keys()
    if missing:
        raise ValueError(f"schedule document missing keys: {sorted(missing)}")
    steps = tuple(StepParams(float(f), float(p), float(r)) for f, p, r in zip(doc["phi"], doc["psi"], doc["rho"]))
    if not (len(steps) == len(doc["phi"]) == len(doc["psi"]) == len(doc["rho"])):
        raise ValueError("phi, psi and rho must have equal length")
    return Schedule(
        kind=doc["kind"],
        timesteps=tuple(float(x) for x in doc["timesteps"]),
        steps=steps,
        alpha=tuple(float(x) for x in doc["alpha"]),
        sigma=tuple(float(x) for x in doc["sigma"]),
    )


@dataclass(frozen=True)
class RngState:
    """Counter-based generator state.

    Every ``position`` selects an independent Philox stream keyed by
    ``(seed, position)``, so a draw depends only on those two numbers and
    never on what was drawn before it.
    """

    seed: int
    position: int = field(default=0)

    def __post_init__(self):
        if not (0 <= self.seed < 2**64) or not (0 <= self.position < 2**64):
            raise ValueError("seed and position must be 64-bit unsigned integers")

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=self.seed | (self.position << 64)))

    def advance(self, n: int = 1) -> "RngState":
        return RngState(self.seed, self.position + n)


def sample_gaussian(rng: RngState, shape: Sequence[int]) -> tuple[np.ndarray, RngState]:
    """Draw i.i.d. standard normals; returns the sample and the advanced state."""
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0 or any(s <= 0 for s in shape):
        raise ValueError(f"degenerate shape {shape}")
    return rng.generator().standard_normal(shape), rng.advance()
