"""ReNoise inversion: fixed-point renoising of each inversion step with weighted estimate averaging."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import RngState, Schedule, StepParams, sample_gaussian
from .predictors import CountingPredictor
from .regularize import (
    EditLossConfig,
    NoiseRecord,
    enhance_edit,
    noise_correction_exact,
    noise_correction_optimize,
)
from .sampler import Trajectory, approx_inverse_step, denoise_trajectory, forward_noise, inverse_step

logger = logging.getLogger(__name__)

WEIGHT_SUM_TOL = 1e-12
DIVERGENCE_RUN = 3


@dataclass(frozen=True)
class WeightBand:
    t_min: int
    t_max: int
    weights: tuple

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if self.t_min > self.t_max:
            raise ValueError(f"band [{self.t_min}, {self.t_max}] is empty")
        if w.size == 0 or np.any(w < 0) or abs(w.sum() - 1.0) > WEIGHT_SUM_TOL:
            raise ValueError(f"band [{self.t_min}, {self.t_max}]: weights must be non-negative and sum to 1")


@dataclass(frozen=True)
class RenoiseWeights:
    """Averaging weights per band of inversion steps (1-based step indices).

    ``weights[j]`` multiplies estimate ``z^(j+1)``; the starting point ``z^(0)`` is never averaged.
    """

    bands: tuple

    def __post_init__(self):
        ordered = sorted(self.bands, key=lambda b: b.t_min)
        for a, b in zip(ordered, ordered[1:]):
            if b.t_min <= a.t_max:
                raise ValueError(f"weight bands [{a.t_min}, {a.t_max}] and [{b.t_min}, {b.t_max}] overlap")
        object.__setattr__(self, "bands", tuple(ordered))

    @classmethod
    def constant(cls, weights: Sequence[float]) -> "RenoiseWeights":
        return cls((WeightBand(1, 2**31, tuple(float(w) for w in weights)),))

    @classmethod
    def last(cls, K: int) -> "RenoiseWeights":
        return cls.constant([0.0] * K + [1.0])

    @classmethod
    def default(cls, T: int, K: int, threshold: float = 0.25) -> "RenoiseWeights":
        """Uniform over the first 2 estimates for early steps, over the last 3 for the rest.

        Early steps are ``t <= floor(threshold * T)``.
        """
        n = K + 1
        early = [1.0 / min(2, n)] * min(2, n) + [0.0] * (n - min(2, n))
        late = [0.0] * (n - min(3, n)) + [1.0 / min(3, n)] * min(3, n)
        cut = int(math.floor(threshold * T))
        bands = []
        if cut >= 1:
            bands.append(WeightBand(1, min(cut, T), _normalize(early)))
        if cut < T:
            bands.append(WeightBand(cut + 1, T, _normalize(late)))
        return cls(tuple(bands))

    def weights_for(self, t: int, K: int) -> np.ndarray:
        """Weight vector of length ``K + 1`` for step ``t``, truncated/zero-padded and renormalized."""
        for band in self.bands:
            if band.t_min <= t <= band.t_max:
                w = np.zeros(K + 1)
                src = np.asarray(band.weights, dtype=np.float64)[: K + 1]
                w[: src.size] = src
                total = w.sum()
                if total <= 0:
                    raise ValueError(f"step {t}: weights vanish after truncation to {K + 1} estimates")
                return w if total == 1.0 else w / total
        raise ValueError(f"uncovered timestep {t}")


def _normalize(w):
    w = np.asarray(w, dtype=np.float64)
    return tuple(float(x) for x in w / w.sum())


@dataclass(frozen=True)
class NoiseCorrectionConfig:
    mode: str = "off"  # off | exact | optimize
    eta: float = 0.5
    iters: int = 1

    def __post_init__(self):
        if self.mode not in ("off", "exact", "optimize"):
            raise ValueError(f"unknown noise-correction mode {self.mode!r}")
        if self.mode == "optimize" and not 0.0 < self.eta <= 1.0:
            raise ValueError(f"eta must lie in (0, 1], got {self.eta}")


@dataclass(frozen=True)
class RenoiseConfig:
    K: int = 0
    weights: Optional[RenoiseWeights] = None  # None selects RenoiseWeights.default
    edit_loss: Optional[EditLossConfig] = None
    noise_correction: NoiseCorrectionConfig = field(default_factory=NoiseCorrectionConfig)
    weight_threshold: float = 0.25
    max_estimate_history: Optional[int] = None

    def __post_init__(self):
        if self.K < 0:
            raise ValueError("K must be non-negative")

    def weights_for(self, t: int, T: int) -> np.ndarray:
        weights = self.weights or RenoiseWeights.default(T, self.K, self.weight_threshold)
        return weights.weights_for(t, self.K)


@dataclass
class EstimateSeries:
    """Estimates ``z^(1) .. z^(K+1)`` of one inversion step and the model outputs that produced them."""

    estimates: list
    deltas: list
    weights: np.ndarray
    diverged: bool = False

    @property
    def last(self) -> np.ndarray:
        return self.estimates[-1]


@dataclass
class InversionResult:
    zT: np.ndarray
    latents: list  # z_0 .. z_T along the inversion
    noises: list  # eps_1 .. eps_T used for denoising (None on deterministic steps)
    per_step_series: list
    noise_records: list
    op_count: int

    def trajectory(self) -> Trajectory:
        return Trajectory(list(self.latents), list(self.noises))

    @property
    def divergence_flags(self) -> list:
        return [s.diverged for s in self.per_step_series]


def _weighted_average(estimates, weights) -> np.ndarray:
    out = None
    for w, z in zip(weights, estimates):
        if w == 0.0:
            continue
        out = w * z if out is None else out + w * z
    return out


def _growing_run(norms) -> bool:
    run = 0
    for a, b in zip(norms, norms[1:]):
        run = run + 1 if b > a else 0
        if run >= DIVERGENCE_RUN:
            return True
    return False


def renoise_step(
    z_prev,
    t,
    predictor,
    p: StepParams,
    eps,
    cfg: RenoiseConfig,
    c=None,
    *,
    step: int = 1,
    T: int = 1,
    reference_delta=None,
) -> tuple[np.ndarray, EstimateSeries]:
    """One inversion step with ``cfg.K`` renoising iterations.

    ``t`` is the time handed to the predictor; ``step`` (1-based, out of ``T``)
    selects the weight band.
    """
    z_prev = np.asarray(z_prev, dtype=np.float64)
    weights = cfg.weights_for(step, T)
    edit = cfg.edit_loss if cfg.edit_loss is not None and cfg.edit_loss.active else None
    history = cfg.max_estimate_history
    estimates, deltas = [], []
    current = z_prev
    for k in range(cfg.K + 1):
        delta = predictor.evaluate(current, t, c)
        if edit is not None and weights[k] > 0:
            delta = enhance_edit(delta, edit, reference_delta)
        current = inverse_step(z_prev, delta, eps, p)
        if not np.all(np.isfinite(current)):
            raise FloatingPointError(f"non-finite latent at inversion step {step}, renoising iteration {k}")
        estimates.append(current)
        deltas.append(delta)
    diffs = [float(np.linalg.norm(b - a)) for a, b in zip(estimates, estimates[1:])]
    diverged = _growing_run(diffs)
    if diverged:
        logger.warning("step %d: renoising iterates diverge, using the last estimate", step)
        z_avg = estimates[-1]
    else:
        z_avg = _weighted_average(estimates, weights)
    if history is not None and len(estimates) > history:
        estimates, deltas = estimates[-history:], deltas[-history:]
    return z_avg, EstimateSeries(estimates, deltas, weights, diverged)


def _step_streams(rng: RngState, t: int) -> tuple[RngState, RngState]:
    # two counter positions per step: injected noise, then the patch-KL reference noise
    base = rng.advance(2 * (t - 1))
    return base, base.advance(1)


def renoise_inversion(z0, predictor, sched: Schedule, cfg: RenoiseConfig, rng: RngState, c=None) -> InversionResult:
    """Invert ``z0`` through ``sched``; ``op_count`` counts every predictor evaluation."""
    z0 = np.asarray(z0, dtype=np.float64)
    T = len(sched)
    nc = cfg.noise_correction
    if nc.mode != "off" and sched.deterministic:
        raise ValueError("noise correction requires a schedule that injects noise")
    counter = CountingPredictor(predictor)
    needs_reference = cfg.edit_loss is not None and cfg.edit_loss.lambda_patch_kl > 0
    z = z0
    latents, noises, series, records = [z0], [], [], []
    for t in range(1, T + 1):
        p = sched.steps[t - 1]
        time = sched.timesteps[t - 1]
        noise_rng, ref_rng = _step_streams(rng, t)
        eps = sample_gaussian(noise_rng, z0.shape)[0] if p.rho > 0 else None
        reference = None
        if needs_reference:
            z_ref = forward_noise(z0, t, sched, sample_gaussian(ref_rng, z0.shape)[0])
            reference = counter.evaluate(z_ref, time, c)
        z_next, s = renoise_step(z, time, counter, p, eps, cfg, c, step=t, T=T, reference_delta=reference)
        record = None
        if nc.mode != "off" and p.rho > 0:
            target = noise_correction_exact(z, z_next, counter.evaluate(z_next, time, c), p)
            if nc.mode == "exact":
                before = float(np.linalg.norm(eps - target))
                record = NoiseRecord(target, True, before, 0.0)
            else:
                record = noise_correction_optimize(eps, target, nc.eta, nc.iters)
            eps = record.eps_t
        if not np.all(np.isfinite(z_next)):
            raise FloatingPointError(f"non-finite latent at inversion step {t}")
        z = z_next
        latents.append(z)
        noises.append(eps)
        series.append(s)
        records.append(record)
    return InversionResult(z, latents, noises, series, records, counter.calls)


def baseline_inversion(z0, predictor, sched: Schedule, rng: RngState, c=None) -> InversionResult:
    """Plain inversion (``K = 0``): each step reuses the model output at the previous latent."""
    z = np.asarray(z0, dtype=np.float64)
    latents, noises = [z], []
    for t in range(1, len(sched) + 1):
        p = sched.steps[t - 1]
        eps = sample_gaussian(_step_streams(rng, t)[0], z.shape)[0] if p.rho > 0 else None
        z = approx_inverse_step(z, predictor, sched.timesteps[t - 1], c, eps, p)
        latents.append(z)
        noises.append(eps)
    return InversionResult(z, latents, noises, [], [None] * len(sched), len(sched))


def expected_op_count(sched: Schedule, cfg: RenoiseConfig) -> int:
    """Predictor evaluations ``renoise_inversion`` performs for this schedule and config."""
    T = len(sched)
    count = T * (cfg.K + 1)
    if cfg.noise_correction.mode != "off":
        count += sum(1 for p in sched.steps if p.rho > 0)
    if cfg.edit_loss is not None and cfg.edit_loss.lambda_patch_kl > 0:
        count += T
    return count


@dataclass
class BudgetRow:
    inversion_steps: int
    denoise_steps: int
    K: int
    inversion_ops: int
    denoise_ops: int
    op_count: int
    l2: float
    psnr: float


def operation_budget_sweep(
    z0,
    predictor,
    schedule_for: Callable[[int], Schedule],
    configs: Sequence[tuple],
    rng: RngState,
    c=None,
    *,
    make_config: Optional[Callable[[int], RenoiseConfig]] = None,
    peak: float = 1.0,
) -> list[BudgetRow]:
    """Invert with ``(inversion_steps, denoise_steps, K)`` per row and score the reconstruction.

    ``schedule_for(n)`` must return ``n``-step schedules sharing one noise-level
    curve. Mismatched step counts need a deterministic family, since injected
    noises cannot be transferred between grids.
    """
    from .diagnostics import reconstruction_metrics

    make_config = make_config or (lambda K: RenoiseConfig(K=K))
    rows = []
    for inv_steps, den_steps, K in configs:
        inv_sched, den_sched = schedule_for(inv_steps), schedule_for(den_steps)
        if inv_steps != den_steps and not (inv_sched.deterministic and den_sched.deterministic):
            raise ValueError("inversion and denoising step counts differ on a stochastic schedule")
        counter = CountingPredictor(predictor)
        result = renoise_inversion(z0, counter, inv_sched, make_config(K), rng, c)
        inv_ops = counter.calls
        noises = result.noises if inv_steps == den_steps else [None] * den_steps
        recon = denoise_trajectory(result.zT, noises, counter, den_sched, c).z0
        m = reconstruction_metrics(z0, recon, peak)
        rows.append(BudgetRow(inv_steps, den_steps, K, inv_ops, counter.calls - inv_ops, counter.calls, m.l2, m.psnr))
    return rows


# Per-model settings: (K, early-band weights, late-band weights, lambda_pair, lambda_patch_kl).
# The early band covers the first quarter of the noise range (t < 250 of 1000).
PRESETS = {
    "sd": (1, {1: 0.5, 2: 0.5}, {2: 1.0}, 10.0, 0.05),
    "sdxl": (1, {1: 0.5, 2: 0.5}, {2: 1.0}, 10.0, 0.055),
    "sdxl_turbo": (9, {i: 0.25 for i in range(1, 5)}, {i: 1 / 3 for i in range(8, 11)}, 10.0, 0.055),
    "lcm_lora": (7, {i: 0.25 for i in range(1, 5)}, {i: 1 / 3 for i in range(6, 9)}, 20.0, 0.075),
}


def preset_config(name: str, T: int, threshold: float = 0.25) -> RenoiseConfig:
    """RenoiseConfig for one of ``PRESETS`` over a ``T``-step schedule."""
    K, early, late, lam_pair, lam_kl = PRESETS[name]

    def vector(spec):
        return _normalize([spec.get(i, 0.0) for i in range(1, K + 2)])

    cut = int(math.floor(threshold * T))
    bands = []
    if cut >= 1:
        bands.append(WeightBand(1, min(cut, T), vector(early)))
    if cut < T:
        bands.append(WeightBand(cut + 1, T, vector(late)))
    return RenoiseConfig(K=K, weights=RenoiseWeights(tuple(bands)), edit_loss=EditLossConfig(lam_pair, lam_kl))
