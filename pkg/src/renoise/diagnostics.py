"""Convergence measurements for renoising iterations and reconstruction metrics."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import RngState, StepParams, sample_gaussian
from .predictors import predictor_jvp, predictor_vjp

CSV_COLUMNS = ("t", "k", "delta_norm", "scaled_jac_norm", "ratio")


def consecutive_diffs(series) -> list[float]:
    """``||z^(k+1) - z^(k)||_2`` for k = 1 .. K."""
    estimates = series.estimates if hasattr(series, "estimates") else series
    if len(estimates) < 2:
        raise ValueError("need at least two estimates")
    return [float(np.linalg.norm(np.asarray(b) - np.asarray(a))) for a, b in zip(estimates, estimates[1:])]


def scaled_jacobian_norm(
    predictor,
    z,
    t,
    c,
    p: StepParams,
    power_iters: int = 50,
    rng: Optional[RngState] = None,
) -> float:
    """``|psi/phi| * ||d eps / d z||_2`` at ``z``.

    Power iteration on the Gram operator ``v -> J^T J v``; predictors without an
    analytic ``vjp`` fall back to finite differences for ``J^T``.
    """
    if power_iters < 1:
        raise ValueError("power_iters must be >= 1")
    z = np.asarray(z, dtype=np.float64)
    rng = rng or RngState(0)
    v = np.zeros_like(z)
    while not np.any(v):
        v, rng = sample_gaussian(rng, z.shape)
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(power_iters):
        jv = predictor_jvp(predictor, z, t, c, v)
        sigma = float(np.linalg.norm(jv))
        if sigma == 0.0:
            return 0.0
        g = predictor_vjp(predictor, z, t, c, jv)
        norm = np.linalg.norm(g)
        if norm == 0.0:
            break
        v = g / norm
    sigma = float(np.linalg.norm(predictor_jvp(predictor, z, t, c, v)))
    return abs(p.psi / p.phi) * sigma


@dataclass
class ReconstructionMetrics:
    l2: float
    psnr: float
    peak: float


def reconstruction_metrics(original, reconstructed, peak: float = 1.0) -> ReconstructionMetrics:
    """Mean squared error and PSNR in dB; PSNR is ``inf`` for a perfect reconstruction."""
    a = np.asarray(original, dtype=np.float64)
    b = np.asarray(reconstructed, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if not peak > 0:
        raise ValueError("peak must be positive")
    l2 = float(np.mean((a - b) ** 2))
    psnr = math.inf if l2 == 0.0 else 10.0 * math.log10(peak * peak / l2)
    return ReconstructionMetrics(l2, psnr, peak)


@dataclass
class AveragingCheck:
    m: int
    deviation: float
    tail_max: float

    @property
    def ok(self) -> bool:
        return self.deviation <= self.tail_max * (1 + 1e-12) + 1e-300


def averaging_convergence_check(series, fixed_point, ms: Sequence[int] = (2, 3, 5)) -> list[AveragingCheck]:
    """Compare the mean of the last ``m`` estimates against ``fixed_point``.

    For every ``m`` the deviation of the average can not exceed the largest
    deviation among the averaged estimates.
    """
    estimates = series.estimates if hasattr(series, "estimates") else series
    z_star = np.asarray(fixed_point, dtype=np.float64)
    out = []
    for m in ms:
        if m > len(estimates):
            continue
        tail = [np.asarray(e, dtype=np.float64) for e in estimates[-m:]]
        avg = sum(tail) / m
        out.append(
            AveragingCheck(
                m,
                float(np.linalg.norm(avg - z_star)),
                max(float(np.linalg.norm(e - z_star)) for e in tail),
            )
        )
    return out


@dataclass
class ConvergenceReport:
    delta_norms: list = field(default_factory=list)  # per step: ||Delta^(k)||, k = 1..K
    jac_norms: list = field(default_factory=list)  # per step: scaled norm at z^(k), k = 1..K
    divergence: list = field(default_factory=list)

    def rows(self):
        for t, (norms, jacs) in enumerate(zip(self.delta_norms, self.jac_norms), start=1):
            for k, d in enumerate(norms, start=1):
                ratio = d / norms[k - 2] if k >= 2 and norms[k - 2] > 0 else math.nan
                yield t, k, d, jacs[k - 1] if jacs else math.nan, ratio

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for t, k, d, j, r in self.rows():
            writer.writerow([t, k, repr(d), repr(j), repr(r)])
        return buf.getvalue()


def convergence_report(result, predictor, sched, c=None, power_iters: int = 50, rng: Optional[RngState] = None,
                       jacobians: bool = True) -> ConvergenceReport:
    """Collect consecutive-difference norms (and scaled Jacobian norms) from an inversion."""
    report = ConvergenceReport()
    rng = rng or RngState(0)
    for i, series in enumerate(result.per_step_series):
        norms = consecutive_diffs(series) if len(series.estimates) > 1 else []
        jacs = []
        if jacobians:
            p, time = sched.steps[i], sched.timesteps[i]
            jacs = [scaled_jacobian_norm(predictor, z, time, c, p, power_iters, rng.advance(i)) for z in series.estimates[:-1]]
        report.delta_norms.append(norms)
        report.jac_norms.append(jacs)
        report.divergence.append(series.diverged)
    return report
