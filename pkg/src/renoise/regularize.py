"""Edit-enhancement losses on predicted noise maps, and noise correction for stochastic samplers."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import StepParams

logger = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-8


@dataclass(frozen=True)
class EditLossConfig:
    lambda_pair: float = 10.0
    lambda_patch_kl: float = 0.055
    patch_size: int = 4
    shifts: tuple = ((1, 0), (0, 1))
    step_size: Optional[float] = None

    def __post_init__(self):
        if self.lambda_pair < 0 or self.lambda_patch_kl < 0:
            raise ValueError("edit-loss weights must be non-negative")
        if self.patch_size <= 0:
            raise ValueError("patch_size must be positive")
        if self.step_size is not None and not self.step_size > 0:
            raise ValueError("step_size must be positive")

    @property
    def active(self) -> bool:
        return self.lambda_pair > 0 or self.lambda_patch_kl > 0

    @property
    def effective_step(self) -> float:
        if self.step_size is not None:
            return self.step_size
        return 0.1 / (self.lambda_pair + self.lambda_patch_kl + 1.0)


@dataclass
class NoiseRecord:
    """Outcome of correcting one step's injected noise.

    Residuals are ``||eps - target||``, where ``target`` is the noise that makes
    denoising land exactly on the previous latent.
    """

    eps_t: np.ndarray
    corrected: bool
    residual_before: float
    residual_after: float


def _spatial(delta: np.ndarray) -> np.ndarray:
    delta = np.asarray(delta, dtype=np.float64)
    if delta.ndim < 2:
        raise ValueError(f"noise map needs at least 2 spatial dims, got shape {delta.shape}")
    return delta


def loss_pair(delta, shifts=((1, 0), (0, 1))) -> tuple[float, np.ndarray]:
    """Sum of squared circular autocorrelations of ``delta`` at the given (row, col) shifts.

    Each autocorrelation is ``mean(delta * roll(delta, shift))`` over the last two axes.
    """
    delta = _spatial(delta)
    n = delta.size
    loss = 0.0
    grad = np.zeros_like(delta)
    for dy, dx in shifts:
        fwd = np.roll(delta, (dy, dx), axis=(-2, -1))
        back = np.roll(delta, (-dy, -dx), axis=(-2, -1))
        corr = float(np.sum(delta * fwd)) / n
        loss += corr * corr
        grad += 2.0 * corr * (fwd + back) / n
    return loss, grad


def _patches(x: np.ndarray, p: int) -> np.ndarray:
    # (..., H, W) -> (..., H//p, W//p, p*p); trailing rows/cols that do not fill a patch are dropped
    h, w = x.shape[-2] // p, x.shape[-1] // p
    if h == 0 or w == 0:
        raise ValueError(f"patch size {p} exceeds spatial dims {x.shape[-2:]}")
    x = x[..., : h * p, : w * p]
    x = x.reshape(*x.shape[:-2], h, p, w, p)
    x = np.moveaxis(x, -3, -2)
    return x.reshape(*x.shape[:-2], p * p)


def _unpatch(g: np.ndarray, shape: tuple, p: int) -> np.ndarray:
    h, w = shape[-2] // p, shape[-1] // p
    g = g.reshape(*g.shape[:-1], p, p)
    g = np.moveaxis(g, -2, -3).reshape(*shape[:-2], h * p, w * p)
    out = np.zeros(shape)
    out[..., : h * p, : w * p] = g
    return out


def loss_patch_kl(delta, reference_delta, patch_size: int = 4) -> tuple[float, np.ndarray]:
    """Mean over patches of ``KL(N(mu, var) || N(mu_ref, var_ref))`` with per-patch statistics.

    Variances are floored at ``VARIANCE_FLOOR``; flooring is logged.
    """
    delta = _spatial(delta)
    ref = np.asarray(reference_delta, dtype=np.float64)
    if ref.shape != delta.shape:
        raise ValueError(f"reference shape {ref.shape} does not match {delta.shape}")
    x, y = _patches(delta, patch_size), _patches(ref, patch_size)
    n = x.shape[-1]
    mu0, mu1 = x.mean(-1), y.mean(-1)
    var0_raw, var1_raw = x.var(-1), y.var(-1)
    var0 = np.maximum(var0_raw, VARIANCE_FLOOR)
    var1 = np.maximum(var1_raw, VARIANCE_FLOOR)
    if np.any(var0_raw < VARIANCE_FLOOR) or np.any(var1_raw < VARIANCE_FLOOR):
        logger.warning("patch variance below %g floored", VARIANCE_FLOOR)
    kl = 0.5 * (np.log(var1 / var0) + (var0 + (mu0 - mu1) ** 2) / var1 - 1.0)
    count = kl.size
    d_mu = (mu0 - mu1) / var1
    d_var = np.where(var0_raw < VARIANCE_FLOOR, 0.0, 0.5 * (1.0 / var1 - 1.0 / var0))
    g = (d_mu[..., None] + 2.0 * d_var[..., None] * (x - mu0[..., None])) / n / count
    return float(kl.mean()), _unpatch(g, delta.shape, patch_size)


def edit_loss(delta, cfg: EditLossConfig, reference_delta=None) -> tuple[float, np.ndarray]:
    loss, grad = 0.0, np.zeros_like(np.asarray(delta, dtype=np.float64))
    if cfg.lambda_pair > 0:
        lp, gp = loss_pair(delta, cfg.shifts)
        loss += cfg.lambda_pair * lp
        grad += cfg.lambda_pair * gp
    if cfg.lambda_patch_kl > 0:
        if reference_delta is None:
            raise ValueError("patch-KL loss needs a reference noise map")
        lk, gk = loss_patch_kl(delta, reference_delta, cfg.patch_size)
        loss += cfg.lambda_patch_kl * lk
        grad += cfg.lambda_patch_kl * gk
    return loss, grad


def enhance_edit(delta, cfg: EditLossConfig, reference_delta=None) -> np.ndarray:
    """One gradient-descent step on the combined edit loss."""
    if not cfg.active:
        return delta
    _, grad = edit_loss(delta, cfg, reference_delta)
    return np.asarray(delta, dtype=np.float64) - cfg.effective_step * grad


def noise_correction_exact(z_prev, z_t, delta_at_zt, p: StepParams) -> np.ndarray:
    """Noise that makes ``denoise_step(z_t, delta_at_zt, eps, p)`` hit ``z_prev`` exactly."""
    if p.rho <= 0.0:
        raise ValueError("noise correction needs rho > 0")
    z_prev = np.asarray(z_prev, dtype=np.float64)
    return (z_prev - p.phi * np.asarray(z_t) - p.psi * np.asarray(delta_at_zt)) / p.rho


def noise_correction_optimize(eps_t, target, eta: float, iters: int) -> NoiseRecord:
    """Relax ``eps_t`` toward ``target`` by ``iters`` steps of ``eps += eta * (target - eps)``."""
    if not 0.0 < eta <= 1.0:
        raise ValueError(f"eta must lie in (0, 1], got {eta}")
    if iters < 0:
        raise ValueError("iters must be non-negative")
    eps = np.array(eps_t, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    before = float(np.linalg.norm(eps - target))
    for _ in range(iters):
        eps = eps + eta * (target - eps)
    return NoiseRecord(eps, iters > 0, before, float(np.linalg.norm(eps - target)))
