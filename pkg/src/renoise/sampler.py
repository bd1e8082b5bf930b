"""Single sampler steps, their exact and approximate inverses, and the denoising loop."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import Schedule, StepParams

TRAJECTORY_MAGIC = b"RNZT"
TRAJECTORY_VERSION = 1


def _check_eps(eps, p: StepParams, shape):
    if p.rho > 0.0:
        if eps is None:
            raise ValueError("step injects noise (rho > 0) but no eps was supplied")
        eps = np.asarray(eps, dtype=np.float64)
        if eps.shape != shape:
            raise ValueError(f"eps shape {eps.shape} does not match latent shape {shape}")
    return eps


def denoise_step(z_t, delta, eps, p: StepParams) -> np.ndarray:
    z_t = np.asarray(z_t, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != z_t.shape:
        raise ValueError(f"delta shape {delta.shape} does not match latent shape {z_t.shape}")
    eps = _check_eps(eps, p, z_t.shape)
    out = p.phi * z_t + p.psi * delta
    if p.rho > 0.0:
        out = out + p.rho * eps
    return out


def inverse_step(z_prev, delta, eps, p: StepParams) -> np.ndarray:
    """Solve ``denoise_step(z, delta, eps, p) == z_prev`` for ``z`` with ``delta`` held fixed."""
    if p.phi == 0.0:
        raise ZeroDivisionError("phi = 0: step is not invertible")
    z_prev = np.asarray(z_prev, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != z_prev.shape:
        raise ValueError(f"delta shape {delta.shape} does not match latent shape {z_prev.shape}")
    eps = _check_eps(eps, p, z_prev.shape)
    num = z_prev - p.psi * delta
    if p.rho > 0.0:
        num = num - p.rho * eps
    return num / p.phi


def approx_inverse_step(z_prev, predictor, t, c, eps, p: StepParams) -> np.ndarray:
    """Plain inversion step: the model output at ``z_prev`` stands in for the one at ``z_t``."""
    return inverse_step(z_prev, predictor.evaluate(z_prev, t, c), eps, p)


def forward_noise(z0, t: int, sched: Schedule, eps) -> np.ndarray:
    """Noise ``z0`` to the level of schedule step ``t`` (1-based)."""
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != z0.shape:
        raise ValueError(f"eps shape {eps.shape} does not match latent shape {z0.shape}")
    a, s = sched.alpha[t - 1], sched.sigma[t - 1]
    if s == 0.0:
        return a * z0
    return a * z0 + s * eps


@dataclass
class Trajectory:
    latents: list  # z_0 ... z_T
    noises: list  # eps_1 ... eps_T, None where the step is deterministic

    def __post_init__(self):
        if len(self.latents) != len(self.noises) + 1:
            raise ValueError("a trajectory needs exactly one more latent than noises")
        shape = np.shape(self.latents[0])
        for x in list(self.latents) + [n for n in self.noises if n is not None]:
            if np.shape(x) != shape:
                raise ValueError("all trajectory arrays must share one shape")

    @property
    def z0(self) -> np.ndarray:
        return self.latents[0]

    @property
    def zT(self) -> np.ndarray:
        return self.latents[-1]


def denoise_trajectory(zT, noises: Sequence[Optional[np.ndarray]], predictor, sched: Schedule, c=None) -> Trajectory:
    """Run the sampler from ``z_T`` down to ``z_0``; ``noises[i]`` feeds step ``i + 1``."""
    if len(noises) != len(sched):
        raise ValueError(f"expected {len(sched)} noises, got {len(noises)}")
    z = np.asarray(zT, dtype=np.float64)
    latents = [z]
    used = [None] * len(sched)
    for i in reversed(range(len(sched))):
        p = sched.steps[i]
        eps = noises[i] if p.rho > 0.0 else None
        z = denoise_step(z, predictor.evaluate(z, sched.timesteps[i], c), eps, p)
        if not np.all(np.isfinite(z)):
            raise FloatingPointError(f"non-finite latent after denoising step {i + 1}")
        latents.append(z)
        used[i] = eps
    return Trajectory(latents[::-1], used)


def write_trajectory(path, traj: Trajectory) -> None:
    """Write the binary ``RNZT`` trajectory format (little-endian).

    Deterministic steps have no noise; they are stored as zeros.
    """
    shape = np.shape(traj.latents[0])
    T = len(traj.noises)
    zeros = np.zeros(shape)
    with open(path, "wb") as f:
        f.write(TRAJECTORY_MAGIC)
        f.write(struct.pack("<II", TRAJECTORY_VERSION, len(shape)))
        f.write(struct.pack(f"<{len(shape)}I", *shape))
        f.write(struct.pack("<I", T))
        for z in traj.latents:
            f.write(np.ascontiguousarray(z, dtype="<f8").tobytes())
        for n in traj.noises:
            f.write(np.ascontiguousarray(zeros if n is None else n, dtype="<f8").tobytes())


def read_trajectory(path) -> Trajectory:
    data = Path(path).read_bytes()
    if data[:4] != TRAJECTORY_MAGIC:
        raise ValueError(f"{path}: not an RNZT trajectory file")
    version, rank = struct.unpack_from("<II", data, 4)
    if version != TRAJECTORY_VERSION:
        raise ValueError(f"{path}: unsupported trajectory version {version}")
    off = 12
    shape = struct.unpack_from(f"<{rank}I", data, off)
    off += 4 * rank
    (T,) = struct.unpack_from("<I", data, off)
    off += 4
    size = int(np.prod(shape))
    arrays = np.frombuffer(data, dtype="<f8", offset=off).astype(np.float64)
    if arrays.size != (2 * T + 1) * size:
        raise ValueError(f"{path}: truncated or oversized payload")
    arrays = arrays.reshape(2 * T + 1, *shape)
    return Trajectory(list(arrays[: T + 1]), list(arrays[T + 1 :]))
