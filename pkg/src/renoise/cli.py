"""Command-line entry point: ``renoise {toy,invert,reconstruct,diagnose,sweep}``."""

from __future__ import annotations

import argparse
import copy
import csv
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .config import (
    DEFAULTS,
    ConfigError,
    apply_override,
    build_renoise_config,
    build_schedule,
    latent_dim,
    load_config,
    predictor_spec,
)
from .core import RngState, build_euler_ode_schedule, euler_times, sample_gaussian
from .diagnostics import convergence_report, reconstruction_metrics
from .inversion import operation_budget_sweep, renoise_inversion, RenoiseConfig, RenoiseWeights
from .predictors import ToyShiftedGaussian, build_predictor
from .sampler import denoise_trajectory, write_trajectory

logger = logging.getLogger("renoise")

TOY_TOLERANCE = 1e-10


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(x) if isinstance(x, float) else x for x in row])


def cmd_toy(delta_t: float, a: float, z0: float, steps: int, t0: float = 0.0, out=print) -> int:
    """Invert the shifted-Gaussian flow with one renoising iteration and check each pre-image."""
    if not delta_t > 0 or steps < 1:
        raise ValueError("delta_t must be positive and steps >= 1")
    predictor = ToyShiftedGaussian(a)
    h = [delta_t] * steps
    sched = build_euler_ode_schedule(euler_times(t0, h), h)
    cfg = RenoiseConfig(K=1, weights=RenoiseWeights.last(1))
    result = renoise_inversion(np.array([z0], dtype=np.float64), predictor, sched, cfg, RngState(0))
    worst = 0.0
    for i, p in enumerate(sched.steps):
        z_t = result.latents[i + 1]
        back = p.phi * z_t + p.psi * predictor.evaluate(z_t, sched.timesteps[i])
        err = float(np.max(np.abs(back - result.latents[i])))
        worst = max(worst, err)
        out(f"step {i + 1}: t={sched.timesteps[i]:.6g} z_t={z_t[0]:.17g} pre-image error={err:.3e}")
    out(f"max error {worst:.3e} (tolerance {TOY_TOLERANCE:g})")
    return 0 if worst <= TOY_TOLERANCE else 1


def _setup(cfg: dict):
    shape = tuple(cfg["latent"]["shape"])
    predictor = build_predictor(predictor_spec(cfg), latent_dim(cfg))
    rng = RngState(int(cfg["seed"]))
    # position 0 of a dedicated seed stream draws z_0; inversion uses the main stream
    z0 = cfg["latent"]["scale"] * sample_gaussian(RngState(int(cfg["seed"]), 2**63), shape)[0]
    return predictor, rng, z0


def _invert(cfg: dict, out_dir: Path):
    predictor, rng, z0 = _setup(cfg)
    sched = build_schedule(cfg["schedule"])
    rcfg = build_renoise_config(cfg["renoise"], T=len(sched))
    result = renoise_inversion(z0, predictor, sched, rcfg, rng)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "schedule.json").write_text(sched.to_text())
    write_trajectory(out_dir / "inversion.rnzt", result.trajectory())
    return predictor, sched, z0, result


def run_invert(cfg: dict, out=print) -> int:
    out_dir = Path(cfg["out"])
    _, _, _, result = _invert(cfg, out_dir)
    _write_csv(out_dir / "inversion_metrics.csv", ["op_count", "diverged_steps"],
               [[result.op_count, sum(result.divergence_flags)]])
    out(f"op_count {result.op_count}")
    return 0


def run_reconstruct(cfg: dict, out=print) -> int:
    out_dir = Path(cfg["out"])
    predictor, sched, z0, result = _invert(cfg, out_dir)
    recon = denoise_trajectory(result.zT, result.noises, predictor, sched)
    write_trajectory(out_dir / "reconstruction.rnzt", recon)
    m = reconstruction_metrics(z0, recon.z0, cfg["metrics"]["peak"])
    _write_csv(out_dir / "metrics.csv", ["l2", "psnr", "peak", "op_count"], [[m.l2, m.psnr, m.peak, result.op_count]])
    out(f"op_count {result.op_count}  l2 {m.l2:.6e}  psnr {m.psnr:.3f} dB")
    return 0 if math.isfinite(m.l2) else 1


def run_diagnose(cfg: dict, out=print) -> int:
    out_dir = Path(cfg["out"])
    predictor, sched, z0, result = _invert(cfg, out_dir)
    d = cfg["diagnose"]
    report = convergence_report(result, predictor, sched, power_iters=int(d["power_iters"]),
                                rng=RngState(int(cfg["seed"]), 2**62), jacobians=bool(d["jacobians"]))
    (out_dir / "diagnostics.csv").write_text(report.to_csv())
    recon = denoise_trajectory(result.zT, result.noises, predictor, sched)
    m = reconstruction_metrics(z0, recon.z0, cfg["metrics"]["peak"])
    _write_csv(out_dir / "metrics.csv", ["l2", "psnr", "peak", "op_count"], [[m.l2, m.psnr, m.peak, result.op_count]])
    out(f"diagnostics for {len(sched)} steps written to {out_dir / 'diagnostics.csv'}")
    return 0


def run_sweep(cfg: dict, out=print) -> int:
    out_dir = Path(cfg["out"])
    configs, seen = [], set()
    for row in cfg["sweep"]["configs"]:
        row = tuple(int(x) for x in row)
        if len(row) != 3:
            raise ConfigError(f"sweep.configs: rows are [inversion_steps, denoise_steps, k], got {list(row)}")
        if row in seen:
            logger.warning("duplicate sweep config %s ignored", list(row))
            continue
        seen.add(row)
        configs.append(row)
    if not configs:
        raise ConfigError("sweep.configs: empty")
    predictor, rng, z0 = _setup(cfg)

    def one(row):
        return operation_budget_sweep(
            z0, predictor, lambda n: build_schedule(cfg["schedule"], n), [row], rng,
            make_config=lambda K: build_renoise_config(cfg["renoise"], K, row[0]), peak=cfg["metrics"]["peak"],
        )[0]

    workers = max(1, int(cfg["sweep"]["workers"]))
    with ThreadPoolExecutor(workers) as pool:
        rows = list(pool.map(one, configs))  # map keeps config order
    out_dir.mkdir(parents=True, exist_ok=True)
    header = ["inversion_steps", "denoise_steps", "k", "inversion_ops", "denoise_ops", "op_count", "l2", "psnr"]
    _write_csv(out_dir / "sweep.csv", header,
               [[r.inversion_steps, r.denoise_steps, r.K, r.inversion_ops, r.denoise_ops, r.op_count, r.l2, r.psnr]
                for r in rows])
    for r in rows:
        out(f"{r.inversion_steps}/{r.denoise_steps}/{r.K}: ops {r.op_count}  l2 {r.l2:.6e}  psnr {r.psnr:.3f}")
    return 0


COMMANDS = {"invert": run_invert, "reconstruct": run_reconstruct, "diagnose": run_diagnose, "sweep": run_sweep}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="renoise", description="ReNoise inversion on analytic noise predictors.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run configuration")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. renoise.k=4 (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)
    toy = sub.add_parser("toy", parents=[common], help="shifted-Gaussian exactness check")
    toy.add_argument("--delta-t", type=float, default=0.1)
    toy.add_argument("--a", type=float, default=1.0)
    toy.add_argument("--z0", type=float, default=2.0)
    toy.add_argument("--steps", type=int, default=1)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "toy":
            return cmd_toy(args.delta_t, args.a, args.z0, args.steps)
        cfg = load_config(args.config) if args.config else copy.deepcopy(DEFAULTS)
        for item in args.overrides:
            apply_override(cfg, item)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.out is not None:
            cfg["out"] = str(args.out)
        return COMMANDS[args.command](cfg)
    except (ConfigError, ValueError, OSError, FloatingPointError, ZeroDivisionError, KeyError, TypeError) as exc:
        print(f"renoise {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
