"""Exit criteria. Each test prints one PASS/FAIL line (visible with ``pytest -s`` or ``-rA``)."""

import math
import time

import numpy as np
import pytest

from renoise.core import (
    RngState,
    StepParams,
    build_ancestral_schedule,
    build_ddim_schedule,
    build_euler_ode_schedule,
    euler_times,
    sample_gaussian,
)
from renoise.diagnostics import averaging_convergence_check, consecutive_diffs, scaled_jacobian_norm
from renoise.inversion import (
    RenoiseConfig,
    RenoiseWeights,
    baseline_inversion,
    operation_budget_sweep,
    renoise_inversion,
    renoise_step,
)
from renoise.predictors import LinearPredictor, SeededNonlinear, ToyShiftedGaussian
from renoise.regularize import loss_pair, loss_patch_kl, noise_correction_exact, noise_correction_optimize
from renoise.sampler import denoise_step


@pytest.fixture
def report(capsys):
    def emit(number, name, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {name} ({detail})")
        assert ok, detail

    return emit


def ddim_family(n, amin=0.05):
    return build_ddim_schedule([amin ** (i / n) for i in range(1, n + 1)])


def central_gradient(f, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = h
        g[idx] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def test_1_toy_exactness(report):
    start = time.perf_counter()
    worst = 0.0
    for steps in range(1, 11):
        toy = ToyShiftedGaussian(1.0 + 0.1 * steps)
        h = [0.05 * (1 + i % 3) for i in range(steps)]
        sched = build_euler_ode_schedule(euler_times(0.0, h), h)
        z0 = np.array([2.0, -0.5, 3.0])
        res = renoise_inversion(z0, toy, sched, RenoiseConfig(K=1), RngState(0))
        for i, p in enumerate(sched.steps):
            z_t = res.latents[i + 1]
            back = denoise_step(z_t, toy.evaluate(z_t, sched.timesteps[i]), None, p)
            worst = max(worst, float(np.max(np.abs(back - res.latents[i]))))
    elapsed = time.perf_counter() - start
    report(1, "toy exactness", worst <= 1e-10 and elapsed < 1.0, f"max err {worst:.2e}, {elapsed:.3f} s")


def test_2_linear_fixed_point_oracle(report):
    rng = np.random.default_rng(2)
    dim, worst_fp, worst_ratio, n = 8, 0.0, 0.0, 0
    for seed in range(24):
        abar = rng.uniform(0.1, 0.95)
        sched = build_ddim_schedule([abar])
        p = sched.steps[0]
        r = rng.uniform(0.05, 0.9)
        lin = LinearPredictor.scaled_orthogonal(dim, r / abs(p.psi / p.phi), seed)
        K = int(math.ceil(math.log(1e-14) / math.log(r))) + 5
        z0 = rng.standard_normal(dim)
        res = renoise_inversion(z0, lin, sched, RenoiseConfig(K=K, weights=RenoiseWeights.last(K)), RngState(seed))
        z_star = np.linalg.solve(p.phi * np.eye(dim) + p.psi * lin.matrix, z0)
        worst_fp = max(worst_fp, float(np.max(np.abs(res.zT - z_star))))
        d = consecutive_diffs(res.per_step_series[0])
        for a, b in zip(d, d[1:]):
            if a > 1e-6:
                worst_ratio = max(worst_ratio, abs(b / a - r))
        n += 1
    ok = n >= 20 and worst_fp <= 1e-9 and worst_ratio <= 1e-8
    report(2, "linear fixed-point oracle", ok, f"{n} predictors, fp err {worst_fp:.2e}, ratio err {worst_ratio:.2e}")


def test_3_geometric_decay(report):
    sched = ddim_family(4)
    worst, checked = -math.inf, 0
    for seed in range(32):
        pred = SeededNonlinear(16, seed, gain=1.5)
        z0 = sample_gaussian(RngState(seed, 7), [16])[0]
        res = renoise_inversion(z0, pred, sched, RenoiseConfig(K=12, weights=RenoiseWeights.last(12)), RngState(seed))
        for i, s in enumerate(res.per_step_series):
            p, t = sched.steps[i], sched.timesteps[i]
            r = max(scaled_jacobian_norm(pred, z, t, None, p, 50) for z in s.estimates)
            if r >= 0.8:
                continue
            d = consecutive_diffs(s)  # d[j] = ||Delta^(j+1)||
            for k in range(2, len(d)):
                if d[k - 1] > 1e-9:  # below this the ratio is roundoff
                    worst = max(worst, d[k] / d[k - 1] - r)
                    checked += 1
    report(3, "geometric decay", checked > 0 and worst <= 0.05, f"{checked} ratios, max(ratio - r) {worst:.3f}")


def test_4_averaging_convergence(report):
    failures, total = 0, 0
    last = lambda K: RenoiseConfig(K=K, weights=RenoiseWeights.last(K))
    for seed in range(16):
        rng = np.random.default_rng(seed)
        z_prev = rng.standard_normal(8)
        if seed % 2:
            pred = LinearPredictor.scaled_orthogonal(8, 0.6, seed)
            p = StepParams(1.0, 0.9)
            z_star = np.linalg.solve(np.eye(8) + 0.9 * pred.matrix, z_prev)
        else:
            pred = SeededNonlinear(8, seed, gain=1.0)
            p = build_ddim_schedule([0.3]).steps[0]
            z_star = renoise_step(z_prev, 1.0, pred, p, None, last(200))[0]
        _, series = renoise_step(z_prev, 1.0, pred, p, None, last(9))
        for row in averaging_convergence_check(series, z_star, ms=(2, 3, 5)):
            total += 1
            failures += not row.ok
    report(4, "averaging convergence", total == 48 and failures == 0, f"{total - failures}/{total} checks")


def test_5_noise_correction(report):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        p = StepParams(rng.uniform(0.5, 2.0) * rng.choice([-1, 1]), rng.uniform(-2, 2), rng.uniform(0.01, 1.0))
        z_prev, z_t, delta = rng.standard_normal((3, 16)) * rng.uniform(0.1, 10)
        eps = noise_correction_exact(z_prev, z_t, delta, p)
        resid = np.max(np.abs(denoise_step(z_t, delta, eps, p) - z_prev))
        worst = max(worst, resid / (1 + np.max(np.abs(z_prev))))
    worst_opt = 0.0
    for _ in range(100):
        eps0, target = rng.standard_normal((2, 16))
        eta, iters = rng.uniform(0.01, 1.0), int(rng.integers(0, 20))
        rec = noise_correction_optimize(eps0, target, eta, iters)
        closed = target + (1 - eta) ** iters * (eps0 - target)
        worst_opt = max(worst_opt, float(np.max(np.abs(rec.eps_t - closed))))
    ok = worst <= 1e-13 and worst_opt <= 1e-12
    report(5, "noise correction", ok, f"exact rel residual {worst:.2e}, optimize err {worst_opt:.2e}")


def test_6_gradient_checks(report):
    rng = np.random.default_rng(6)
    worst_pair = worst_kl = 0.0
    for _ in range(20):
        x, y = rng.standard_normal((2, 8, 8))
        g = loss_pair(x)[1]
        fd = central_gradient(lambda d: loss_pair(d)[0], x)
        worst_pair = max(worst_pair, np.linalg.norm(g - fd) / np.linalg.norm(fd))
        g = loss_patch_kl(x, y, 4)[1]
        fd = central_gradient(lambda d: loss_patch_kl(d, y, 4)[0], x)
        worst_kl = max(worst_kl, np.linalg.norm(g - fd) / np.linalg.norm(fd))
    ok = worst_pair < 1e-5 and worst_kl < 1e-5
    report(6, "gradient checks", ok, f"pair {worst_pair:.1e}, patch-KL {worst_kl:.1e}")


def test_7_budget_trend(report):
    start = time.perf_counter()
    wins = 0
    make = lambda K: RenoiseConfig(K=K, weights=RenoiseWeights.last(K))
    for seed in range(32):
        pred = SeededNonlinear(16, seed, gain=0.5)
        z0 = sample_gaussian(RngState(seed, 3), [16])[0]
        base, ours = operation_budget_sweep(z0, pred, ddim_family, [(8, 4, 0), (4, 4, 1)], RngState(seed),
                                            make_config=make)
        assert base.op_count == ours.op_count
        wins += ours.l2 < base.l2
    elapsed = time.perf_counter() - start
    report(7, "budget trend", wins >= 0.9 * 32 and elapsed < 60, f"{wins}/32 seeds, {elapsed:.2f} s")


def test_8_k0_degeneration(report):
    abar = [0.97, 0.8, 0.5, 0.2, 0.05]
    h = [0.1, 0.2, 0.1]
    schedules = [build_ddim_schedule(abar), build_ancestral_schedule(abar),
                 build_euler_ode_schedule(euler_times(0, h), h)]
    instances = 0
    identical = True
    for sched in schedules:
        for pred in (SeededNonlinear(16, 1), LinearPredictor.scaled_orthogonal(16, 0.3, 1), ToyShiftedGaussian(2.0)):
            for seed in range(3):
                z0 = sample_gaussian(RngState(seed, 1), [16])[0]
                a = renoise_inversion(z0, pred, sched, RenoiseConfig(K=0), RngState(seed))
                b = baseline_inversion(z0, pred, sched, RngState(seed))
                identical &= all(np.array_equal(x, y) for x, y in zip(a.latents, b.latents))
                identical &= all((x is None and y is None) or np.array_equal(x, y) for x, y in zip(a.noises, b.noises))
                instances += 1
    report(8, "K=0 degeneration", identical, f"{instances} instances bit-identical" if identical else "mismatch")


def test_9_jacobian_estimator(report):
    rng = np.random.default_rng(9)
    worst, cases = 0.0, 0
    p = StepParams(1.25, -0.8)
    for i in range(20):
        if i % 2:
            s = np.sort(rng.uniform(0.05, 1.0, 6))[::-1]
            s[0] = s[1] / rng.uniform(0.5, 0.9)
            m = np.diag(rng.permutation(s))
        else:
            while True:
                m = rng.standard_normal((6, 6))
                sv = np.linalg.svd(m, compute_uv=False)
                if sv[1] / sv[0] <= 0.9:
                    break
        exact = abs(p.psi / p.phi) * np.linalg.svd(m, compute_uv=False)[0]
        est = scaled_jacobian_norm(LinearPredictor(m), rng.standard_normal(6), 0, None, p, 50, RngState(i))
        worst = max(worst, abs(est - exact) / exact)
        cases += 1
    report(9, "Jacobian estimator", worst <= 0.01, f"{cases} matrices, max rel err {worst:.2e}")
