import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from renoise.core import (
    RngState,
    Schedule,
    StepParams,
    as_latent,
    build_ancestral_schedule,
    build_ddim_schedule,
    build_euler_ode_schedule,
    ddim_step_params,
    sample_gaussian,
    schedule_from_text,
    schedule_to_text,
)


def test_gaussian_draws_are_reproducible():
    rng = RngState(7)
    a, rng = sample_gaussian(rng, [4])
    b, _ = sample_gaussian(rng, [4])
    assert not np.array_equal(a, b)
    rng2 = RngState(7)
    a2, rng2 = sample_gaussian(rng2, [4])
    b2, _ = sample_gaussian(rng2, [4])
    assert np.array_equal(a, a2) and np.array_equal(b, b2)


def test_gaussian_moments():
    x, _ = sample_gaussian(RngState(7), [10000])
    assert abs(x.mean()) < 0.05
    assert abs(x.var() - 1.0) < 0.05


@pytest.mark.parametrize("shape", [[], [0], [3, 0]])
def test_gaussian_degenerate_shape(shape):
    with pytest.raises(ValueError, match="degenerate shape"):
        sample_gaussian(RngState(7), shape)


def test_draw_depends_only_on_seed_and_position():
    late = RngState(3).advance(5)
    x, _ = sample_gaussian(late, [3])
    y, _ = sample_gaussian(RngState(3, 5), [3])
    assert np.array_equal(x, y)


def test_as_latent_rejects_nan():
    with pytest.raises(FloatingPointError):
        as_latent([1.0, math.nan])


def test_ddim_coefficients():
    p = ddim_step_params(0.25, 0.64)
    assert p.phi == pytest.approx(1.6, abs=1e-15)
    assert p.psi == pytest.approx(0.6 - 1.6 * math.sqrt(0.75), abs=1e-15)
    assert p.psi == pytest.approx(-0.7856406, abs=1e-7)
    assert p.rho == 0


def test_ddim_identity_step():
    assert ddim_step_params(1.0, 1.0) == StepParams(1.0, 0.0, 0.0)


def test_ddim_schedule():
    sched = build_ddim_schedule([0.9, 0.5, 0.1])
    assert len(sched) == 3
    assert all(p.rho == 0 and p.phi > 0 for p in sched.steps)
    assert sched.deterministic
    for a, s in zip(sched.alpha, sched.sigma):
        assert abs(a * a + s * s - 1) <= 1e-9
    # step 2 goes from abar=0.5 down to abar=0.9
    assert sched.steps[1] == ddim_step_params(0.5, 0.9)


@pytest.mark.parametrize("abar", [[0.5, 0.9], [0.5, 0.5], [1.2], [0.0], []])
def test_ddim_rejects_bad_alpha_bar(abar):
    with pytest.raises(ValueError):
        build_ddim_schedule(abar)


def test_euler_schedule():
    sched = build_euler_ode_schedule([0.1], [0.1])
    # inversion moves forward in time, so denoising subtracts h * f
    assert sched.steps[0] == StepParams(1.0, -0.1, 0.0)
    two = build_euler_ode_schedule([0.0, 0.1], [0.1, 0.2])
    assert len(two) == 2
    assert two.timesteps == (0.0, 0.1)
    assert not two.variance_preserving
    with pytest.raises(ValueError):
        build_euler_ode_schedule([0.0], [0.0])
    with pytest.raises(ValueError):
        build_euler_ode_schedule([0.0], [-0.1])


def test_ancestral_schedule():
    sched = build_ancestral_schedule([0.9, 0.7, 0.5, 0.2])
    assert sched.steps[0].rho == 0
    assert all(p.rho > 0 for p in sched.steps[1:])
    single = build_ancestral_schedule([1.0])
    assert single.steps[0] == StepParams(1.0, 0.0, 0.0)
    flat = build_ancestral_schedule([0.99, 0.98, 0.97])
    assert all(0.9 <= p.phi <= 1.1 for p in flat.steps)


def test_step_params_validation():
    with pytest.raises(ValueError):
        StepParams(0.0, 1.0)
    with pytest.raises(ValueError):
        StepParams(1.0, 1.0, -0.1)


def test_schedule_requires_monotone_timesteps():
    p = StepParams(1.0, 0.0)
    with pytest.raises(ValueError):
        Schedule("ddim", (1.0, 1.0), (p, p), (1.0, 1.0), (0.0, 0.0))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.01, 0.999), min_size=1, max_size=12, unique=True), st.booleans())
def test_schedule_text_round_trip(values, ancestral):
    abar = sorted(values, reverse=True)
    sched = build_ancestral_schedule(abar) if ancestral else build_ddim_schedule(abar)
    text = schedule_to_text(sched)
    assert schedule_from_text(text) == sched
    assert '"phi": [' in text


def test_every_builtin_schedule_has_nonzero_phi():
    abar = [0.95, 0.8, 0.6, 0.3, 0.05]
    for sched in (build_ddim_schedule(abar), build_ancestral_schedule(abar),
                  build_euler_ode_schedule([1.0, 2.0], [1.0, 1.0])):
        assert all(p.phi != 0 for p in sched.steps)
