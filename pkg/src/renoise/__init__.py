"""Fixed-point renoising inversion for iterative denoisers, with convergence diagnostics."""

from .core import (
    RngState,
    Schedule,
    StepParams,
    as_latent,
    build_ancestral_schedule,
    build_ddim_schedule,
    build_euler_ode_schedule,
    ddim_step_params,
    euler_times,
    sample_gaussian,
    schedule_from_text,
    schedule_to_text,
)
from .diagnostics import (
    averaging_convergence_check,
    consecutive_diffs,
    convergence_report,
    reconstruction_metrics,
    scaled_jacobian_norm,
)
from .inversion import (
    EstimateSeries,
    InversionResult,
    NoiseCorrectionConfig,
    RenoiseConfig,
    RenoiseWeights,
    WeightBand,
    baseline_inversion,
    operation_budget_sweep,
    renoise_inversion,
    renoise_step,
)
from .predictors import (
    CountingPredictor,
    LinearPredictor,
    SeededNonlinear,
    ToyShiftedGaussian,
    predictor_jvp,
)
from .regularize import (
    EditLossConfig,
    enhance_edit,
    loss_pair,
    loss_patch_kl,
    noise_correction_exact,
    noise_correction_optimize,
)
from .sampler import (
    Trajectory,
    approx_inverse_step,
    denoise_step,
    denoise_trajectory,
    forward_noise,
    inverse_step,
    read_trajectory,
    write_trajectory,
)

__version__ = "0.1.0"
