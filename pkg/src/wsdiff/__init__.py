"""Whitened-score diffusion at desk scale.

Anisotropic Gaussian forward SDEs built from circulant convolution operators,
the whitened-score training target (which never inverts the noise
covariance), exact oracles for Gaussian-mixture priors, reverse-time
samplers, and posterior sampling for imaging inverse problems with
structured noise.
"""

from .covariance import CirculantOperator, NoiseSpec, build_gaussian_kernel, from_kernel
from .inverse import (
    ForwardOperator,
    InverseProblem,
    build_idt_mask,
    identity_operator,
    lambda_line_search,
    laplacian,
    lens_blur,
    likelihood_gradient,
    make_measurement,
    motion_blur,
    psnr,
    tikhonov_baseline,
)
from .oracle import (
    GaussianMixture,
    GridGaussianPrior,
    MarginalAtT,
    exact_score,
    exact_ws,
    fm_conditional_velocity,
    fm_conditional_velocity_via_path,
    fm_marginal_velocity,
    marginal_params,
    posterior_mean,
    vector_field_grid,
)
from .samplers import (
    DivergenceError,
    LambdaRule,
    SamplerConfig,
    Trajectory,
    WsField,
    fm_ode_integrate,
    oracle_ws_field,
    pf_ode_integrate,
    posterior_sample,
    reverse_sde_integrate,
    unconditional_sample,
)
from .sde import BetaSchedule, VpSde
from .training import (
    AdamState,
    MlpModel,
    TrainConfig,
    consistency_loss,
    dsm_baseline_loss,
    oracle_gap,
    train,
    ws_loss,
)

__version__ = "0.1.0"
