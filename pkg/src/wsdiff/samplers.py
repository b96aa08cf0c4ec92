"""Reverse-time integrators and posterior sampling.

All samplers march a state from t = 1 down to t = 0 on the uniform grid
t_i = i / n_steps, consuming a whitened-score field (x, t) -> G_t G_tᵀ
grad log p_t(x).  The field may be oracle-backed (exact, from a mixture
prior) or model-backed; the integrators do not care.

reverse_sde_integrate   Euler-Maruyama for dx = [F_t x - ws] dt + G_t dw̄
pf_ode_integrate        Euler for the probability flow dx = [F_t x - ws/2] dt
fm_ode_integrate        Euler for the marginal flow velocity (same path as
                        the probability flow; computed through the posterior
                        mean instead of the score)
posterior_sample        measurement-guided reverse ODE with a scaled
                        likelihood step lambda_t beta_t A^H(y - A x_t) / 2
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Callable

import numpy as np

from .covariance import build_gaussian_kernel
from .oracle import exact_ws, fm_marginal_velocity
from .sde import VpSde


class DivergenceError(RuntimeError):
    """Raised when a sampler state stops being finite or blows past its guard."""

    def __init__(self, message: str, step: int, t: float):
        super().__init__(f"{message} (step {step}, t={t:.6g})")
        self.step = step
        self.t = t


@dataclass(frozen=True)
class WsField:
    """Callable contract (x_t, t) -> whitened score, tagged by its backing."""

    fn: Callable[[np.ndarray, float], np.ndarray]
    kind: str = "oracle"

    def __call__(self, x: np.ndarray, t: float) -> np.ndarray:
        out = self.fn(x, t)
        if out.shape != np.shape(x):
            raise ValueError(f"ws field returned shape {out.shape} for input {np.shape(x)}")
        return out


def oracle_ws_field(prior, sde: VpSde) -> WsField:
    """Exact whitened-score field of a mixture or grid-Gaussian prior."""
    return WsField(lambda x, t: exact_ws(prior, sde, x, t), kind="oracle")


@dataclass(frozen=True)
class SamplerConfig:
    """Discretization and initialization choices shared by the samplers.

    n_steps:          number of Euler steps (the T of the time grid).
    stochastic:       include the Brownian term (reverse SDE / extension of
                      the posterior sampler; ignored by the ODE integrators).
    seed:             RNG seed; runs are bit-reproducible given the config.
    init_kernel_std:  x_T ~ N(0, K Kᵀ) of a Gaussian kernel of this width;
                      at or below the delta cutoff this is N(0, I).
    init_grayscale:   broadcast one init realization across the channel axis.
    store_stride:     keep every k-th state in the trajectory (the final
                      state is always kept).
    likelihood_sign:  +1 moves the posterior update along the residual
                      gradient (decreases ||y - A x||); -1 is the opposite
                      convention, kept selectable.
    """

    n_steps: int = 1000
    stochastic: bool = True
    seed: int = 0
    init_kernel_std: float = 0.0
    init_grayscale: bool = False
    store_stride: int = 1
    likelihood_sign: float = 1.0

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.store_stride < 1:
            raise ValueError("store_stride must be >= 1")
        if self.likelihood_sign not in (1.0, -1.0):
            raise ValueError("likelihood_sign must be +1 or -1")


@dataclass
class Trajectory:
    """Stored states of one reverse-time run, newest last."""

    times: np.ndarray
    states: np.ndarray
    diagnostics: np.ndarray = dc_field(repr=False, default=None)  # rows (t, |x|, |ws|)

    @property
    def x0(self) -> np.ndarray:
        return self.states[-1]


def draw_initial(sde: VpSde, cfg: SamplerConfig, shape: tuple[int, ...], rng) -> np.ndarray:
    """Initial reverse-time state on the grid of sde.K, batched over leading axes."""
    rng = np.random.default_rng(rng)
    shape = tuple(int(n) for n in shape)
    grid = sde.K.shape
    if shape[len(shape) - len(grid):] != grid:
        raise ValueError(f"state shape {shape} does not end with grid {grid}")
    op = build_gaussian_kernel(cfg.init_kernel_std, grid)
    if cfg.init_grayscale and len(shape) > len(grid):
        ch_ax = len(shape) - len(grid) - 1
        channels = shape[ch_ax]
        base = shape[:ch_ax] + shape[ch_ax + 1:]
        x = op.apply(rng.standard_normal(base))
        return np.repeat(np.expand_dims(x, ch_ax), channels, axis=ch_ax)
    return op.apply(rng.standard_normal(shape))


def _run(field, sde: VpSde, cfg: SamplerConfig, shape, x_init, *, ode_half: bool,
         stochastic: bool) -> Trajectory:
    rng = np.random.default_rng(cfg.seed)
    if x_init is None:
        if shape is None:
            raise ValueError("pass either shape or x_init")
        x = draw_initial(sde, cfg, shape, rng)
    else:
        x = np.array(x_init, dtype=np.float64)
    n = cfg.n_steps
    dt = 1.0 / n
    times, states, diag = [], [], []

    def record(i, t, x, ws_norm):
        # initial state, every stride-th step, and the final state
        if i % cfg.store_stride == 0 or i in (0, n):
            times.append(t)
            states.append(x.copy())
            diag.append((t, float(np.linalg.norm(x)), ws_norm))

    record(n, 1.0, x, np.nan)
    for i in range(n, 0, -1):
        t = i / n
        ws = field(x, t)
        f = float(sde.drift_coefficient(t))
        drift = f * x - (0.5 if ode_half else 1.0) * ws
        x = x - drift * dt
        if stochastic:
            b = float(sde.beta(t))
            x = x + np.sqrt(b * dt) * sde.K.apply(rng.standard_normal(x.shape))
        if not np.all(np.isfinite(x)):
            raise DivergenceError("non-finite state", step=i, t=t)
        record(i - 1, (i - 1) / n, x, float(np.linalg.norm(ws)))
    return Trajectory(np.array(times), np.array(states), np.array(diag))


def reverse_sde_integrate(field: WsField, sde: VpSde, cfg: SamplerConfig,
                          shape=None, x_init=None) -> Trajectory:
    """Euler-Maruyama for the reverse SDE; cfg.stochastic=False drops the
    Brownian term, leaving the drift-only recursion."""
    return _run(field, sde, cfg, shape, x_init, ode_half=False, stochastic=cfg.stochastic)


def pf_ode_integrate(field: WsField, sde: VpSde, cfg: SamplerConfig,
                     shape=None, x_init=None) -> Trajectory:
    """Deterministic probability-flow integration (half-weighted whitened score)."""
    return _run(field, sde, cfg, shape, x_init, ode_half=True, stochastic=False)


def fm_ode_integrate(prior, sde: VpSde, cfg: SamplerConfig,
                     shape=None, x_init=None) -> Trajectory:
    """Integrate the marginal flow velocity of the prior.

    The velocity is computed through the posterior mean, not the score, yet
    must trace the probability-flow trajectory from the same start: the two
    right-hand sides are the same identity.
    """
    rng = np.random.default_rng(cfg.seed)
    if x_init is None:
        if shape is None:
            raise ValueError("pass either shape or x_init")
        x = draw_initial(sde, cfg, shape, rng)
    else:
        x = np.array(x_init, dtype=np.float64)
    n = cfg.n_steps
    dt = 1.0 / n
    times, states = [1.0], [x.copy()]
    for i in range(n, 0, -1):
        t = i / n
        x = x - fm_marginal_velocity(prior, sde, x, t) * dt
        if not np.all(np.isfinite(x)):
            raise DivergenceError("non-finite state", step=i, t=t)
        if (i - 1) % cfg.store_stride == 0 or i == 1:
            times.append((i - 1) / n)
            states.append(x.copy())
    return Trajectory(np.array(times), np.array(states), None)


@dataclass(frozen=True)
class LambdaRule:
    """Likelihood step weight: a fixed scalar, or scaled each step so the
    likelihood step magnitude is `value` times the prior step magnitude."""

    value: float
    proportional: bool = False

    def resolve(self, prior_step_norm: float, likelihood_step_norm: float) -> float:
        if not self.proportional:
            return self.value
        return self.value * prior_step_norm / max(likelihood_step_norm, 1e-300)


def _algorithm1(field, sde: VpSde, cfg: SamplerConfig, prob, lambda_rule,
                shape, x_init):
    rng = np.random.default_rng(cfg.seed)
    if x_init is None:
        if shape is None:
            raise ValueError("pass either shape or x_init")
        x = draw_initial(sde, cfg, shape, rng)
    else:
        x = np.array(x_init, dtype=np.float64)
    n = cfg.n_steps
    dt = 1.0 / n
    guard = 1e3 * max(float(np.linalg.norm(x)), 1.0)
    rows = []
    for i in range(n, 0, -1):
        t = i / n
        b = float(sde.beta(t))
        prior_step = field(x, t) * (dt / 2.0)
        x_prime = (2.0 - np.sqrt(1.0 - b * dt)) * x + prior_step
        if cfg.stochastic:
            x_prime = x_prime + np.sqrt(b * dt) * sde.K.apply(rng.standard_normal(x.shape))
        resid_norm = np.nan
        if prob is not None:
            residual = prob.y - prob.operator.apply(x)
            resid_norm = float(np.linalg.norm(residual))
            like_step = prob.operator.apply_adjoint(residual) * (b / 2.0)
            lam = lambda_rule.resolve(float(np.linalg.norm(prior_step)),
                                      float(np.linalg.norm(like_step)))
            if lam != 0.0:
                x = x_prime + cfg.likelihood_sign * lam * like_step
            else:
                x = x_prime
        else:
            x = x_prime
        if not np.all(np.isfinite(x)):
            raise DivergenceError("non-finite state", step=i, t=t)
        norm = float(np.linalg.norm(x))
        if norm > guard:
            raise DivergenceError(f"state norm {norm:.3e} exceeded 1e3 x initial", step=i, t=t)
        rows.append((t, norm, float(np.linalg.norm(prior_step)) * 2.0 / dt, resid_norm))
    return x, np.array(rows)


def posterior_sample(field: WsField, prob, sde: VpSde, cfg: SamplerConfig,
                     lambda_rule: LambdaRule, shape=None, x_init=None,
                     return_diagnostics: bool = False):
    """Measurement-guided sampling: prior step then scaled likelihood step.

    Each step applies x' = (2 - sqrt(1 - beta_t dt)) x + ws(x, t) dt / 2 and
    then moves by likelihood_sign * lambda_t * beta_t A^H(y - A x) / 2, with
    lambda_t from the rule.  lambda = 0 reproduces unconditional sampling
    exactly (seed-matched).  Aborts with diagnostics when the state norm
    exceeds 1e3 times the initial norm.
    """
    state_shape = np.shape(x_init) if x_init is not None else tuple(shape)
    if prob.y.shape != state_shape:
        raise ValueError(f"measurement shape {prob.y.shape} does not match state {state_shape}")
    x0, rows = _algorithm1(field, sde, cfg, prob, lambda_rule, shape, x_init)
    if return_diagnostics:
        return x0, rows
    return x0


def unconditional_sample(field: WsField, sde: VpSde, cfg: SamplerConfig,
                         shape=None, x_init=None) -> np.ndarray:
    """The posterior recursion with the likelihood step removed."""
    x0, _ = _algorithm1(field, sde, cfg, None, None, shape, x_init)
    return x0
