"""Anisotropic variance-preserving forward SDE and its whitened-score target.

The forward process is dx = -1/2 beta_t x dt + sqrt(beta_t) K dw with a linear
schedule beta_t.  Its transition kernel is

    x_t | x_0  ~  N(alpha_t x_0, (1 - alpha_t^2) K Kᵀ),
    alpha_t = exp(-1/2 [beta_min t + (beta_max - beta_min) t^2 / 2]).

The learning target is the whitened score G_t G_tᵀ grad log p(x_t | x_0) =
beta_t (alpha_t x_0 - x_t) / (1 - alpha_t^2): the covariance cancels against
G_t G_tᵀ, so the target never touches K.  That cancellation is this module's
central contract; the raw conditional score (which does invert K Kᵀ) is kept
only as the unstable diagnostic it is.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .covariance import CirculantOperator, NoiseSpec

# warn when the diagnostic score inversion sees a condition number above this
ILL_CONDITIONED = 1e12


def _per_sample(coef, x: np.ndarray) -> np.ndarray:
    """Reshape a scalar-or-batch coefficient to broadcast against states x."""
    coef = np.asarray(coef, dtype=np.float64)
    if coef.ndim == 0:
        return coef
    return coef.reshape(coef.shape + (1,) * (x.ndim - coef.ndim))


def _check_t(t, lo: float = 0.0, hi: float = 1.0):
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < lo) or np.any(t > hi):
        raise ValueError(f"t must lie in [{lo}, {hi}], got {t}")
    return t


@dataclass(frozen=True)
class BetaSchedule:
    """Linear noise schedule beta(t) = beta_min + t (beta_max - beta_min), t in [0,1]."""

    beta_min: float = 0.01
    beta_max: float = 20.0

    def __post_init__(self):
        if not (0 < self.beta_min <= self.beta_max):
            raise ValueError(f"need 0 < beta_min <= beta_max, got {self.beta_min}, {self.beta_max}")

    def beta(self, t):
        t = _check_t(t)
        return self.beta_min + t * (self.beta_max - self.beta_min)

    def beta_integral(self, t):
        """Closed form of int_0^t beta_s ds for the linear schedule."""
        t = _check_t(t)
        return self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t**2

    def alpha(self, t):
        return np.exp(-0.5 * self.beta_integral(t))


@dataclass(frozen=True)
class VpSde:
    """Variance-preserving SDE with diffusion matrix sqrt(beta_t) K.

    Drift coefficient F_t = -beta_t / 2 (scalar), G_t G_tᵀ = beta_t K Kᵀ.
    Immutable; all sampling takes explicit seeds.
    """

    schedule: BetaSchedule
    K: CirculantOperator
    gamma_sq_range: tuple[float, float] = (0.0, 1.0)

    def beta(self, t):
        return self.schedule.beta(t)

    def alpha(self, t):
        return self.schedule.alpha(t)

    def drift_coefficient(self, t):
        """F_t, the scalar multiplying x in the forward drift."""
        return -0.5 * self.schedule.beta(t)

    def snr(self, t):
        """alpha_t / sqrt(1 - alpha_t^2); +inf at t = 0."""
        t = _check_t(t)
        a = self.alpha(t)
        with np.errstate(divide="ignore"):
            return np.where(a < 1.0, a / np.sqrt(np.maximum(1.0 - a**2, 0.0)), np.inf)[()]

    def forward_sample(self, x0: np.ndarray, t, spec: NoiseSpec, rng,
                       channels: int | None = None):
        """Draw x_t = alpha_t x0 + sqrt(1 - alpha_t^2) (K z1 + gamma z2).

        Returns (x_t, noise) where noise is the unscaled correlated draw.
        Batched t broadcasts along leading axes of x0.
        """
        t = _check_t(t)
        x0 = np.asarray(x0, dtype=np.float64)
        state_ndim = self.K.ndim + (1 if channels is not None else 0)
        lead = x0.ndim - state_ndim
        if lead not in (0, 1):
            raise ValueError(f"x0 shape {x0.shape} has unsupported leading axes for grid {self.K.shape}")
        if lead == 0 and np.asarray(t).ndim > 0:
            raise ValueError("batched t requires a batch axis on x0")
        a = _per_sample(self.alpha(t), x0)
        noise = self.K.sample_noise(spec, rng, channels=channels,
                                    size=x0.shape[0] if lead == 1 else None)
        x_t = a * x0 + np.sqrt(1.0 - a**2) * noise
        return x_t, noise

    def ws_conditional_target(self, x0: np.ndarray, x_t: np.ndarray, t) -> np.ndarray:
        """beta_t (alpha_t x0 - x_t) / (1 - alpha_t^2).

        The whitened conditional score: G_t G_tᵀ times the conditional score,
        with K Kᵀ cancelled in closed form.  Involves no operator application,
        for any kernel.
        """
        t = _check_t(t)
        if np.any(t == 0.0):
            raise ValueError("ws_conditional_target is undefined at t = 0")
        x0 = np.asarray(x0, dtype=np.float64)
        x_t = np.asarray(x_t, dtype=np.float64)
        a = _per_sample(self.alpha(t), x_t)
        b = _per_sample(self.beta(t), x_t)
        return b * (a * x0 - x_t) / (1.0 - a**2)

    def conditional_score(self, x0: np.ndarray, x_t: np.ndarray, t) -> np.ndarray:
        """Sigma_t^{-1} (alpha_t x0 - x_t), the raw conditional score.

        Diagnostic only: inverts (1 - alpha_t^2) K Kᵀ in the frequency domain
        with a clamped eigenvalue floor, and warns when K Kᵀ is ill-conditioned.
        This is the inversion the whitened target exists to avoid.
        """
        t = _check_t(t)
        if np.any(t == 0.0):
            raise ValueError("conditional_score is undefined at t = 0")
        kappa = self.K.condition_number()
        if kappa > ILL_CONDITIONED:
            warnings.warn(
                f"conditional_score inverting K KT with condition number {kappa:.3e}; "
                "result is clamped and unreliable",
                RuntimeWarning,
                stacklevel=2,
            )
        x0 = np.asarray(x0, dtype=np.float64)
        x_t = np.asarray(x_t, dtype=np.float64)
        a = _per_sample(self.alpha(t), x_t)
        residual = (a * x0 - x_t) / (1.0 - a**2)
        return self.K.apply_inv_kkt(residual)
