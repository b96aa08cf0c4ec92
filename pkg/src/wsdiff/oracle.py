"""Closed-form scores, whitened scores, posterior means, and flow velocities
for Gaussian-mixture data priors under the anisotropic transition kernel.

Everything here is exact up to linear-solve round-off, which is what makes it
usable as ground truth for samplers and trained models.  Two prior families
are supported:

* ``GaussianMixture`` -- full-covariance mixtures in small dimension (dense
  linear algebra, capped at dimension 16);
* ``GridGaussianPrior`` -- a single Gaussian over an image grid with scalar
  covariance, where every solve is diagonal in the frequency domain.

For a mixture p(x0) = sum_i w_i N(mu_i, S_i), the marginal at time t is
sum_i w_i N(alpha_t mu_i, alpha_t^2 S_i + (1 - alpha_t^2) K Kᵀ), and the
score, posterior mean (generalized Tweedie identity), and flow-matching
velocity all follow from responsibility-weighted Gaussian identities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sde import VpSde, _check_t, _per_sample

DENSE_DIM_CAP = 16


def _logsumexp(a: np.ndarray, axis: int):
    hi = np.max(a, axis=axis, keepdims=True)
    return (hi + np.log(np.sum(np.exp(a - hi), axis=axis, keepdims=True))).squeeze(axis)


# ---------------------------------------------------------------------------
# dense mixtures
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianMixture:
    """Mixture prior with full component covariances, dense dimension <= 16."""

    weights: np.ndarray
    means: np.ndarray       # (n_components, dim)
    covariances: np.ndarray  # (n_components, dim, dim), symmetric PSD

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        m = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        c = np.asarray(self.covariances, dtype=np.float64)
        if c.ndim == 2:
            c = c[None]
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"mixture weights must sum to 1, got {w.sum()!r}")
        if np.any(w < 0):
            raise ValueError("mixture weights must be nonnegative")
        k, d = m.shape
        if d > DENSE_DIM_CAP:
            raise ValueError(f"dense mixtures are capped at dimension {DENSE_DIM_CAP}, got {d}")
        if w.shape != (k,) or c.shape != (k, d, d):
            raise ValueError("inconsistent weights/means/covariances shapes")
        if np.abs(c - np.swapaxes(c, -1, -2)).max() > 1e-10:
            raise ValueError("component covariances must be symmetric")
        for ci in c:
            lo = np.linalg.eigvalsh(ci).min()
            if lo < -1e-12 * max(np.abs(ci).max(), 1.0):
                raise ValueError("component covariances must be PSD")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "covariances", c)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def sample(self, rng, n: int) -> np.ndarray:
        rng = np.random.default_rng(rng)
        idx = rng.choice(len(self.weights), size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        out = np.empty((n, self.dim))
        for i in range(len(self.weights)):
            sel = idx == i
            if not np.any(sel):
                continue
            # for PSD (possibly singular) covariances use the symmetric sqrt
            evals, evecs = np.linalg.eigh(self.covariances[i])
            root = evecs * np.sqrt(np.maximum(evals, 0.0)) @ evecs.T
            out[sel] = self.means[i] + z[sel] @ root.T
        return out

    # marginal quantities, dispatched to by the module-level functions

    def score(self, sde: VpSde, x: np.ndarray, t: float) -> np.ndarray:
        marg = marginal_params(self, sde, t)
        r, solves, _ = _responsibilities(marg, x)
        return np.einsum("k...,k...i->...i", r, solves)

    def posterior_mean(self, sde: VpSde, x: np.ndarray, t: float) -> np.ndarray:
        a = float(sde.alpha(_check_t(t)))
        marg = marginal_params(self, sde, t)
        r, solves, _ = _responsibilities(marg, x)
        # component posterior mean: mu_i - alpha S_i C_i^{-1} (alpha mu_i - x)
        comp = self.means[(slice(None),) + (None,) * (np.ndim(x) - 1)] \
            - a * np.einsum("kij,k...j->k...i", self.covariances, solves)
        return np.einsum("k...,k...i->...i", r, comp)

    def log_density(self, sde: VpSde, x: np.ndarray, t: float) -> np.ndarray:
        marg = marginal_params(self, sde, t)
        _, _, logp = _responsibilities(marg, x)
        return _logsumexp(np.log(marg.weights).reshape((-1,) + (1,) * (logp.ndim - 1)) + logp, 0)


@dataclass(frozen=True)
class MarginalAtT:
    """Parameters of the marginal mixture p_t: the prior pushed through the
    transition kernel.  Covariances are alpha_t^2 S_i + (1 - alpha_t^2) K Kᵀ."""

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray


def marginal_params(gm: GaussianMixture, sde: VpSde, t: float) -> MarginalAtT:
    t = _check_t(t)
    a = float(sde.alpha(t))
    if gm.dim != sde.K.size:
        raise ValueError(f"mixture dimension {gm.dim} does not match grid size {sde.K.size}")
    kkt = sde.K.dense_kkt()
    covs = a**2 * gm.covariances + (1.0 - a**2) * kkt[None]
    return MarginalAtT(gm.weights, a * gm.means, covs)


def _responsibilities(marg: MarginalAtT, x: np.ndarray):
    """Posterior component weights r_i(x), solves C_i^{-1}(m_i - x), and log pdfs.

    x has shape (..., dim); returns r (k, ...), solves (k, ..., dim), logp (k, ...).
    """
    x = np.asarray(x, dtype=np.float64)
    d = marg.means.shape[1]
    if x.shape[-1] != d:
        raise ValueError(f"points have dimension {x.shape[-1]}, expected {d}")
    lead = x.shape[:-1]
    diff = marg.means[:, None, :] - x.reshape(1, -1, d)          # (k, N, d)
    chol = np.linalg.cholesky(marg.covariances)                  # (k, d, d)
    # C^{-1} diff via two triangular solves, batched over points
    y = np.linalg.solve(chol[:, None], diff[..., None])
    solves = np.linalg.solve(np.swapaxes(chol, -1, -2)[:, None], y)[..., 0]
    logdet = 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(axis=-1)
    maha = np.einsum("knd,knd->kn", diff, solves)
    logp = -0.5 * (d * np.log(2.0 * np.pi) + logdet[:, None] + maha)
    logw = np.log(marg.weights)[:, None] + logp
    r = np.exp(logw - _logsumexp(logw, 0)[None])
    k = len(marg.weights)
    return r.reshape((k,) + lead), solves.reshape((k,) + lead + (d,)), logp.reshape((k,) + lead)


# ---------------------------------------------------------------------------
# single Gaussian over an image grid, scalar data covariance
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridGaussianPrior:
    """N(mean, var * I) over an image grid; exact under the frequency-diagonal
    marginal covariance alpha^2 var + (1 - alpha^2) lambda_k^2."""

    mean: np.ndarray
    var: float

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        if self.var < 0:
            raise ValueError("var must be nonnegative")

    def sample(self, rng, n: int | None = None) -> np.ndarray:
        rng = np.random.default_rng(rng)
        shape = self.mean.shape if n is None else (n, *self.mean.shape)
        return self.mean + np.sqrt(self.var) * rng.standard_normal(shape)

    def _freq_cov(self, sde: VpSde, t: float) -> np.ndarray:
        a = float(sde.alpha(_check_t(t)))
        c = a**2 * self.var + (1.0 - a**2) * sde.K.eigenvalues**2
        if c.min() <= 0.0:
            raise ValueError("marginal covariance is singular: zero-variance prior with singular K")
        return c

    def _solve(self, sde: VpSde, v: np.ndarray, t: float) -> np.ndarray:
        """C_t^{-1} v through the frequency domain."""
        c = self._freq_cov(sde, t)
        axes = tuple(range(v.ndim - sde.K.ndim, v.ndim))
        return np.fft.ifftn(np.fft.fftn(v, axes=axes) / c, axes=axes).real

    def score(self, sde: VpSde, x: np.ndarray, t: float) -> np.ndarray:
        a = float(sde.alpha(t))
        return self._solve(sde, a * self.mean - np.asarray(x, dtype=np.float64), t)

    def posterior_mean(self, sde: VpSde, x: np.ndarray, t: float) -> np.ndarray:
        a = float(sde.alpha(t))
        resid = np.asarray(x, dtype=np.float64) - a * self.mean
        return self.mean + a * self.var * self._solve(sde, resid, t)


# ---------------------------------------------------------------------------
# module-level operations (work for either prior family)
# ---------------------------------------------------------------------------


def exact_score(prior, sde: VpSde, x: np.ndarray, t: float) -> np.ndarray:
    """Marginal (Stein) score grad log p_t(x) of the prior pushed to time t."""
    return prior.score(sde, x, t)


def exact_ws(prior, sde: VpSde, x: np.ndarray, t: float) -> np.ndarray:
    """Whitened score G_t G_tᵀ grad log p_t(x) = beta_t K Kᵀ grad log p_t(x)."""
    t = _check_t(t)
    score = prior.score(sde, x, t)
    b = float(sde.beta(t))
    if isinstance(prior, GridGaussianPrior):
        return b * sde.K.apply_kkt(score)
    return b * sde.K.apply_kkt(score.reshape(score.shape[:-1] + sde.K.shape)).reshape(score.shape)


def posterior_mean(prior, sde: VpSde, x: np.ndarray, t: float) -> np.ndarray:
    """E[x0 | x_t]; satisfies alpha_t E[x0|x_t] = x_t + Sigma_t grad log p_t(x_t)."""
    return prior.posterior_mean(sde, x, t)


def log_marginal_density(gm: GaussianMixture, sde: VpSde, x: np.ndarray, t: float) -> np.ndarray:
    return gm.log_density(sde, x, t)


def fm_conditional_velocity(sde: VpSde, x0: np.ndarray, x_t: np.ndarray, t) -> np.ndarray:
    """Conditional flow velocity u_t(x_t | x0) = F_t (2 x_t - alpha_t x0) - whitened target.

    The sign on the whitened-score term follows from expanding
    Sigma'_t Sigma_t^{-1} (x_t - mu_t) + mu'_t with Sigma'_t = 2 F_t Sigma_t + G_t G_tᵀ:
    the covariance cancellation leaves minus the conditional whitened score.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    x_t = np.asarray(x_t, dtype=np.float64)
    f = _per_sample(sde.drift_coefficient(t), x_t)
    a = _per_sample(sde.alpha(_check_t(t)), x_t)
    return f * (2.0 * x_t - a * x0) - sde.ws_conditional_target(x0, x_t, t)


def fm_conditional_velocity_via_path(sde: VpSde, x0: np.ndarray, x_t: np.ndarray, t: float) -> np.ndarray:
    """Same velocity through the probability-path derivatives, evaluated densely.

    u = Sigma'_t Sigma_t^{-1} (x_t - mu_t) + mu'_t with mu_t = alpha_t x0,
    mu'_t = F_t mu_t, Sigma_t = (1 - alpha_t^2) K Kᵀ, Sigma'_t = 2 F_t Sigma_t + beta_t K Kᵀ.
    An independent route used to cross-check fm_conditional_velocity.
    """
    t = _check_t(t)
    a = float(sde.alpha(t))
    f = float(sde.drift_coefficient(t))
    b = float(sde.beta(t))
    kkt = sde.K.dense_kkt()
    sigma = (1.0 - a**2) * kkt
    sigma_dot = 2.0 * f * sigma + b * kkt
    x0 = np.asarray(x0, dtype=np.float64)
    x_t = np.asarray(x_t, dtype=np.float64)
    mu = a * x0
    resid = np.linalg.solve(sigma, (x_t - mu)[..., None])[..., 0]
    return resid @ sigma_dot.T + f * mu


def fm_marginal_velocity(prior, sde: VpSde, x: np.ndarray, t: float) -> np.ndarray:
    """Marginal flow velocity: the conditional velocity with x0 replaced by the
    posterior mean.  By the Tweedie identity this equals the probability-flow
    drift F_t x - 1/2 G_t G_tᵀ grad log p_t(x), without ever applying K:

        u(x) = F_t x - 1/2 * beta_t / (1 - alpha_t^2) * (alpha_t E[x0|x] - x).
    """
    t = _check_t(t)
    a = float(sde.alpha(t))
    if a >= 1.0:
        raise ValueError("fm_marginal_velocity is undefined at t = 0")
    b = float(sde.beta(t))
    f = float(sde.drift_coefficient(t))
    x = np.asarray(x, dtype=np.float64)
    pm = prior.posterior_mean(sde, x, t)
    return f * x - 0.5 * b / (1.0 - a**2) * (a * pm - x)


def vector_field_grid(gm, sde: VpSde, grid_spec: tuple[float, float, int], t: float) -> np.ndarray:
    """Evaluate score and whitened score on a regular 2D grid.

    Returns rows (x1, x2, s1, s2, w1, w2), row-major over the grid, for
    plotting or CSV export.  Requires a two-dimensional prior.
    """
    if getattr(gm, "dim", None) != 2:
        raise ValueError("vector_field_grid requires a 2D mixture prior")
    lo, hi, n = grid_spec
    if n < 2:
        raise ValueError("grid needs at least 2 points per axis")
    ax = np.linspace(lo, hi, int(n))
    g1, g2 = np.meshgrid(ax, ax, indexing="ij")
    pts = np.stack([g1.ravel(), g2.ravel()], axis=-1)
    s = exact_score(gm, sde, pts, t)
    w = exact_ws(gm, sde, pts, t)
    return np.hstack([pts, s, w])
