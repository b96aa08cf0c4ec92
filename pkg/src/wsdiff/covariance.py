"""Circulant convolution operators for spatially correlated Gaussian noise.

A positive-semidefinite convolution operator K with periodic (wrap-around)
boundaries is diagonal in the discrete Fourier basis, so it is represented by
its real eigenvalue array over the frequency grid.  Applying K, its adjoint,
or K Kᵀ is a forward/inverse FFT pair with an elementwise multiply; sampling
correlated noise is K applied to white noise.

Gaussian kernels are L1-normalized (unit sum), so the DC eigenvalue is 1 and
the signal mean is preserved.  Their eigenvalues are evaluated with the
Poisson-summation closed form of the wrapped sampled Gaussian's DFT, which is
strictly positive and accurate far below the round-off floor an FFT of the
spatial kernel would hit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .container import read_container, write_container

# Kernel widths at or below this collapse to the exact identity operator.
DELTA_STD = 0.5

# Relative eigenvalue floor applied whenever an inverse is formed.
# The forward pipeline never inverts.
EIG_CLAMP_REL = 1e-12

OPERATOR_MAGIC = b"WSK1"


@dataclass(frozen=True)
class NoiseSpec:
    """How a correlated-noise draw is built: K z1 + gamma * z2.

    kernel_std: width (pixels) of the Gaussian kernel behind K.
    grayscale:  broadcast one realization across all channels.
    gamma:      weight of the isotropic floor term.
    """

    kernel_std: float
    grayscale: bool = False
    gamma: float = 0.0

    def __post_init__(self):
        if not np.isfinite(self.kernel_std) or self.kernel_std < 0:
            raise ValueError(f"kernel_std must be finite and >= 0, got {self.kernel_std}")
        if not np.isfinite(self.gamma) or self.gamma < 0:
            raise ValueError(f"gamma must be finite and >= 0, got {self.gamma}")


def _axis_eigenvalues(std: float, n: int) -> np.ndarray:
    """DFT of the periodized sampled Gaussian exp(-j^2 / (2 std^2)) on n points.

    Poisson summation gives, for frequency f = k/n,
        G(f) = sqrt(2 pi) std * sum_m exp(-2 pi^2 std^2 (f + m)^2),
    and the unit-sum normalization divides by G(0).  Strictly positive.
    """
    f = np.arange(n, dtype=np.float64) / n
    c = 2.0 * np.pi**2 * std**2
    # enough alias terms that the truncated tail is below double precision
    m_max = max(4, int(np.ceil(np.sqrt(45.0 / c) + 1.5)))
    m = np.arange(-m_max, m_max + 1, dtype=np.float64)
    terms = np.exp(-c * (f[:, None] + m[None, :]) ** 2)
    vals = terms.sum(axis=1)
    return vals / vals[0]


@dataclass(frozen=True)
class CirculantOperator:
    """Convolution operator K on a periodic 1D/2D grid, stored by its eigenvalues.

    eigenvalues has the grid's shape and holds the real, nonnegative DFT of the
    zero-centered convolution kernel.  Immutable; safe to share across threads.
    """

    shape: tuple[int, ...]
    eigenvalues: np.ndarray = field(repr=False)
    kernel_std: float = 0.0

    def __post_init__(self):
        shape = tuple(int(n) for n in self.shape)
        if len(shape) == 0 or any(n < 1 for n in shape):
            raise ValueError(f"grid shape must be nonempty with positive dims, got {self.shape}")
        eig = np.asarray(self.eigenvalues, dtype=np.float64)
        if eig.shape != shape:
            raise ValueError(f"eigenvalues shape {eig.shape} does not match grid {shape}")
        if np.any(eig < 0):
            raise ValueError("eigenvalues must be nonnegative (K is PSD)")
        eig = eig.copy()
        eig.flags.writeable = False
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "eigenvalues", eig)

    # -- construction -----------------------------------------------------

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def kernel(self) -> np.ndarray:
        """Spatial convolution kernel, centered at index 0 (wrap-around)."""
        return np.fft.ifftn(self.eigenvalues).real

    # -- application ------------------------------------------------------

    def _check_grid(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim < self.ndim or x.shape[x.ndim - self.ndim:] != self.shape:
            raise ValueError(f"input shape {x.shape} does not end with grid {self.shape}")
        return x

    def _axes(self, x: np.ndarray) -> tuple[int, ...]:
        return tuple(range(x.ndim - self.ndim, x.ndim))

    def _multiply(self, x: np.ndarray, multiplier: np.ndarray) -> np.ndarray:
        x = self._check_grid(x)
        axes = self._axes(x)
        return np.fft.ifftn(np.fft.fftn(x, axes=axes) * multiplier, axes=axes).real

    def apply(self, x: np.ndarray) -> np.ndarray:
        """K x: circular convolution of x with the kernel (per leading axis)."""
        return self._multiply(x, self.eigenvalues)

    def apply_adjoint(self, x: np.ndarray) -> np.ndarray:
        """Kᵀ x; equals apply for real symmetric kernels (real eigenvalues)."""
        return self._multiply(x, np.conj(self.eigenvalues))

    def apply_kkt(self, x: np.ndarray) -> np.ndarray:
        """K Kᵀ x, i.e. squared eigenvalues."""
        return self._multiply(x, self.eigenvalues**2)

    def apply_inv_kkt(self, x: np.ndarray) -> np.ndarray:
        """(K Kᵀ)⁻¹ x with the diagnostic eigenvalue floor; not used by training."""
        lam2 = np.maximum(self.eigenvalues**2, EIG_CLAMP_REL * np.max(self.eigenvalues**2))
        return self._multiply(x, 1.0 / lam2)

    # -- sampling ---------------------------------------------------------

    def sample_noise(
        self,
        spec: NoiseSpec,
        rng,
        channels: int | None = None,
        size: int | None = None,
    ) -> np.ndarray:
        """Draw K z1 + gamma z2 with z1, z2 iid standard normal.

        channels: if given, a leading channel axis is added; with
        spec.grayscale one realization is broadcast to every channel.
        size: optional extra leading batch axis.
        Deterministic per seed; covariance of each draw is K Kᵀ + gamma² I.
        """
        rng = np.random.default_rng(rng)
        base = self.shape if spec.grayscale or channels is None else (channels, *self.shape)
        if size is not None:
            base = (size, *base)
        z1 = rng.standard_normal(base)
        z2 = rng.standard_normal(base)
        noise = self.apply(z1) + spec.gamma * z2
        if spec.grayscale and channels is not None:
            axis = 0 if size is None else 1
            noise = np.repeat(np.expand_dims(noise, axis), channels, axis=axis)
        return noise

    # -- diagnostics ------------------------------------------------------

    def condition_number(self) -> float:
        """max/min eigenvalue of K Kᵀ; +inf for singular operators."""
        lam2 = self.eigenvalues**2
        lo = float(lam2.min())
        if lo == 0.0:
            return np.inf
        return float(lam2.max()) / lo

    def dense_matrix(self) -> np.ndarray:
        """K as an explicit (size x size) matrix, rows/cols in C order."""
        n = self.size
        eye = np.eye(n).reshape(n, *self.shape)
        return self.apply(eye).reshape(n, n).T

    def dense_kkt(self) -> np.ndarray:
        n = self.size
        eye = np.eye(n).reshape(n, *self.shape)
        return self.apply_kkt(eye).reshape(n, n).T

    # -- serialization ----------------------------------------------------

    def save(self, path) -> None:
        write_container(path, OPERATOR_MAGIC, self.shape, self.kernel_std, self.eigenvalues)

    @classmethod
    def load(cls, path) -> "CirculantOperator":
        dims, std, data = read_container(path, OPERATOR_MAGIC)
        return cls(tuple(dims), data.reshape(dims), kernel_std=std)


def build_gaussian_kernel(std: float, shape: int | tuple[int, ...]) -> CirculantOperator:
    """Circulant operator for a wrapped, unit-sum isotropic Gaussian kernel.

    std <= 0.5 collapses to the exact delta kernel (identity operator).
    The isotropic Gaussian separates across axes, so the eigenvalue grid is an
    outer product of per-axis closed forms.
    """
    if not np.isfinite(std) or std < 0:
        raise ValueError(f"kernel std must be finite and >= 0, got {std}")
    if np.isscalar(shape):
        shape = (int(shape),)
    shape = tuple(int(n) for n in shape)
    if len(shape) == 0 or any(n < 1 for n in shape):
        raise ValueError(f"grid shape must be nonempty with positive dims, got {shape}")
    if std <= DELTA_STD:
        return CirculantOperator(shape, np.ones(shape), kernel_std=float(std))
    eig = _axis_eigenvalues(std, shape[0])
    for n in shape[1:]:
        eig = np.multiply.outer(eig, _axis_eigenvalues(std, n))
    return CirculantOperator(shape, eig, kernel_std=float(std))


def from_kernel(kernel: np.ndarray, kernel_std: float = 0.0) -> CirculantOperator:
    """Operator from an explicit zero-centered spatial kernel via its DFT.

    The kernel must be symmetric enough that its DFT is real and nonnegative;
    round-off-scale violations are clipped, larger ones rejected.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    eig = np.fft.fftn(kernel)
    if np.abs(eig.imag).max() > 1e-9 * max(np.abs(eig.real).max(), 1e-30):
        raise ValueError("kernel DFT is not real: kernel must be centrally symmetric")
    eig = eig.real
    floor = -1e-9 * max(eig.max(), 1e-30)
    if eig.min() < floor:
        raise ValueError("kernel DFT has negative eigenvalues: operator would not be PSD")
    return CirculantOperator(kernel.shape, np.maximum(eig, 0.0), kernel_std=kernel_std)
