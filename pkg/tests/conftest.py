"""Shared brute-force oracles, kept independent of the package's FFT paths."""

import numpy as np
import pytest


def periodized_gaussian_kernel(std: float, shape) -> np.ndarray:
    """Wrap-around sampled Gaussian built by summing spatial-domain aliases."""
    shape = (shape,) if np.isscalar(shape) else tuple(shape)
    axes = []
    for n in shape:
        j = np.arange(n, dtype=np.float64)
        acc = np.zeros(n)
        for r in range(-80, 81):
            acc += np.exp(-((j + r * n) ** 2) / (2.0 * std**2))
        axes.append(acc)
    kernel = axes[0]
    for ax in axes[1:]:
        kernel = np.multiply.outer(kernel, ax)
    return kernel / kernel.sum()


def dense_circulant(kernel: np.ndarray) -> np.ndarray:
    """Explicit matrix of circular convolution with `kernel`, C-order indexing."""
    shape = kernel.shape
    n = kernel.size
    mat = np.empty((n, n))
    for row, out_idx in enumerate(np.ndindex(*shape)):
        for col, in_idx in enumerate(np.ndindex(*shape)):
            shift = tuple((o - i) % s for o, i, s in zip(out_idx, in_idx, shape))
            mat[row, col] = kernel[shift]
    return mat


def spatial_circular_convolve(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Direct O(N^2) circular convolution."""
    shape = x.shape
    out = np.zeros_like(x, dtype=np.float64)
    for out_idx in np.ndindex(*shape):
        acc = 0.0
        for in_idx in np.ndindex(*shape):
            shift = tuple((o - i) % s for o, i, s in zip(out_idx, in_idx, shape))
            acc += kernel[shift] * x[in_idx]
        out[out_idx] = acc
    return out


def finite_difference_gradient(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    grad = np.zeros_like(x, dtype=np.float64)
    flat = grad.ravel()
    xf = x.astype(np.float64).ravel().copy()
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + h
        hi = f(xf.reshape(x.shape))
        xf[i] = orig - h
        lo = f(xf.reshape(x.shape))
        xf[i] = orig
        flat[i] = (hi - lo) / (2.0 * h)
    return grad


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
