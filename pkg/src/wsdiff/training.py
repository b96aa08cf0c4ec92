"""Small fully-connected whitened-score model with hand-derived gradients.

The network n(x_t, t) maps a state plus sinusoidal time features through tanh
hidden layers to a whitened-score prediction.  All gradients are reverse-mode
chain rule written out by hand; the optimizer is a plain Adam.  The target
beta_t (alpha_t x0 - x_t) / (1 - alpha_t^2) never touches the covariance
operator, so one model trains across arbitrary kernel widths drawn per
example.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .container import read_container, write_container
from .covariance import DELTA_STD, NoiseSpec
from .oracle import exact_ws
from .samplers import WsField
from .sde import VpSde

MODEL_MAGIC = b"WSM1"

# consistency reconstruction is skipped for t beyond this (alpha too small)
CONSISTENCY_T_MAX = 1.0 - 1e-6


class TrainBatch(NamedTuple):
    x0: np.ndarray   # (B, dim)
    t: np.ndarray    # (B,)
    x_t: np.ndarray  # (B, dim)


class MlpModel:
    """sin/cos time embedding -> tanh hidden layers -> linear output."""

    def __init__(self, dim: int, hidden=(64, 64), n_freqs: int = 8, rng=0):
        rng = np.random.default_rng(rng)
        self.dim = int(dim)
        self.n_freqs = int(n_freqs)
        widths = [self.dim + 2 * self.n_freqs, *map(int, hidden), self.dim]
        self.widths = widths
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            self.weights.append(rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in))
            self.biases.append(np.zeros(fan_out))
        # geometric frequency ladder pi * 2^k
        self.omegas = np.pi * 2.0 ** np.arange(self.n_freqs)

    def time_features(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        phase = t[:, None] * self.omegas[None, :]
        return np.concatenate([np.sin(phase), np.cos(phase)], axis=1)

    def _prepare(self, x, t):
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        x = np.atleast_2d(x)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
        return x, t, squeeze

    def forward(self, x, t) -> np.ndarray:
        out, _ = self.forward_cached(x, t)
        return out

    def forward_cached(self, x, t):
        x, t, squeeze = self._prepare(x, t)
        h = np.concatenate([x, self.time_features(t)], axis=1)
        acts = [h]
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.tanh(h @ w + b)
            acts.append(h)
        out = h @ self.weights[-1] + self.biases[-1]
        if squeeze:
            return out[0], acts
        return out, acts

    def backward(self, acts, dout):
        """Gradients of a scalar loss wrt all parameters, given dloss/doutput."""
        dout = np.atleast_2d(dout)
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.biases)
        grads_w[-1] = acts[-1].T @ dout
        grads_b[-1] = dout.sum(axis=0)
        da = dout @ self.weights[-1].T
        for layer in range(len(self.weights) - 2, -1, -1):
            dz = da * (1.0 - acts[layer + 1] ** 2)
            grads_w[layer] = acts[layer].T @ dz
            grads_b[layer] = dz.sum(axis=0)
            da = dz @ self.weights[layer].T
        return list(zip(grads_w, grads_b))

    # -- parameter plumbing -------------------------------------------------

    def pack(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(self.weights, self.biases)])

    def unpack(self, vec: np.ndarray) -> None:
        pos = 0
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[i] = vec[pos:pos + w.size].reshape(w.shape).copy()
            pos += w.size
            self.biases[i] = vec[pos:pos + b.size].copy()
            pos += b.size
        if pos != vec.size:
            raise ValueError(f"parameter vector has {vec.size} entries, expected {pos}")

    def save(self, path) -> None:
        write_container(path, MODEL_MAGIC, self.widths, 0.0, self.pack())

    @classmethod
    def load(cls, path) -> "MlpModel":
        widths, _, params = read_container(path, MODEL_MAGIC)
        dim = widths[-1]
        n_freqs = (widths[0] - dim) // 2
        model = cls(dim, hidden=tuple(widths[1:-1]), n_freqs=n_freqs)
        model.unpack(params)
        return model

    def ws_field(self) -> WsField:
        def fn(x, t):
            flat = np.asarray(x, dtype=np.float64).reshape(-1, self.dim)
            out, _ = self.forward_cached(flat, t)
            return out.reshape(np.shape(x))
        return WsField(fn, kind="model")


# ---------------------------------------------------------------------------
# losses (each returns scalar loss and parameter gradients)
# ---------------------------------------------------------------------------


def ws_loss(model: MlpModel, batch: TrainBatch, sde: VpSde):
    """Mean squared error against the whitened conditional score target."""
    target = sde.ws_conditional_target(batch.x0, batch.x_t, batch.t)
    out, acts = model.forward_cached(batch.x_t, batch.t)
    diff = out - target
    n = diff.shape[0]
    loss = float((diff**2).sum() / n)
    grads = model.backward(acts, 2.0 * diff / n)
    return loss, grads


def consistency_loss(model: MlpModel, batch: TrainBatch, sde: VpSde):
    """Reconstruction of x0 implied by the model prediction:

        x0_hat = (beta_t x_t + (1 - alpha_t^2) n(x_t, t)) / (beta_t alpha_t),

    penalized against the true x0.  Examples with t too close to 1 are
    skipped (alpha underflow)."""
    a = sde.alpha(batch.t)[:, None]
    b = sde.beta(batch.t)[:, None]
    keep = (batch.t <= CONSISTENCY_T_MAX)[:, None]
    n_keep = int(keep.sum())
    out, acts = model.forward_cached(batch.x_t, batch.t)
    coef = (1.0 - a**2) / (b * a)
    x0_hat = batch.x_t / a + coef * out
    diff = np.where(keep, batch.x0 - x0_hat, 0.0)
    if n_keep == 0:
        return 0.0, model.backward(acts, np.zeros_like(out))
    loss = float((diff**2).sum() / n_keep)
    grads = model.backward(acts, -2.0 * diff * coef / n_keep)
    return loss, grads


def dsm_baseline_loss(model: MlpModel, batch: TrainBatch, sde: VpSde):
    """Conventional denoising score matching; the identity-kernel baseline.

    Its target (alpha_t x0 - x_t) / (1 - alpha_t^2) is the conditional score
    only when K is the delta kernel, so any other operator is rejected along
    with the condition number it would have required inverting."""
    if not np.all(sde.K.eigenvalues == 1.0):
        raise ValueError(
            "dsm_baseline_loss requires the delta kernel; got an operator with "
            f"condition number {sde.K.condition_number():.3e}"
        )
    a = sde.alpha(batch.t)[:, None]
    target = (a * batch.x0 - batch.x_t) / (1.0 - a**2)
    out, acts = model.forward_cached(batch.x_t, batch.t)
    diff = out - target
    n = diff.shape[0]
    loss = float((diff**2).sum() / n)
    grads = model.backward(acts, 2.0 * diff / n)
    return loss, grads


def _add_grads(g1, g2, weight: float):
    return [(gw1 + weight * gw2, gb1 + weight * gb2)
            for (gw1, gb1), (gw2, gb2) in zip(g1, g2)]


# ---------------------------------------------------------------------------
# optimizer and training loop
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment accumulators mirroring the parameter list."""

    m: list
    v: list
    step: int
    lr: float
    lr_final: float | None = None
    total_steps: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, model: MlpModel, lr: float, lr_final: float | None = None,
               total_steps: int = 0) -> "AdamState":
        zeros = lambda: [(np.zeros_like(w), np.zeros_like(b))
                         for w, b in zip(model.weights, model.biases)]
        return cls(m=zeros(), v=zeros(), step=0, lr=lr, lr_final=lr_final,
                   total_steps=total_steps)

    def current_lr(self) -> float:
        if self.lr_final is None or self.total_steps <= 1:
            return self.lr
        frac = min(self.step / self.total_steps, 1.0)
        return self.lr + frac * (self.lr_final - self.lr)

    def update(self, model: MlpModel, grads) -> None:
        self.step += 1
        lr = self.current_lr()
        c1 = 1.0 - self.beta1**self.step
        c2 = 1.0 - self.beta2**self.step
        for i, (gw, gb) in enumerate(grads):
            for acc_m, acc_v, g, param in (
                (self.m[i][0], self.v[i][0], gw, model.weights[i]),
                (self.m[i][1], self.v[i][1], gb, model.biases[i]),
            ):
                acc_m *= self.beta1
                acc_m += (1 - self.beta1) * g
                acc_v *= self.beta2
                acc_v += (1 - self.beta2) * g**2
                param -= lr * (acc_m / c1) / (np.sqrt(acc_v / c2) + self.eps)


@dataclass(frozen=True)
class TrainConfig:
    kernel_std_range: tuple[float, float] = (0.1, 3.0)
    gamma_sq_range: tuple[float, float] = (0.0, 1.0)
    grayscale_prob: float = 0.5
    batch_size: int = 256
    steps: int = 20000
    seed: int = 0
    consistency_weight: float = 1.0
    lr: float = 1e-3
    lr_final: float | None = None
    t_min: float = 1e-5

    def __post_init__(self):
        if self.kernel_std_range[0] > self.kernel_std_range[1]:
            raise ValueError("empty kernel_std_range")
        if self.gamma_sq_range[0] > self.gamma_sq_range[1]:
            raise ValueError("empty gamma_sq_range")
        if not 0.0 <= self.grayscale_prob <= 1.0:
            raise ValueError("grayscale_prob must be in [0, 1]")
        if self.consistency_weight < 0:
            raise ValueError("consistency_weight must be >= 0")


def _batched_axis_eigenvalues(stds: np.ndarray, n: int) -> np.ndarray:
    """Per-example eigenvalue rows for a batch of kernel widths on a length-n grid."""
    f = np.arange(n) / n
    m = np.arange(-8, 9)
    c = 2.0 * np.pi**2 * stds[:, None, None] ** 2
    vals = np.exp(-c * (f[None, :, None] + m[None, None, :]) ** 2).sum(axis=2)
    vals /= vals[:, :1]
    return np.where(stds[:, None] <= DELTA_STD, 1.0, vals)


def sample_batch(prior, sde: VpSde, cfg: TrainConfig, rng) -> TrainBatch:
    """Forward-process batch with per-example kernel width and gamma floor.

    Every example gets its own std ~ U(kernel_std_range) and gamma^2 ~
    U(gamma_sq_range); the training target is unaffected by either.  States
    are flat vectors on a 1D grid.
    """
    rng = np.random.default_rng(rng)
    n = sde.K.size
    x0 = prior.sample(rng, cfg.batch_size)
    t = rng.uniform(cfg.t_min, 1.0, cfg.batch_size)
    stds = rng.uniform(*cfg.kernel_std_range, cfg.batch_size)
    gammas = np.sqrt(rng.uniform(*cfg.gamma_sq_range, cfg.batch_size))
    lam = _batched_axis_eigenvalues(stds, n)
    z1 = rng.standard_normal((cfg.batch_size, n))
    z2 = rng.standard_normal((cfg.batch_size, n))
    noise = np.fft.ifft(np.fft.fft(z1, axis=1) * lam, axis=1).real + gammas[:, None] * z2
    a = sde.alpha(t)[:, None]
    x_t = a * x0 + np.sqrt(1.0 - a**2) * noise
    return TrainBatch(x0, t, x_t)


def fixed_kernel_batch(prior, sde: VpSde, cfg: TrainConfig, rng) -> TrainBatch:
    """Forward-process batch using sde.K itself for every example."""
    rng = np.random.default_rng(rng)
    x0 = prior.sample(rng, cfg.batch_size)
    t = rng.uniform(cfg.t_min, 1.0, cfg.batch_size)
    spec = NoiseSpec(kernel_std=sde.K.kernel_std)
    x_t, _ = sde.forward_sample(x0.reshape(-1, *sde.K.shape), t, spec, rng)
    return TrainBatch(x0, t, x_t.reshape(x0.shape))


def train(model: MlpModel, prior, cfg: TrainConfig, sde: VpSde,
          randomize_kernel: bool = True):
    """Adam on ws_loss + consistency_weight * consistency_loss.

    Returns (model, history) where history rows are
    (step, ws_loss, consistency_loss).  Aborts on a non-finite loss.
    """
    rng = np.random.default_rng(cfg.seed)
    adam = AdamState.create(model, cfg.lr, cfg.lr_final, cfg.steps)
    make_batch = sample_batch if randomize_kernel else fixed_kernel_batch
    history = np.empty((cfg.steps, 3))
    for step in range(cfg.steps):
        batch = make_batch(prior, sde, cfg, rng)
        loss_ws, grads = ws_loss(model, batch, sde)
        loss_c = 0.0
        if cfg.consistency_weight > 0:
            loss_c, grads_c = consistency_loss(model, batch, sde)
            grads = _add_grads(grads, grads_c, cfg.consistency_weight)
        if not np.isfinite(loss_ws + cfg.consistency_weight * loss_c):
            raise RuntimeError(f"non-finite loss at step {step}")
        adam.update(model, grads)
        history[step] = (step, loss_ws, loss_c)
    return model, history


def oracle_gap(model: MlpModel, prior, sde: VpSde, rng, n: int = 2048,
               t_range: tuple[float, float] = (0.02, 1.0)) -> float:
    """Relative squared error against the exact whitened score on held-out
    forward-process draws: mean ||n - ws||^2 / mean ||ws||^2."""
    rng = np.random.default_rng(rng)
    x0 = prior.sample(rng, n)
    t = rng.uniform(*t_range, n)
    spec = NoiseSpec(kernel_std=sde.K.kernel_std)
    x_t, _ = sde.forward_sample(x0.reshape(-1, *sde.K.shape), t, spec, rng)
    x_t = x_t.reshape(x0.shape)
    ws_true = np.stack([exact_ws(prior, sde, x_t[i], float(t[i])) for i in range(n)])
    pred = model.forward(x_t, t)
    return float(((pred - ws_true) ** 2).sum() / (ws_true**2).sum())
