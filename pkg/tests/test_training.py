"""Hand-derived gradients, losses, the optimizer, and the training loop."""

import numpy as np
import pytest

from wsdiff.covariance import CirculantOperator, build_gaussian_kernel
from wsdiff.oracle import GaussianMixture
from wsdiff.sde import BetaSchedule, VpSde
from wsdiff.training import (
    AdamState,
    MlpModel,
    TrainBatch,
    TrainConfig,
    consistency_loss,
    dsm_baseline_loss,
    fixed_kernel_batch,
    oracle_gap,
    sample_batch,
    train,
    ws_loss,
)

SCHEDULE = BetaSchedule(0.01, 20.0)


def toy_sde(lam=(1.0, 0.7)):
    return VpSde(SCHEDULE, CirculantOperator((len(lam),), np.array(lam)))


def toy_mixture():
    return GaussianMixture(
        np.array([0.6, 0.4]),
        np.array([[-1.0, 0.5], [1.0, -0.5]]),
        np.stack([0.25 * np.eye(2), np.array([[0.3, 0.1], [0.1, 0.2]])]),
    )


def small_batch(rng, n=6, dim=2):
    x0 = rng.standard_normal((n, dim))
    t = rng.uniform(0.05, 0.95, n)
    x_t = rng.standard_normal((n, dim))
    return TrainBatch(x0, t, x_t)


def check_gradients(loss_fn, model, batch, sde, rng, n_coords=None, rel_tol=1e-4):
    """Central finite differences on the packed parameter vector."""
    theta = model.pack()
    _, grads = loss_fn(model, batch, sde)
    flat = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])
    coords = np.arange(theta.size) if n_coords is None else \
        rng.choice(theta.size, size=n_coords, replace=False)
    h = 1e-4
    worst = 0.0
    for i in coords:
        theta_p = theta.copy()
        theta_p[i] += h
        model.unpack(theta_p)
        hi, _ = loss_fn(model, batch, sde)
        theta_p[i] -= 2 * h
        model.unpack(theta_p)
        lo, _ = loss_fn(model, batch, sde)
        fd = (hi - lo) / (2 * h)
        denom = max(abs(fd), abs(flat[i]), 1e-6)
        worst = max(worst, abs(fd - flat[i]) / denom)
    model.unpack(theta)
    assert worst <= rel_tol, f"worst relative gradient error {worst:.3e}"
    return worst


class TestModelPlumbing:
    def test_time_features_shape_and_determinism(self):
        model = MlpModel(2, hidden=(8,), n_freqs=8, rng=0)
        f1 = model.time_features(np.array([0.1, 0.5]))
        assert f1.shape == (2, 16)
        np.testing.assert_array_equal(f1, model.time_features(np.array([0.1, 0.5])))

    def test_forward_shapes(self, rng):
        model = MlpModel(3, hidden=(8, 8), rng=1)
        out = model.forward(rng.standard_normal((5, 3)), 0.3)
        assert out.shape == (5, 3)
        single = model.forward(rng.standard_normal(3), 0.3)
        assert single.shape == (3,)

    def test_pack_unpack_roundtrip(self, rng):
        model = MlpModel(2, hidden=(8, 8), rng=2)
        theta = model.pack()
        other = MlpModel(2, hidden=(8, 8), rng=99)
        other.unpack(theta)
        x, t = rng.standard_normal((4, 2)), 0.4
        np.testing.assert_array_equal(model.forward(x, t), other.forward(x, t))

    def test_checkpoint_roundtrip(self, tmp_path, rng):
        model = MlpModel(2, hidden=(16, 8), n_freqs=4, rng=3)
        path = tmp_path / "model.wsm1"
        model.save(path)
        back = MlpModel.load(path)
        assert back.widths == model.widths
        x, t = rng.standard_normal((4, 2)), 0.7
        np.testing.assert_array_equal(model.forward(x, t), back.forward(x, t))

    def test_ws_field_wraps_arbitrary_leading_axes(self, rng):
        model = MlpModel(2, hidden=(8,), rng=4)
        field = model.ws_field()
        assert field.kind == "model"
        x = rng.standard_normal((3, 2))
        out = field(x, 0.5)
        assert out.shape == (3, 2)
        np.testing.assert_array_equal(out, model.forward(x, 0.5))


class TestGradients:
    """All analytic gradients match central finite differences."""

    def test_ws_loss_full_parameter_check(self, rng):
        model = MlpModel(2, hidden=(8, 8), rng=5)
        worst = check_gradients(ws_loss, model, small_batch(rng), toy_sde(), rng)
        assert worst <= 1e-4

    def test_consistency_loss_gradients(self, rng):
        model = MlpModel(2, hidden=(8, 8), rng=6)
        check_gradients(consistency_loss, model, small_batch(rng), toy_sde(), rng)

    def test_dsm_loss_gradients(self, rng):
        model = MlpModel(2, hidden=(8, 8), rng=7)
        sde = VpSde(SCHEDULE, build_gaussian_kernel(0.0, 2))
        check_gradients(dsm_baseline_loss, model, small_batch(rng), sde, rng)

    def test_many_random_parameter_points(self, rng):
        """Spot-check random coordinates at freshly re-randomized parameters."""
        sde = toy_sde()
        model = MlpModel(2, hidden=(8, 8), rng=8)
        size = model.pack().size
        for _ in range(20):
            model.unpack(rng.standard_normal(size) * 0.5)
            check_gradients(ws_loss, model, small_batch(rng, n=3), sde, rng, n_coords=6)


class TestLossContracts:
    def test_ws_loss_zero_when_prediction_equals_target(self, rng):
        sde = toy_sde()
        batch = small_batch(rng)
        target = sde.ws_conditional_target(batch.x0, batch.x_t, batch.t)

        class Stub:
            def forward_cached(self, x, t):
                return target, None

            def backward(self, acts, dout):
                return []

        loss, grads = ws_loss(Stub(), batch, sde)
        assert loss == 0.0
        assert grads == []

    def test_consistency_zero_for_exact_target(self, rng):
        """Feeding the exact whitened target reconstructs x0 identically."""
        sde = toy_sde()
        batch = small_batch(rng)
        target = sde.ws_conditional_target(batch.x0, batch.x_t, batch.t)

        class Stub:
            def forward_cached(self, x, t):
                return target, None

            def backward(self, acts, dout):
                return []

        loss, _ = consistency_loss(Stub(), batch, sde)
        assert loss < 1e-20

    def test_target_never_touches_kernel(self, rng):
        """Identical batches under kernels 0.1 and 3.0 share the exact target,
        and the target path runs with no operator at all."""
        batch = small_batch(rng)
        t1 = toy_sde((1.0, 1.0)).ws_conditional_target(batch.x0, batch.x_t, batch.t)
        t2 = toy_sde((1.0, 0.01)).ws_conditional_target(batch.x0, batch.x_t, batch.t)
        np.testing.assert_array_equal(t1, t2)
        bare = VpSde(SCHEDULE, None)
        np.testing.assert_array_equal(
            t1, bare.ws_conditional_target(batch.x0, batch.x_t, batch.t)
        )

    def test_consistency_skips_near_terminal_times(self, rng):
        sde = toy_sde()
        model = MlpModel(2, hidden=(8,), rng=9)
        x0 = rng.standard_normal((4, 2))
        x_t = rng.standard_normal((4, 2))
        t = np.array([0.5, 1.0 - 1e-9, 1.0, 0.2])
        loss_masked, _ = consistency_loss(model, TrainBatch(x0, t, x_t), sde)
        keep = TrainBatch(x0[[0, 3]], t[[0, 3]], x_t[[0, 3]])
        loss_keep, _ = consistency_loss(model, keep, sde)
        assert np.isclose(loss_masked, loss_keep, rtol=1e-12)

    def test_dsm_target_equals_scaled_ws_target_for_delta(self, rng):
        sde = VpSde(SCHEDULE, build_gaussian_kernel(0.0, 2))
        batch = small_batch(rng)
        model = MlpModel(2, hidden=(8,), rng=10)
        out, _ = model.forward_cached(batch.x_t, batch.t)
        l_dsm, _ = dsm_baseline_loss(model, batch, sde)
        b = sde.beta(batch.t)[:, None]
        target_ws = sde.ws_conditional_target(batch.x0, batch.x_t, batch.t)
        expected = float(((out - target_ws / b) ** 2).sum() / len(batch.t))
        assert np.isclose(l_dsm, expected, rtol=1e-12)

    def test_dsm_rejects_wide_kernels_with_condition_number(self, rng):
        sde = VpSde(SCHEDULE, build_gaussian_kernel(2.5, (8, 8)))
        model = MlpModel(64, hidden=(8,), rng=11)
        batch = TrainBatch(rng.standard_normal((2, 64)), np.array([0.5, 0.6]),
                           rng.standard_normal((2, 64)))
        with pytest.raises(ValueError, match="condition number"):
            dsm_baseline_loss(model, batch, sde)


class TestOptimizer:
    def test_adam_minimizes_a_quadratic(self):
        model = MlpModel(1, hidden=(4,), rng=12)
        target_vec = np.linspace(-0.5, 0.5, model.pack().size)
        adam = AdamState.create(model, lr=0.05)
        for _ in range(400):
            theta = model.pack()
            grad_vec = 2 * (theta - target_vec)
            grads = []
            pos = 0
            for w, b in zip(model.weights, model.biases):
                gw = grad_vec[pos:pos + w.size].reshape(w.shape)
                pos += w.size
                gb = grad_vec[pos:pos + b.size]
                pos += b.size
                grads.append((gw, gb))
            adam.update(model, grads)
        assert np.abs(model.pack() - target_vec).max() < 1e-3

    def test_linear_decay_schedule(self):
        model = MlpModel(1, hidden=(4,), rng=13)
        adam = AdamState.create(model, lr=1.0, lr_final=0.0, total_steps=10)
        adam.step = 5
        assert np.isclose(adam.current_lr(), 0.5)
        adam.step = 10
        assert adam.current_lr() == 0.0


class TestTrainingLoop:
    def test_seed_determinism(self):
        gm = toy_mixture()
        sde = toy_sde()
        cfg = TrainConfig(batch_size=32, steps=60, seed=5, lr=1e-3)
        runs = []
        for _ in range(2):
            model = MlpModel(2, hidden=(16,), rng=5)
            _, hist = train(model, gm, cfg, sde)
            runs.append((model.pack(), hist))
        np.testing.assert_array_equal(runs[0][0], runs[1][0])
        np.testing.assert_array_equal(runs[0][1], runs[1][1])

    def test_loss_curve_finite_and_improving(self):
        gm = toy_mixture()
        sde = toy_sde()
        cfg = TrainConfig(batch_size=64, steps=600, seed=0, lr=2e-3)
        model = MlpModel(2, hidden=(32, 32), rng=0)
        _, hist = train(model, gm, cfg, sde)
        assert np.all(np.isfinite(hist))
        assert hist[-100:, 1].mean() < hist[:100, 1].mean()

    def test_zero_consistency_weight_skips_term(self):
        gm = toy_mixture()
        sde = toy_sde()
        cfg = TrainConfig(batch_size=16, steps=5, seed=1, consistency_weight=0.0)
        model = MlpModel(2, hidden=(8,), rng=1)
        _, hist = train(model, gm, cfg, sde)
        np.testing.assert_array_equal(hist[:, 2], np.zeros(5))

    def test_batch_samplers_shapes(self):
        gm = toy_mixture()
        sde = toy_sde()
        cfg = TrainConfig(batch_size=17, steps=1, seed=2)
        for maker in (sample_batch, fixed_kernel_batch):
            batch = maker(gm, sde, cfg, rng=3)
            assert batch.x0.shape == (17, 2)
            assert batch.t.shape == (17,)
            assert batch.x_t.shape == (17, 2)
            assert batch.t.min() >= cfg.t_min

    def test_oracle_gap_of_untrained_model_is_large(self):
        gm = toy_mixture()
        sde = toy_sde()
        model = MlpModel(2, hidden=(8,), rng=14)
        assert oracle_gap(model, gm, sde, rng=0, n=256) > 0.5

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(kernel_std_range=(3.0, 0.1))
        with pytest.raises(ValueError):
            TrainConfig(grayscale_prob=1.5)
        with pytest.raises(ValueError):
            TrainConfig(consistency_weight=-1.0)
