"""End-to-end invariant suite behind the `check` command.

Each check recomputes a structural identity two independent ways and reports
the observed discrepancy, so a pass line doubles as a numerical health
report.  Failures are collected, not raised.
"""

from __future__ import annotations

import numpy as np

from . import inverse, oracle
from .covariance import CirculantOperator, build_gaussian_kernel
from .sde import BetaSchedule, VpSde


def _ws_cancellation(seed: int):
    rng = np.random.default_rng(seed)
    schedule = BetaSchedule()
    x0 = rng.standard_normal((8, 8))
    x_t = rng.standard_normal((8, 8))
    outs = []
    for std in (0.0, 1.0, 2.5, 5.0):
        sde = VpSde(schedule, build_gaussian_kernel(std, (8, 8)))
        outs.append(sde.ws_conditional_target(x0, x_t, 0.5))
    same = all(np.array_equal(outs[0], o) for o in outs[1:])
    sde = VpSde(schedule, build_gaussian_kernel(0.8, (8, 8)))
    kkt = sde.K.dense_kkt()
    a, b = float(sde.alpha(0.5)), float(sde.beta(0.5))
    dense = b * kkt @ np.linalg.solve((1 - a**2) * kkt, (a * x0 - x_t).ravel())
    rel = np.abs(dense - outs[0].ravel()).max() / np.abs(dense).max()
    ok = same and rel <= 1e-8
    return ok, f"kernel-independent={same}, dense-route rel err {rel:.2e}"


def _tweedie(seed: int):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for dim in (1, 2, 4):
        op = CirculantOperator((dim,), rng.uniform(0.6, 1.4, dim))
        sde = VpSde(BetaSchedule(), op)
        k = 3
        w = rng.uniform(0.2, 1.0, k)
        gm = oracle.GaussianMixture(w / w.sum(), rng.standard_normal((k, dim)),
                                    np.stack([_random_cov(rng, dim) for _ in range(k)]))
        kkt = op.dense_kkt()
        for t in (0.1, 0.5, 0.9):
            a = float(sde.alpha(t))
            x = rng.standard_normal((64, dim))
            lhs = a * oracle.posterior_mean(gm, sde, x, t)
            rhs = x + oracle.exact_score(gm, sde, x, t) @ ((1 - a**2) * kkt).T
            worst = max(worst, float(np.abs(lhs - rhs).max()))
    return worst <= 1e-8, f"max residual {worst:.2e}"


def _random_cov(rng, dim):
    m = rng.standard_normal((dim, dim))
    return m @ m.T / dim + 0.3 * np.eye(dim)


def _fm_consistency(seed: int):
    rng = np.random.default_rng(seed)
    op = CirculantOperator((2,), np.array([1.0, 0.6]))
    sde = VpSde(BetaSchedule(), op)
    x0 = rng.standard_normal((32, 2))
    x_t = rng.standard_normal((32, 2))
    worst_cond = 0.0
    for t in (0.2, 0.5, 0.8):
        u1 = oracle.fm_conditional_velocity(sde, x0, x_t, t)
        u2 = oracle.fm_conditional_velocity_via_path(sde, x0, x_t, t)
        worst_cond = max(worst_cond, float(np.abs(u1 - u2).max()))
    gm = oracle.GaussianMixture(np.array([0.5, 0.5]), np.array([[-1.0, 0.0], [1.0, 0.5]]),
                                np.stack([0.3 * np.eye(2)] * 2))
    worst_marg = 0.0
    for t in (0.2, 0.5, 0.8):
        pf = float(sde.drift_coefficient(t)) * x_t - 0.5 * oracle.exact_ws(gm, sde, x_t, t)
        fm = oracle.fm_marginal_velocity(gm, sde, x_t, t)
        worst_marg = max(worst_marg, float(np.abs(pf - fm).max()))
    ok = worst_cond <= 1e-8 and worst_marg <= 1e-8
    return ok, f"conditional routes {worst_cond:.2e}, marginal vs flow drift {worst_marg:.2e}"


def _adjoints(seed: int):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for op in (inverse.identity_operator((12, 10)), inverse.motion_blur((12, 10), 5),
               inverse.lens_blur((12, 10), 0.8), inverse.laplacian((12, 10)),
               inverse.build_idt_mask("transmission", (12, 10)),
               inverse.build_idt_mask("reflection", (12, 10))):
        x = rng.standard_normal((12, 10))
        y = rng.standard_normal((12, 10))
        gap = abs(float((op.apply(x) * y).sum() - (x * op.apply_adjoint(y)).sum()))
        worst = max(worst, gap / max(abs(float((op.apply(x) * y).sum())), 1.0))
    return worst <= 1e-10, f"max adjoint defect {worst:.2e}"


def _fft_dense(seed: int):
    rng = np.random.default_rng(seed)
    op = build_gaussian_kernel(1.5, (8, 8))
    x = rng.standard_normal((8, 8))
    dense = op.dense_matrix() @ x.ravel()
    rel = np.abs(dense - op.apply(x).ravel()).max() / np.abs(dense).max()
    return rel <= 1e-10, f"apply vs dense rel err {rel:.2e}"


def _preconditioning(seed: int):
    op = build_gaussian_kernel(0.8, (8, 8))
    sde = VpSde(BetaSchedule(), op)
    b = float(sde.beta(0.5))
    sigma = 0.37
    kkt = op.dense_kkt()
    composed = b * kkt @ np.linalg.inv(sigma**2 * kkt)
    target = (b / sigma**2) * np.eye(op.size)
    rel = np.abs(composed - target).max() / np.abs(target).max()
    return rel <= 1e-8, f"G GT Sigma_y^-1 vs (beta/sigma^2) I rel err {rel:.2e}"


def run_invariant_suite(seed: int = 0):
    checks = [
        ("whitening-cancellation", _ws_cancellation),
        ("tweedie-identity", _tweedie),
        ("flow-matching-consistency", _fm_consistency),
        ("operator-adjoints", _adjoints),
        ("fft-vs-dense", _fft_dense),
        ("likelihood-preconditioning", _preconditioning),
    ]
    report = []
    for name, fn in checks:
        try:
            ok, detail = fn(seed)
        except Exception as exc:  # a crashed check is a failed check
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        report.append((name, ok, detail))
    return report
