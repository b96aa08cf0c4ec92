"""Config-driven command line front end.

Every command reads a flat key-value config file (``section.key = value``
lines, ``#`` comments), writes its artifacts plus the resolved config and a
sha256 manifest into the output directory, and is deterministic given
(config, seed).

Exit codes: 0 success, 2 config error, 3 numerical divergence,
4 invariant failure.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys

import numpy as np

from . import inverse, oracle, samplers, training
from .covariance import CirculantOperator, NoiseSpec, build_gaussian_kernel
from .samplers import DivergenceError, LambdaRule, SamplerConfig
from .sde import BetaSchedule, VpSde


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or key in out:
            raise ConfigError(f"line {lineno}: bad or duplicate key {key!r}")
        out[key] = value
    return out


def load_config(path: str) -> dict[str, str]:
    try:
        with open(path) as fh:
            return parse_config_text(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


_REQUIRED = object()


def _bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s: str) -> list[float]:
    return [float(v) for v in s.split(",") if v.strip()]


def _matrix(s: str) -> list[list[float]]:
    return [_floats(row) for row in s.split(";") if row.strip()]


def resolve(cfg: dict[str, str], schema: dict) -> dict:
    """Typed view of the config; rejects unknown keys."""
    unknown = set(cfg) - set(schema)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    out = {}
    for key, (parser, default) in schema.items():
        if key in cfg:
            try:
                out[key] = parser(cfg[key])
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from exc
        elif default is _REQUIRED:
            raise ConfigError(f"missing required config key: {key}")
        else:
            out[key] = default
    return out


SCHEDULE_SCHEMA = {
    "schedule.beta_min": (float, 0.01),
    "schedule.beta_max": (float, 20.0),
    "schedule.T": (int, 1000),
}

OUTPUT_SCHEMA = {
    "output.dir": (str, "out"),
    "output.stride": (int, 1),
}


def _mixture_from(cfgv: dict) -> oracle.GaussianMixture:
    means = np.array(cfgv["prior.means"])
    weights = np.array(cfgv["prior.weights"])
    variances = np.array(cfgv["prior.vars"])
    if means.ndim != 2:
        raise ConfigError("prior.means must be rows like '-1,0; 1,0'")
    dim = means.shape[1]
    covs = np.stack([v * np.eye(dim) for v in np.ravel(variances)])
    try:
        return oracle.GaussianMixture(weights, means, covs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# artifact helpers
# ---------------------------------------------------------------------------


def write_csv(path, header: list[str], rows) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(f"{v:.12g}" if isinstance(v, float) else str(v) for v in row) + "\n")


def write_pgm(path, img: np.ndarray) -> None:
    """Binary portable graymap of an array scaled from [0, 1]."""
    data = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    byte = (data * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{byte.shape[1]} {byte.shape[0]}\n255\n".encode())
        fh.write(byte.tobytes())


def write_ppm(path, img: np.ndarray) -> None:
    """Binary portable pixmap of an (H, W, 3) array scaled from [0, 1]."""
    data = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    byte = (data * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{byte.shape[1]} {byte.shape[0]}\n255\n".encode())
        fh.write(byte.tobytes())


def _draw_segment(canvas: np.ndarray, p0, p1, color) -> None:
    n = int(max(abs(p1[0] - p0[0]), abs(p1[1] - p0[1]), 1)) + 1
    rr = np.clip(np.linspace(p0[0], p1[0], n).round().astype(int), 0, canvas.shape[0] - 1)
    cc = np.clip(np.linspace(p0[1], p1[1], n).round().astype(int), 0, canvas.shape[1] - 1)
    canvas[rr, cc] = color


def quiver_raster(rows: np.ndarray, size: int = 480) -> np.ndarray:
    """Render score (white) and whitened-score (red) arrows on a dark canvas."""
    canvas = np.full((size, size, 3), 0.08)
    pts = rows[:, 0:2]
    lo = pts.min(axis=0)
    span = np.maximum(pts.max(axis=0) - lo, 1e-12)
    anchor = (pts - lo) / span * (size - 1)
    n_side = max(int(round(np.sqrt(len(rows)))), 2)
    cell = size / n_side
    for vecs, color in ((rows[:, 2:4], (1.0, 1.0, 1.0)), (rows[:, 4:6], (0.9, 0.15, 0.15))):
        scale = 0.45 * cell / max(np.linalg.norm(vecs, axis=1).max(), 1e-12)
        for (r, c), (dr, dc) in zip(anchor, vecs * scale):
            _draw_segment(canvas, (r, c), (r + dr, c + dc), color)
    return canvas


def write_manifest(out_dir: str, paths: list[str]) -> str:
    lines = []
    for p in sorted(paths):
        digest = hashlib.sha256(open(p, "rb").read()).hexdigest()
        lines.append(f"{digest}  {os.path.relpath(p, out_dir)}")
    manifest = os.path.join(out_dir, "manifest.txt")
    with open(manifest, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return manifest


def _finish_run(out_dir: str, cfg: dict[str, str], artifacts: list[str]) -> None:
    resolved = os.path.join(out_dir, "resolved_config.txt")
    with open(resolved, "w") as fh:
        for key in sorted(cfg):
            fh.write(f"{key} = {cfg[key]}\n")
    write_manifest(out_dir, artifacts + [resolved])


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_vector_field(cfg: dict[str, str], out_dir: str) -> int:
    schema = {
        **SCHEDULE_SCHEMA, **OUTPUT_SCHEMA,
        "field.t": (float, 0.6),
        "field.lo": (float, -3.0),
        "field.hi": (float, 3.0),
        "field.n": (int, 21),
        "field.kappas": (_floats, [1.0, 4.0, 16.0, 64.0]),
        "prior.mean": (_floats, [0.5, -0.3]),
    }
    v = resolve(cfg, schema)
    schedule = BetaSchedule(v["schedule.beta_min"], v["schedule.beta_max"])
    mean = np.array(v["prior.mean"])
    if mean.shape != (2,):
        raise ConfigError("prior.mean must have two components")
    artifacts = []
    for kappa in v["field.kappas"]:
        # anisotropy enters through the operator eigenvalues; the data
        # covariance is K KT itself, the configuration whose whitened field
        # points straight at the mean
        op = CirculantOperator((2,), np.array([1.0, kappa**-0.5]))
        sde = VpSde(schedule, op)
        gm = oracle.GaussianMixture(np.array([1.0]), mean[None], op.dense_kkt()[None])
        rows = oracle.vector_field_grid(gm, sde, (v["field.lo"], v["field.hi"], v["field.n"]),
                                        v["field.t"])
        tag = f"kappa{kappa:g}"
        csv_path = os.path.join(out_dir, f"field_{tag}.csv")
        write_csv(csv_path, ["x1", "x2", "s1", "s2", "w1", "w2"],
                  [tuple(map(float, r)) for r in rows])
        ppm_path = os.path.join(out_dir, f"field_{tag}.ppm")
        write_ppm(ppm_path, quiver_raster(rows))
        artifacts += [csv_path, ppm_path]
    _finish_run(out_dir, cfg, artifacts)
    return 0


def _sde_from(v: dict) -> VpSde:
    shape = tuple(int(n) for n in v["kernel.grid"])
    op = build_gaussian_kernel(v["kernel.std"], shape)
    return VpSde(BetaSchedule(v["schedule.beta_min"], v["schedule.beta_max"]), op)


def cmd_sample(cfg: dict[str, str], out_dir: str, seed_override=None) -> int:
    schema = {
        **SCHEDULE_SCHEMA, **OUTPUT_SCHEMA,
        "kernel.std": (float, 0.0),
        "kernel.grid": (_floats, _REQUIRED),
        "prior.kind": (str, "mixture"),
        "prior.weights": (_floats, [1.0]),
        "prior.means": (_matrix, [[0.0, 0.0]]),
        "prior.vars": (_floats, [1.0]),
        "prior.mean_level": (float, 0.5),
        "prior.var": (float, 0.01),
        "sampler.kind": (str, "ode"),
        "sampler.stochastic": (_bool, False),
        "sampler.seed": (int, 0),
        "sampler.init_kernel_std": (float, 0.0),
        "sampler.init_grayscale": (_bool, False),
        "sampler.chains": (int, 1),
        "sampler.channels": (int, 0),
    }
    v = resolve(cfg, schema)
    if seed_override is not None:
        v["sampler.seed"] = seed_override
    sde = _sde_from(v)
    if v["prior.kind"] == "mixture":
        prior = _mixture_from(v)
        if prior.dim != sde.K.size:
            raise ConfigError(f"prior dimension {prior.dim} != kernel grid size {sde.K.size}")
        state_shape = (prior.dim,)
    elif v["prior.kind"] == "grid":
        prior = oracle.GridGaussianPrior(np.full(sde.K.shape, v["prior.mean_level"]),
                                         v["prior.var"])
        state_shape = sde.K.shape
    else:
        raise ConfigError(f"unknown prior.kind {v['prior.kind']!r}")
    if v["sampler.channels"]:
        state_shape = (v["sampler.channels"], *state_shape)
    shape = (v["sampler.chains"], *state_shape) if v["sampler.chains"] > 1 else state_shape
    field = samplers.oracle_ws_field(prior, sde)
    scfg = SamplerConfig(n_steps=v["schedule.T"], stochastic=v["sampler.stochastic"],
                         seed=v["sampler.seed"], init_kernel_std=v["sampler.init_kernel_std"],
                         init_grayscale=v["sampler.init_grayscale"],
                         store_stride=v["output.stride"])
    if v["sampler.kind"] == "sde":
        traj = samplers.reverse_sde_integrate(field, sde, scfg, shape=shape)
    elif v["sampler.kind"] == "ode":
        traj = samplers.pf_ode_integrate(field, sde, scfg, shape=shape)
    elif v["sampler.kind"] == "fm":
        traj = samplers.fm_ode_integrate(prior, sde, scfg, shape=shape)
    else:
        raise ConfigError(f"unknown sampler.kind {v['sampler.kind']!r}")
    samples_path = os.path.join(out_dir, "samples.wsk1")
    from .container import write_container
    write_container(samples_path, b"WSK1", traj.states.shape, 0.0, traj.states)
    artifacts = [samples_path]
    if traj.diagnostics is not None:
        diag_path = os.path.join(out_dir, "diagnostics.csv")
        write_csv(diag_path, ["t", "state_norm", "ws_norm"],
                  [tuple(map(float, r)) for r in traj.diagnostics])
        artifacts.append(diag_path)
    _finish_run(out_dir, cfg, artifacts)
    return 0


def cmd_train_toy(cfg: dict[str, str], out_dir: str, seed_override=None) -> int:
    schema = {
        **SCHEDULE_SCHEMA, **OUTPUT_SCHEMA,
        "kernel.std": (float, 0.0),
        "kernel.grid": (_floats, [2]),
        "prior.weights": (_floats, _REQUIRED),
        "prior.means": (_matrix, _REQUIRED),
        "prior.vars": (_floats, _REQUIRED),
        "train.steps": (int, 2000),
        "train.batch_size": (int, 128),
        "train.lr": (float, 1e-3),
        "train.seed": (int, 0),
        "train.consistency_weight": (float, 1.0),
        "train.std_lo": (float, 0.1),
        "train.std_hi": (float, 3.0),
        "train.hidden": (_floats, [64, 64]),
        "train.randomize_kernel": (_bool, True),
        "train.resume": (str, ""),
    }
    v = resolve(cfg, schema)
    if seed_override is not None:
        v["train.seed"] = seed_override
    sde = _sde_from(v)
    gm = _mixture_from(v)
    if gm.dim != sde.K.size:
        raise ConfigError(f"prior dimension {gm.dim} != grid size {sde.K.size}")
    tcfg = training.TrainConfig(
        kernel_std_range=(v["train.std_lo"], v["train.std_hi"]),
        batch_size=v["train.batch_size"], steps=v["train.steps"], seed=v["train.seed"],
        consistency_weight=v["train.consistency_weight"], lr=v["train.lr"])
    if v["train.resume"]:
        model = training.MlpModel.load(v["train.resume"])
    else:
        model = training.MlpModel(gm.dim, hidden=tuple(int(h) for h in v["train.hidden"]),
                                  rng=v["train.seed"])
    try:
        model, history = training.train(model, gm, tcfg, sde,
                                        randomize_kernel=v["train.randomize_kernel"])
    except RuntimeError as exc:
        raise DivergenceError(str(exc), step=-1, t=0.0) from exc
    ckpt_path = os.path.join(out_dir, "model.wsm1")
    model.save(ckpt_path)
    loss_path = os.path.join(out_dir, "loss.csv")
    write_csv(loss_path, ["step", "ws_loss", "consistency_loss"],
              [(int(s), float(a), float(b)) for s, a, b in history])
    gap = training.oracle_gap(model, gm, sde, rng=v["train.seed"] + 1)
    gap_path = os.path.join(out_dir, "oracle_gap.txt")
    with open(gap_path, "w") as fh:
        fh.write(f"relative_oracle_gap = {gap:.6f}\n")
    print(f"oracle gap: {gap:.4f}")
    _finish_run(out_dir, cfg, artifacts=[ckpt_path, loss_path, gap_path])
    return 0


def cmd_invert(cfg: dict[str, str], out_dir: str, seed_override=None) -> int:
    schema = {
        **SCHEDULE_SCHEMA, **OUTPUT_SCHEMA,
        "kernel.std": (float, 2.5),
        "kernel.grid": (_floats, [32, 32]),
        "prior.mean_level": (float, 0.5),
        "prior.var": (float, 0.01),
        "problem.operator": (str, "identity"),
        "problem.blur_length": (int, 5),
        "problem.blur_std": (float, 0.8),
        "problem.snr": (float, 0.493),
        "problem.noise_std": (float, 2.5),
        "problem.grayscale": (_bool, True),
        "problem.channels": (int, 0),
        "problem.seed": (int, 0),
        "sampler.lambda_grid": (_floats, [0.0, 0.03, 0.1, 0.3, 1.0]),
        "sampler.proportional": (_bool, False),
        "sampler.likelihood_sign": (float, 1.0),
        "sampler.seed": (int, 0),
        "sampler.init_kernel_std": (float, -1.0),
        "sampler.init_grayscale": (_bool, True),
    }
    v = resolve(cfg, schema)
    if seed_override is not None:
        v["sampler.seed"] = seed_override
    sde = _sde_from(v)
    shape = sde.K.shape
    prior = oracle.GridGaussianPrior(np.full(shape, v["prior.mean_level"]), v["prior.var"])
    kind = v["problem.operator"]
    if kind == "motion_blur":
        op = inverse.motion_blur(shape, v["problem.blur_length"])
    elif kind == "lens_blur":
        op = inverse.lens_blur(shape, v["problem.blur_std"])
    elif kind in inverse.OPERATOR_BUILDERS:
        op = inverse.OPERATOR_BUILDERS[kind](shape)
    else:
        raise ConfigError(f"unknown operator {kind!r}")
    rng = np.random.default_rng(v["problem.seed"])
    channels = v["problem.channels"] or None
    x_true = prior.sample(rng) if channels is None else \
        np.stack([prior.sample(rng) for _ in range(channels)])
    spec = NoiseSpec(kernel_std=v["problem.noise_std"], grayscale=v["problem.grayscale"])
    prob = inverse.make_measurement(x_true, op, spec, snr=v["problem.snr"], rng=rng)
    init_std = v["sampler.init_kernel_std"]
    scfg = SamplerConfig(n_steps=v["schedule.T"], stochastic=False, seed=v["sampler.seed"],
                         init_kernel_std=sde.K.kernel_std if init_std < 0 else init_std,
                         init_grayscale=v["sampler.init_grayscale"],
                         likelihood_sign=v["sampler.likelihood_sign"])
    field = samplers.oracle_ws_field(prior, sde)
    result = inverse.lambda_line_search(field, prob, sde, scfg, v["sampler.lambda_grid"],
                                        proportional=v["sampler.proportional"])
    sweep_path = os.path.join(out_dir, "lambda_sweep.csv")
    write_csv(sweep_path, ["lambda", "psnr_amplitude_db", "psnr_power_db", "best"],
              [(float(lam), float(p), float(s), int(lam == result.best_lambda))
               for lam, p, s in result.table])
    x_hat, diag = samplers.posterior_sample(
        field, prob, sde, scfg,
        LambdaRule(result.best_lambda, v["sampler.proportional"]),
        shape=prob.y.shape, return_diagnostics=True)
    from .container import write_container
    recon_path = os.path.join(out_dir, "reconstruction.wsk1")
    write_container(recon_path, b"WSK1", x_hat.shape, 0.0, x_hat)
    meas_path = os.path.join(out_dir, "measurement.wsk1")
    write_container(meas_path, b"WSK1", prob.y.shape, prob.sigma, prob.y)
    truth_path = os.path.join(out_dir, "x_true.wsk1")
    write_container(truth_path, b"WSK1", x_true.shape, 0.0, x_true)
    diag_path = os.path.join(out_dir, "diagnostics.csv")
    stride = max(v["output.stride"], 1)
    write_csv(diag_path, ["t", "state_norm", "ws_norm", "residual_norm"],
              [tuple(map(float, r)) for r in diag[::stride]])
    meas = inverse.psnr(prob.y, x_true)
    tikh = max((inverse.psnr(inverse.tikhonov_baseline(prob, w), x_true).amplitude_db, w)
               for w in (1e-3, 1e-2, 1e-1, 1.0))
    report_path = os.path.join(out_dir, "psnr_report.csv")
    write_csv(report_path, ["which", "psnr_amplitude_db", "psnr_power_db"], [
        ("measurement", float(meas.amplitude_db), float(meas.power_db)),
        ("tikhonov_best", float(tikh[0]), float(tikh[0] / 2.0)),
        ("posterior_best", float(result.best_psnr.amplitude_db), float(result.best_psnr.power_db)),
    ])
    imgs = []
    for name, data in (("x_true", x_true), ("measurement", prob.y), ("reconstruction", x_hat)):
        img = data[0] if data.ndim == 3 else data
        path = os.path.join(out_dir, f"{name}.pgm")
        write_pgm(path, img)
        imgs.append(path)
    print(f"best lambda {result.best_lambda:g}: reconstruction "
          f"{result.best_psnr.amplitude_db:.2f} dB vs measurement {meas.amplitude_db:.2f} dB")
    _finish_run(out_dir, cfg,
                [sweep_path, recon_path, meas_path, truth_path, report_path, diag_path, *imgs])
    return 0


def cmd_check(cfg: dict[str, str], out_dir: str) -> int:
    from .checks import run_invariant_suite
    v = resolve(cfg, {**OUTPUT_SCHEMA, "check.seed": (int, 0)})
    report = run_invariant_suite(seed=v["check.seed"])
    report_path = os.path.join(out_dir, "invariants.txt")
    lines = []
    ok = True
    for name, passed, detail in report:
        status = "PASS" if passed else "FAIL"
        ok = ok and passed
        line = f"{status} {name}: {detail}"
        print(line)
        lines.append(line)
    with open(report_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    _finish_run(out_dir, cfg, [report_path])
    return 0 if ok else 4


COMMANDS = {
    "vector-field": cmd_vector_field,
    "sample": cmd_sample,
    "train-toy": cmd_train_toy,
    "invert": cmd_invert,
    "check": cmd_check,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="wsdiff", description=__doc__)
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="flat key-value config file")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", default=None, help="override output.dir")
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        out_dir = args.out or cfg.get("output.dir", "out")
        os.makedirs(out_dir, exist_ok=True)
        cmd = COMMANDS[args.command]
        if cmd in (cmd_vector_field, cmd_check):
            return cmd(cfg, out_dir)
        return cmd(cfg, out_dir, seed_override=args.seed)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
