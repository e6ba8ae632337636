"""Command-line entry point: gen-data, train, eval, infer, sweep, check.

Configuration is plain-text ``key=value`` files plus ``--set key=value`` flag
overrides (flags win).  Every key is validated against the command's schema;
unknown keys are errors.  The resolved effective configuration is echoed before
running, so any run is reproducible from its log.

Exit codes: 0 success, 2 validation error, 3 runtime/solver error, 4 audit
failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__, datagen, nets, physics, training
from .autodiff import Graph, jet2_propagate
from .model import NetComponent, PidionModel, predict_s, predict_u, v0_predict

__all__ = ["main", "RunConfig", "ValidationError", "AuditFailure"]


class ValidationError(ValueError):
    pass


class AuditFailure(RuntimeError):
    pass


# ------------------------------------------------------------------ run config


def _parse_bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise ValidationError(f"not a boolean: {s!r}")


_TYPES = {"int": int, "float": float, "str": str, "bool": _parse_bool}

# Per-command schema: key -> (type name, default, help).
SCHEMAS: dict[str, dict[str, tuple]] = {
    "gen-data": {
        "problem": ("str", "reaction_diffusion", "problem tag"),
        "n": ("int", 100, "number of samples"),
        "seed": ("int", 0, "master seed"),
        "out": ("str", "dataset", "output directory"),
        "g_preset": ("str", "one", "reaction-diffusion g(t) preset"),
        "literal_sign": ("bool", False, "use the +Laplacian sign convention"),
    },
    "train": {
        "dataset": ("str", "", "training dataset directory"),
        "test_dataset": ("str", "", "held-out dataset directory (optional)"),
        "out": ("str", "run", "output directory for metrics and checkpoint"),
        "mode": ("str", "unsupervised", "training mode"),
        "lam_physics": ("float", 1.0, "physics loss weight"),
        "lam_data": ("float", 100.0, "data loss weight"),
        "steps": ("int", 20000, "optimizer steps"),
        "batch_size": ("int", 1000, "mini-batch size"),
        "lr": ("float", 1e-3, "Adam learning rate"),
        "seed": ("int", 0, "training seed"),
        "eval_every": ("int", 1000, "evaluation cadence"),
        "checkpoint_every": ("int", 0, "checkpoint cadence (0 = only final)"),
        "collocation_stride": ("int", 1, "interior collocation thinning"),
        "model_preset": ("str", "paper", "paper or desk widths"),
        "resume": ("str", "", "checkpoint directory to resume from"),
    },
    "eval": {
        "checkpoint": ("str", "", "checkpoint directory"),
        "dataset": ("str", "", "dataset to evaluate on"),
        "out": ("str", "", "optional JSON report path"),
    },
    "infer": {
        "checkpoint": ("str", "", "checkpoint directory"),
        "dataset": ("str", "", "dataset supplying the measurement"),
        "sample_index": ("int", 0, "which sample's measurement to invert"),
        "nx": ("int", 200, "evaluation nodes along x"),
        "ny": ("int", 200, "evaluation nodes along y (or t)"),
        "out_u": ("str", "u_pred.csv", "CSV path for the reconstructed field"),
        "out_s": ("str", "s_pred.csv", "CSV path for the recovered target"),
    },
    "sweep": {
        "dataset": ("str", "", "training dataset directory"),
        "test_dataset": ("str", "", "held-out dataset directory"),
        "out": ("str", "sweep.csv", "results CSV path"),
        "lambdas": ("str", "", "comma list of lam1:lam2 pairs, e.g. 1:100,100:1"),
        "n_values": ("str", "", "comma list of training-set sizes"),
        "mode": ("str", "unsupervised", "training mode"),
        "steps": ("int", 20000, "optimizer steps per setting"),
        "batch_size": ("int", 1000, "mini-batch size"),
        "lr": ("float", 1e-3, "Adam learning rate"),
        "seed": ("int", 0, "training seed"),
        "eval_every": ("int", 0, "evaluation cadence during sweep runs"),
        "collocation_stride": ("int", 1, "interior collocation thinning"),
        "model_preset": ("str", "paper", "paper or desk widths"),
    },
    "check": {
        "dataset": ("str", "", "optional dataset directory to audit"),
        "quick": ("bool", False, "reduce Monte Carlo sizes for a faster pass"),
    },
}


class RunConfig:
    """Resolved configuration: defaults, then config file, then --set overrides."""

    def __init__(self, command: str, file_entries: dict[str, str],
                 overrides: dict[str, str]):
        schema = SCHEMAS[command]
        values = {k: default for k, (_, default, _) in schema.items()}
        for source_name, entries in (("config file", file_entries),
                                     ("override", overrides)):
            for key, raw in entries.items():
                if key not in schema:
                    raise ValidationError(
                        f"unknown {source_name} key {key!r} for {command} "
                        f"(known: {', '.join(sorted(schema))})")
                typ = _TYPES[schema[key][0]]
                try:
                    values[key] = typ(raw)
                except (TypeError, ValueError) as e:
                    raise ValidationError(f"bad value for {key!r}: {raw!r}") from e
        self.command = command
        self.values = values

    def __getitem__(self, key):
        return self.values[key]

    def echo(self) -> str:
        lines = [f"# resolved config ({self.command}), invop {__version__}"]
        for k in sorted(self.values):
            lines.append(f"{k}={self.values[k]}")
        return "\n".join(lines)

    def config_hash(self, exclude: tuple = ()) -> str:
        vals = {k: v for k, v in self.values.items() if k not in exclude}
        payload = json.dumps({"command": self.command, **vals}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _read_config_file(path: str) -> dict[str, str]:
    entries: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected key=value")
        key, _, value = line.partition("=")
        entries[key.strip()] = value.strip()
    return entries


def _resolve(args) -> RunConfig:
    file_entries = _read_config_file(args.config) if args.config else {}
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ValidationError(f"--set needs key=value, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key.strip()] = value.strip()
    return RunConfig(args.command, file_entries, overrides)


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("INVOP_THREADS", "")
    return max(1, int(env)) if env.isdigit() else 1


def _run_manifest(cfg: RunConfig, extra: dict, exclude: tuple = ()) -> dict:
    vals = {k: v for k, v in cfg.values.items() if k not in exclude}
    return {"tool": "invop", "version": __version__,
            "config_hash": cfg.config_hash(exclude), "config": vals, **extra}


# ------------------------------------------------------------------- commands


def cmd_gen_data(cfg: RunConfig, threads: int, force: bool) -> int:
    if cfg["n"] < 1:
        raise ValidationError("n must be at least 1")
    if cfg["problem"] not in physics.PROBLEM_KINDS:
        raise ValidationError(f"unknown problem {cfg['problem']!r}")
    kwargs = {}
    if cfg["problem"] == "reaction_diffusion":
        kwargs = {"g_preset": cfg["g_preset"], "literal_sign": cfg["literal_sign"]}
    problem = physics.PROBLEM_KINDS[cfg["problem"]](**kwargs)
    out = Path(cfg["out"])
    if out.exists() and any(out.iterdir()) and not force:
        raise ValidationError(f"output directory {out} is not empty (use --force)")
    t0 = time.perf_counter()
    ds = datagen.generate_dataset(problem, cfg["n"], cfg["seed"], threads=threads)
    datagen.save_dataset(ds, out, force=True)
    # No timestamps in the report: identical config+seed must give byte-identical
    # output directories.
    report = {
        "n": ds.n,
        "u": _field_stats(ds.u_fields),
        "s": _field_stats(ds.s_fields),
        "measurements": _field_stats(ds.measurements),
        "fingerprint": ds.fingerprint(),
    }
    # The output path is excluded so identical configs give identical bytes.
    (out / "generation_report.json").write_text(
        json.dumps(_run_manifest(cfg, {"report": report, "seed": cfg["seed"]},
                                 exclude=("out",)),
                   sort_keys=True, indent=1))
    print(json.dumps(report["u"], sort_keys=True))
    print(f"wrote {ds.n} samples to {out} in {time.perf_counter() - t0:.1f}s")
    return 0


def _field_stats(arr: np.ndarray) -> dict:
    return {"min": float(arr.min()), "max": float(arr.max()),
            "mean": float(arr.mean()), "std": float(arr.std()),
            "finite": bool(np.isfinite(arr).all())}


def _load_required_dataset(path: str, what: str) -> datagen.Dataset:
    if not path:
        raise ValidationError(f"{what} is required")
    if not (Path(path) / "manifest.json").exists():
        raise ValidationError(f"{what} {path!r} is not a dataset directory")
    return datagen.load_dataset(path)


def cmd_train(cfg: RunConfig, threads: int) -> int:
    ds = _load_required_dataset(cfg["dataset"], "dataset")
    test = datagen.load_dataset(cfg["test_dataset"]) if cfg["test_dataset"] else None
    tc = training.TrainConfig(
        problem=ds.problem.kind, mode=cfg["mode"], lam_physics=cfg["lam_physics"],
        lam_data=cfg["lam_data"], steps=cfg["steps"], batch_size=cfg["batch_size"],
        lr=cfg["lr"], seed=cfg["seed"], eval_every=cfg["eval_every"],
        checkpoint_every=cfg["checkpoint_every"],
        checkpoint_dir=str(Path(cfg["out"]) / "checkpoint"),
        collocation_stride=cfg["collocation_stride"],
        model_preset=cfg["model_preset"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    resume = None
    model = None
    if cfg["resume"]:
        resume = training.load_checkpoint(cfg["resume"], dataset=ds)
        model = resume.model
        if resume.config and resume.config.get("problem") != ds.problem.kind:
            raise ValidationError("checkpoint problem does not match dataset")
    result = training.train(tc, ds, model=model, test_dataset=test, resume=resume)
    training.write_metrics_csv(out / "metrics.csv", result.metrics)
    training.save_checkpoint(out / "checkpoint", result.model, result.adam,
                             result.steps_done, tc, ds.fingerprint())
    (out / "run.json").write_text(json.dumps(_run_manifest(cfg, {
        "initial_loss": result.initial_loss, "final_loss": result.final_loss,
        "seed": tc.seed, "dataset_fingerprint": ds.fingerprint()}),
        sort_keys=True, indent=1))
    last = result.metrics[-1]
    print(f"final: L_total={last['l_total']:.6g} rel_l2_u={last['rel_l2_u']:.4f} "
          f"rel_l2_s={last['rel_l2_s']:.4f}")
    print(f"artifacts in {out}")
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    ds = _load_required_dataset(cfg["dataset"], "dataset")
    if not cfg["checkpoint"]:
        raise ValidationError("checkpoint is required")
    ckpt = training.load_checkpoint(cfg["checkpoint"], dataset=ds)
    rel_u = training.evaluate_relative_l2(ckpt.model, ds, "u")
    rel_s = training.evaluate_relative_l2(ckpt.model, ds, "s")
    report = {"rel_l2_u": rel_u, "rel_l2_s": rel_s, "n": ds.n, "step": ckpt.step}
    print(json.dumps(report, sort_keys=True))
    if cfg["out"]:
        Path(cfg["out"]).write_text(json.dumps(
            _run_manifest(cfg, {"report": report}), sort_keys=True, indent=1))
    return 0


def _csv_grid(path: Path, columns: list[str], rows: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(columns) + "\n")
        np.savetxt(fh, rows, delimiter=",", fmt="%.17g")


def cmd_infer(cfg: RunConfig) -> int:
    ds = _load_required_dataset(cfg["dataset"], "dataset")
    if not cfg["checkpoint"]:
        raise ValidationError("checkpoint is required")
    if not 0 <= cfg["sample_index"] < ds.n:
        raise ValidationError(f"sample_index out of range [0, {ds.n})")
    ckpt = training.load_checkpoint(cfg["checkpoint"], dataset=ds)
    problem = ds.problem
    meas = ds.measurements[cfg["sample_index"]]
    nx, ny = cfg["nx"], cfg["ny"]
    if nx < 2 or ny < 2:
        raise ValidationError("evaluation grid needs at least 2 nodes per axis")
    xs = np.linspace(0.0, 1.0, nx)
    if problem.kind == "reaction_diffusion":
        ts = np.linspace(0.0, problem.t_final, ny)
        tt, xx = np.meshgrid(ts, xs, indexing="ij")
        u_points = np.column_stack([xx.ravel(), tt.ravel()])
        s_points = xs.reshape(-1, 1)
        u_cols, s_cols = ["x", "t", "value"], ["x", "value"]
    else:
        ys = np.linspace(0.0, 1.0, ny)
        yy, xx = np.meshgrid(ys, xs, indexing="ij")
        u_points = np.column_stack([xx.ravel(), yy.ravel()])
        s_points = u_points
        u_cols, s_cols = ["x", "y", "value"], ["x", "y", "value"]
    model = ckpt.model
    if isinstance(model, PidionModel):
        u_vals = predict_u(model, meas, u_points)
        s_vals = predict_s(model, meas, s_points)
    else:
        u_vals, s_full = v0_predict(model, meas, u_points)
        s_vals = s_full  # v0 emits s on its fixed grid
        s_points = model.s_grid.reshape(-1, problem.s_dim)
    _csv_grid(Path(cfg["out_u"]), u_cols,
              np.column_stack([u_points, np.asarray(u_vals).ravel()]))
    _csv_grid(Path(cfg["out_s"]), s_cols,
              np.column_stack([s_points, np.asarray(s_vals).ravel()]))
    for p in (cfg["out_u"], cfg["out_s"]):
        side = Path(p).with_suffix(".json")
        side.write_text(json.dumps(_run_manifest(cfg, {"rows": None}),
                                   sort_keys=True, indent=1))
    print(f"wrote {cfg['out_u']} and {cfg['out_s']}")
    return 0


def cmd_sweep(cfg: RunConfig) -> int:
    ds = _load_required_dataset(cfg["dataset"], "dataset")
    test = _load_required_dataset(cfg["test_dataset"], "test_dataset")
    settings: list[dict] = []
    if cfg["lambdas"]:
        for pair in cfg["lambdas"].split(","):
            try:
                l1, l2 = pair.split(":")
                settings.append({"lam_physics": float(l1), "lam_data": float(l2)})
            except ValueError as e:
                raise ValidationError(f"bad lambda pair {pair!r}") from e
    if cfg["n_values"]:
        for nv in cfg["n_values"].split(","):
            try:
                settings.append({"n_train": int(nv)})
            except ValueError as e:
                raise ValidationError(f"bad n value {nv!r}") from e
    if not settings:
        raise ValidationError("sweep needs lambdas and/or n_values")
    base = training.TrainConfig(
        problem=ds.problem.kind, mode=cfg["mode"], steps=cfg["steps"],
        batch_size=cfg["batch_size"], lr=cfg["lr"], seed=cfg["seed"],
        eval_every=cfg["eval_every"], collocation_stride=cfg["collocation_stride"],
        model_preset=cfg["model_preset"])
    rows = training.sweep(base, ds, test, settings, csv_path=cfg["out"])
    for row in rows:
        print(f"{row['setting']}: rel_l2_s={row['rel_l2_s']:.4f} "
              f"({row['wall_s']:.1f}s)")
    return 0


# --------------------------------------------------------------------- audits


def _audit_gradients(quick: bool):
    from .model import NetComponent
    prob = physics.reaction_diffusion_problem(nx=10, nt=8)
    p, w = 4, 8
    mdl = PidionModel(
        NetComponent.init(nets.MlpSpec((20, w, p), "relu"), 1),
        NetComponent.init(nets.MlpSpec((20, w, p), "relu"), 2),
        NetComponent.init(nets.MlpSpec((2, w, p), "tanh"), 3),
        NetComponent.init(nets.MlpSpec((1, w, p), "tanh"), 4))
    g = Graph()
    olg = physics.build_operator_losses(g, prob, mdl, physics.LossWeights(1, 100),
                                        batch_size=2)
    rng = np.random.default_rng(0)
    olg.set_batch(rng.normal(size=(2, 20)))
    g.eval()
    gm = g.backward(olg.losses.total)
    worst = 0.0
    h = 1e-5
    for store in mdl.stores().values():
        an = gm.wrt(store)
        stride = 7 if quick else 1
        for i in range(0, store.data.size, stride):
            orig = store.data[i]
            store.data[i] = orig + h
            g.eval()
            fp = olg.losses.total.value
            store.data[i] = orig - h
            g.eval()
            fm = olg.losses.total.value
            store.data[i] = orig
            fd = (fp - fm) / (2 * h)
            rel = abs(an[i] - fd) / max(abs(an[i]), abs(fd), 1e-6)
            worst = max(worst, rel)
    ok = worst < 1e-5
    return ok, f"max relative gradient error {worst:.2e} (budget 1e-5)"


def _audit_jets(quick: bool):
    spec = nets.MlpSpec((2, 16, 16, 8), activation="tanh")
    store = nets.init_params(spec, 77)
    point = np.array([0.37, 0.61])
    h = 1e-4
    worst = 0.0
    for direction in (0, 1):
        g = Graph()
        jets = jet2_propagate(g, lambda xs: nets.mlp_apply(g, spec, store, xs),
                              point, direction)
        g.eval()
        e = np.zeros(2)
        e[direction] = h
        fp = nets.mlp_forward(spec, store, point + e)
        fm = nets.mlp_forward(spec, store, point - e)
        f0 = nets.mlp_forward(spec, store, point)
        d1_fd = (fp - fm) / (2 * h)
        d2_fd = (fp - 2 * f0 + fm) / h**2
        for k, jet in enumerate(jets):
            r1 = abs(jet.d1.value - d1_fd[k]) / max(abs(d1_fd[k]), 1e-3)
            r2 = abs(jet.d2.value - d2_fd[k]) / max(abs(d2_fd[k]), 1e-3)
            worst = max(worst, r1, r2)
    ok = worst < 1e-4
    return ok, f"max relative jet error {worst:.2e} (budget 1e-4)"


def _audit_manufactured(quick: bool):
    details = []
    grid = datagen.space_time_grid(30, 30)
    x, t = grid.nodes(1), grid.nodes(0)
    u = datagen.solve_reaction_diffusion(
        grid, np.sin(np.pi * x), (np.pi**2 - 1) * np.sin(np.pi * x),
        lambda tt: np.exp(-np.asarray(tt)))
    err_rd = np.abs(u - np.exp(-t)[:, None] * np.sin(np.pi * x)[None, :]).max()
    details.append(("reaction-diffusion", err_rd, 5e-3))
    n = 50
    g2 = datagen.rectangle_grid(n)
    v = g2.nodes(0)
    yy, xx = np.meshgrid(v, v, indexing="ij")
    uh = datagen.solve_helmholtz(g2, (2 * np.pi**2 + 1) * np.cos(np.pi * xx)
                                 * np.cos(np.pi * yy))
    details.append(("helmholtz", np.abs(uh - np.cos(np.pi * xx)
                                        * np.cos(np.pi * yy)).max(), 2e-3))
    nd = 60 if quick else 100
    g3 = datagen.rectangle_grid(nd)
    v = g3.nodes(0)
    yy, xx = np.meshgrid(v, v, indexing="ij")
    ud = datagen.solve_darcy(g3, np.ones((nd, nd)),
                             lambda X, Y: 2 * np.pi**2 * np.sin(np.pi * X)
                             * np.sin(np.pi * Y))
    tol_d = 1e-3 * (100 / nd) ** 2 * 1.2
    details.append(("darcy", np.abs(ud - np.sin(np.pi * xx)
                                    * np.sin(np.pi * yy)).max(), tol_d))
    ok = all(err < tol for _, err, tol in details)
    msg = "; ".join(f"{name} err {err:.2e} (< {tol:.0e})"
                    for name, err, tol in details)
    return ok, msg


def _audit_grf(quick: bool):
    cfg = datagen.GrfConfig(length_scale=0.15)
    grid = datagen.line_grid(30)
    n_draws = 500 if quick else 2000
    draws = np.stack([datagen.grf_sample(cfg, grid, seed=s) for s in range(n_draws)])
    x = grid.nodes(0)
    worst = 0.0
    for i, j in [(8, 8), (8, 9), (8, 10), (8, 11), (8, 12)]:
        emp = float((draws[:, i] * draws[:, j]).mean())
        kern = float(cfg.kernel_value(abs(x[i] - x[j])))
        worst = max(worst, abs(emp - kern) / kern)
    budget = 0.2 if quick else 0.1
    return worst < budget, f"max relative covariance error {worst:.3f} over " \
                           f"{n_draws} draws (budget {budget})"


def _audit_roundtrips(quick: bool):
    prob = physics.reaction_diffusion_problem()
    ds = datagen.generate_dataset(prob, 3, master_seed=5)
    with tempfile.TemporaryDirectory() as td:
        datagen.save_dataset(ds, Path(td) / "d")
        back = datagen.load_dataset(Path(td) / "d")
        ds_ok = all(np.array_equal(ds.arrays[k], back.arrays[k]) for k in ds.arrays)
        mdl = training.default_model(prob, "desk", seed=3)
        adam = {n_: training.AdamState.for_store(s) for n_, s in mdl.stores().items()}
        training.save_checkpoint(Path(td) / "c", mdl, adam, 0, None,
                                 ds.fingerprint())
        ckpt = training.load_checkpoint(Path(td) / "c")
        pts = prob.u_grid_points()[:50]
        before = predict_u(mdl, ds.measurements[0], pts)
        after = predict_u(ckpt.model, ds.measurements[0], pts)
        ckpt_ok = np.array_equal(before, after)
    ok = ds_ok and ckpt_ok
    return ok, f"dataset bit-exact={ds_ok}, checkpoint predict bit-exact={ckpt_ok}"


def _audit_dataset(path: str):
    ds = datagen.load_dataset(path)
    problem = ds.problem
    checks = []
    finite = all(np.isfinite(a).all() for a in ds.arrays.values())
    checks.append(("all arrays finite", finite, ""))
    width_ok = ds.measurements.shape[1] == problem.measurement_width
    checks.append(("measurement width", width_ok,
                   f"{ds.measurements.shape[1]} vs {problem.measurement_width}"))
    if problem.kind == "reaction_diffusion":
        worst = max(datagen.rd_step_residual(problem, ds.u_fields[i], ds.s_fields[i])
                    for i in range(min(ds.n, 8)))
        checks.append(("time-step algebraic residual < 1e-9", worst < 1e-9,
                       f"max {worst:.2e}"))
    elif problem.kind == "helmholtz":
        worst = max(datagen.helmholtz_algebraic_residual(problem, ds.u_fields[i],
                                                         ds.s_fields[i])
                    for i in range(min(ds.n, 4)))
        checks.append(("linear-system residual < 1e-9", worst < 1e-9,
                       f"max {worst:.2e}"))
    elif problem.kind == "darcy":
        in_range = (ds.s_fields.min() >= problem.s_lo - 1e-12
                    and ds.s_fields.max() <= problem.s_hi + 1e-12)
        checks.append(("sigma within configured range", in_range, ""))
    k = min(2, ds.n)
    regen_ok = True
    for i in range(k):
        data = datagen.regenerate_sample(problem, ds.master_seed, i)
        regen_ok = regen_ok and all(
            np.array_equal(data[name], ds.arrays[name][i])
            for name in ("u", "s", "measurements"))
    checks.append((f"regenerated {k} samples bit-exact", regen_ok, ""))
    meas_ok = all(np.array_equal(
        datagen.extract_measurement(problem, ds.u_fields[i]), ds.measurements[i])
        for i in range(min(ds.n, 4)))
    checks.append(("measurement extraction consistent", meas_ok, ""))
    return checks


def cmd_check(cfg: RunConfig) -> int:
    quick = cfg["quick"]
    audits = [
        ("gradient-vs-finite-differences", _audit_gradients),
        ("jet-vs-finite-differences", _audit_jets),
        ("manufactured-solutions", _audit_manufactured),
        ("grf-covariance", _audit_grf),
        ("round-trips", _audit_roundtrips),
    ]
    failures = 0
    for name, fn in audits:
        t0 = time.perf_counter()
        try:
            ok, detail = fn(quick)
        except Exception as e:  # an audit crash is an audit failure
            ok, detail = False, f"raised {type(e).__name__}: {e}"
        status = "PASS" if ok else "FAIL"
        failures += not ok
        print(f"[{status}] {name}: {detail} ({time.perf_counter() - t0:.1f}s)")
    if cfg["dataset"]:
        for name, ok, detail in _audit_dataset(cfg["dataset"]):
            status = "PASS" if ok else "FAIL"
            failures += not ok
            print(f"[{status}] dataset: {name} {detail}")
    if failures:
        raise AuditFailure(f"{failures} audit(s) failed")
    print("all audits passed")
    return 0


# ----------------------------------------------------------------------- main


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="invop",
        description="Inverse operator networks for PDE inverse problems.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for command, schema in SCHEMAS.items():
        p = sub.add_parser(command, help=f"{command} (keys: "
                                         f"{', '.join(sorted(schema))})")
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--threads", type=int, default=None,
                       help="worker pool cap (default: INVOP_THREADS or 1)")
        if command == "gen-data":
            p.add_argument("--force", action="store_true",
                           help="overwrite a non-empty output directory")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = _resolve(args)
        print(cfg.echo())
        threads = _threads(args)
        if args.command == "gen-data":
            return cmd_gen_data(cfg, threads, args.force)
        if args.command == "train":
            return cmd_train(cfg, threads)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "infer":
            return cmd_infer(cfg)
        if args.command == "sweep":
            return cmd_sweep(cfg)
        if args.command == "check":
            return cmd_check(cfg)
        raise ValidationError(f"unknown command {args.command!r}")
    except ValidationError as e:
        print(f"validation error: {e}", file=sys.stderr)
        return 2
    except AuditFailure as e:
        print(f"audit failure: {e}", file=sys.stderr)
        return 4
    except FileNotFoundError as e:
        print(f"validation error: {e}", file=sys.stderr)
        return 2
    except (datagen.SolverError, datagen.DatasetCorruptionError,
            training.TrainingDivergedError, RuntimeError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
