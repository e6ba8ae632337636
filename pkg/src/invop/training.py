"""Adam optimization, operator/PINN training loops, evaluation, sweeps, checkpoints.

One "epoch" is one optimizer step on one batch.  Mini-batch selection is a pure
function of (seed, step), so an interrupted run resumed from a checkpoint follows
the identical trajectory bit for bit.  Single-threaded training is deterministic
given (seed, config, dataset).
"""

from __future__ import annotations

import csv
import json
import math
import time
import warnings
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np

from . import datagen, nets, physics
from .autodiff import Graph
from .model import NetComponent, OutputTransform, PidionModel, PidionV0Model, \
    predict_s, predict_u, v0_predict

__all__ = [
    "AdamState",
    "adam_step",
    "TrainConfig",
    "TrainResult",
    "TrainingDivergedError",
    "default_model",
    "train",
    "evaluate_relative_l2",
    "train_pinn_single",
    "sweep",
    "save_checkpoint",
    "load_checkpoint",
    "write_metrics_csv",
    "METRICS_FIELDS",
]

METRICS_FIELDS = ("step", "l_physics", "l_data", "l_s", "l_total",
                  "rel_l2_u", "rel_l2_s", "wall_ms")


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, metrics: list[dict]):
        super().__init__(message)
        self.metrics = metrics


class GradientError(RuntimeError):
    """A non-finite gradient reached the optimizer."""


# ----------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    """Bias-corrected Adam moments for one parameter store."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_store(cls, store: nets.ParamStore, lr: float = 1e-3) -> "AdamState":
        return cls(np.zeros(store.data.size), np.zeros(store.data.size), lr=lr)


def adam_step(state: AdamState, store: nets.ParamStore, grad: np.ndarray) -> None:
    """Standard bias-corrected Adam update, in place."""
    if not np.isfinite(grad).all():
        bad = int(np.flatnonzero(~np.isfinite(grad))[0])
        segment = next((name for name, (off, ln) in store.segments.items()
                        if off <= bad < off + ln), "?")
        raise GradientError(f"non-finite gradient at optimizer step {state.step + 1}, "
                            f"slot {bad} (segment {segment!r})")
    state.step += 1
    state.m += (1.0 - state.beta1) * (grad - state.m)
    state.v += (1.0 - state.beta2) * (grad * grad - state.v)
    mhat = state.m / (1.0 - state.beta1 ** state.step)
    vhat = state.v / (1.0 - state.beta2 ** state.step)
    store.data -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
    if not np.isfinite(state.m).all() or not np.isfinite(state.v).all():
        raise GradientError(f"non-finite Adam moments at step {state.step}")


# ----------------------------------------------------------------- configuration


MODES = ("unsupervised", "supervised", "supervised-only-baseline", "v0",
         "pinn-single-instance")


@dataclass
class TrainConfig:
    problem: str = "reaction_diffusion"
    mode: str = "unsupervised"
    lam_physics: float = 1.0
    lam_data: float = 100.0
    steps: int = 20_000
    batch_size: int = 1000
    lr: float = 1e-3
    seed: int = 0
    eval_every: int = 1000
    checkpoint_every: int = 0
    checkpoint_dir: str = ""
    collocation_stride: int = 1
    model_preset: str = "paper"
    divergence_threshold: float = 1e6

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.problem not in physics.PROBLEM_KINDS:
            raise ValueError(f"unknown problem {self.problem!r}")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")

    @property
    def weights(self) -> physics.LossWeights:
        return physics.LossWeights(self.lam_physics, self.lam_data)

    def to_dict(self) -> dict:
        return asdict(self)


def _component_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([seed, tag]).generate_state(1)[0])


def default_model(problem, preset: str = "paper", seed: int = 0,
                  v0: bool = False):
    """Benchmark model assembly.

    "paper" uses the full-scale widths (branches 60->32^3 / conv 16-32-64 stacks,
    trunks of width 32 or 128); "desk" shrinks widths and latent size for CPU-scale
    runs.  Reaction-diffusion keeps separate trunks for u (2-D input) and s (1-D
    input); Helmholtz and Darcy share one trunk.
    """
    if preset not in ("paper", "desk"):
        raise ValueError(f"unknown preset {preset!r}")
    s_trans = physics.default_s_transform(problem)
    cs = lambda tag: _component_seed(seed, tag)

    if problem.kind == "reaction_diffusion":
        p, w = (32, 32) if preset == "paper" else (16, 16)
        mw = problem.measurement_width
        recon_t = NetComponent.init(nets.MlpSpec((2, w, w, p), "tanh"), cs(3))
        inv_t = NetComponent.init(nets.MlpSpec((1, w, w, p), "tanh"), cs(4))
        inv_b = NetComponent.init(nets.MlpSpec((mw, w, w, p), "relu"), cs(2))
        if v0:
            n_s = problem.nx
            fwd_b = NetComponent.init(nets.MlpSpec((n_s, w, w, p), "relu"), cs(5))
            return PidionV0Model(inv_b, fwd_b, recon_t, inv_t,
                                 problem.s_grid_points().ravel(), s_trans)
        recon_b = NetComponent.init(nets.MlpSpec((mw, w, w, p), "relu"), cs(1))
        return PidionModel(recon_b, inv_b, recon_t, inv_t, s_trans)

    # 2-D problems: conv branches, one shared trunk.
    side = problem.meas_n if problem.kind == "helmholtz" else problem.n
    if preset == "paper":
        p, tw = 128, 128
        channels = (16, 32, 64)
    else:
        p, tw = 16, 32
        channels = (4, 8)
    conv = nets.ConvStackSpec(side, side, channels=channels)
    flat = conv.mlp_widths[0]
    conv = nets.ConvStackSpec(side, side, channels=channels,
                              mlp_widths=(flat, 128, p) if preset == "paper"
                              else (flat, 32, p))
    trunk = NetComponent.init(nets.MlpSpec((2, tw, tw, p), "tanh"), cs(3))
    inv_b = NetComponent.init(conv, cs(2))
    if v0:
        n_s = problem.s_grid_points().shape[0]
        w = 64 if preset == "paper" else 32
        fwd_b = NetComponent.init(nets.MlpSpec((n_s, w, w, p), "relu"), cs(5))
        return PidionV0Model(inv_b, fwd_b, trunk, trunk,
                             problem.s_grid_points(), s_trans)
    recon_b = NetComponent.init(conv, cs(1))
    return PidionModel(recon_b, inv_b, trunk, trunk, s_trans)


# ------------------------------------------------------------------- evaluation


def evaluate_relative_l2(model, dataset: datagen.Dataset, target: str = "s",
                         return_per_sample: bool = False):
    """Mean over samples of ||pred - true||_2 / ||true||_2 on the data grid.

    Zero-norm truth samples are skipped with a warning reporting the count.  The
    mean uses exact summation, so it is invariant to sample order.
    """
    if target not in ("u", "s"):
        raise ValueError("target must be 'u' or 's'")
    if dataset.n == 0:
        raise ValueError("empty dataset")
    problem = dataset.problem
    points = problem.u_grid_points() if target == "u" else problem.s_grid_points()
    truth = dataset.u_flat() if target == "u" else dataset.s_flat()
    meas = dataset.measurements
    if isinstance(model, PidionV0Model):
        u_pred, s_pred = v0_predict(model, meas, points if target == "u"
                                    else problem.u_grid_points())
        pred = u_pred if target == "u" else s_pred
    else:
        pred = (predict_u if target == "u" else predict_s)(model, meas, points)
    norms = np.linalg.norm(truth, axis=1)
    errs = np.linalg.norm(pred - truth, axis=1)
    keep = norms > 0.0
    skipped = int((~keep).sum())
    if skipped:
        warnings.warn(f"evaluate_relative_l2: skipped {skipped} zero-norm samples")
    if not keep.any():
        raise ValueError("all truth samples have zero norm")
    per_sample = errs[keep] / norms[keep]
    mean = math.fsum(per_sample.tolist()) / per_sample.size
    if return_per_sample:
        return mean, per_sample
    return mean


# ---------------------------------------------------------------- training loop


@dataclass
class TrainResult:
    model: object
    metrics: list[dict]
    initial_loss: float
    final_loss: float
    adam: dict[str, AdamState] | None = None
    steps_done: int = 0


def _batch_indices(seed: int, step: int, n: int, b: int) -> np.ndarray:
    if b >= n:
        return np.arange(n)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5A17, step]))
    return rng.choice(n, size=b, replace=False)


def _metrics_row(step, losses_vals, rel_u, rel_s, wall_ms) -> dict:
    lp, ld, ls, lt = losses_vals
    return {"step": step, "l_physics": lp, "l_data": ld, "l_s": ls, "l_total": lt,
            "rel_l2_u": rel_u, "rel_l2_s": rel_s, "wall_ms": wall_ms}


def train(config: TrainConfig, dataset: datagen.Dataset, model=None,
          test_dataset: datagen.Dataset | None = None,
          resume: "Checkpoint | None" = None) -> TrainResult:
    """Operator training loop for the configured mode.

    Builds the batched loss graph once, then per step: rebind the batch, forward,
    backward, Adam on every store.  Emits a metrics row at the evaluation cadence
    (and at step 0).  Aborts with a log when L_total exceeds the divergence
    threshold.  ``mode == "pinn-single-instance"`` is served by train_pinn_single.
    """
    if config.mode == "pinn-single-instance":
        raise ValueError("use train_pinn_single for pinn-single-instance mode")
    problem = dataset.problem
    if problem.kind != config.problem:
        raise ValueError(f"config problem {config.problem!r} does not match "
                         f"dataset problem {problem.kind!r}")
    supervised = config.mode in ("supervised", "supervised-only-baseline")
    if model is None:
        model = default_model(problem, config.model_preset, config.seed,
                              v0=config.mode == "v0")
    if config.mode == "v0" and not isinstance(model, PidionV0Model):
        raise ValueError("v0 mode needs a PidionV0Model")

    start_step = 0
    adam_states = {name: AdamState.for_store(store, config.lr)
                   for name, store in model.stores().items()}
    if resume is not None:
        _restore(resume, model, adam_states)
        start_step = resume.step

    B = min(config.batch_size, dataset.n)
    graph = Graph()
    colloc = problem.default_collocation(config.collocation_stride)
    olg = physics.build_operator_losses(graph, problem, model, config.weights, B,
                                        mode=_loss_mode(config.mode), colloc=colloc)
    meas = dataset.measurements
    labels = dataset.s_flat() if supervised else None

    metrics: list[dict] = []
    t0 = time.perf_counter()
    loss_nodes = olg.losses

    def bind(step):
        idx = _batch_indices(config.seed, step, dataset.n, B)
        olg.set_batch(meas[idx], None if labels is None else labels[idx])

    def losses_now():
        return (loss_nodes.physics.value, loss_nodes.data.value,
                loss_nodes.s.value, loss_nodes.total.value)

    def snapshot(step, lv):
        rel_u = rel_s = float("nan")
        if test_dataset is not None and test_dataset.n:
            rel_u = evaluate_relative_l2(model, test_dataset, "u")
            rel_s = evaluate_relative_l2(model, test_dataset, "s")
        wall = (time.perf_counter() - t0) * 1000.0
        metrics.append(_metrics_row(step, lv, rel_u, rel_s, wall))

    bind(start_step)
    graph.eval()
    initial = losses_now()
    snapshot(start_step, initial)
    fresh = start_step  # step whose batch is bound and evaluated with current params

    stores = model.stores()
    for step in range(start_step, config.steps):
        if fresh != step:
            bind(step)
            graph.eval()
            fresh = step
        lv = losses_now()
        if lv[3] > config.divergence_threshold:
            snapshot(step, lv)
            raise TrainingDivergedError(
                f"L_total={lv[3]:.3e} exceeded {config.divergence_threshold:.1e} "
                f"at step {step}", metrics)
        gm = graph.backward(loss_nodes.total)
        for name, store in stores.items():
            adam_step(adam_states[name], store, gm.wrt(store))
        fresh = -1  # parameters changed; cached values are stale
        done = step + 1
        if config.eval_every and (done % config.eval_every == 0 or done == config.steps):
            bind(done)
            graph.eval()
            snapshot(done, losses_now())
            fresh = done
        if config.checkpoint_every and config.checkpoint_dir \
                and done % config.checkpoint_every == 0:
            save_checkpoint(Path(config.checkpoint_dir), model, adam_states, done,
                            config, dataset.fingerprint())
    final = metrics[-1]["l_total"] if metrics else initial[3]
    return TrainResult(model, metrics, initial[3], final, adam=adam_states,
                       steps_done=config.steps)


def _loss_mode(mode: str) -> str:
    if mode == "v0":
        return "unsupervised"
    return mode


# --------------------------------------------------------- single-instance PINN


def train_pinn_single(problem, measurement: np.ndarray,
                      weights: physics.LossWeights, steps: int = 20_000,
                      lr: float = 1e-3, width: int = 64, depth: int = 3,
                      seed: int = 0, eval_every: int = 1000,
                      s_true: np.ndarray | None = None,
                      u_comp: NetComponent | None = None,
                      s_comp: NetComponent | None = None,
                      collocation_stride: int = 1):
    """Inverse PINN for one problem instance: coordinate networks u(x) and s(x)
    trained on the same weighted physics + data loss.  Returns
    (u component, s component, metrics rows)."""
    hidden = (width,) * depth
    if u_comp is None:
        u_comp = NetComponent.init(
            nets.MlpSpec((problem.u_dim, *hidden, 1), "tanh"),
            _component_seed(seed, 11))
    if s_comp is None:
        s_comp = NetComponent.init(
            nets.MlpSpec((problem.s_dim, *hidden, 1), "tanh"),
            _component_seed(seed, 12))
    graph = Graph()
    colloc = problem.default_collocation(collocation_stride)
    plg = physics.build_pinn_losses(graph, problem, u_comp, s_comp, weights, colloc)
    plg.set_measurement(np.asarray(measurement, dtype=np.float64))

    s_points = problem.s_grid_points()
    adam_u = AdamState.for_store(u_comp.store, lr)
    adam_s = AdamState.for_store(s_comp.store, lr)
    metrics: list[dict] = []
    t0 = time.perf_counter()

    def rel_s_now():
        if s_true is None:
            return float("nan")
        pred = nets.mlp_forward(s_comp.spec, s_comp.store, s_points).ravel()
        pred = physics.problem_transform(problem).apply_np(pred)
        truth = np.asarray(s_true, dtype=np.float64).ravel()
        return float(np.linalg.norm(pred - truth) / np.linalg.norm(truth))

    def snapshot(step):
        lv = (plg.losses.physics.value, plg.losses.data.value, 0.0,
              plg.losses.total.value)
        metrics.append(_metrics_row(step, lv, float("nan"), rel_s_now(),
                                    (time.perf_counter() - t0) * 1000.0))

    graph.eval()
    snapshot(0)
    for step in range(steps):
        graph.eval()
        gm = graph.backward(plg.losses.total)
        adam_step(adam_u, u_comp.store, gm.wrt(u_comp.store))
        adam_step(adam_s, s_comp.store, gm.wrt(s_comp.store))
        done = step + 1
        if eval_every and (done % eval_every == 0 or done == steps):
            graph.eval()
            snapshot(done)
    return u_comp, s_comp, metrics


# ----------------------------------------------------------------------- sweeps


def sweep(base: TrainConfig, dataset: datagen.Dataset,
          test_dataset: datagen.Dataset, settings: list[dict],
          csv_path=None) -> list[dict]:
    """Train once per setting override and tabulate final test errors.

    Each setting is a dict of TrainConfig overrides, optionally with ``n_train``
    to subset the training data.  A single-setting sweep reproduces a plain train
    run exactly (same seeds, same trajectory).
    """
    rows = []
    for setting in settings:
        setting = dict(setting)
        n_train = setting.pop("n_train", dataset.n)
        cfg = replace(base, **setting)
        sub = dataset.subset(np.arange(n_train)) if n_train != dataset.n else dataset
        t0 = time.perf_counter()
        result = train(cfg, sub, test_dataset=test_dataset)
        wall = time.perf_counter() - t0
        rel_s = evaluate_relative_l2(result.model, test_dataset, "s")
        rows.append({"setting": json.dumps({**setting, "n_train": n_train},
                                           sort_keys=True),
                     "rel_l2_s": rel_s, "wall_s": wall, "seed": cfg.seed})
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["setting", "rel_l2_s",
                                                    "wall_s", "seed"])
            writer.writeheader()
            writer.writerows(rows)
    return rows


def write_metrics_csv(path, metrics: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(METRICS_FIELDS))
        writer.writeheader()
        for row in metrics:
            writer.writerow(row)


# ------------------------------------------------------------------ checkpoints


@dataclass
class Checkpoint:
    model: object
    adam: dict[str, AdamState]
    step: int
    config: dict
    dataset_fingerprint: str


def save_checkpoint(path, model, adam_states: dict[str, AdamState], step: int,
                    config: TrainConfig | None, dataset_fingerprint: str) -> Path:
    """Write stores + optimizer state as raw float64 binaries plus a manifest.

    Files land via write-temp-then-rename; the manifest is written last, so a
    directory with a manifest is always complete.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for name, store in model.stores().items():
        arrays[f"store/{name}"] = store.data
    for name, st in adam_states.items():
        arrays[f"adam_m/{name}"] = st.m
        arrays[f"adam_v/{name}"] = st.v
    index = {}
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        fname = name.replace("/", "__") + ".f64"
        tmp = path / (fname + ".tmp")
        tmp.write_bytes(arr.tobytes())
        tmp.replace(path / fname)
        index[name] = {"file": fname, "shape": list(arr.shape), "dtype": "<f8",
                       "byte_length": arr.nbytes}
    any_adam = next(iter(adam_states.values()))
    manifest = {
        "format_version": 1,
        "model": model.to_manifest(),
        "step": step,
        "config": config.to_dict() if config is not None else {},
        "dataset_fingerprint": dataset_fingerprint,
        "adam": {"lr": any_adam.lr, "beta1": any_adam.beta1,
                 "beta2": any_adam.beta2, "eps": any_adam.eps,
                 "steps": {name: st.step for name, st in adam_states.items()}},
        "arrays": index,
    }
    tmp = path / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, sort_keys=True, indent=1))
    tmp.replace(path / "manifest.json")
    return path


def load_checkpoint(path, dataset: datagen.Dataset | None = None) -> Checkpoint:
    """Bit-exact restore; warns when the dataset fingerprint does not match."""
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    mkind = manifest["model"]["kind"]
    model = (PidionV0Model if mkind == "pidion_v0" else PidionModel) \
        .from_manifest(manifest["model"])

    def read(name):
        meta = manifest["arrays"][name]
        raw = (path / meta["file"]).read_bytes()
        if len(raw) != meta["byte_length"]:
            raise datagen.DatasetCorruptionError(
                f"checkpoint array {name}: size mismatch")
        return np.frombuffer(raw, dtype=meta["dtype"]).reshape(meta["shape"]).copy()

    adam = {}
    ah = manifest["adam"]
    for name, store in model.stores().items():
        store.data[:] = read(f"store/{name}")
        st = AdamState(read(f"adam_m/{name}"), read(f"adam_v/{name}"),
                       step=ah["steps"][name], lr=ah["lr"], beta1=ah["beta1"],
                       beta2=ah["beta2"], eps=ah["eps"])
        adam[name] = st
    ckpt = Checkpoint(model, adam, manifest["step"], manifest["config"],
                      manifest["dataset_fingerprint"])
    if dataset is not None and dataset.fingerprint() != ckpt.dataset_fingerprint:
        warnings.warn("checkpoint dataset fingerprint does not match the dataset")
    return ckpt


def _restore(ckpt: Checkpoint, model, adam_states: dict[str, AdamState]) -> None:
    src_stores = ckpt.model.stores()
    for name, store in model.stores().items():
        store.data[:] = src_stores[name].data
        st = ckpt.adam[name]
        adam_states[name].m[:] = st.m
        adam_states[name].v[:] = st.v
        adam_states[name].step = st.step
        adam_states[name].lr = st.lr
