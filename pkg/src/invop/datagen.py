"""Gaussian random fields, finite-difference forward solvers, dataset serialization.

Data recipes per benchmark:

* reaction-diffusion: sample u0 and the source factor from a 1-D squared-
  exponential random field, march Crank-Nicolson on the 30x30 space-time grid,
  measure u(.,0) and u(.,T);
* Helmholtz: sample the source from a 2-D field, solve the zero-Neumann problem
  with a ghost-node 5-point stencil on 50x50, measure the centered 40x40 block;
* Darcy: sample the permeability, min-max scale it into [s_lo, s_hi], solve the
  Dirichlet problem with harmonic-mean face coefficients on a fine grid, stride
  down to 30x30, measure the full field.

Datasets serialize to a directory: ``manifest.json`` plus one little-endian
float64 flat binary per array role (row-major; time-major for reaction-diffusion
fields, y-major for 2-D fields).  Generation is bit-reproducible from the master
seed, including parallel generation, via per-sample derived seeds.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.interpolate import RectBivariateSpline

from . import physics

__all__ = [
    "Grid",
    "line_grid",
    "rectangle_grid",
    "space_time_grid",
    "GrfConfig",
    "grf_sample",
    "solve_reaction_diffusion",
    "solve_helmholtz",
    "solve_darcy",
    "downsample_striding",
    "extract_measurement",
    "min_max_scale",
    "Dataset",
    "generate_dataset",
    "save_dataset",
    "load_dataset",
    "SolverError",
    "GrfFactorizationError",
    "ConstantFieldError",
    "DatasetCorruptionError",
]

_DENSE_GRF_LIMIT = 2500


class SolverError(RuntimeError):
    """A linear solve failed or did not converge."""


class GrfFactorizationError(RuntimeError):
    """Covariance factorization failed; retry with larger jitter."""


class ConstantFieldError(ValueError):
    """A sampled field was (numerically) constant; the sample must be redrawn."""


class DatasetCorruptionError(RuntimeError):
    """Stored binaries do not match the manifest."""


@dataclass(frozen=True)
class Grid:
    """Uniform tensor grid including both endpoints on every axis.

    ``counts``/``extents`` follow storage order: (t, x) for space-time grids and
    (y, x) for rectangles.
    """

    kind: str  # "line" | "rectangle" | "space_time"
    counts: tuple[int, ...]
    extents: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if self.kind not in ("line", "rectangle", "space_time"):
            raise ValueError(f"unknown grid kind {self.kind!r}")
        if len(self.counts) != len(self.extents):
            raise ValueError("counts/extents length mismatch")
        if any(n < 2 for n in self.counts):
            raise ValueError("grids need at least 2 nodes per axis")

    def spacing(self, axis: int) -> float:
        lo, hi = self.extents[axis]
        return (hi - lo) / (self.counts[axis] - 1)

    def nodes(self, axis: int) -> np.ndarray:
        lo, hi = self.extents[axis]
        return np.linspace(lo, hi, self.counts[axis])

    @property
    def num_nodes(self) -> int:
        return int(np.prod(self.counts))

    def points(self) -> np.ndarray:
        """All node coordinates, storage-order flattened, columns in axis order."""
        meshes = np.meshgrid(*[self.nodes(a) for a in range(len(self.counts))],
                             indexing="ij")
        return np.column_stack([m.ravel() for m in meshes])

    def to_dict(self) -> dict:
        return {"kind": self.kind, "counts": list(self.counts),
                "extents": [list(e) for e in self.extents]}


def line_grid(n: int, lo: float = 0.0, hi: float = 1.0) -> Grid:
    return Grid("line", (n,), ((lo, hi),))


def rectangle_grid(n: int, m: int | None = None) -> Grid:
    m = n if m is None else m
    return Grid("rectangle", (n, m), ((0.0, 1.0), (0.0, 1.0)))


def space_time_grid(nt: int, nx: int, t_final: float = 1.0) -> Grid:
    return Grid("space_time", (nt, nx), ((0.0, t_final), (0.0, 1.0)))


# ------------------------------------------------------------------------- GRF


@dataclass(frozen=True)
class GrfConfig:
    """Squared-exponential Gaussian random field: k(r) = variance exp(-r^2/2l^2)."""

    length_scale: float
    variance: float = 1.0
    jitter: float = 1e-8
    kernel: str = "squared-exponential"
    seed: int = 0

    def __post_init__(self):
        if self.kernel != "squared-exponential":
            raise ValueError("only the squared-exponential kernel is supported")
        if self.length_scale <= 0:
            raise ValueError("length scale must be positive")
        if self.jitter < 0 or self.variance < 0:
            raise ValueError("jitter and variance must be non-negative")

    def kernel_value(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=np.float64)
        return self.variance * np.exp(-0.5 * (r / self.length_scale) ** 2)


_factor_cache: dict[tuple, np.ndarray] = {}


def _grf_factor(config: GrfConfig, grid: Grid) -> np.ndarray:
    key = (config.length_scale, config.variance, config.jitter,
           grid.kind, grid.counts, grid.extents)
    fac = _factor_cache.get(key)
    if fac is not None:
        return fac
    pts = grid.points()
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
    cov = config.variance * np.exp(-0.5 * d2 / config.length_scale**2)
    cov[np.diag_indices_from(cov)] += config.jitter
    try:
        fac = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as e:
        raise GrfFactorizationError(
            f"covariance factorization failed (n={pts.shape[0]}, "
            f"l={config.length_scale}, jitter={config.jitter}); "
            f"increase the jitter") from e
    _factor_cache[key] = fac
    return fac


def grf_sample(config: GrfConfig, grid: Grid, seed: int | None = None) -> np.ndarray:
    """One zero-mean draw with kernel covariance via dense Cholesky.

    Deterministic per seed (defaults to ``config.seed``); grids above 2500 nodes
    are rejected (dense factorization only).
    """
    if grid.num_nodes > _DENSE_GRF_LIMIT:
        raise ValueError(f"grid has {grid.num_nodes} nodes; dense GRF sampling is "
                         f"limited to {_DENSE_GRF_LIMIT}")
    rng = np.random.default_rng(np.random.SeedSequence(
        config.seed if seed is None else seed))
    z = rng.standard_normal(grid.num_nodes)
    if config.variance == 0.0:
        return np.zeros(grid.counts)
    return (_grf_factor(config, grid) @ z).reshape(grid.counts)


# ----------------------------------------------------------------------- solvers


def solve_reaction_diffusion(grid: Grid, u0: np.ndarray, f: np.ndarray, g,
                             literal_sign: bool = False) -> np.ndarray:
    """Crank-Nicolson march of du/dt -+ Lap(u) = f(x) g(t), u=0 at the walls.

    Returns the full (nt, nx) space-time field; u0 is clamped to the Dirichlet
    endpoints.  ``literal_sign=True`` integrates the +Lap(u) convention (unstable
    growth; supported for consistency experiments).
    """
    if grid.kind != "space_time":
        raise ValueError("reaction-diffusion needs a space-time grid")
    nt, nx = grid.counts
    dt, h = grid.spacing(0), grid.spacing(1)
    ts = grid.nodes(0)
    u0 = np.asarray(u0, dtype=np.float64).copy()
    f = np.asarray(f, dtype=np.float64)
    if u0.shape != (nx,) or f.shape != (nx,):
        raise ValueError("u0 and f must live on the spatial grid")
    u0[0] = u0[-1] = 0.0

    sign = -1.0 if literal_sign else 1.0  # du/dt = sign * Lap(u) + f g
    n_in = nx - 2
    lam = sign * dt / (2.0 * h * h)
    # Banded forms of (I -+ dt/2 Lap) restricted to interior nodes.
    ab_left = np.zeros((3, n_in))
    ab_left[0, 1:] = -lam
    ab_left[1, :] = 1.0 + 2.0 * lam
    ab_left[2, :-1] = -lam
    g_vals = np.asarray(g(ts), dtype=np.float64)

    u = np.zeros((nt, nx))
    u[0] = u0
    f_in = f[1:-1]
    for n in range(nt - 1):
        un = u[n, 1:-1]
        rhs = un + lam * (u[n, 2:] - 2.0 * un + u[n, :-2]) \
            + 0.5 * dt * f_in * (g_vals[n] + g_vals[n + 1])
        try:
            u[n + 1, 1:-1] = scipy.linalg.solve_banded((1, 1), ab_left, rhs)
        except (np.linalg.LinAlgError, ValueError) as e:
            raise SolverError(f"tridiagonal solve failed at step {n}") from e
    if not np.isfinite(u).all():
        raise SolverError("time stepping produced non-finite values")
    return u


def _neumann_1d_weighted(n: int, h: float) -> tuple[sp.csr_matrix, np.ndarray]:
    """(W A, w) where A is -d2/dx2 with reflected-ghost Neumann closure and
    w are the half-cell weights making W A symmetric."""
    main = np.full(n, 2.0)
    off = np.full(n - 1, -1.0)
    A = sp.diags([off, main, off], (-1, 0, 1), format="lil")
    A[0, 1] = -2.0
    A[n - 1, n - 2] = -2.0
    w = np.ones(n)
    w[0] = w[-1] = 0.5
    WA = sp.diags(w) @ (A.tocsr() / (h * h))
    return WA.tocsr(), w


def _helmholtz_system(n: int, sigma: float, c: float) -> tuple[sp.csr_matrix, np.ndarray]:
    h = 1.0 / (n - 1)
    WA1, w = _neumann_1d_weighted(n, h)
    W1 = sp.diags(w)
    lap = sp.kron(W1, WA1) + sp.kron(WA1, W1)  # y-major: (y axis) kron (x axis)
    W2 = sp.kron(W1, W1)
    A = sigma * lap + c * W2
    return A.tocsr(), w


def solve_helmholtz(grid: Grid, f: np.ndarray, sigma: float = 1.0,
                    c: float = 1.0) -> np.ndarray:
    """-sigma Lap(u) + c u = f with zero-flux boundary on the unit square.

    Second-order ghost-node closure keeps the half-cell-weighted system symmetric
    positive definite; solved by conjugate gradients at tol 1e-10.
    """
    if grid.kind != "rectangle" or grid.counts[0] != grid.counts[1]:
        raise ValueError("helmholtz solver expects a square rectangle grid")
    n = grid.counts[0]
    f = np.asarray(f, dtype=np.float64)
    if f.shape != (n, n):
        raise ValueError(f"f must be shaped {(n, n)}")
    A, w = _helmholtz_system(n, sigma, c)
    W2 = np.outer(w, w).ravel()
    b = W2 * f.ravel()
    u, info = spla.cg(A, b, rtol=1e-10, atol=0.0, maxiter=10 * n * n)
    if info != 0:
        raise SolverError(f"helmholtz CG did not converge (info={info})")
    res = np.linalg.norm(A @ u - b) / max(np.linalg.norm(b), 1e-300)
    if res > 1e-9:
        raise SolverError(f"helmholtz solve residual {res:.2e} above 1e-9")
    return u.reshape(n, n)


def _darcy_system(sigma: np.ndarray, h: float):
    """Five-point system for -div(sigma grad u) = f with harmonic-mean faces,
    interior unknowns only (homogeneous Dirichlet)."""
    n = sigma.shape[0]
    hm = lambda a, b: 2.0 * a * b / (a + b)
    # Face coefficients between node (j,i) and its neighbors, y-major indexing.
    ce = hm(sigma[:, :-1], sigma[:, 1:])   # (n, n-1) between i and i+1
    cn = hm(sigma[:-1, :], sigma[1:, :])   # (n-1, n) between j and j+1
    ni = n - 2
    idx = np.arange(ni * ni).reshape(ni, ni)
    data, rows, cols = [], [], []

    def add(r, c, v):
        rows.append(r.ravel())
        cols.append(c.ravel())
        data.append(v.ravel())

    east = ce[1:-1, 1:]   # face between interior (j,i) and (j,i+1), i from 1..n-2
    west = ce[1:-1, :-1]
    north = cn[1:, 1:-1]
    south = cn[:-1, 1:-1]
    diag = east + west + north + south
    add(idx, idx, diag)
    add(idx[:, :-1], idx[:, 1:], -east[:, :-1])
    add(idx[:, 1:], idx[:, :-1], -west[:, 1:])
    add(idx[:-1, :], idx[1:, :], -north[:-1, :])
    add(idx[1:, :], idx[:-1, :], -south[1:, :])
    A = sp.csr_matrix((np.concatenate(data),
                       (np.concatenate(rows), np.concatenate(cols))),
                      shape=(ni * ni, ni * ni)) / (h * h)
    return A


def solve_darcy(grid: Grid, sigma: np.ndarray, source=None) -> np.ndarray:
    """-div(sigma grad u) = f, u = 0 on the boundary of the unit square.

    ``sigma`` must be strictly positive on the grid.  Conjugate gradients with a
    Jacobi preconditioner at tol 1e-10; returns the full nodal field.
    """
    if grid.kind != "rectangle" or grid.counts[0] != grid.counts[1]:
        raise ValueError("darcy solver expects a square rectangle grid")
    n = grid.counts[0]
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.shape != (n, n):
        raise ValueError(f"sigma must be shaped {(n, n)}")
    if not (sigma > 0).all():
        raise ValueError("sigma must be strictly positive everywhere")
    h = grid.spacing(0)
    if source is None:
        source = physics.darcy_problem().source
    v = grid.nodes(0)
    yy, xx = np.meshgrid(v, v, indexing="ij")
    f = source(xx, yy)
    A = _darcy_system(sigma, h)
    b = f[1:-1, 1:-1].ravel()
    M = sp.diags(1.0 / A.diagonal())
    u_in, info = spla.cg(A, b, rtol=1e-10, atol=0.0, M=M, maxiter=10 * b.size)
    if info != 0:
        raise SolverError(f"darcy CG did not converge (info={info})")
    res = np.linalg.norm(A @ u_in - b) / max(np.linalg.norm(b), 1e-300)
    if res > 1e-9:
        raise SolverError(f"darcy solve residual {res:.2e} above 1e-9")
    u = np.zeros((n, n))
    u[1:-1, 1:-1] = u_in.reshape(n - 2, n - 2)
    return u


def downsample_striding(field: np.ndarray, coarse_n: int) -> np.ndarray:
    """Index-strided downsample keeping nodal values exact (both endpoints kept)."""
    fine_n = field.shape[0]
    if (fine_n - 1) % (coarse_n - 1):
        raise ValueError(f"cannot stride {fine_n} nodes down to {coarse_n}: "
                         f"{fine_n - 1} intervals not divisible by {coarse_n - 1}")
    s = (fine_n - 1) // (coarse_n - 1)
    return field[::s, ::s]


# ----------------------------------------------------------- field post-processing


def extract_measurement(problem, u: np.ndarray) -> np.ndarray:
    """Flatten the problem's measurement region of a solved field."""
    u = np.asarray(u, dtype=np.float64)
    if problem.kind == "reaction_diffusion":
        return np.concatenate([u[0, :], u[-1, :]])
    if problem.kind == "helmholtz":
        lo, hi = problem.measurement_index()
        return u[lo:hi, lo:hi].ravel()
    if problem.kind == "darcy":
        return u.ravel()
    raise ValueError(f"unknown problem kind {problem.kind!r}")


def min_max_scale(field: np.ndarray, lo: float = 0.05, hi: float = 1.0) -> np.ndarray:
    """Affine map of [min, max] onto [lo, hi]; constant fields are rejected."""
    field = np.asarray(field, dtype=np.float64)
    fmin, fmax = field.min(), field.max()
    if fmax - fmin < 1e-12:
        raise ConstantFieldError("field range below 1e-12; resample")
    return lo + (field - fmin) * ((hi - lo) / (fmax - fmin))


# ----------------------------------------------------------------------- dataset


@dataclass
class Dataset:
    """In-memory dataset: ground-truth target fields, solved fields, measurements."""

    problem: object
    n: int
    master_seed: int
    arrays: dict[str, np.ndarray]
    attempts: list[int]
    grids: dict[str, dict]

    @property
    def measurements(self) -> np.ndarray:
        return self.arrays["measurements"]

    @property
    def u_fields(self) -> np.ndarray:
        return self.arrays["u"]

    @property
    def s_fields(self) -> np.ndarray:
        return self.arrays["s"]

    def s_flat(self) -> np.ndarray:
        return self.s_fields.reshape(self.n, -1)

    def u_flat(self) -> np.ndarray:
        return self.u_fields.reshape(self.n, -1)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.problem.to_dict(), sort_keys=True).encode())
        h.update(str(self.n).encode())
        for name in sorted(self.arrays):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.arrays[name], dtype="<f8").tobytes())
        return h.hexdigest()

    def subset(self, index) -> "Dataset":
        idx = np.asarray(index)
        return Dataset(self.problem, idx.size, self.master_seed,
                       {k: v[idx] for k, v in self.arrays.items()},
                       [self.attempts[i] for i in idx], self.grids)


def _sample_seed(master_seed: int, index: int, attempt: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([master_seed, index, attempt])


def _generate_sample(problem, master_seed: int, index: int) -> tuple[dict, int]:
    for attempt in range(16):
        seq = _sample_seed(master_seed, index, attempt)
        rng = np.random.default_rng(seq)
        try:
            if problem.kind == "reaction_diffusion":
                gl = line_grid(problem.nx)
                cfg = GrfConfig(length_scale=0.15)
                fac = _grf_factor(cfg, gl)
                u0 = fac @ rng.standard_normal(problem.nx)
                f = fac @ rng.standard_normal(problem.nx)
                grid = space_time_grid(problem.nt, problem.nx, problem.t_final)
                u = solve_reaction_diffusion(grid, u0, f, problem.g,
                                             problem.literal_sign)
                s = f
            elif problem.kind == "helmholtz":
                grid = rectangle_grid(problem.n)
                cfg = GrfConfig(length_scale=0.2)
                f = (_grf_factor(cfg, grid) @ rng.standard_normal(grid.num_nodes)
                     ).reshape(grid.counts)
                u = solve_helmholtz(grid, f, problem.sigma, problem.c)
                s = f
            elif problem.kind == "darcy":
                sample_grid = rectangle_grid(50)
                cfg = GrfConfig(length_scale=0.2)
                raw = (_grf_factor(cfg, sample_grid)
                       @ rng.standard_normal(sample_grid.num_nodes)
                       ).reshape(sample_grid.counts)
                fine = rectangle_grid(problem.fine_n)
                spline = RectBivariateSpline(sample_grid.nodes(0), sample_grid.nodes(1),
                                             raw, kx=3, ky=3)
                sigma_fine = spline(fine.nodes(0), fine.nodes(1))
                sigma_fine = min_max_scale(sigma_fine, problem.s_lo, problem.s_hi)
                u_fine = solve_darcy(fine, sigma_fine, problem.source)
                u = downsample_striding(u_fine, problem.n)
                s = downsample_striding(sigma_fine, problem.n)
            else:
                raise ValueError(f"unknown problem kind {problem.kind!r}")
        except ConstantFieldError:
            continue
        return {"u": u, "s": s,
                "measurements": extract_measurement(problem, u)}, attempt
    raise ConstantFieldError(f"sample {index}: all redraw attempts were constant")


def generate_dataset(problem, n: int, master_seed: int, threads: int = 1) -> Dataset:
    """Generate n samples; embarrassingly parallel with per-sample derived seeds."""
    if n < 1:
        raise ValueError("dataset size must be at least 1")
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(
                lambda i: _generate_sample(problem, master_seed, i), range(n)))
    else:
        results = [_generate_sample(problem, master_seed, i) for i in range(n)]
    arrays = {name: np.stack([r[0][name] for r in results])
              for name in ("u", "s", "measurements")}
    attempts = [r[1] for r in results]
    grids = _grid_descriptions(problem)
    return Dataset(problem, n, master_seed, arrays, attempts, grids)


def _grid_descriptions(problem) -> dict:
    if problem.kind == "reaction_diffusion":
        return {"u": space_time_grid(problem.nt, problem.nx, problem.t_final).to_dict(),
                "s": line_grid(problem.nx).to_dict(), "axis_order": "t,x"}
    if problem.kind == "helmholtz":
        return {"u": rectangle_grid(problem.n).to_dict(),
                "s": rectangle_grid(problem.n).to_dict(), "axis_order": "y,x"}
    return {"u": rectangle_grid(problem.n).to_dict(),
            "s": rectangle_grid(problem.n).to_dict(),
            "fine": rectangle_grid(problem.fine_n).to_dict(), "axis_order": "y,x"}


def save_dataset(ds: Dataset, path, force: bool = False) -> Path:
    """Write manifest.json plus one raw little-endian float64 binary per array."""
    path = Path(path)
    if path.exists() and any(path.iterdir()) and not force:
        raise FileExistsError(f"output directory {path} is not empty (use force)")
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": 1,
        "problem": ds.problem.to_dict(),
        "n": ds.n,
        "master_seed": ds.master_seed,
        "attempts": ds.attempts,
        "grids": ds.grids,
        "arrays": {},
    }
    for name in sorted(ds.arrays):
        arr = np.ascontiguousarray(ds.arrays[name], dtype="<f8")
        fname = f"{name}.f64"
        (path / fname).write_bytes(arr.tobytes())
        manifest["arrays"][name] = {"file": fname, "dtype": "<f8",
                                    "shape": list(arr.shape),
                                    "byte_length": arr.nbytes, "byte_offset": 0}
    (path / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return path


def load_dataset(path) -> Dataset:
    """Bit-exact inverse of save_dataset; size mismatches raise corruption errors."""
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError as e:
        raise DatasetCorruptionError(f"no manifest.json under {path}") from e
    problem = physics.problem_from_dict(manifest["problem"])
    arrays = {}
    for name, meta in manifest["arrays"].items():
        fpath = path / meta["file"]
        if not fpath.exists():
            raise DatasetCorruptionError(f"missing binary {meta['file']}")
        raw = fpath.read_bytes()
        if len(raw) != meta["byte_length"]:
            raise DatasetCorruptionError(
                f"{meta['file']}: expected {meta['byte_length']} bytes, "
                f"found {len(raw)}")
        arrays[name] = np.frombuffer(raw, dtype=meta["dtype"]).reshape(meta["shape"]).copy()
    n = manifest["n"]
    if any(a.shape[0] != n for a in arrays.values()):
        raise DatasetCorruptionError("array sample counts disagree with manifest n")
    return Dataset(problem, n, manifest["master_seed"], arrays,
                   list(manifest["attempts"]), manifest["grids"])


# ----------------------------------------------------------------- audit helpers


def rd_step_residual(problem, u: np.ndarray, f: np.ndarray) -> float:
    """Max algebraic residual of the Crank-Nicolson update equations for a stored
    reaction-diffusion field (should be at solver tolerance for genuine data)."""
    grid = space_time_grid(problem.nt, problem.nx, problem.t_final)
    dt, h = grid.spacing(0), grid.spacing(1)
    sign = -1.0 if problem.literal_sign else 1.0
    lam = sign * dt / (2.0 * h * h)
    g_vals = problem.g(grid.nodes(0))
    worst = 0.0
    for n in range(problem.nt - 1):
        lhs = u[n + 1, 1:-1] - lam * (u[n + 1, 2:] - 2 * u[n + 1, 1:-1] + u[n + 1, :-2])
        rhs = u[n, 1:-1] + lam * (u[n, 2:] - 2 * u[n, 1:-1] + u[n, :-2]) \
            + 0.5 * dt * f[1:-1] * (g_vals[n] + g_vals[n + 1])
        worst = max(worst, float(np.abs(lhs - rhs).max()))
    return worst


def helmholtz_algebraic_residual(problem, u: np.ndarray, f: np.ndarray) -> float:
    A, w = _helmholtz_system(problem.n, problem.sigma, problem.c)
    W2 = np.outer(w, w).ravel()
    b = W2 * f.ravel()
    return float(np.linalg.norm(A @ u.ravel() - b) / max(np.linalg.norm(b), 1e-300))


def regenerate_sample(problem, master_seed: int, index: int) -> dict:
    data, _ = _generate_sample(problem, master_seed, index)
    return data
