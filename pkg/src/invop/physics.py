"""Benchmark problem descriptors, PDE residual operators, and loss assembly.

Three inverse problems are covered:

* reaction-diffusion on [0,1]x[0,T]: recover the separable source factor s(x)
  from initial/final-time measurements, with homogeneous Dirichlet walls;
* Helmholtz on [0,1]^2 with zero-flux (Neumann) boundary: recover the source
  s(x,y) from measurements on an internal block;
* Darcy flow on [0,1]^2 with zero Dirichlet boundary: recover the permeability
  s(x,y) from the full pressure field, with s hard-constrained to (lo, hi).

Residual formulas are written over plain arithmetic, so they accept floats,
scalar graph nodes, or node blocks.  ``build_operator_losses`` assembles the full
batched training graph for an operator model; ``build_pinn_losses`` does the same
for a single-instance pair of coordinate networks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nets
from .autodiff import Graph, Jet2, Node, NodeBlock
from .model import OutputTransform, PidionModel, PidionV0Model

__all__ = [
    "ContractError",
    "DomainError",
    "LossWeights",
    "CollocationSet",
    "ReactionDiffusionProblem",
    "HelmholtzProblem",
    "DarcyProblem",
    "reaction_diffusion_problem",
    "helmholtz_problem",
    "darcy_problem",
    "problem_from_dict",
    "interior_residual",
    "boundary_residual",
    "assemble_losses",
    "build_operator_losses",
    "build_pinn_losses",
]

_BOUNDARY_TOL = 1e-12


class ContractError(ValueError):
    """A residual or loss was requested with missing ingredients."""


class DomainError(ValueError):
    """A point lies outside the domain region it was declared to be on."""


G_PRESETS = {
    "one": lambda t: np.ones_like(np.asarray(t, dtype=np.float64)),
    "exp-decay": lambda t: np.exp(-np.asarray(t, dtype=np.float64)),
    "linear-half": lambda t: 1.0 + 0.5 * np.asarray(t, dtype=np.float64),
}


@dataclass(frozen=True)
class LossWeights:
    """(lam_physics, lam_data) = the (lambda_1, lambda_2) loss weights."""

    lam_physics: float = 1.0
    lam_data: float = 100.0

    def __post_init__(self):
        if self.lam_physics < 0 or self.lam_data < 0:
            raise ValueError("loss weights must be non-negative")
        if self.lam_physics + self.lam_data <= 0:
            raise ValueError("at least one loss weight must be positive")


@dataclass
class CollocationSet:
    """Interior/boundary/measurement point sets shared across samples.

    ``boundary_normals`` rows are outward unit normals for Neumann variants and
    may be None for Dirichlet ones.  Measurement values come per sample from the
    dataset; only the point locations live here.
    """

    interior: np.ndarray
    boundary: np.ndarray
    measurement: np.ndarray
    boundary_normals: np.ndarray | None = None
    shared: bool = True

    def __post_init__(self):
        for name in ("interior", "boundary", "measurement"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.ndim != 2 or arr.shape[0] == 0:
                raise ContractError(f"collocation subset {name!r} must be a non-empty "
                                    f"(n, d) array")
            setattr(self, name, arr)

    @property
    def counts(self) -> tuple[int, int, int]:
        return self.interior.shape[0], self.boundary.shape[0], self.measurement.shape[0]


# ---------------------------------------------------------------------- problems


@dataclass(frozen=True)
class ReactionDiffusionProblem:
    """du/dt - Lap(u) = s(x) g(t) on (0,1) x (0,T], u=0 on the walls, u(.,0)=u0.

    ``literal_sign=True`` flips the Laplacian to the unstable +Lap(u) convention in
    both the residual and the forward solver (they must agree).  g must stay
    within positive bounds on [0, T].
    """

    nx: int = 30
    nt: int = 30
    t_final: float = 1.0
    g_preset: str = "one"
    literal_sign: bool = False

    kind = "reaction_diffusion"

    def __post_init__(self):
        if self.g_preset not in G_PRESETS:
            raise ValueError(f"unknown g preset {self.g_preset!r}; "
                             f"choose from {sorted(G_PRESETS)}")
        ts = np.linspace(0.0, self.t_final, 1001)
        gs = self.g(ts)
        if not (gs > 0).all():
            raise ValueError("g(t) must be strictly positive on [0, T]")

    def g(self, t):
        return G_PRESETS[self.g_preset](t)

    @property
    def u_dim(self) -> int:
        return 2  # trunk input (x, t)

    @property
    def s_dim(self) -> int:
        return 1

    @property
    def measurement_width(self) -> int:
        return 2 * self.nx

    def x_nodes(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.nx)

    def t_nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.t_final, self.nt)

    def u_grid_points(self) -> np.ndarray:
        """(nt*nx, 2) points in (x, t), time-major to match the stored field."""
        x, t = self.x_nodes(), self.t_nodes()
        tt, xx = np.meshgrid(t, x, indexing="ij")
        return np.column_stack([xx.ravel(), tt.ravel()])

    def s_grid_points(self) -> np.ndarray:
        return self.x_nodes().reshape(-1, 1)

    def s_interior_index(self) -> np.ndarray:
        return np.arange(1, self.nx - 1)

    def default_collocation(self, interior_stride: int = 1) -> CollocationSet:
        x, t = self.x_nodes(), self.t_nodes()
        xi = x[1:-1]
        ti = t[1:-1]  # open in time: t=0 is measured data, t=T is measured data
        tt, xx = np.meshgrid(ti[::interior_stride], xi, indexing="ij")
        interior = np.column_stack([xx.ravel(), tt.ravel()])
        walls = []
        for xb in (0.0, 1.0):
            walls.append(np.column_stack([np.full(self.nt, xb), t]))
        boundary = np.vstack(walls)
        meas = self.measurement_points()
        return CollocationSet(interior, boundary, meas)

    def measurement_points(self) -> np.ndarray:
        """Points matching the measurement vector layout: u(.,0) then u(.,T)."""
        x = self.x_nodes()
        return np.vstack([np.column_stack([x, np.zeros(self.nx)]),
                          np.column_stack([x, np.full(self.nx, self.t_final)])])

    def to_dict(self) -> dict:
        return {"kind": self.kind, "nx": self.nx, "nt": self.nt,
                "t_final": self.t_final, "g_preset": self.g_preset,
                "literal_sign": self.literal_sign}


@dataclass(frozen=True)
class HelmholtzProblem:
    """-div(sigma grad u) + c u = s on (0,1)^2, sigma du/dnu = flux on the boundary.

    Defaults sigma = c = 1 and flux = 0, with constant coefficients.  Measurements
    are the centered ``meas_n`` x ``meas_n`` block of the ``n`` x ``n`` grid.
    """

    n: int = 50
    meas_n: int = 40
    sigma: float = 1.0
    c: float = 1.0
    flux: float = 0.0

    kind = "helmholtz"

    def __post_init__(self):
        if self.sigma <= 0 or self.c <= 0:
            raise ValueError("sigma and c must be positive")
        if not 0 < self.meas_n <= self.n or (self.n - self.meas_n) % 2:
            raise ValueError("measurement block must fit centered in the grid")

    @property
    def u_dim(self) -> int:
        return 2

    @property
    def s_dim(self) -> int:
        return 2

    @property
    def measurement_width(self) -> int:
        return self.meas_n * self.meas_n

    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n)

    def u_grid_points(self) -> np.ndarray:
        """(n*n, 2) points in (x, y), y-major to match field[y, x] storage."""
        v = self.nodes()
        yy, xx = np.meshgrid(v, v, indexing="ij")
        return np.column_stack([xx.ravel(), yy.ravel()])

    def s_grid_points(self) -> np.ndarray:
        return self.u_grid_points()

    def measurement_index(self) -> tuple[int, int]:
        off = (self.n - self.meas_n) // 2
        return off, off + self.meas_n

    def s_interior_index(self) -> np.ndarray:
        idx = np.arange(self.n * self.n).reshape(self.n, self.n)
        return idx[1:-1, 1:-1].ravel()

    def measurement_points(self) -> np.ndarray:
        lo, hi = self.measurement_index()
        v = self.nodes()[lo:hi]
        yy, xx = np.meshgrid(v, v, indexing="ij")
        return np.column_stack([xx.ravel(), yy.ravel()])

    def default_collocation(self, interior_stride: int = 1) -> CollocationSet:
        v = self.nodes()
        vi = v[1:-1][::interior_stride]
        yy, xx = np.meshgrid(vi, vi, indexing="ij")
        interior = np.column_stack([xx.ravel(), yy.ravel()])
        pts, nrm = [], []
        for xb, nvec in ((0.0, (-1.0, 0.0)), (1.0, (1.0, 0.0))):
            pts.append(np.column_stack([np.full(self.n, xb), v]))
            nrm.append(np.tile(nvec, (self.n, 1)))
        for yb, nvec in ((0.0, (0.0, -1.0)), (1.0, (0.0, 1.0))):
            pts.append(np.column_stack([v, np.full(self.n, yb)]))
            nrm.append(np.tile(nvec, (self.n, 1)))
        return CollocationSet(interior, np.vstack(pts), self.measurement_points(),
                              boundary_normals=np.vstack(nrm))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "n": self.n, "meas_n": self.meas_n,
                "sigma": self.sigma, "c": self.c, "flux": self.flux}


@dataclass(frozen=True)
class DarcyProblem:
    """-div(s grad u) = f on (0,1)^2 with u = 0 on the boundary; s is unknown.

    The source f(x,y) = 100 x(1-x) y(1-y) is fixed.  The permeability is scaled
    into [s_lo, s_hi] during data generation and the model's s readout is
    hard-constrained to the same open interval.
    """

    n: int = 30
    fine_n: int = 117
    s_lo: float = 0.05
    s_hi: float = 1.0

    kind = "darcy"

    def __post_init__(self):
        if not self.s_hi > self.s_lo > 0:
            raise ValueError("need s_hi > s_lo > 0")

    def source(self, x, y):
        return 100.0 * x * (1.0 - x) * y * (1.0 - y)

    @property
    def u_dim(self) -> int:
        return 2

    @property
    def s_dim(self) -> int:
        return 2

    @property
    def measurement_width(self) -> int:
        return self.n * self.n

    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n)

    def u_grid_points(self) -> np.ndarray:
        v = self.nodes()
        yy, xx = np.meshgrid(v, v, indexing="ij")
        return np.column_stack([xx.ravel(), yy.ravel()])

    def s_grid_points(self) -> np.ndarray:
        return self.u_grid_points()

    def measurement_points(self) -> np.ndarray:
        return self.u_grid_points()

    def s_interior_index(self) -> np.ndarray:
        idx = np.arange(self.n * self.n).reshape(self.n, self.n)
        return idx[1:-1, 1:-1].ravel()

    def default_collocation(self, interior_stride: int = 1) -> CollocationSet:
        v = self.nodes()
        vi = v[1:-1][::interior_stride]
        yy, xx = np.meshgrid(vi, vi, indexing="ij")
        interior = np.column_stack([xx.ravel(), yy.ravel()])
        boundary = np.vstack([np.column_stack([v, np.zeros(self.n)]),
                              np.column_stack([v, np.ones(self.n)]),
                              np.column_stack([np.zeros(self.n - 2), v[1:-1]]),
                              np.column_stack([np.ones(self.n - 2), v[1:-1]])])
        return CollocationSet(interior, boundary, self.measurement_points())

    def to_dict(self) -> dict:
        return {"kind": self.kind, "n": self.n, "fine_n": self.fine_n,
                "s_lo": self.s_lo, "s_hi": self.s_hi}


def reaction_diffusion_problem(**kw) -> ReactionDiffusionProblem:
    return ReactionDiffusionProblem(**kw)


def helmholtz_problem(**kw) -> HelmholtzProblem:
    return HelmholtzProblem(**kw)


def darcy_problem(**kw) -> DarcyProblem:
    return DarcyProblem(**kw)


PROBLEM_KINDS = {
    "reaction_diffusion": ReactionDiffusionProblem,
    "helmholtz": HelmholtzProblem,
    "darcy": DarcyProblem,
}


def problem_from_dict(d: dict):
    d = dict(d)
    cls = PROBLEM_KINDS[d.pop("kind")]
    return cls(**d)


def default_s_transform(problem) -> OutputTransform:
    if problem.kind == "darcy":
        return OutputTransform("affine_sigmoid", problem.s_lo, problem.s_hi)
    return OutputTransform("identity")


# --------------------------------------------------------------------- residuals


def rd_interior(u_t_d1, u_x_d2, s_val, g_val, literal_sign=False):
    """Residual of du/dt -+ Lap(u) = s g; default is the -Lap convention."""
    if literal_sign:
        return u_t_d1 + u_x_d2 - s_val * g_val
    return u_t_d1 - u_x_d2 - s_val * g_val


def helmholtz_interior(u_lap, u_val, s_val, sigma=1.0, c=1.0):
    return (-sigma) * u_lap + c * u_val - s_val


def darcy_interior(s_val, s_dx, s_dy, u_dx, u_dy, u_lap, f_val):
    return -(s_dx * u_dx + s_dy * u_dy + s_val * u_lap) - f_val


def interior_residual(problem, u_jets: dict[int, Jet2], s, point) -> Node:
    """Scalar interior residual at one point; jets must carry the derivatives the
    variant requires (missing ones raise a ContractError)."""
    if problem.kind == "reaction_diffusion":
        if 0 not in u_jets or u_jets[0].d2 is None:
            raise ContractError("reaction-diffusion residual needs d2 along x (direction 0)")
        if 1 not in u_jets:
            raise ContractError("reaction-diffusion residual needs d1 along t (direction 1)")
        s_val = s.value if isinstance(s, Jet2) else s
        g_val = float(problem.g(point[1]))
        return rd_interior(u_jets[1].d1, u_jets[0].d2, s_val, g_val,
                           problem.literal_sign)
    if problem.kind == "helmholtz":
        for j in (0, 1):
            if j not in u_jets or u_jets[j].d2 is None:
                raise ContractError("helmholtz residual needs d2 along both coordinates")
        s_val = s.value if isinstance(s, Jet2) else s
        u_lap = u_jets[0].d2 + u_jets[1].d2
        return helmholtz_interior(u_lap, u_jets[0].value, s_val,
                                  problem.sigma, problem.c)
    if problem.kind == "darcy":
        for j in (0, 1):
            if j not in u_jets or u_jets[j].d2 is None:
                raise ContractError("darcy residual needs d2 of u along both coordinates")
        if not isinstance(s, dict) or any(j not in s for j in (0, 1)):
            raise ContractError("darcy residual needs s jets along both coordinates")
        u_lap = u_jets[0].d2 + u_jets[1].d2
        f_val = float(problem.source(point[0], point[1]))
        return darcy_interior(s[0].value, s[0].d1, s[1].d1,
                              u_jets[0].d1, u_jets[1].d1, u_lap, f_val)
    raise ContractError(f"unknown problem kind {problem.kind!r}")


def _on_segment(v: float, lo: float, hi: float) -> bool:
    return lo - _BOUNDARY_TOL <= v <= hi + _BOUNDARY_TOL


def boundary_residual(problem, u, point, normal=None) -> Node:
    """Scalar boundary residual: u for Dirichlet walls, sigma du/dnu - flux for
    Neumann.  The point must lie on the boundary within 1e-12."""
    if problem.kind == "reaction_diffusion":
        x, t = point
        if not (abs(x) <= _BOUNDARY_TOL or abs(x - 1.0) <= _BOUNDARY_TOL) \
                or not _on_segment(t, 0.0, problem.t_final):
            raise DomainError(f"point {point} is not on the lateral boundary")
        return u.value if isinstance(u, Jet2) else u
    x, y = point
    on_x = abs(x) <= _BOUNDARY_TOL or abs(x - 1.0) <= _BOUNDARY_TOL
    on_y = abs(y) <= _BOUNDARY_TOL or abs(y - 1.0) <= _BOUNDARY_TOL
    if not ((on_x and _on_segment(y, 0, 1)) or (on_y and _on_segment(x, 0, 1))):
        raise DomainError(f"point {point} is not on the unit-square boundary")
    if problem.kind == "darcy":
        return u.value if isinstance(u, Jet2) else u
    # Helmholtz flux condition: u must be a dict of jets keyed by direction.
    if normal is None:
        if on_x:
            normal = (-1.0, 0.0) if abs(x) <= _BOUNDARY_TOL else (1.0, 0.0)
        else:
            normal = (0.0, -1.0) if abs(y) <= _BOUNDARY_TOL else (0.0, 1.0)
    if not isinstance(u, dict):
        raise ContractError("neumann residual needs first-derivative jets of u")
    acc = None
    for j, nj in enumerate(normal):
        if nj == 0.0:
            continue
        if j not in u:
            raise ContractError(f"neumann residual needs d1 along direction {j}")
        term = u[j].d1 * float(nj)
        acc = term if acc is None else acc + term
    res = acc * problem.sigma
    if problem.flux != 0.0:
        res = res - problem.flux
    return res


# ----------------------------------------------------------------- loss assembly


@dataclass
class Losses:
    physics: Node
    data: Node
    s: Node
    total: Node


def assemble_losses(graph: Graph, weights: LossWeights,
                    interior: NodeBlock | None = None,
                    boundary: NodeBlock | None = None,
                    data: NodeBlock | None = None,
                    s_misfit: NodeBlock | None = None) -> Losses:
    """Mean-of-squares loss terms and their weighted total.

    L_physics = mean interior residual^2 + mean boundary residual^2;
    L_data    = mean measurement misfit^2;
    L_s       = mean s-label misfit^2 (when labels exist);
    L_total   = lam1 * L_physics + lam2 * (L_data + L_s).

    Absent groups contribute exact-zero constants.  Provided-but-empty blocks are
    contract errors.
    """
    zero = graph.const(0.0)
    for name, block in (("interior", interior), ("boundary", boundary),
                        ("data", data), ("s_misfit", s_misfit)):
        if block is not None and block.size == 0:
            raise ContractError(f"empty collocation subset {name!r}")
    if interior is None and boundary is None and data is None and s_misfit is None:
        raise ContractError("no loss terms to assemble")

    def mean_sq(block):
        return graph.nmean(block.square())

    terms = []
    if interior is not None:
        terms.append(mean_sq(interior))
    if boundary is not None:
        terms.append(mean_sq(boundary))
    if terms:
        l_phys = terms[0] if len(terms) == 1 else terms[0] + terms[1]
    else:
        l_phys = zero
    l_data = mean_sq(data) if data is not None else zero
    l_s = mean_sq(s_misfit) if s_misfit is not None else zero
    total = (l_phys * weights.lam_physics) + (l_data + l_s) * weights.lam_data
    return Losses(l_phys, l_data, l_s, total)


# ------------------------------------------------------- operator training graph


@dataclass
class OperatorLossGraph:
    """A reusable batched loss graph: rebind the batch, eval, backward."""

    graph: Graph
    losses: Losses
    meas_block: NodeBlock
    label_block: NodeBlock | None
    batch_size: int
    s_grid_values: NodeBlock  # s readout over the full s grid (B, n_s)

    def set_batch(self, measurements: np.ndarray,
                  s_labels: np.ndarray | None = None) -> None:
        self.graph.set_values(self.meas_block, measurements)
        if self.label_block is not None:
            if s_labels is None:
                raise ContractError("this loss graph was built with s labels")
            self.graph.set_values(self.label_block, s_labels)


def _transformed_s_jet(transform: OutputTransform, pre: Jet2) -> Jet2:
    return transform.apply_jet(pre)


def build_operator_losses(graph: Graph, problem, model, weights: LossWeights,
                          batch_size: int, mode: str = "unsupervised",
                          colloc: CollocationSet | None = None) -> OperatorLossGraph:
    """Assemble the full training-loss graph for a batch of measurement vectors.

    Physics residuals are built unless ``mode == "supervised-only-baseline"``
    (that mode never constructs residual graphs, so their gradients are exactly
    zero).  ``mode == "supervised"`` adds the s-label misfit.  Collocation points
    default to the data-generation grid nodes, shared across samples.
    """
    if colloc is None:
        colloc = problem.default_collocation()
    supervised = mode in ("supervised", "supervised-only-baseline")
    with_physics = mode != "supervised-only-baseline"
    B = batch_size

    meas = graph.const_block(np.zeros((B, problem.measurement_width)))
    v0 = isinstance(model, PidionV0Model)

    coeff_s = model.graph_branch(graph, "inverse", meas) if not v0 else \
        _v0_branch(graph, model, model.inverse_branch, meas)

    # s readout over the full s grid (used by L_s, diagnostics, and v0's u stage).
    s_grid = problem.s_grid_points()
    inv_trunk_comp = model.inverse_trunk
    s_basis = nets.mlp_apply(graph, inv_trunk_comp.spec, inv_trunk_comp.store,
                             graph.const_block(s_grid))
    s_pre_grid = graph.pairdot(coeff_s, s_basis)
    s_on_grid = model.s_transform.apply_nodes(s_pre_grid)

    if v0:
        if model.forward_branch.spec.in_width != s_grid.shape[0]:
            raise ContractError("v0 forward-branch input width must equal the "
                                "problem's s grid size")
        coeff_u = _v0_branch(graph, model, model.forward_branch, s_on_grid)
    else:
        coeff_u = model.graph_branch(graph, "recon", meas)

    interior_res = None
    boundary_res = None
    if with_physics:
        interior_res, boundary_res = _physics_blocks(
            graph, problem, model, colloc, coeff_u, coeff_s, s_on_grid)

    # Data misfit: u readout at the measurement points against the same input block.
    recon_trunk = model.recon_trunk
    t_meas = nets.mlp_apply(graph, recon_trunk.spec, recon_trunk.store,
                            graph.const_block(colloc.measurement))
    u_meas = graph.pairdot(coeff_u, t_meas)
    data_res = u_meas - meas

    label_block = None
    s_misfit = None
    if supervised:
        label_block = graph.const_block(np.zeros((B, s_grid.shape[0])))
        sel = problem.s_interior_index()
        s_misfit = NodeBlock(graph, s_on_grid.ids[:, sel]) \
            - NodeBlock(graph, label_block.ids[:, sel])

    losses = assemble_losses(graph, weights, interior=interior_res,
                             boundary=boundary_res, data=data_res,
                             s_misfit=s_misfit)
    return OperatorLossGraph(graph, losses, meas, label_block, B, s_on_grid)


def _v0_branch(graph, model, comp, inputs: NodeBlock) -> NodeBlock:
    if isinstance(comp.spec, nets.ConvStackSpec):
        ids = inputs.ids.reshape(inputs.ids.shape[0], comp.spec.height, comp.spec.width)
        return nets.convstack_apply(graph, comp.spec, comp.store, NodeBlock(graph, ids))
    return nets.mlp_apply(graph, comp.spec, comp.store, inputs)


def _physics_blocks(graph, problem, model, colloc, coeff_u, coeff_s, s_on_grid):
    recon = model.recon_trunk
    if problem.kind == "reaction_diffusion":
        pts = colloc.interior
        _, tval, ders = nets.mlp_apply_jets(graph, recon.spec, recon.store, pts,
                                            {0: 2, 1: 1})
        sign = 1.0 if problem.literal_sign else -1.0
        comb = ders[1][0] + sign * ders[0][1]  # d/dt basis -+ d2/dx2 basis
        u_comb = graph.pairdot(coeff_u, comb)
        # s(x) g(t) term: s readout columns looked up per interior point.
        x_cols = np.rint(pts[:, 0] * (problem.nx - 1)).astype(int)
        g_vals = graph.const_block(problem.g(pts[:, 1]))
        s_at = NodeBlock(graph, s_on_grid.ids[:, x_cols])
        interior = u_comb - s_at * NodeBlock(graph, g_vals.ids[None, :])
        t_b = nets.mlp_apply(graph, recon.spec, recon.store,
                             graph.const_block(colloc.boundary))
        boundary = graph.pairdot(coeff_u, t_b)
        return interior, boundary

    if problem.kind == "helmholtz":
        pts = colloc.interior
        _, tval, ders = nets.mlp_apply_jets(graph, recon.spec, recon.store, pts,
                                            {0: 2, 1: 2})
        lap_basis = ders[0][1] + ders[1][1]
        u_lap = graph.pairdot(coeff_u, lap_basis)
        u_val = graph.pairdot(coeff_u, tval)
        s_int = model.s_transform.apply_nodes(graph.pairdot(coeff_s, tval)) \
            if model.shared_trunk else _s_at(graph, model, coeff_s, pts)
        interior = helmholtz_interior(u_lap, u_val, s_int, problem.sigma, problem.c)
        # Flux boundary: one jet order-1 call per normal axis.
        res_parts = []
        for axis in (0, 1):
            mask = colloc.boundary_normals[:, axis] != 0.0
            if not mask.any():
                continue
            bp = colloc.boundary[mask]
            signs = colloc.boundary_normals[mask, axis]
            _, _, bders = nets.mlp_apply_jets(graph, recon.spec, recon.store, bp,
                                              {axis: 1})
            d1 = graph.pairdot(coeff_u, bders[axis][0])
            sgn = graph.const_block(signs * problem.sigma)
            term = d1 * NodeBlock(graph, sgn.ids[None, :])
            if problem.flux != 0.0:
                term = term - problem.flux
            res_parts.append(term)
        boundary = NodeBlock(graph, np.concatenate(
            [t.ids for t in res_parts], axis=1))
        return interior, boundary

    if problem.kind == "darcy":
        pts = colloc.interior
        _, tval, ders = nets.mlp_apply_jets(graph, recon.spec, recon.store, pts,
                                            {0: 2, 1: 2})
        u_dx = graph.pairdot(coeff_u, ders[0][0])
        u_dy = graph.pairdot(coeff_u, ders[1][0])
        u_lap = graph.pairdot(coeff_u, ders[0][1] + ders[1][1])
        if not model.shared_trunk:
            raise ContractError("darcy operator losses assume a shared trunk")
        # s jets through the output transform, sharing the pre-activation value.
        s_pre = graph.pairdot(coeff_s, tval)
        pre_dx = graph.pairdot(coeff_s, ders[0][0])
        pre_dy = graph.pairdot(coeff_s, ders[1][0])
        jx = model.s_transform.apply_jet(Jet2(s_pre, pre_dx))
        jy = model.s_transform.apply_jet(Jet2(s_pre, pre_dy))
        f_vals = problem.source(pts[:, 0], pts[:, 1])
        f_blk = graph.const_block(f_vals)
        interior = darcy_interior(jx.value, jx.d1, jy.d1, u_dx, u_dy, u_lap,
                                  NodeBlock(graph, f_blk.ids[None, :]))
        t_b = nets.mlp_apply(graph, recon.spec, recon.store,
                             graph.const_block(colloc.boundary))
        boundary = graph.pairdot(coeff_u, t_b)
        return interior, boundary

    raise ContractError(f"unknown problem kind {problem.kind!r}")


def _s_at(graph, model, coeff_s, pts):
    comp = model.inverse_trunk
    basis = nets.mlp_apply(graph, comp.spec, comp.store, graph.const_block(pts))
    return model.s_transform.apply_nodes(graph.pairdot(coeff_s, basis))


# ----------------------------------------------------------- single-instance PINN


@dataclass
class PinnLossGraph:
    graph: Graph
    losses: Losses
    meas_block: NodeBlock
    u_comp: object
    s_comp: object

    def set_measurement(self, values: np.ndarray) -> None:
        self.graph.set_values(self.meas_block, values)


def build_pinn_losses(graph: Graph, problem, u_comp, s_comp,
                      weights: LossWeights,
                      colloc: CollocationSet | None = None) -> PinnLossGraph:
    """Loss graph for one problem instance with coordinate networks u(x) and s(x).

    Mirrors the operator losses with the branch/trunk readout replaced by direct
    network evaluation; the measurement misfit couples u to the rebindable
    measurement block.
    """
    if colloc is None:
        colloc = problem.default_collocation()
    pts = colloc.interior
    meas = graph.const_block(np.zeros(colloc.measurement.shape[0]))

    if problem.kind == "reaction_diffusion":
        _, uval, uders = nets.mlp_apply_jets(graph, u_comp.spec, u_comp.store, pts,
                                             {0: 2, 1: 1})
        s_in = pts[:, :1]
        sval = nets.mlp_apply(graph, s_comp.spec, s_comp.store,
                              graph.const_block(s_in))
        g_vals = graph.const_block(problem.g(pts[:, 1]))
        sign = 1.0 if problem.literal_sign else -1.0
        interior = (uders[1][0].reshape(-1) + sign * uders[0][1].reshape(-1)
                    - sval.reshape(-1) * g_vals)
        ub = nets.mlp_apply(graph, u_comp.spec, u_comp.store,
                            graph.const_block(colloc.boundary))
        boundary = ub.reshape(1, -1)
    elif problem.kind == "helmholtz":
        _, uval, uders = nets.mlp_apply_jets(graph, u_comp.spec, u_comp.store, pts,
                                             {0: 2, 1: 2})
        sval = nets.mlp_apply(graph, s_comp.spec, s_comp.store,
                              graph.const_block(pts))
        interior = helmholtz_interior((uders[0][1] + uders[1][1]).reshape(-1),
                                      uval.reshape(-1), sval.reshape(-1),
                                      problem.sigma, problem.c).reshape(1, -1)
        parts = []
        for axis in (0, 1):
            mask = colloc.boundary_normals[:, axis] != 0.0
            if not mask.any():
                continue
            bp = colloc.boundary[mask]
            _, _, bders = nets.mlp_apply_jets(graph, u_comp.spec, u_comp.store, bp,
                                              {axis: 1})
            sgn = graph.const_block(colloc.boundary_normals[mask, axis] * problem.sigma)
            term = bders[axis][0].reshape(-1) * sgn
            if problem.flux != 0.0:
                term = term - problem.flux
            parts.append(term)
        boundary = NodeBlock(graph, np.concatenate(
            [t.ids.ravel() for t in parts])).reshape(1, -1)
    elif problem.kind == "darcy":
        _, uval, uders = nets.mlp_apply_jets(graph, u_comp.spec, u_comp.store, pts,
                                             {0: 2, 1: 2})
        _, spre, sders = nets.mlp_apply_jets(graph, s_comp.spec, s_comp.store, pts,
                                             {0: 1, 1: 1})
        jx = problem_transform(problem).apply_jet(
            Jet2(spre.reshape(-1), sders[0][0].reshape(-1)))
        jy = problem_transform(problem).apply_jet(
            Jet2(spre.reshape(-1), sders[1][0].reshape(-1)))
        f_blk = graph.const_block(problem.source(pts[:, 0], pts[:, 1]))
        interior = darcy_interior(jx.value, jx.d1, jy.d1,
                                  uders[0][0].reshape(-1), uders[1][0].reshape(-1),
                                  (uders[0][1] + uders[1][1]).reshape(-1),
                                  f_blk).reshape(1, -1)
        ub = nets.mlp_apply(graph, u_comp.spec, u_comp.store,
                            graph.const_block(colloc.boundary))
        boundary = ub.reshape(1, -1)
    else:
        raise ContractError(f"unknown problem kind {problem.kind!r}")

    um = nets.mlp_apply(graph, u_comp.spec, u_comp.store,
                        graph.const_block(colloc.measurement))
    data = (um.reshape(-1) - meas).reshape(1, -1)
    losses = assemble_losses(graph, weights, interior=interior, boundary=boundary,
                             data=data)
    return PinnLossGraph(graph, losses, meas, u_comp, s_comp)


def problem_transform(problem) -> OutputTransform:
    return default_s_transform(problem)
