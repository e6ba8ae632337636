"""Branch/trunk model assembly: dot-product readout, output transforms, v0 variant.

The solution field u and the target field s are parameterized as functions of the
coordinate x: a branch network maps the flattened measurement vector to p
coefficients, a trunk network maps x to p basis values, and the prediction is
their dot product (no bias term).  The s readout optionally passes an output
transform (sigmoid, or an affine sigmoid onto a positive range) as a hard
constraint.  Spatial derivatives of u hit only the trunk, since the branch
coefficients are constant in x.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nets
from .autodiff import CapabilityError, Graph, Jet2, NodeBlock

def _readout(coeff: np.ndarray, basis: np.ndarray) -> np.ndarray:
    """Dot-product readout with a batch-independent contraction order."""
    return np.einsum("...k,mk->...m", coeff, basis, optimize=False)


__all__ = [
    "NetComponent",
    "OutputTransform",
    "PidionModel",
    "PidionV0Model",
    "predict_u",
    "predict_s",
    "predict_u_jets",
    "v0_predict",
]


@dataclass
class NetComponent:
    """A spec plus its parameter store; shared components are shared objects."""

    spec: object
    store: nets.ParamStore

    @classmethod
    def init(cls, spec, seed: int) -> "NetComponent":
        return cls(spec, nets.init_params(spec, seed))


@dataclass(frozen=True)
class OutputTransform:
    """Pointwise transform of the s readout: identity, (0,1) sigmoid, or (lo,hi)."""

    kind: str = "identity"
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        if self.kind not in ("identity", "sigmoid", "affine_sigmoid"):
            raise ValueError(f"unknown transform {self.kind!r}")
        if self.kind == "affine_sigmoid" and not self.hi > self.lo:
            raise ValueError("affine_sigmoid needs hi > lo")

    def apply_np(self, z: np.ndarray) -> np.ndarray:
        if self.kind == "identity":
            return z
        s = 1.0 / (1.0 + np.exp(-z))
        if self.kind == "sigmoid":
            return s
        return self.lo + (self.hi - self.lo) * s

    def apply_nodes(self, z):
        if self.kind == "identity":
            return z
        s = z.sigmoid()
        if self.kind == "sigmoid":
            return s
        return s * (self.hi - self.lo) + self.lo

    def apply_jet(self, jet: Jet2) -> Jet2:
        """Chain rule through the transform (sigmoid' = s(1-s), etc.)."""
        if self.kind == "identity":
            return jet
        from .autodiff import jet_activation

        out = jet_activation("sigmoid", jet)
        if self.kind == "sigmoid":
            return out
        scale = self.hi - self.lo
        return Jet2(out.value * scale + self.lo, out.d1 * scale,
                    None if out.d2 is None else out.d2 * scale)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "lo": self.lo, "hi": self.hi}


def transform_from_dict(d: dict) -> OutputTransform:
    return OutputTransform(d["kind"], d["lo"], d["hi"])


class PidionModel:
    """Reconstruction branch + inverse branch + trunk(s) with dot-product readouts.

    The inverse trunk may be the same object as the reconstruction trunk
    (shared-trunk configurations); sharing is by object identity.
    """

    def __init__(self, recon_branch: NetComponent, inverse_branch: NetComponent,
                 recon_trunk: NetComponent, inverse_trunk: NetComponent,
                 s_transform: OutputTransform = OutputTransform()):
        self.recon_branch = recon_branch
        self.inverse_branch = inverse_branch
        self.recon_trunk = recon_trunk
        self.inverse_trunk = inverse_trunk
        self.s_transform = s_transform
        p = recon_trunk.spec.out_width
        for comp in (recon_branch, inverse_branch, recon_trunk, inverse_trunk):
            if comp.spec.out_width != p:
                raise ValueError(
                    f"branch/trunk output widths must all equal p={p}, "
                    f"got {comp.spec.out_width}")
        self.p = p

    @property
    def shared_trunk(self) -> bool:
        return self.inverse_trunk is self.recon_trunk

    def components(self) -> dict[str, NetComponent]:
        out = {"recon_branch": self.recon_branch, "inverse_branch": self.inverse_branch,
               "recon_trunk": self.recon_trunk}
        if not self.shared_trunk:
            out["inverse_trunk"] = self.inverse_trunk
        return out

    def stores(self) -> dict[str, nets.ParamStore]:
        return {name: c.store for name, c in self.components().items()}

    def param_count(self) -> int:
        return sum(nets.param_count(c.spec) for c in self.components().values())

    def to_manifest(self) -> dict:
        return {
            "kind": "pidion",
            "p": self.p,
            "s_transform": self.s_transform.to_dict(),
            "shared_trunk": self.shared_trunk,
            "components": {n: {"spec": c.spec.to_dict(), "seed": c.store.seed}
                           for n, c in self.components().items()},
        }

    @classmethod
    def from_manifest(cls, m: dict) -> "PidionModel":
        comps = {n: NetComponent.init(nets.spec_from_dict(c["spec"]), c["seed"])
                 for n, c in m["components"].items()}
        inverse_trunk = comps["recon_trunk"] if m["shared_trunk"] else comps["inverse_trunk"]
        return cls(comps["recon_branch"], comps["inverse_branch"],
                   comps["recon_trunk"], inverse_trunk,
                   transform_from_dict(m["s_transform"]))

    # ------------------------------------------------------------- numpy paths

    def _check_measurement(self, comp: NetComponent, measurement: np.ndarray):
        if measurement.shape[-1] != comp.spec.in_width:
            raise ValueError(f"measurement length {measurement.shape[-1]} does not "
                             f"match branch input width {comp.spec.in_width}")

    def _branch_np(self, comp: NetComponent, measurement: np.ndarray) -> np.ndarray:
        measurement = np.asarray(measurement, dtype=np.float64)
        self._check_measurement(comp, measurement.reshape(-1)
                                if measurement.ndim == 1 else measurement)
        if isinstance(comp.spec, nets.ConvStackSpec):
            shape = (comp.spec.height, comp.spec.width)
            grids = measurement.reshape(measurement.shape[:-1] + shape)
            return nets.convstack_forward(comp.spec, comp.store, grids)
        return nets.mlp_forward(comp.spec, comp.store, measurement)

    def trunk_basis(self, points: np.ndarray, which: str = "recon") -> np.ndarray:
        comp = self.recon_trunk if which == "recon" else self.inverse_trunk
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != comp.spec.in_width:
            raise ValueError(f"points must be (n, {comp.spec.in_width})")
        return nets.mlp_forward(comp.spec, comp.store, pts)

    def u_coefficients(self, measurement: np.ndarray) -> np.ndarray:
        return self._branch_np(self.recon_branch, measurement)

    def s_coefficients(self, measurement: np.ndarray) -> np.ndarray:
        return self._branch_np(self.inverse_branch, measurement)

    # --------------------------------------------------------------- graph path

    def graph_branch(self, graph: Graph, which: str, meas: NodeBlock) -> NodeBlock:
        comp = self.recon_branch if which == "recon" else self.inverse_branch
        if isinstance(comp.spec, nets.ConvStackSpec):
            ids = meas.ids.reshape(meas.ids.shape[0], comp.spec.height, comp.spec.width)
            return nets.convstack_apply(graph, comp.spec, comp.store,
                                        NodeBlock(graph, ids))
        return nets.mlp_apply(graph, comp.spec, comp.store, meas)

    def graph_trunk(self, graph: Graph, which: str, points: np.ndarray) -> NodeBlock:
        comp = self.recon_trunk if which == "recon" else self.inverse_trunk
        return nets.mlp_apply(graph, comp.spec, comp.store,
                              graph.const_block(np.asarray(points, dtype=np.float64)))

    def graph_trunk_jets(self, graph: Graph, which: str, points: np.ndarray,
                         directions: dict[int, int]):
        comp = self.recon_trunk if which == "recon" else self.inverse_trunk
        if not comp.spec.jet_capable:
            raise CapabilityError("trunk is not jet capable (relu activation)")
        return nets.mlp_apply_jets(graph, comp.spec, comp.store,
                                   np.asarray(points, dtype=np.float64), directions)


def predict_u(model: PidionModel, measurement: np.ndarray,
              points: np.ndarray) -> np.ndarray:
    """u at each point: p-term dot product of branch coefficients with trunk basis.

    Pointwise: the value at a point does not depend on which other points are in
    the batch.  ``measurement`` may be a single vector or a (B, L) batch.
    """
    coeff = model.u_coefficients(measurement)
    basis = model.trunk_basis(points, "recon")
    return _readout(coeff, basis)


def predict_s(model: PidionModel, measurement: np.ndarray,
              points: np.ndarray) -> np.ndarray:
    """s at each point: dot-product readout followed by the output transform."""
    coeff = model.s_coefficients(measurement)
    basis = model.trunk_basis(points, "inverse")
    return model.s_transform.apply_np(_readout(coeff, basis))


def predict_u_jets(model: PidionModel, graph: Graph, measurement: np.ndarray,
                   points: np.ndarray, directions: dict[int, int]) -> dict[int, Jet2]:
    """Jets of u at each point as graph nodes, one bundle per direction.

    d u/dx_j = sum_h b_h d t_h/dx_j (and likewise for second derivatives): the
    derivative passes only through the trunk.  backward() through any returned
    component yields parameter gradients of that derivative.
    """
    measurement = np.asarray(measurement, dtype=np.float64).reshape(1, -1)
    meas = graph.const_block(measurement)
    coeff = model.graph_branch(graph, "recon", meas)
    _, tval, tders = model.graph_trunk_jets(graph, "recon", points, directions)
    uval = graph.pairdot(coeff, tval)[0]
    out = {}
    for j, (d1, d2) in tders.items():
        ud1 = graph.pairdot(coeff, d1)[0]
        ud2 = None if d2 is None else graph.pairdot(coeff, d2)[0]
        out[j] = Jet2(uval, ud1, ud2)
    return out


class PidionV0Model:
    """Variant that feeds the predicted target function into a forward branch.

    The inverse branch + inverse trunk produce s; s sampled on a fixed grid is the
    input of the forward branch, whose coefficients pair with the reconstruction
    trunk to produce u.  The forward branch sees post-transform s samples.
    """

    def __init__(self, inverse_branch: NetComponent, forward_branch: NetComponent,
                 recon_trunk: NetComponent, inverse_trunk: NetComponent,
                 s_grid: np.ndarray,
                 s_transform: OutputTransform = OutputTransform()):
        self.inverse_branch = inverse_branch
        self.forward_branch = forward_branch
        self.recon_trunk = recon_trunk
        self.inverse_trunk = inverse_trunk
        self.s_transform = s_transform
        self.s_grid = np.asarray(s_grid, dtype=np.float64)
        p = recon_trunk.spec.out_width
        for comp in (inverse_branch, forward_branch, recon_trunk, inverse_trunk):
            if comp.spec.out_width != p:
                raise ValueError("all component output widths must equal p")
        self.p = p
        if forward_branch.spec.in_width != self.s_grid.shape[0]:
            raise ValueError(
                f"forward branch input width {forward_branch.spec.in_width} != "
                f"s grid size {self.s_grid.shape[0]}")

    @property
    def shared_trunk(self) -> bool:
        return self.inverse_trunk is self.recon_trunk

    def components(self) -> dict[str, NetComponent]:
        out = {"inverse_branch": self.inverse_branch,
               "forward_branch": self.forward_branch,
               "recon_trunk": self.recon_trunk}
        if not self.shared_trunk:
            out["inverse_trunk"] = self.inverse_trunk
        return out

    def stores(self) -> dict[str, nets.ParamStore]:
        return {name: c.store for name, c in self.components().items()}

    def to_manifest(self) -> dict:
        return {
            "kind": "pidion_v0",
            "p": self.p,
            "s_transform": self.s_transform.to_dict(),
            "shared_trunk": self.shared_trunk,
            "s_grid": self.s_grid.tolist(),
            "components": {n: {"spec": c.spec.to_dict(), "seed": c.store.seed}
                           for n, c in self.components().items()},
        }

    @classmethod
    def from_manifest(cls, m: dict) -> "PidionV0Model":
        comps = {n: NetComponent.init(nets.spec_from_dict(c["spec"]), c["seed"])
                 for n, c in m["components"].items()}
        inverse_trunk = comps["recon_trunk"] if m["shared_trunk"] else comps["inverse_trunk"]
        return cls(comps["inverse_branch"], comps["forward_branch"],
                   comps["recon_trunk"], inverse_trunk,
                   np.asarray(m["s_grid"]), transform_from_dict(m["s_transform"]))

    def _branch_np(self, comp, x):
        if isinstance(comp.spec, nets.ConvStackSpec):
            shape = (comp.spec.height, comp.spec.width)
            return nets.convstack_forward(comp.spec, comp.store,
                                          np.asarray(x).reshape(x.shape[:-1] + shape))
        return nets.mlp_forward(comp.spec, comp.store, x)


def v0_predict(model: PidionV0Model, measurement: np.ndarray, u_points: np.ndarray,
               s_grid_points: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """(u values at u_points, s values on the s grid) for the v0 variant."""
    grid = model.s_grid if s_grid_points is None else np.asarray(s_grid_points)
    if grid.shape[0] != model.forward_branch.spec.in_width:
        raise ValueError("s grid length must equal forward-branch input width")
    measurement = np.asarray(measurement, dtype=np.float64)
    s_coeff = model._branch_np(model.inverse_branch, measurement)
    sg = grid.reshape(-1, model.inverse_trunk.spec.in_width)
    s_basis = nets.mlp_forward(model.inverse_trunk.spec, model.inverse_trunk.store, sg)
    s_vals = model.s_transform.apply_np(_readout(s_coeff, s_basis))
    u_coeff = model._branch_np(model.forward_branch, s_vals)
    u_basis = nets.mlp_forward(model.recon_trunk.spec, model.recon_trunk.store,
                               np.asarray(u_points, dtype=np.float64))
    return _readout(u_coeff, u_basis), s_vals
