"""Network specs, parameter stores, initialization, and forward application.

Two application paths exist for every spec: a graph path (``mlp_apply`` /
``convstack_apply``) that emits autodiff nodes and composes with jets, and a plain
numpy path (``mlp_forward`` / ``convstack_forward``) for inference, where no
gradients are needed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf as _erf

from .autodiff import (
    CapabilityError,
    Graph,
    GraphError,
    Jet2,
    NodeBlock,
    jet_activation,
)

__all__ = [
    "MlpSpec",
    "ConvStackSpec",
    "ParamStore",
    "init_params",
    "param_count",
    "mlp_apply",
    "mlp_forward",
    "convstack_apply",
    "convstack_forward",
]

_ACTIVATIONS = ("tanh", "relu", "gelu")
_OUT_ACTIVATIONS = ("identity", "sigmoid")


@dataclass(frozen=True)
class MlpSpec:
    """Fully-connected stack: ``widths[0]`` inputs through len(widths)-1 linear layers.

    ``activation`` applies to hidden layers only; the final layer gets
    ``out_activation``.  Jet propagation requires a smooth activation (no relu).
    """

    widths: tuple[int, ...]
    activation: str = "tanh"
    out_activation: str = "identity"

    def __post_init__(self):
        if len(self.widths) < 2 or any(w < 1 for w in self.widths):
            raise ValueError(f"MlpSpec needs >=2 positive widths, got {self.widths}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.out_activation not in _OUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.out_activation!r}")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    @property
    def in_width(self) -> int:
        return self.widths[0]

    @property
    def out_width(self) -> int:
        return self.widths[-1]

    @property
    def jet_capable(self) -> bool:
        return self.activation != "relu"

    def segments(self) -> list[tuple[str, int]]:
        out = []
        for l, (n_in, n_out) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            out.append((f"layer{l}/W", n_in * n_out))
            out.append((f"layer{l}/b", n_out))
        return out

    def to_dict(self) -> dict:
        return {"kind": "mlp", "widths": list(self.widths),
                "activation": self.activation, "out_activation": self.out_activation}


@dataclass(frozen=True)
class ConvStackSpec:
    """Conv2d stack with max pooling, flattened into a terminal MLP.

    Convolutions are stride 1 with zero padding ``pad``; pooling windows are
    ``pool`` x ``pool`` with ``pool_stride``.  ``mlp_widths[0]`` must equal the
    flattened feature count after the last pool.
    """

    height: int
    width: int
    channels: tuple[int, ...] = (16, 32, 64)
    kernel: int = 3
    pad: int = 1
    pool: int = 3
    pool_stride: int = 2
    mlp_widths: tuple[int, ...] = ()
    activation: str = "gelu"

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        h, w = self.height, self.width
        for _ in self.channels:
            h, w = self.conv_out(h, w)
            h, w = self.pool_out(h, w)
            if h < 1 or w < 1:
                raise ValueError("spatial dims fell below 1 during pooling")
        flat = h * w * self.channels[-1]
        if not self.mlp_widths:
            object.__setattr__(self, "mlp_widths", (flat, 128, 128))
        object.__setattr__(self, "mlp_widths", tuple(int(w_) for w_ in self.mlp_widths))
        if self.mlp_widths[0] != flat:
            raise ValueError(
                f"terminal MLP input width {self.mlp_widths[0]} != flattened features {flat}")

    def conv_out(self, h: int, w: int) -> tuple[int, int]:
        return h + 2 * self.pad - self.kernel + 1, w + 2 * self.pad - self.kernel + 1

    def pool_out(self, h: int, w: int) -> tuple[int, int]:
        return ((h - self.pool) // self.pool_stride + 1,
                (w - self.pool) // self.pool_stride + 1)

    @property
    def in_width(self) -> int:
        return self.height * self.width

    @property
    def out_width(self) -> int:
        return self.mlp_widths[-1]

    @property
    def terminal_mlp(self) -> MlpSpec:
        return MlpSpec(self.mlp_widths, activation=self.activation)

    def segments(self) -> list[tuple[str, int]]:
        out = []
        c_in = 1
        for l, c_out in enumerate(self.channels):
            out.append((f"conv{l}/W", c_out * c_in * self.kernel * self.kernel))
            out.append((f"conv{l}/b", c_out))
            c_in = c_out
        for name, size in self.terminal_mlp.segments():
            out.append((f"mlp/{name}", size))
        return out

    def to_dict(self) -> dict:
        return {"kind": "convstack", "height": self.height, "width": self.width,
                "channels": list(self.channels), "kernel": self.kernel, "pad": self.pad,
                "pool": self.pool, "pool_stride": self.pool_stride,
                "mlp_widths": list(self.mlp_widths), "activation": self.activation}


def spec_from_dict(d: dict):
    if d["kind"] == "mlp":
        return MlpSpec(tuple(d["widths"]), d["activation"], d["out_activation"])
    if d["kind"] == "convstack":
        return ConvStackSpec(d["height"], d["width"], tuple(d["channels"]), d["kernel"],
                             d["pad"], d["pool"], d["pool_stride"],
                             tuple(d["mlp_widths"]), d["activation"])
    raise ValueError(f"unknown spec kind {d['kind']!r}")


class ParamStore:
    """Flat 64-bit parameter array with named segments partitioning it."""

    def __init__(self, data: np.ndarray, segments: dict[str, tuple[int, int]], seed: int):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.segments = dict(segments)
        self.seed = seed
        total = sum(length for _, length in segments.values())
        if total != self.data.size:
            raise ValueError(f"segments cover {total} slots but store has {self.data.size}")

    def segment(self, name: str) -> np.ndarray:
        off, length = self.segments[name]
        return self.data[off:off + length]

    def segment_range(self, name: str) -> tuple[int, int]:
        return self.segments[name]

    def copy(self) -> "ParamStore":
        return ParamStore(self.data.copy(), self.segments, self.seed)

    def __len__(self) -> int:
        return self.data.size


def param_count(spec) -> int:
    """Exact trainable-parameter count of a spec."""
    return sum(size for _, size in spec.segments())


def _glorot_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_params(spec, seed: int) -> ParamStore:
    """Glorot-uniform weights, zero biases; deterministic per seed."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    segments: dict[str, tuple[int, int]] = {}
    parts = []
    off = 0
    if isinstance(spec, MlpSpec):
        fans = {}
        for l, (n_in, n_out) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
            fans[f"layer{l}/W"] = (n_in, n_out)
    elif isinstance(spec, ConvStackSpec):
        fans = {}
        c_in = 1
        k2 = spec.kernel * spec.kernel
        for l, c_out in enumerate(spec.channels):
            fans[f"conv{l}/W"] = (c_in * k2, c_out * k2)
            c_in = c_out
        m = spec.terminal_mlp
        for l, (n_in, n_out) in enumerate(zip(m.widths[:-1], m.widths[1:])):
            fans[f"mlp/layer{l}/W"] = (n_in, n_out)
    else:
        raise TypeError(f"unknown spec type {type(spec)!r}")
    for name, size in spec.segments():
        if name in fans:
            b = _glorot_bound(*fans[name])
            parts.append(rng.uniform(-b, b, size=size))
        else:
            parts.append(np.zeros(size))
        segments[name] = (off, size)
        off += size
    return ParamStore(np.concatenate(parts) if parts else np.empty(0), segments, seed)


# ------------------------------------------------------------------- graph path


def _layer_param_blocks(graph: Graph, spec, store: ParamStore, prefix: str,
                        widths) -> list[tuple[NodeBlock, NodeBlock]]:
    pblock = graph.params(store)
    out = []
    for l, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
        w_off, w_len = store.segment_range(f"{prefix}layer{l}/W")
        b_off, b_len = store.segment_range(f"{prefix}layer{l}/b")
        W = pblock[w_off:w_off + w_len].reshape(n_out, n_in)
        b = pblock[b_off:b_off + b_len]
        out.append((W, b))
    return out


def mlp_apply(graph: Graph, spec: MlpSpec, store: ParamStore, x, prefix: str = ""):
    """Apply an MLP to graph inputs.

    ``x`` may be a NodeBlock of shape (B, in) or (in,), a list of Nodes, a Jet2
    whose components are NodeBlocks, or a list of scalar Jet2.  The return mirrors
    the input flavor.  Jets require a smooth activation.
    """
    layers = _layer_param_blocks(graph, spec, store, prefix, spec.widths)

    as_list = isinstance(x, (list, tuple))
    if as_list and x and isinstance(x[0], Jet2):
        x = Jet2(_stack(graph, [j.value for j in x]),
                 _stack(graph, [j.d1 for j in x]),
                 _stack(graph, [j.d2 for j in x]) if x[0].d2 is not None else None)
    elif as_list:
        x = _stack(graph, list(x))

    is_jet = isinstance(x, Jet2)
    if is_jet and not spec.jet_capable:
        raise CapabilityError("trunk specs using relu cannot propagate jets")

    h = x
    n_layers = len(layers)
    for l, (W, b) in enumerate(layers):
        last = l == n_layers - 1
        act = spec.out_activation if last else spec.activation
        if is_jet:
            z = Jet2(graph.dense(h.value, W, b), graph.dense(h.d1, W, None),
                     None if h.d2 is None else graph.dense(h.d2, W, None))
            h = z if act == "identity" else jet_activation(act, z)
        else:
            z = graph.dense(h, W, b)
            h = z if act == "identity" else _block_activation(act, z)
    if as_list and not is_jet:
        return h.nodes()
    if as_list and is_jet:
        vals, d1s = h.value.nodes(), h.d1.nodes()
        d2s = h.d2.nodes() if h.d2 is not None else [None] * len(vals)
        return [Jet2(v, d, dd) for v, d, dd in zip(vals, d1s, d2s)]
    return h


def mlp_apply_jets(graph: Graph, spec: MlpSpec, store: ParamStore,
                   points: np.ndarray, directions: dict[int, int],
                   prefix: str = ""):
    """Batched jet propagation: values plus directional derivatives at many points.

    ``points``: (n, d) coordinates (become rebindable const leaves).
    ``directions``: coordinate index -> derivative order (1 or 2).
    Returns ``(coords, value, ders)`` where ``coords`` is the (n, d) input block,
    ``value`` the (n, out) output block and ``ders[j] = (d1, d2_or_None)``.
    The value chain is shared across directions.
    """
    if not spec.jet_capable:
        raise CapabilityError("trunk specs using relu cannot propagate jets")
    pts = np.asarray(points, dtype=np.float64)
    n, d = pts.shape
    if d != spec.in_width:
        raise GraphError(f"points have dim {d}, trunk expects {spec.in_width}")
    for j in directions:
        if not 0 <= j < d:
            raise GraphError(f"direction {j} out of range for input dim {d}")
    layers = _layer_param_blocks(graph, spec, store, prefix, spec.widths)
    coords = graph.const_block(pts)
    zero, one = graph.const(0.0), graph.const(1.0)

    val = coords
    ders: dict[int, tuple] = {}
    for j, order in directions.items():
        seed = np.full((n, d), zero.i, dtype=np.int64)
        seed[:, j] = one.i
        d1 = NodeBlock(graph, seed)
        d2 = NodeBlock(graph, np.full((n, d), zero.i)) if order == 2 else None
        ders[j] = (d1, d2)

    n_layers = len(layers)
    for l, (W, b) in enumerate(layers):
        last = l == n_layers - 1
        act = spec.out_activation if last else spec.activation
        z = graph.dense(val, W, b)
        zd = {j: (graph.dense(d1, W, None),
                  None if d2 is None else graph.dense(d2, W, None))
              for j, (d1, d2) in ders.items()}
        if act == "identity":
            val, ders = z, zd
            continue
        # First/second derivative factors of the activation are shared across
        # directions; same forms as jet_activation.
        need_f2 = any(dd is not None for _, dd in zd.values())
        if act == "tanh":
            t = z.tanh()
            f1 = 1.0 - t.square()
            if need_f2:
                m = t * f1
                f2 = -(m + m)
        elif act == "sigmoid":
            t = z.sigmoid()
            f1 = t * (1.0 - t)
            if need_f2:
                f2 = f1 * (1.0 - (t + t))
        else:  # gelu
            t = z.gelu()
            phi = (-(z.square() * 0.5)).exp() * (1.0 / np.sqrt(2.0 * np.pi))
            Phi = ((z * (1.0 / np.sqrt(2.0))).erf() + 1.0) * 0.5
            f1 = Phi + z * phi
            if need_f2:
                f2 = phi * (2.0 - z.square())
        new = {}
        for j, (d1, d2) in zd.items():
            nd1 = f1 * d1
            nd2 = None if d2 is None else f2 * d1.square() + f1 * d2
            new[j] = (nd1, nd2)
        val, ders = t, new
    return coords, val, ders


def _stack(graph: Graph, nodes) -> NodeBlock:
    return NodeBlock(graph, np.array([n.i for n in nodes]))


def _block_activation(name: str, z: NodeBlock) -> NodeBlock:
    if name == "tanh":
        return z.tanh()
    if name == "relu":
        return z.relu()
    if name == "gelu":
        return z.gelu()
    if name == "sigmoid":
        return z.sigmoid()
    raise ValueError(f"unknown activation {name!r}")


def convstack_apply(graph: Graph, spec: ConvStackSpec, store: ParamStore,
                    grid: NodeBlock) -> NodeBlock:
    """Apply the conv stack to a (B, H, W) or (H, W) NodeBlock of inputs."""
    squeeze = grid.ids.ndim == 2
    ids = grid.ids[None, :, :] if squeeze else grid.ids
    bsz, h, w = ids.shape
    if (h, w) != (spec.height, spec.width):
        raise GraphError(f"conv input {h}x{w} does not match spec "
                         f"{spec.height}x{spec.width}")
    pblock = graph.params(store)
    zero = graph.const(0.0)
    feat = ids[:, None, :, :]  # (B, C=1, H, W)
    c_in = 1
    for l, c_out in enumerate(spec.channels):
        w_off, w_len = store.segment_range(f"conv{l}/W")
        b_off, b_len = store.segment_range(f"conv{l}/b")
        W = pblock.ids[w_off:w_off + w_len].reshape(c_out, c_in * spec.kernel * spec.kernel)
        bvec = pblock.ids[b_off:b_off + b_len]
        cols, oh, ow = _im2col_ids(feat, spec.kernel, spec.pad, zero.i)
        n_pix = bsz * oh * ow
        k = c_in * spec.kernel * spec.kernel
        w_idx = np.broadcast_to(W[None, :, :], (n_pix, c_out, k)).reshape(-1, k)
        x_idx = np.broadcast_to(cols[:, None, :], (n_pix, c_out, k)).reshape(-1, k)
        b_idx = np.broadcast_to(bvec[None, :], (n_pix, c_out)).reshape(-1)
        conv = graph.matvec_block(w_idx, x_idx, b_idx, k)
        act = _block_activation(spec.activation, conv)
        feat = act.ids.reshape(bsz, oh, ow, c_out).transpose(0, 3, 1, 2)
        feat = _maxpool_ids(graph, feat, spec.pool, spec.pool_stride)
        c_in = c_out
    flat = NodeBlock(graph, feat.reshape(bsz, -1))
    out = mlp_apply(graph, spec.terminal_mlp, store, flat, prefix="mlp/")
    return out[0] if squeeze else out


def _im2col_ids(feat: np.ndarray, kernel: int, pad: int, zero_id: int):
    """Gather parent-id windows for a stride-1 conv with zero padding.

    ``feat``: (B, C, H, W) int ids.  Returns (B*OH*OW, C*k*k) ids where padded
    positions reference the shared zero-const node, plus the output spatial dims.
    """
    bsz, c, h, w = feat.shape
    padded = np.full((bsz, c, h + 2 * pad, w + 2 * pad), zero_id, dtype=np.int64)
    padded[:, :, pad:pad + h, pad:pad + w] = feat
    oh = h + 2 * pad - kernel + 1
    ow = w + 2 * pad - kernel + 1
    windows = np.lib.stride_tricks.sliding_window_view(padded, (kernel, kernel), axis=(2, 3))
    # windows: (B, C, OH, OW, k, k) -> (B, OH, OW, C*k*k)
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(bsz, oh, ow, c * kernel * kernel)
    return cols.reshape(-1, c * kernel * kernel), oh, ow


def _maxpool_ids(graph: Graph, feat: np.ndarray, pool: int, stride: int) -> np.ndarray:
    bsz, c, h, w = feat.shape
    oh = (h - pool) // stride + 1
    ow = (w - pool) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(feat, (pool, pool), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride, :, :]
    win = windows.reshape(bsz, c, oh, ow, pool * pool).reshape(-1, pool * pool)
    pooled = graph.max_block(win)
    return pooled.ids.reshape(bsz, c, oh, ow)


# ------------------------------------------------------------------- numpy path


def _np_activation(name: str, z: np.ndarray) -> np.ndarray:
    if name == "identity":
        return z
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "gelu":
        return 0.5 * z * (1.0 + _erf(z / np.sqrt(2.0)))
    if name == "sigmoid":
        return 1.0 / (1.0 + np.exp(-z))
    raise ValueError(f"unknown activation {name!r}")


def mlp_forward(spec: MlpSpec, store: ParamStore, x: np.ndarray,
                prefix: str = "") -> np.ndarray:
    """Plain array forward pass; accepts (..., in) and returns (..., out).

    Contractions use a fixed-order einsum so each row's result is bit-identical
    regardless of which other rows are in the batch (pointwise evaluation).
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    h = x.reshape(1, -1) if squeeze else x.reshape(-1, x.shape[-1])
    n_layers = len(spec.widths) - 1
    for l, (n_in, n_out) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
        W = store.segment(f"{prefix}layer{l}/W").reshape(n_out, n_in)
        b = store.segment(f"{prefix}layer{l}/b")
        z = np.einsum("nk,mk->nm", h, W, optimize=False) + b
        act = spec.out_activation if l == n_layers - 1 else spec.activation
        h = _np_activation(act, z)
    if squeeze:
        return h[0]
    return h.reshape(x.shape[:-1] + (spec.out_width,))


def convstack_forward(spec: ConvStackSpec, store: ParamStore,
                      grids: np.ndarray) -> np.ndarray:
    """Plain array forward pass; accepts (B, H, W) or (H, W)."""
    g = np.asarray(grids, dtype=np.float64)
    squeeze = g.ndim == 2
    if squeeze:
        g = g[None]
    feat = g[:, None, :, :]
    c_in = 1
    for l, c_out in enumerate(spec.channels):
        W = store.segment(f"conv{l}/W").reshape(c_out, c_in, spec.kernel, spec.kernel)
        b = store.segment(f"conv{l}/b")
        feat = _np_conv2d(feat, W, b, spec.pad)
        feat = _np_activation(spec.activation, feat)
        feat = _np_maxpool(feat, spec.pool, spec.pool_stride)
        c_in = c_out
    flat = feat.reshape(feat.shape[0], -1)
    out = mlp_forward(spec.terminal_mlp, store, flat, prefix="mlp/")
    return out[0] if squeeze else out


def _np_conv2d(x: np.ndarray, W: np.ndarray, b: np.ndarray, pad: int) -> np.ndarray:
    bsz, c_in, h, w = x.shape
    c_out, _, k, _ = W.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    # win: (B, C_in, OH, OW, k, k); fixed-order contraction keeps results
    # independent of the batch composition.
    out = np.einsum("bihwkl,oikl->bohw", win, W, optimize=False) \
        + b[None, :, None, None]
    return out


def _np_maxpool(x: np.ndarray, pool: int, stride: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(x, (pool, pool), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, :, :]
    return win.max(axis=(4, 5))
