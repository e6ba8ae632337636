"""Scalar computation graphs with reverse-mode gradients and order-2 directional jets.

Every node holds one 64-bit float.  Bulk structures (dense layers, coefficient/basis
dot-product readouts) are emitted through block builders that allocate contiguous id
ranges and register execution hints, so evaluation runs as batched array kernels
(GEMM for the hinted stages) while node-level semantics stay scalar: each node still
has an op kind, explicit parent ids and a cached value.

Graphs are built once and reused across optimization steps: rebind leaf values
(parameters from their stores, inputs via ``set_values``), re-evaluate, backward.
A graph instance is single-writer; independent graphs may be evaluated concurrently.
"""

from __future__ import annotations

import math
import os
from typing import Iterable, Sequence

import numpy as np
from scipy.special import erf as _np_erf

__all__ = [
    "Graph",
    "Node",
    "NodeBlock",
    "Jet2",
    "JetBlock",
    "GradientMap",
    "GraphError",
    "EvaluationError",
    "GraphStateError",
    "CapabilityError",
    "jet2_propagate",
    "jet_activation",
]

# Op kinds.  CONST values can be rebound between evaluations; PARAM leaves are bound
# to one slot of a parameter store.  MATVEC is the fused linear-combination op
# (parents = k weights, k inputs, optional bias; aux = k).  MAX backs max-pooling.
(
    OP_CONST,
    OP_PARAM,
    OP_ADD,
    OP_SUB,
    OP_MUL,
    OP_DIV,
    OP_NEG,
    OP_POW,
    OP_MATVEC,
    OP_TANH,
    OP_RELU,
    OP_GELU,
    OP_SIGMOID,
    OP_EXP,
    OP_SQUARE,
    OP_SUM,
    OP_MEAN,
    OP_ERF,
    OP_MAX,
) = range(19)

OP_NAMES = {
    OP_CONST: "const",
    OP_PARAM: "param",
    OP_ADD: "add",
    OP_SUB: "sub",
    OP_MUL: "mul",
    OP_DIV: "div",
    OP_NEG: "neg",
    OP_POW: "power",
    OP_MATVEC: "matvec",
    OP_TANH: "tanh",
    OP_RELU: "relu",
    OP_GELU: "gelu",
    OP_SIGMOID: "sigmoid",
    OP_EXP: "exp",
    OP_SQUARE: "square",
    OP_SUM: "sum",
    OP_MEAN: "mean",
    OP_ERF: "erf",
    OP_MAX: "max",
}

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_TWO_OVER_SQRT_PI = 2.0 / math.sqrt(math.pi)


class GraphError(Exception):
    """Base class for graph construction/evaluation failures."""


class EvaluationError(GraphError):
    """A forward pass produced a non-finite intermediate value."""


class GraphStateError(GraphError):
    """Operation attempted in the wrong lifecycle state (e.g. backward before eval)."""


class CapabilityError(GraphError):
    """An op was used in a context that does not support it (e.g. relu inside a jet)."""


def _fault_active(name: str) -> bool:
    # Test hook: INVOP_FAULT=tanh-deriv (comma separated) perturbs the named
    # derivative so audit suites can prove they detect broken gradients.
    faults = os.environ.get("INVOP_FAULT", "")
    return bool(faults) and name in faults.split(",")


class Node:
    """Handle to one scalar node. Arithmetic builds new nodes in the same graph."""

    __slots__ = ("graph", "i")

    def __init__(self, graph: "Graph", i: int):
        self.graph = graph
        self.i = int(i)

    def _coerce(self, other) -> "Node":
        if isinstance(other, Node):
            if other.graph is not self.graph:
                raise GraphError("nodes belong to different graphs")
            return other
        return self.graph.const(float(other))

    def __add__(self, other):
        return self.graph._binary(OP_ADD, self, self._coerce(other))

    def __radd__(self, other):
        return self._coerce(other) + self

    def __sub__(self, other):
        return self.graph._binary(OP_SUB, self, self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __mul__(self, other):
        return self.graph._binary(OP_MUL, self, self._coerce(other))

    def __rmul__(self, other):
        return self * other

    def __truediv__(self, other):
        return self.graph._binary(OP_DIV, self, self._coerce(other))

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def __neg__(self):
        return self.graph._unary(OP_NEG, self)

    def __pow__(self, exponent: float):
        return self.graph.power(self, exponent)

    def tanh(self):
        return self.graph._unary(OP_TANH, self)

    def relu(self):
        return self.graph._unary(OP_RELU, self)

    def gelu(self):
        return self.graph._unary(OP_GELU, self)

    def sigmoid(self):
        return self.graph._unary(OP_SIGMOID, self)

    def exp(self):
        return self.graph._unary(OP_EXP, self)

    def square(self):
        return self.graph._unary(OP_SQUARE, self)

    def erf(self):
        return self.graph._unary(OP_ERF, self)

    @property
    def value(self) -> float:
        return self.graph.value(self)

    def __repr__(self):
        return f"Node({self.i}, op={self.graph.op_name(self.i)})"


class NodeBlock:
    """An array of node ids sharing one graph; elementwise arithmetic on blocks.

    Reindexing (``block[...]``, ``.reshape``) only rearranges references, it never
    allocates nodes.  Mixed operands broadcast: floats become shared const nodes.
    """

    __slots__ = ("graph", "ids")

    def __init__(self, graph: "Graph", ids: np.ndarray):
        self.graph = graph
        self.ids = np.asarray(ids, dtype=np.int64)

    @property
    def shape(self):
        return self.ids.shape

    @property
    def size(self):
        return self.ids.size

    def reshape(self, *shape) -> "NodeBlock":
        return NodeBlock(self.graph, self.ids.reshape(*shape))

    def __getitem__(self, key) -> "NodeBlock":
        return NodeBlock(self.graph, np.asarray(self.ids[key]))

    def node(self, *index) -> Node:
        return Node(self.graph, int(self.ids[index]))

    def nodes(self) -> list[Node]:
        return [Node(self.graph, int(i)) for i in self.ids.ravel()]

    def _coerce_ids(self, other) -> np.ndarray:
        if isinstance(other, NodeBlock):
            if other.graph is not self.graph:
                raise GraphError("blocks belong to different graphs")
            return other.ids
        if isinstance(other, Node):
            return np.asarray(other.i, dtype=np.int64)
        return np.asarray(self.graph.const(float(other)).i, dtype=np.int64)

    def _binary(self, op: int, other, reverse: bool = False) -> "NodeBlock":
        a, b = self.ids, self._coerce_ids(other)
        if reverse:
            a, b = b, a
        return self.graph.binary_block(op, a, b)

    def __add__(self, other):
        return self._binary(OP_ADD, other)

    def __radd__(self, other):
        return self._binary(OP_ADD, other, reverse=True)

    def __sub__(self, other):
        return self._binary(OP_SUB, other)

    def __rsub__(self, other):
        return self._binary(OP_SUB, other, reverse=True)

    def __mul__(self, other):
        return self._binary(OP_MUL, other)

    def __rmul__(self, other):
        return self._binary(OP_MUL, other, reverse=True)

    def __truediv__(self, other):
        return self._binary(OP_DIV, other)

    def __rtruediv__(self, other):
        return self._binary(OP_DIV, other, reverse=True)

    def __neg__(self):
        return self.graph.unary_block(OP_NEG, self.ids)

    def tanh(self):
        return self.graph.unary_block(OP_TANH, self.ids)

    def relu(self):
        return self.graph.unary_block(OP_RELU, self.ids)

    def gelu(self):
        return self.graph.unary_block(OP_GELU, self.ids)

    def sigmoid(self):
        return self.graph.unary_block(OP_SIGMOID, self.ids)

    def exp(self):
        return self.graph.unary_block(OP_EXP, self.ids)

    def square(self):
        return self.graph.unary_block(OP_SQUARE, self.ids)

    def erf(self):
        return self.graph.unary_block(OP_ERF, self.ids)

    def values(self) -> np.ndarray:
        return self.graph.values(self)


class GradientMap:
    """Gradients of one scalar root with respect to every registered store slot."""

    def __init__(self, per_store: dict[int, tuple[object, np.ndarray]]):
        self._per_store = per_store

    def wrt(self, store) -> np.ndarray:
        key = id(store)
        if key not in self._per_store:
            raise KeyError("store not registered in this graph")
        return self._per_store[key][1]

    def stores(self):
        return [s for s, _ in self._per_store.values()]

    def items(self):
        return [(s, g) for s, g in self._per_store.values()]


class _Stage:
    __slots__ = (
        "kind", "op", "start", "end", "parents", "aux", "has_bias", "k",
        "x_idx", "w_idx", "b_idx", "out_shape", "plans", "x_plan", "w_plan",
        "b_plan", "needs_any",
    )

    def __init__(self, kind, op, start, end):
        self.kind = kind
        self.op = op
        self.start = start
        self.end = end
        self.parents = None
        self.aux = None
        self.has_bias = False
        self.k = 0
        self.x_idx = None
        self.w_idx = None
        self.b_idx = None
        self.out_shape = None
        self.plans = None
        self.x_plan = None
        self.w_plan = None
        self.b_plan = None
        self.needs_any = False


class _ScatterPlan:
    """Precompiled accumulation of per-edge contributions into the grad buffer."""

    __slots__ = ("sel", "direct", "idx", "uniq", "inv", "empty")

    def __init__(self, targets: np.ndarray, needs: np.ndarray):
        t = targets.ravel()
        mask = needs[t]
        self.empty = not mask.any()
        if self.empty:
            return
        self.sel = None if mask.all() else np.flatnonzero(mask)
        tf = t if self.sel is None else t[self.sel]
        uniq, inv = np.unique(tf, return_inverse=True)
        if uniq.size == tf.size:
            self.direct = True
            self.idx = tf
            self.uniq = self.inv = None
        else:
            self.direct = False
            self.uniq = uniq
            self.inv = inv
            self.idx = None

    def apply(self, grad: np.ndarray, contrib: np.ndarray) -> None:
        if self.empty:
            return
        c = contrib.ravel()
        if self.sel is not None:
            c = c[self.sel]
        if self.direct:
            grad[self.idx] += c
        else:
            grad[self.uniq] += np.bincount(self.inv, weights=c, minlength=self.uniq.size)


class Graph:
    """Append-only scalar graph with compiled batched evaluation."""

    def __init__(self):
        self._op_chunks: list[np.ndarray] = []
        self._val_chunks: list[np.ndarray] = []
        self._aux_chunks: list[np.ndarray] = []
        self._pcnt_chunks: list[np.ndarray] = []
        self._pflat_chunks: list[np.ndarray] = []
        self._n = 0
        self._ops = np.empty(0, dtype=np.int8)
        self._vals = np.empty(0, dtype=np.float64)
        self._aux = np.empty(0, dtype=np.float64)
        self._pcnt = np.empty(0, dtype=np.int64)
        self._poff = np.zeros(1, dtype=np.int64)
        self._pflat = np.empty(0, dtype=np.int32)
        self._hints: dict[int, tuple] = {}
        self._const_cache: dict[float, int] = {}
        self._stores: dict[int, tuple[object, np.ndarray]] = {}
        self._stages: list[_Stage] | None = None
        self._needs_grad: np.ndarray | None = None
        self._grad: np.ndarray | None = None
        self._evaluated = False

    # ------------------------------------------------------------------ building

    @property
    def num_nodes(self) -> int:
        return self._n

    def _invalidate(self):
        self._stages = None
        self._evaluated = False

    def _emit_block(self, op: int, n: int, values: np.ndarray | None,
                    pflat: np.ndarray | None, pcnt: np.ndarray | int,
                    aux: np.ndarray | float = 0.0) -> int:
        start = self._n
        self._op_chunks.append(np.full(n, op, dtype=np.int8))
        if values is None:
            values = np.full(n, np.nan, dtype=np.float64)
        self._val_chunks.append(np.ascontiguousarray(values, dtype=np.float64).ravel())
        self._aux_chunks.append(np.broadcast_to(np.asarray(aux, dtype=np.float64), (n,)).copy()
                                if np.ndim(aux) == 0 else np.asarray(aux, dtype=np.float64).ravel())
        cnt = (np.full(n, pcnt, dtype=np.int64) if np.ndim(pcnt) == 0
               else np.asarray(pcnt, dtype=np.int64).ravel())
        self._pcnt_chunks.append(cnt)
        if pflat is None:
            pflat = np.empty(0, dtype=np.int32)
        self._pflat_chunks.append(np.ascontiguousarray(pflat, dtype=np.int32).ravel())
        self._n += n
        self._invalidate()
        return start

    def const(self, x: float) -> Node:
        x = float(x)
        cached = self._const_cache.get(x)
        if cached is not None:
            return Node(self, cached)
        i = self._emit_block(OP_CONST, 1, np.array([x]), None, 0)
        self._const_cache[x] = i
        return Node(self, i)

    def const_block(self, values: np.ndarray) -> NodeBlock:
        """A block of rebindable leaf values (see ``set_values``)."""
        arr = np.asarray(values, dtype=np.float64)
        start = self._emit_block(OP_CONST, arr.size, arr, None, 0)
        return NodeBlock(self, np.arange(start, start + arr.size).reshape(arr.shape))

    def params(self, store) -> NodeBlock:
        """Parameter-leaf block for every slot of ``store`` (one node per slot)."""
        key = id(store)
        if key in self._stores:
            return NodeBlock(self, self._stores[key][1].copy())
        n = store.data.size
        start = self._emit_block(OP_PARAM, n, store.data, None, 0)
        ids = np.arange(start, start + n)
        self._stores[key] = (store, ids)
        return NodeBlock(self, ids)

    def _unary(self, op: int, a: Node) -> Node:
        i = self._emit_block(op, 1, None, np.array([a.i]), 1)
        return Node(self, i)

    def _binary(self, op: int, a: Node, b: Node) -> Node:
        i = self._emit_block(op, 1, None, np.array([a.i, b.i]), 2)
        return Node(self, i)

    def power(self, a: Node, exponent: float) -> Node:
        i = self._emit_block(OP_POW, 1, None, np.array([a.i]), 1, float(exponent))
        return Node(self, i)

    def matvec(self, weights: Sequence[Node], inputs: Sequence[Node],
               bias: Node | None = None) -> Node:
        """Fused linear combination: sum_i w_i * x_i (+ b)."""
        if len(weights) != len(inputs):
            raise GraphError("matvec weight/input lengths differ")
        k = len(weights)
        parents = [w.i for w in weights] + [x.i for x in inputs]
        if bias is not None:
            parents.append(bias.i)
        i = self._emit_block(OP_MATVEC, 1, None, np.array(parents),
                             len(parents), float(k))
        return Node(self, i)

    def nsum(self, items) -> Node:
        ids = items.ids.ravel() if isinstance(items, NodeBlock) else np.array([n.i for n in items])
        i = self._emit_block(OP_SUM, 1, None, ids, ids.size)
        return Node(self, i)

    def nmean(self, items) -> Node:
        ids = items.ids.ravel() if isinstance(items, NodeBlock) else np.array([n.i for n in items])
        if ids.size == 0:
            raise GraphError("mean over empty set")
        i = self._emit_block(OP_MEAN, 1, None, ids, ids.size)
        return Node(self, i)

    def nmax(self, items) -> Node:
        ids = items.ids.ravel() if isinstance(items, NodeBlock) else np.array([n.i for n in items])
        i = self._emit_block(OP_MAX, 1, None, ids, ids.size)
        return Node(self, i)

    def unary_block(self, op: int, ids: np.ndarray) -> NodeBlock:
        ids = np.asarray(ids, dtype=np.int64)
        start = self._emit_block(op, ids.size, None, ids, 1)
        return NodeBlock(self, np.arange(start, start + ids.size).reshape(ids.shape))

    def binary_block(self, op: int, a_ids: np.ndarray, b_ids: np.ndarray) -> NodeBlock:
        a, b = np.broadcast_arrays(np.asarray(a_ids, np.int64), np.asarray(b_ids, np.int64))
        pf = np.empty((a.size, 2), dtype=np.int32)
        pf[:, 0] = a.ravel()
        pf[:, 1] = b.ravel()
        start = self._emit_block(op, a.size, None, pf, 2)
        return NodeBlock(self, np.arange(start, start + a.size).reshape(a.shape))

    def pow_block(self, a: NodeBlock, exponent: float) -> NodeBlock:
        ids = a.ids
        start = self._emit_block(OP_POW, ids.size, None, ids, 1, float(exponent))
        return NodeBlock(self, np.arange(start, start + ids.size).reshape(ids.shape))

    def max_block(self, window_ids: np.ndarray) -> NodeBlock:
        """One MAX node per row of ``window_ids`` (n, w)."""
        w = np.asarray(window_ids, dtype=np.int64)
        n, width = w.shape
        start = self._emit_block(OP_MAX, n, None, w.astype(np.int32), width)
        return NodeBlock(self, np.arange(start, start + n))

    def matvec_block(self, w_idx: np.ndarray, x_idx: np.ndarray,
                     b_idx: np.ndarray | None, k: int) -> NodeBlock:
        """Rows of fused linear combinations with per-node index matrices.

        ``w_idx``/``x_idx``: (n, k) parent ids; ``b_idx``: (n,) or None.  Used for
        convolution windows where no GEMM hint applies.
        """
        w_idx = np.asarray(w_idx, np.int64)
        x_idx = np.asarray(x_idx, np.int64)
        n = w_idx.shape[0]
        cols = 2 * k + (1 if b_idx is not None else 0)
        pf = np.empty((n, cols), dtype=np.int32)
        pf[:, :k] = w_idx
        pf[:, k:2 * k] = x_idx
        if b_idx is not None:
            pf[:, 2 * k] = np.asarray(b_idx, np.int64)
        start = self._emit_block(OP_MATVEC, n, None, pf, cols, float(k))
        return NodeBlock(self, np.arange(start, start + n))

    def dense(self, x: NodeBlock, w: NodeBlock, b: NodeBlock | None) -> NodeBlock:
        """Dense layer over a batch: out[i, j] = sum_k W[j, k] x[i, k] (+ b[j]).

        ``x``: (B, n) or (n,); ``w``: (m, n); ``b``: (m,) or None.  Emits B*m matvec
        nodes and registers a GEMM execution hint.
        """
        squeeze = x.ids.ndim == 1
        x_idx = x.ids.reshape(1, -1) if squeeze else x.ids
        w_idx = w.ids
        m, k = w_idx.shape
        bsz = x_idx.shape[0]
        if x_idx.shape[1] != k:
            raise GraphError(f"dense shape mismatch: x has {x_idx.shape[1]} features, W expects {k}")
        b_idx = None if b is None else b.ids.ravel()
        cols = 2 * k + (1 if b_idx is not None else 0)
        pf = np.empty((bsz, m, cols), dtype=np.int32)
        pf[:, :, :k] = w_idx[None, :, :]
        pf[:, :, k:2 * k] = x_idx[:, None, :]
        if b_idx is not None:
            pf[:, :, 2 * k] = b_idx[None, :]
        start = self._emit_block(OP_MATVEC, bsz * m, None, pf, cols, float(k))
        self._hints[start] = ("dense", bsz * m, x_idx.copy(), w_idx.copy(),
                              None if b_idx is None else b_idx.copy())
        out = np.arange(start, start + bsz * m).reshape(bsz, m)
        return NodeBlock(self, out[0] if squeeze else out)

    def pairdot(self, u: NodeBlock, v: NodeBlock) -> NodeBlock:
        """All-pairs dot products: out[i, k] = sum_h u[i, h] * v[k, h]."""
        u_idx, v_idx = u.ids, v.ids
        ni, p = u_idx.shape
        nk, p2 = v_idx.shape
        if p != p2:
            raise GraphError("pairdot inner dimensions differ")
        pf = np.empty((ni, nk, 2 * p), dtype=np.int32)
        pf[:, :, :p] = u_idx[:, None, :]
        pf[:, :, p:] = v_idx[None, :, :]
        start = self._emit_block(OP_MATVEC, ni * nk, None, pf, 2 * p, float(p))
        self._hints[start] = ("pairdot", ni * nk, u_idx.copy(), v_idx.copy())
        return NodeBlock(self, np.arange(start, start + ni * nk).reshape(ni, nk))

    # ------------------------------------------------------------- consolidation

    def _consolidate(self):
        if self._op_chunks:
            self._ops = np.concatenate([self._ops] + self._op_chunks)
            self._vals = np.concatenate([self._vals] + self._val_chunks)
            self._aux = np.concatenate([self._aux] + self._aux_chunks)
            pcnt_new = np.concatenate([self._pcnt] + self._pcnt_chunks)
            self._pflat = np.concatenate([self._pflat] + self._pflat_chunks)
            self._pcnt = pcnt_new
            self._poff = np.concatenate([[0], np.cumsum(pcnt_new)])
            self._op_chunks = []
            self._val_chunks = []
            self._aux_chunks = []
            self._pcnt_chunks = []
            self._pflat_chunks = []

    def parents(self, node: Node | int) -> np.ndarray:
        self._consolidate()
        i = node.i if isinstance(node, Node) else int(node)
        return self._pflat[self._poff[i]:self._poff[i + 1]].copy()

    def op_name(self, i: int) -> str:
        self._consolidate()
        return OP_NAMES[int(self._ops[i])]

    def set_values(self, block: NodeBlock, values: np.ndarray) -> None:
        """Rebind the values of constant leaf nodes (e.g. per-batch inputs)."""
        self._consolidate()
        ids = block.ids.ravel()
        if not np.all(self._ops[ids] == OP_CONST):
            raise GraphError("set_values target must be constant leaf nodes")
        arr = np.asarray(values, dtype=np.float64).ravel()
        if arr.size != ids.size:
            raise GraphError(f"set_values size mismatch: {arr.size} vs {ids.size}")
        self._vals[ids] = arr
        self._evaluated = False

    # ---------------------------------------------------------------- compiling

    def _compile(self):
        self._consolidate()
        n = self._n
        ops, pcnt = self._ops, self._pcnt
        stages: list[_Stage] = []
        needs = np.zeros(n, dtype=bool)
        for _, ids in self._stores.values():
            needs[ids] = True

        i = 0
        while i < n:
            op = int(ops[i])
            if op in (OP_CONST, OP_PARAM):
                j = i + 1
                while j < n and ops[j] == op and j not in self._hints:
                    j += 1
                i = j
                continue
            hint = self._hints.get(i)
            if hint is not None:
                stage = self._compile_hint(i, hint, needs)
                stages.append(stage)
                i = stage.end
                continue
            cnt = pcnt[i]
            aux0 = self._aux[i]
            j = i + 1
            while (j < n and ops[j] == op and pcnt[j] == cnt
                   and j not in self._hints
                   and (op != OP_POW or self._aux[j] == aux0)):
                j += 1
            for stage in self._compile_generic(op, i, j, needs):
                stages.append(stage)
            i = j

        self._stages = stages
        self._needs_grad = needs
        if self._vals.size != n:
            raise GraphError("internal: value buffer size mismatch")
        self._grad = np.zeros(n, dtype=np.float64)

    def _compile_generic(self, op, start, end, needs) -> list[_Stage]:
        cnt = int(self._pcnt[start])
        block = self._pflat[self._poff[start]:self._poff[end]].reshape(end - start, cnt)
        # Split where a node consumes an earlier node of the same run, so stage-order
        # forward/backward stays topologically valid.
        out: list[_Stage] = []
        maxpar = block.max(axis=1) if cnt > 0 else np.full(end - start, -1)
        s = 0
        total = end - start
        while s < total:
            if maxpar[s:].max(initial=-1) < start + s:
                e = total
            else:
                e = s + 1
                while e < total and maxpar[e] < start + s:
                    e += 1
            st = _Stage("generic", op, start + s, start + e)
            st.parents = block[s:e]
            st.k = int(self._aux[start + s]) if op == OP_MATVEC else 0
            st.has_bias = op == OP_MATVEC and cnt == 2 * st.k + 1
            if op == OP_POW:
                st.aux = self._aux[start + s:start + e]
            ng_out = needs[st.parents].any(axis=1) if cnt > 0 else np.zeros(e - s, bool)
            needs[st.start:st.end] = ng_out
            st.needs_any = bool(ng_out.any())
            if st.needs_any:
                st.plans = self._column_plans(op, st, needs)
            out.append(st)
            s = e
        return out

    def _column_plans(self, op, st: _Stage, needs):
        P = st.parents
        if op in (OP_SUM, OP_MEAN, OP_MAX):
            return [_ScatterPlan(P, needs)]
        if op == OP_MATVEC:
            k = st.k
            plans = [_ScatterPlan(P[:, :k], needs), _ScatterPlan(P[:, k:2 * k], needs)]
            if st.has_bias:
                plans.append(_ScatterPlan(P[:, 2 * k], needs))
            return plans
        return [_ScatterPlan(P[:, c], needs) for c in range(P.shape[1])]

    def _compile_hint(self, start, hint, needs) -> _Stage:
        kind = hint[0]
        count = hint[1]
        st = _Stage(kind, OP_MATVEC, start, start + count)
        if kind == "dense":
            _, _, x_idx, w_idx, b_idx = hint
            st.x_idx, st.w_idx, st.b_idx = x_idx, w_idx, b_idx
            st.out_shape = (x_idx.shape[0], w_idx.shape[0])
            ng = needs[x_idx].any(axis=1)[:, None] | needs[w_idx].any(axis=1)[None, :]
            if b_idx is not None:
                ng = ng | needs[b_idx][None, :]
        else:
            _, _, u_idx, v_idx = hint
            st.x_idx, st.w_idx = u_idx, v_idx
            st.out_shape = (u_idx.shape[0], v_idx.shape[0])
            ng = needs[u_idx].any(axis=1)[:, None] | needs[v_idx].any(axis=1)[None, :]
        needs[st.start:st.end] = ng.ravel()
        st.needs_any = bool(ng.any())
        if st.needs_any:
            st.x_plan = _ScatterPlan(st.x_idx, needs)
            st.w_plan = _ScatterPlan(st.w_idx, needs)
            if kind == "dense" and st.b_idx is not None:
                st.b_plan = _ScatterPlan(st.b_idx, needs)
        return st

    # --------------------------------------------------------------- evaluation

    def eval(self) -> None:
        """Forward pass: bind parameter leaves from their stores, run all stages."""
        if self._stages is None:
            self._compile()
        v = self._vals
        for store, ids in self._stores.values():
            v[ids] = store.data
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            for st in self._stages:
                if st.kind == "dense":
                    out = v[st.x_idx] @ v[st.w_idx].T
                    if st.b_idx is not None:
                        out += v[st.b_idx]
                    v[st.start:st.end] = out.ravel()
                elif st.kind == "pairdot":
                    v[st.start:st.end] = (v[st.x_idx] @ v[st.w_idx].T).ravel()
                else:
                    v[st.start:st.end] = self._eval_generic(st, v)
        if not np.isfinite(v).all():
            bad = int(np.flatnonzero(~np.isfinite(v))[0])
            raise EvaluationError(
                f"non-finite value at node {bad} (op {OP_NAMES[int(self._ops[bad])]}, "
                f"value {v[bad]})")
        self._evaluated = True

    def _eval_generic(self, st: _Stage, v: np.ndarray) -> np.ndarray:
        op = st.op
        P = st.parents
        if op == OP_ADD:
            return v[P[:, 0]] + v[P[:, 1]]
        if op == OP_SUB:
            return v[P[:, 0]] - v[P[:, 1]]
        if op == OP_MUL:
            return v[P[:, 0]] * v[P[:, 1]]
        if op == OP_DIV:
            return v[P[:, 0]] / v[P[:, 1]]
        if op == OP_NEG:
            return -v[P[:, 0]]
        if op == OP_POW:
            return v[P[:, 0]] ** st.aux
        if op == OP_TANH:
            return np.tanh(v[P[:, 0]])
        if op == OP_RELU:
            return np.maximum(v[P[:, 0]], 0.0)
        if op == OP_GELU:
            x = v[P[:, 0]]
            return 0.5 * x * (1.0 + _np_erf(x * _INV_SQRT2))
        if op == OP_SIGMOID:
            x = v[P[:, 0]]
            return 1.0 / (1.0 + np.exp(-x))
        if op == OP_EXP:
            return np.exp(v[P[:, 0]])
        if op == OP_SQUARE:
            x = v[P[:, 0]]
            return x * x
        if op == OP_ERF:
            return _np_erf(v[P[:, 0]])
        if op == OP_MATVEC:
            Pv = v[P]
            k = st.k
            out = np.einsum("ij,ij->i", Pv[:, :k], Pv[:, k:2 * k])
            if st.has_bias:
                out = out + Pv[:, 2 * k]
            return out
        if op == OP_SUM:
            return v[P].sum(axis=1)
        if op == OP_MEAN:
            return v[P].mean(axis=1)
        if op == OP_MAX:
            return v[P].max(axis=1)
        raise GraphError(f"unknown op {op}")

    def value(self, node: Node) -> float:
        if not self._evaluated:
            raise GraphStateError("graph has not been evaluated")
        return float(self._vals[node.i])

    def values(self, block: NodeBlock) -> np.ndarray:
        if not self._evaluated:
            raise GraphStateError("graph has not been evaluated")
        return self._vals[block.ids].copy()

    # ----------------------------------------------------------------- backward

    def backward(self, root: Node) -> GradientMap:
        """Reverse pass from a scalar root to every registered parameter store.

        Untouched slots get exact zero.  Accumulation order is fixed by the
        compiled plan, so repeated runs are bit-identical.
        """
        if not self._evaluated:
            raise GraphStateError("backward called before eval")
        v = self._vals
        grad = self._grad
        grad.fill(0.0)
        grad[root.i] = 1.0
        for st in reversed(self._stages):
            if st.start > root.i:
                continue
            if not st.needs_any:
                continue
            g = grad[st.start:st.end]
            if st.kind == "dense":
                G = g.reshape(st.out_shape)
                X = v[st.x_idx]
                W = v[st.w_idx]
                st.x_plan.apply(grad, G @ W)
                st.w_plan.apply(grad, G.T @ X)
                if st.b_plan is not None:
                    st.b_plan.apply(grad, G.sum(axis=0))
            elif st.kind == "pairdot":
                G = g.reshape(st.out_shape)
                U = v[st.x_idx]
                V = v[st.w_idx]
                st.x_plan.apply(grad, G @ V)
                st.w_plan.apply(grad, G.T @ U)
            else:
                self._backward_generic(st, v, grad, g)
        per_store = {}
        for key, (store, ids) in self._stores.items():
            per_store[key] = (store, grad[ids].copy())
        return GradientMap(per_store)

    def _backward_generic(self, st: _Stage, v, grad, g):
        op = st.op
        P = st.parents
        plans = st.plans
        if op == OP_ADD:
            plans[0].apply(grad, g)
            plans[1].apply(grad, g)
        elif op == OP_SUB:
            plans[0].apply(grad, g)
            plans[1].apply(grad, -g)
        elif op == OP_MUL:
            plans[0].apply(grad, g * v[P[:, 1]])
            plans[1].apply(grad, g * v[P[:, 0]])
        elif op == OP_DIV:
            b = v[P[:, 1]]
            plans[0].apply(grad, g / b)
            plans[1].apply(grad, -g * v[st.start:st.end] / b)
        elif op == OP_NEG:
            plans[0].apply(grad, -g)
        elif op == OP_POW:
            x = v[P[:, 0]]
            plans[0].apply(grad, g * st.aux * x ** (st.aux - 1.0))
        elif op == OP_TANH:
            t = v[st.start:st.end]
            d = 1.0 - t * t
            if _fault_active("tanh-deriv"):
                d = d * 1.01
            plans[0].apply(grad, g * d)
        elif op == OP_RELU:
            plans[0].apply(grad, g * (v[P[:, 0]] > 0.0))
        elif op == OP_GELU:
            x = v[P[:, 0]]
            phi = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
            Phi = 0.5 * (1.0 + _np_erf(x * _INV_SQRT2))
            plans[0].apply(grad, g * (Phi + x * phi))
        elif op == OP_SIGMOID:
            s = v[st.start:st.end]
            plans[0].apply(grad, g * s * (1.0 - s))
        elif op == OP_EXP:
            plans[0].apply(grad, g * v[st.start:st.end])
        elif op == OP_SQUARE:
            plans[0].apply(grad, g * 2.0 * v[P[:, 0]])
        elif op == OP_ERF:
            x = v[P[:, 0]]
            plans[0].apply(grad, g * _TWO_OVER_SQRT_PI * np.exp(-x * x))
        elif op == OP_MATVEC:
            k = st.k
            Pv = v[P]
            plans[0].apply(grad, g[:, None] * Pv[:, k:2 * k])
            plans[1].apply(grad, g[:, None] * Pv[:, :k])
            if st.has_bias:
                plans[2].apply(grad, g)
        elif op == OP_SUM:
            plans[0].apply(grad, np.broadcast_to(g[:, None], P.shape))
        elif op == OP_MEAN:
            plans[0].apply(grad, np.broadcast_to((g / P.shape[1])[:, None], P.shape))
        elif op == OP_MAX:
            am = np.argmax(v[P], axis=1)
            # Ties route to the first maximal entry; targets depend on runtime
            # values so no precompiled plan applies.
            t = P[np.arange(P.shape[0]), am]
            mask = self._needs_grad[t]
            np.add.at(grad, t[mask], g[mask])
        else:
            raise GraphError(f"unknown op {op}")

    def grad_of(self, node: Node) -> float:
        """Raw accumulated gradient for any node after a backward pass (testing aid)."""
        return float(self._grad[node.i])


# ------------------------------------------------------------------------- jets


class Jet2:
    """Value plus first/second directional derivatives along one coordinate.

    Components are graph nodes, so backward() through any component yields
    parameter gradients of that derivative.  ``d2`` may be None for an order-1
    jet.  Arithmetic follows truncated Taylor rules.
    """

    __slots__ = ("value", "d1", "d2")

    def __init__(self, value, d1, d2=None):
        self.value = value
        self.d1 = d1
        self.d2 = d2

    @property
    def order(self) -> int:
        return 2 if self.d2 is not None else 1

    def _is_scalar(self, other) -> bool:
        return isinstance(other, (int, float, Node, NodeBlock))

    def __add__(self, other):
        if self._is_scalar(other):
            return Jet2(self.value + other, self.d1, self.d2)
        return Jet2(self.value + other.value, self.d1 + other.d1,
                    None if self.d2 is None else self.d2 + other.d2)

    __radd__ = __add__

    def __sub__(self, other):
        if self._is_scalar(other):
            return Jet2(self.value - other, self.d1, self.d2)
        return Jet2(self.value - other.value, self.d1 - other.d1,
                    None if self.d2 is None else self.d2 - other.d2)

    def __rsub__(self, other):
        return (-self) + other

    def __neg__(self):
        return Jet2(-self.value, -self.d1, None if self.d2 is None else -self.d2)

    def __mul__(self, other):
        if self._is_scalar(other):
            return Jet2(self.value * other, self.d1 * other,
                        None if self.d2 is None else self.d2 * other)
        d2 = None
        if self.d2 is not None:
            cross = self.d1 * other.d1
            d2 = self.d2 * other.value + cross + cross + self.value * other.d2
        return Jet2(self.value * other.value,
                    self.d1 * other.value + self.value * other.d1, d2)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if self._is_scalar(other):
            inv = 1.0 / other if isinstance(other, (int, float)) else None
            if inv is not None:
                return self * inv
            q = self.value / other
            return Jet2(q, self.d1 / other, None if self.d2 is None else self.d2 / other)
        q = self.value / other.value
        d1 = (self.d1 - q * other.d1) / other.value
        d2 = None
        if self.d2 is not None:
            d2 = (self.d2 - 2.0 * d1 * other.d1 - q * other.d2) / other.value
        return Jet2(q, d1, d2)


JetBlock = Jet2  # block jets are Jet2 whose components are NodeBlocks


def jet_activation(name: str, z: Jet2) -> Jet2:
    """Chain rule through an activation with exact first/second derivatives."""
    v, d1, d2 = z.value, z.d1, z.d2
    if name == "identity":
        return z
    if name == "relu":
        raise CapabilityError("relu has no usable second derivative; "
                              "jet propagation through relu is not supported")
    if name == "tanh":
        t = v.tanh()
        f1 = 1.0 - t.square()
        m = t * f1
        f2 = -(m + m)
    elif name == "sigmoid":
        t = v.sigmoid()
        f1 = t * (1.0 - t)
        f2 = f1 * (1.0 - (t + t))
    elif name == "gelu":
        t = v.gelu()
        phi = (-(v.square() * 0.5)).exp() * _INV_SQRT_2PI
        Phi = ((v * _INV_SQRT2).erf() + 1.0) * 0.5
        f1 = Phi + v * phi
        f2 = phi * (2.0 - v.square())
    else:
        raise CapabilityError(f"unsupported activation for jets: {name}")
    out_d1 = f1 * d1
    out_d2 = None
    if d2 is not None:
        out_d2 = f2 * d1.square() + f1 * d2
    return Jet2(t, out_d1, out_d2)


def jet2_propagate(graph: Graph, net_apply, base_point: Sequence[float],
                   direction_index: int, order: int = 2) -> list[Jet2]:
    """Push an order-2 jet through ``net_apply`` along one coordinate direction.

    ``net_apply`` maps a list of Jet2 inputs to a list of Jet2 outputs and must be
    composed of supported ops only (relu raises a CapabilityError).  Returns one
    jet per network output: (value, d/dx_j, d2/dx_j2) as graph nodes.
    """
    d = len(base_point)
    if not 0 <= direction_index < d:
        raise GraphError(f"direction index {direction_index} out of range for dim {d}")
    zero = graph.const(0.0)
    one = graph.const(1.0)
    inputs = []
    for j, x in enumerate(base_point):
        seed = one if j == direction_index else zero
        inputs.append(Jet2(graph.const(float(x)), seed, zero if order == 2 else None))
    outputs = net_apply(inputs)
    return list(outputs)
