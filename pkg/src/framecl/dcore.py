"""A small reverse-mode differentiation engine over float64 numpy arrays.

Every primitive application is recorded on a :class:`Graph` together with
its forward value, so ``backward`` can replay the tape in reverse.  Dropout
is not stochastic here: callers pass an explicit 0/1 mask, which keeps every
forward pass replayable and every gradient checkable by finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import DomainError, ShapeError, UsageError

__all__ = [
    "DArray",
    "Graph",
    "ShapeError",
    "DomainError",
    "UsageError",
    "PRIMITIVES",
    "apply_primitive",
    "lift",
    "backward",
    "finite_difference_gradient",
    "pairwise_cosine_similarity",
    "matmul",
    "add",
    "mul",
    "scale",
    "concat",
    "exp",
    "log",
    "sum_all",
    "sum_rows",
    "divide",
    "tanh",
    "sigmoid",
    "softplus",
    "gram",
    "l2_normalize_rows",
    "masked_dropout",
]


def _as_float64(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DomainError("non-finite value in constant or parameter")
    return arr


class DArray:
    """A float64 array, optionally bound to a node of a computation graph.

    ``data`` is never mutated after construction.  Arrays created outside a
    graph are plain constants with ``node_id`` of ``None``.
    """

    __slots__ = ("data", "node_id", "graph")

    def __init__(self, data, node_id: int | None = None, graph: "Graph | None" = None):
        arr = data if isinstance(data, np.ndarray) and data.dtype == np.float64 else _as_float64(data)
        arr.setflags(write=False)
        self.data = arr
        self.node_id = node_id
        self.graph = graph

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() on array of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"DArray(shape={self.shape}, node_id={self.node_id})"


@dataclass
class _Node:
    kind: str
    inputs: tuple[int, ...]
    value: np.ndarray
    attrs: dict = field(default_factory=dict)


class Graph:
    """Tape of primitive applications.

    Nodes are appended in evaluation order, so the tape is topologically
    sorted by construction.  A graph is single-writer.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.parameters: set[int] = set()

    def _push(self, kind: str, inputs: tuple[int, ...], value: np.ndarray, attrs: dict | None = None) -> DArray:
        node_id = len(self.nodes)
        self.nodes.append(_Node(kind, inputs, value, attrs or {}))
        return DArray(value, node_id, self)

    def constant(self, values) -> DArray:
        return self._push("constant", (), _as_float64(values))

    def param(self, values) -> DArray:
        out = self._push("param", (), _as_float64(values))
        self.parameters.add(out.node_id)
        return out

    def __len__(self) -> int:
        return len(self.nodes)


# ---------------------------------------------------------------------------
# primitive rules: forward(values, attrs) -> value
#                  vjp(grad_out, values, out, attrs) -> grads per input
# ---------------------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(kind, shapes):
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise ShapeError(kind, shapes) from None


def _check_matmul(shapes):
    a, b = shapes
    if len(a) != 2 or len(b) != 2 or a[1] != b[0]:
        raise ShapeError("matmul", shapes, "expected (n,k) @ (k,m)")


def _check_rows(kind):
    def check(shapes):
        if len(shapes[0]) != 2:
            raise ShapeError(kind, shapes, "expected a 2-d array")

    return check


def _check_concat(shapes):
    a, b = shapes
    if len(a) != len(b) or len(a) == 0 or a[:-1] != b[:-1]:
        raise ShapeError("concat_last_axis", shapes, "leading extents must agree")


def _check_same(kind):
    def check(shapes):
        if shapes[0] != shapes[1]:
            raise ShapeError(kind, shapes)

    return check


def _check_broadcast(kind):
    def check(shapes):
        _broadcast_shape(kind, shapes)

    return check


def _row_norms(x, eps):
    norms = np.sqrt(np.sum(x * x, axis=1))
    return np.maximum(norms, eps) if eps > 0 else norms


def _fwd_l2(values, attrs):
    (x,) = values
    norms = _row_norms(x, attrs.get("eps", 0.0))
    bad = np.flatnonzero(norms == 0.0)
    if bad.size:
        raise DomainError(f"l2_normalize_rows: row {int(bad[0])} has zero norm")
    return x / norms[:, None]


def _vjp_l2(g, values, out, attrs):
    (x,) = values
    eps = attrs.get("eps", 0.0)
    raw = np.sqrt(np.sum(x * x, axis=1))[:, None]
    norms = np.maximum(raw, eps) if eps > 0 else raw
    full = (g - out * np.sum(g * out, axis=1, keepdims=True)) / norms
    # rows clamped at eps are a plain scaling by 1/eps
    return (np.where(raw > eps, full, g / norms) if eps > 0 else full,)


def _fwd_log(values, attrs):
    (x,) = values
    if np.any(x <= 0.0):
        raise DomainError("log: input must be strictly positive")
    return np.log(x)


def _fwd_divide(values, attrs):
    a, b = values
    if np.any(b == 0.0):
        raise DomainError("divide: zero entry in denominator")
    return a / b


def _fwd_dropout(values, attrs):
    x, mask = values
    return x * mask / attrs["p"]


def _fwd_gram(values, attrs):
    (x,) = values
    m = x @ x.T
    # exact symmetry regardless of BLAS summation order
    return 0.5 * (m + m.T)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass(frozen=True)
class _Primitive:
    arity: int
    check: Callable | None
    forward: Callable
    vjp: Callable
    # indices of inputs that never receive gradient (masks)
    nondiff: tuple[int, ...] = ()


PRIMITIVES: dict[str, _Primitive] = {
    "matmul": _Primitive(
        2,
        _check_matmul,
        lambda v, a: v[0] @ v[1],
        lambda g, v, o, a: (g @ v[1].T, v[0].T @ g),
    ),
    "add": _Primitive(
        2,
        _check_broadcast("add"),
        lambda v, a: v[0] + v[1],
        lambda g, v, o, a: (_unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)),
    ),
    "elementwise_mul": _Primitive(
        2,
        _check_broadcast("elementwise_mul"),
        lambda v, a: v[0] * v[1],
        lambda g, v, o, a: (_unbroadcast(g * v[1], v[0].shape), _unbroadcast(g * v[0], v[1].shape)),
    ),
    "scalar_mul": _Primitive(
        1,
        None,
        lambda v, a: v[0] * a["scalar"],
        lambda g, v, o, a: (g * a["scalar"],),
    ),
    "concat_last_axis": _Primitive(
        2,
        _check_concat,
        lambda v, a: np.concatenate(v, axis=-1),
        lambda g, v, o, a: (g[..., : v[0].shape[-1]], g[..., v[0].shape[-1]:]),
    ),
    "exp": _Primitive(1, None, lambda v, a: np.exp(v[0]), lambda g, v, o, a: (g * o,)),
    "log": _Primitive(1, None, _fwd_log, lambda g, v, o, a: (g / v[0],)),
    "sum_all": _Primitive(
        1,
        None,
        lambda v, a: np.asarray(np.sum(v[0]), dtype=np.float64),
        lambda g, v, o, a: (np.full(v[0].shape, float(g)),),
    ),
    "sum_rows": _Primitive(
        1,
        _check_rows("sum_rows"),
        lambda v, a: np.sum(v[0], axis=1),
        lambda g, v, o, a: (np.repeat(g[:, None], v[0].shape[1], axis=1),),
    ),
    "divide": _Primitive(
        2,
        _check_broadcast("divide"),
        _fwd_divide,
        lambda g, v, o, a: (_unbroadcast(g / v[1], v[0].shape), _unbroadcast(-g * o / v[1], v[1].shape)),
    ),
    "tanh": _Primitive(1, None, lambda v, a: np.tanh(v[0]), lambda g, v, o, a: (g * (1.0 - o * o),)),
    "sigmoid": _Primitive(1, None, lambda v, a: _sigmoid(v[0]), lambda g, v, o, a: (g * o * (1.0 - o),)),
    "softplus": _Primitive(
        1,
        None,
        lambda v, a: np.maximum(v[0], 0.0) + np.log1p(np.exp(-np.abs(v[0]))),
        lambda g, v, o, a: (g * _sigmoid(v[0]),),
    ),
    "gram": _Primitive(
        1,
        _check_rows("gram"),
        _fwd_gram,
        lambda g, v, o, a: ((g + g.T) @ v[0],),
    ),
    "l2_normalize_rows": _Primitive(1, _check_rows("l2_normalize_rows"), _fwd_l2, _vjp_l2),
    "masked_dropout": _Primitive(
        2,
        _check_same("masked_dropout"),
        _fwd_dropout,
        lambda g, v, o, a: (g * v[1] / a["p"], None),
        nondiff=(1,),
    ),
}


def _coerce(inputs: Sequence) -> tuple[Graph, list[DArray]]:
    graphs = [x.graph for x in inputs if isinstance(x, DArray) and x.graph is not None]
    # a graph holding parameters wins; parameter-free graphs are just values
    trainable = [g for g in graphs if g.parameters]
    if len({id(g) for g in trainable}) > 1:
        raise UsageError("inputs belong to different graphs")
    graph = trainable[0] if trainable else (graphs[0] if graphs else Graph())
    out = []
    for x in inputs:
        if isinstance(x, DArray):
            if x.graph is not graph:
                x = graph.constant(x.data)
        else:
            x = graph.constant(x)
        out.append(x)
    return graph, out


def lift(x, graph: Graph | None = None) -> DArray:
    """Return ``x`` as a node of ``graph`` (a fresh graph if none is given)."""
    if isinstance(x, DArray) and x.graph is not None:
        if graph is not None and x.graph is not graph:
            raise UsageError("array belongs to a different graph")
        return x
    graph = graph if graph is not None else Graph()
    return graph.constant(x.data if isinstance(x, DArray) else x)


def apply_primitive(kind: str, inputs: Sequence, **attrs) -> DArray:
    """Evaluate primitive ``kind`` and record it on the inputs' graph.

    Plain arrays among ``inputs`` are lifted to graph constants.  Attributes
    are ``scalar`` for ``scalar_mul`` and ``p`` (keep probability) for
    ``masked_dropout``.
    """
    try:
        prim = PRIMITIVES[kind]
    except KeyError:
        raise UsageError(f"unknown primitive {kind!r}") from None
    if len(inputs) != prim.arity:
        raise UsageError(f"{kind} takes {prim.arity} input(s), got {len(inputs)}")
    graph, arrays = _coerce(inputs)
    values = [x.data for x in arrays]
    if prim.check is not None:
        prim.check([v.shape for v in values])
    if kind == "scalar_mul":
        attrs["scalar"] = float(attrs["scalar"])
    if kind == "masked_dropout":
        p = float(attrs.get("p", 0.0))
        if not 0.0 < p <= 1.0:
            raise DomainError(f"masked_dropout: keep probability must be in (0, 1], got {p}")
        attrs["p"] = p
        if not np.all((values[1] == 0.0) | (values[1] == 1.0)):
            raise DomainError("masked_dropout: mask must be 0/1")
    with np.errstate(over="raise", invalid="raise", divide="raise"):
        try:
            value = np.asarray(prim.forward(values, attrs), dtype=np.float64)
        except FloatingPointError as exc:
            raise DomainError(f"{kind}: {exc}") from None
    return graph._push(kind, tuple(x.node_id for x in arrays), value, attrs)


def matmul(a, b):
    return apply_primitive("matmul", [a, b])


def add(a, b):
    return apply_primitive("add", [a, b])


def mul(a, b):
    return apply_primitive("elementwise_mul", [a, b])


def scale(a, scalar: float):
    return apply_primitive("scalar_mul", [a], scalar=scalar)


def concat(a, b):
    return apply_primitive("concat_last_axis", [a, b])


def exp(a):
    return apply_primitive("exp", [a])


def log(a):
    return apply_primitive("log", [a])


def sum_all(a):
    return apply_primitive("sum_all", [a])


def sum_rows(a):
    return apply_primitive("sum_rows", [a])


def divide(a, b):
    return apply_primitive("divide", [a, b])


def tanh(a):
    return apply_primitive("tanh", [a])


def sigmoid(a):
    return apply_primitive("sigmoid", [a])


def softplus(a):
    return apply_primitive("softplus", [a])


def gram(a):
    return apply_primitive("gram", [a])


def l2_normalize_rows(a, eps: float = 0.0):
    """Rows divided by their L2 norm; with ``eps > 0`` norms are floored at ``eps``."""
    if eps:
        return apply_primitive("l2_normalize_rows", [a], eps=float(eps))
    return apply_primitive("l2_normalize_rows", [a])


def masked_dropout(a, mask, p: float):
    return apply_primitive("masked_dropout", [a, mask], p=p)


def backward(graph: Graph, root: DArray) -> dict[int, np.ndarray]:
    """Gradients of scalar ``root`` with respect to every parameter node.

    Returns a dict keyed by parameter ``node_id``; parameters that ``root``
    does not depend on get a zero array of their own shape.
    """
    if root.graph is not graph or root.node_id is None:
        raise UsageError("root is not a node of this graph")
    if root.data.size != 1:
        raise UsageError(f"backward root must be scalar, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {root.node_id: np.ones_like(root.data)}
    for node_id in range(root.node_id, -1, -1):
        g = grads.get(node_id)
        if g is None:
            continue
        node = graph.nodes[node_id]
        if not node.inputs:
            continue
        prim = PRIMITIVES[node.kind]
        values = [graph.nodes[i].value for i in node.inputs]
        in_grads = prim.vjp(g, values, node.value, node.attrs)
        for pos, (inp, ig) in enumerate(zip(node.inputs, in_grads)):
            if pos in prim.nondiff or ig is None:
                continue
            if inp in grads:
                grads[inp] = grads[inp] + ig
            else:
                grads[inp] = ig
        if node_id not in graph.parameters:
            del grads[node_id]
    return {
        pid: grads.get(pid, np.zeros_like(graph.nodes[pid].value)).reshape(graph.nodes[pid].value.shape)
        for pid in sorted(graph.parameters)
    }


def finite_difference_gradient(
    f: Callable[[Mapping[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-6,
) -> dict[str, np.ndarray]:
    """Central-difference estimate of ``f``'s gradient for each named array."""
    if eps <= 0:
        raise UsageError("eps must be positive")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    out: dict[str, np.ndarray] = {}
    for name, arr in base.items():
        grad = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            hi = float(f(base))
            flat[idx] = orig - eps
            lo = float(f(base))
            flat[idx] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise FloatingPointError(f"non-finite objective while perturbing {name}[{idx}]")
            gflat[idx] = (hi - lo) / (2.0 * eps)
        out[name] = grad
    return out


def pairwise_cosine_similarity(z) -> DArray:
    """n x n cosine similarities between the rows of ``z``."""
    zd = z.data if isinstance(z, DArray) else np.asarray(z, dtype=np.float64)
    if zd.ndim != 2:
        raise ShapeError("pairwise_cosine_similarity", [zd.shape], "expected a 2-d array")
    norms = np.sqrt(np.sum(zd * zd, axis=1))
    bad = np.flatnonzero(norms == 0.0)
    if bad.size:
        raise DomainError(f"pairwise_cosine_similarity: row {int(bad[0])} has zero norm")
    return gram(l2_normalize_rows(z))
