"""Reverse-mode automatic differentiation over dense numpy tensors.

A :class:`Graph` is built once (define-then-run) from named inputs and a small
set of operation kinds, then evaluated with :func:`forward` for concrete
bindings and differentiated with :func:`backward`.  Backward walks the node
list in exact reverse creation order, so gradient accumulation is
deterministic.

    g = Graph()
    x = g.input("x")
    g.set_output("y", x * x)
    forward(g, {"x": 3.0})["y"].item()      # 9.0
    backward(g, "y")["x"].item()            # 6.0
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float64


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError):
    def __init__(self, node_id: int, kind: str, detail: str):
        super().__init__(f"node {node_id} ({kind}): {detail}")
        self.node_id = node_id


class NonFiniteError(AutodiffError):
    def __init__(self, node_id: int, kind: str):
        super().__init__(f"node {node_id} ({kind}) produced a non-finite value")
        self.node_id = node_id


class Tensor:
    """Dense value array with an optional gradient buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, data: Any, dtype=None, grad: np.ndarray | None = None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            if not np.issubdtype(arr.dtype, np.integer):
                arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        if grad is not None and np.shape(grad) != arr.shape:
            raise ValueError(f"grad shape {np.shape(grad)} != data shape {arr.shape}")
        self.grad = grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        return self.data.item()

    def numpy(self) -> np.ndarray:
        return self.data

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"


def as_array(value: Any) -> np.ndarray:
    if isinstance(value, Tensor):
        return value.data
    if isinstance(value, np.ndarray):
        return value
    arr = np.asarray(value)
    if not np.issubdtype(arr.dtype, np.number):
        raise TypeError(f"cannot bind value of type {type(value).__name__}")
    if np.issubdtype(arr.dtype, np.integer):
        return arr
    return arr.astype(DEFAULT_DTYPE, copy=False)


@dataclass
class Node:
    id: int
    kind: str
    operands: tuple[int, ...]
    attrs: dict = field(default_factory=dict)


class Var:
    """Handle to a node of a :class:`Graph`; supports ``+ - *`` and ``@``."""

    __slots__ = ("graph", "id")

    def __init__(self, graph: "Graph", node_id: int):
        self.graph = graph
        self.id = node_id

    def _lift(self, other) -> "Var":
        if isinstance(other, Var):
            if other.graph is not self.graph:
                raise AutodiffError("operands belong to different graphs")
            return other
        return self.graph.const(other)

    def __add__(self, other):
        return self.graph.add(self, self._lift(other))

    def __radd__(self, other):
        return self.graph.add(self._lift(other), self)

    def __sub__(self, other):
        return self.graph.sub(self, self._lift(other))

    def __rsub__(self, other):
        return self.graph.sub(self._lift(other), self)

    def __mul__(self, other):
        return self.graph.mul(self, self._lift(other))

    def __rmul__(self, other):
        return self.graph.mul(self._lift(other), self)

    def __neg__(self):
        return self.graph.mul(self, self.graph.const(-1.0))

    def __matmul__(self, other):
        return self.graph.matmul(self, self._lift(other))

    def __repr__(self) -> str:
        return f"Var({self.graph.nodes[self.id].kind}#{self.id})"


# A custom node computes (value, vjp) from operand values; vjp maps the
# upstream gradient to a tuple of operand gradients (None for "no gradient").
CustomFn = Callable[..., tuple[np.ndarray, Callable[[np.ndarray], Sequence[np.ndarray | None]]]]


class Graph:
    """Topologically ordered operation records plus per-run cached values.

    Node operands always refer to earlier nodes, so the node list is a valid
    topological order by construction.  A graph instance holds the values of
    its most recent :func:`forward` and is therefore not shareable between
    threads while executing.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.inputs: dict[str, int] = {}
        self.outputs: dict[str, int] = {}
        self._values: list[np.ndarray] | None = None
        self._saved: list[Any] | None = None
        self._bound: dict[str, Any] = {}

    def _add(self, kind: str, operands: Sequence[Var] = (), **attrs) -> Var:
        ids = []
        for op in operands:
            if not isinstance(op, Var) or op.graph is not self:
                raise AutodiffError(f"{kind}: operand is not a node of this graph")
            ids.append(op.id)
        node = Node(len(self.nodes), kind, tuple(ids), attrs)
        self.nodes.append(node)
        return Var(self, node.id)

    # -- leaves ---------------------------------------------------------
    def input(self, name: str) -> Var:
        if name in self.inputs:
            return Var(self, self.inputs[name])
        var = self._add("input", name=name)
        self.inputs[name] = var.id
        return var

    def const(self, value: Any) -> Var:
        return self._add("const", value=as_array(value))

    # -- elementwise / linear algebra ------------------------------------
    def add(self, a: Var, b: Var) -> Var:
        return self._add("add", (a, b))

    def add_bias(self, a: Var, bias: Var) -> Var:
        return self._add("add", (a, bias))

    def sub(self, a: Var, b: Var) -> Var:
        return self._add("sub", (a, b))

    def mul(self, a: Var, b: Var) -> Var:
        return self._add("mul", (a, b))

    def scale(self, a: Var, factor: float) -> Var:
        return self._add("mul", (a, self.const(factor)))

    def matmul(self, a: Var, b: Var) -> Var:
        return self._add("matmul", (a, b))

    def relu(self, a: Var) -> Var:
        return self._add("relu", (a,))

    def abs(self, a: Var) -> Var:
        return self._add("abs", (a,))

    def sign(self, a: Var) -> Var:
        return self._add("sign", (a,))

    # -- reductions ------------------------------------------------------
    def sum(self, a: Var, axis: int | None = None) -> Var:
        return self._add("sum", (a,), axis=axis)

    def mean(self, a: Var, axis: int | None = None) -> Var:
        return self._add("mean", (a,), axis=axis)

    def l2sq(self, a: Var, axis: int | None = None) -> Var:
        """Sum of squares, over everything or along ``axis``."""
        return self._add("l2sq", (a,), axis=axis)

    # -- losses ----------------------------------------------------------
    def softmax_ce(self, logits: Var, labels: Var) -> Var:
        """Per-row cross-entropy of ``logits`` (B x C) against integer labels (B,)."""
        return self._add("softmax_ce", (logits, labels))

    def margin(self, logits: Var, labels: Var) -> Var:
        """Per-row ``max_{j != y} z_j - z_y``."""
        return self._add("margin", (logits, labels))

    def custom(self, fn: CustomFn, *operands: Var, name: str = "custom") -> Var:
        return self._add("custom", operands, fn=fn, name=name)

    def set_output(self, name: str, var: Var) -> Var:
        if var.graph is not self:
            raise AutodiffError("output node belongs to a different graph")
        self.outputs[name] = var.id
        return var

    def __len__(self) -> int:
        return len(self.nodes)


def rowwise_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` with each row computed by an identical BLAS call.

    A single blocked GEMM picks kernels by matrix size and row position, so a
    row's result can change in the last bits with the batch it sits in.
    Looping the same 1 x K product over rows makes the output of every row a
    function of that row alone.
    """
    return np.matmul(a[:, None, :], b)[:, 0, :]


def working_dtype(arrays) -> np.dtype:
    """float32 when every floating array is float32, float64 otherwise."""
    floats = [a.dtype for a in arrays if np.issubdtype(a.dtype, np.floating) and a.ndim > 0]
    return np.result_type(*floats) if floats else np.dtype(DEFAULT_DTYPE)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(node: Node, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(node.id, node.kind, f"cannot broadcast {a.shape} with {b.shape}") from None


def _labels(node: Node, logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(node.id, node.kind, f"logits {logits.shape} vs labels {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ShapeError(node.id, node.kind, "labels must be integers")
    return labels


def _eval_node(node: Node, args: list[np.ndarray]) -> tuple[np.ndarray, Any]:
    kind = node.kind
    if kind == "add":
        _check_broadcast(node, *args)
        return args[0] + args[1], None
    if kind == "sub":
        _check_broadcast(node, *args)
        return args[0] - args[1], None
    if kind == "mul":
        _check_broadcast(node, *args)
        return args[0] * args[1], None
    if kind == "matmul":
        a, b = args
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(node.id, kind, f"cannot multiply {a.shape} by {b.shape}")
        return rowwise_matmul(a, b), None
    if kind == "relu":
        mask = args[0] > 0
        return args[0] * mask, mask
    if kind == "abs":
        return np.abs(args[0]), None
    if kind == "sign":
        return np.sign(args[0]), None
    if kind in ("sum", "mean", "l2sq"):
        axis = node.attrs["axis"]
        a = args[0]
        if axis is not None and not -a.ndim <= axis < a.ndim:
            raise ShapeError(node.id, kind, f"axis {axis} out of range for shape {a.shape}")
        if kind == "sum":
            return np.sum(a, axis=axis), None
        if kind == "mean":
            return np.mean(a, axis=axis), None
        return np.sum(a * a, axis=axis), None
    if kind == "softmax_ce":
        logits, labels = args
        labels = _labels(node, logits, labels)
        shifted = logits - logits.max(axis=1, keepdims=True)
        expz = np.exp(shifted)
        denom = expz.sum(axis=1, keepdims=True)
        probs = expz / denom
        rows = np.arange(logits.shape[0])
        loss = np.log(denom[:, 0]) - shifted[rows, labels]
        return loss, probs
    if kind == "margin":
        logits, labels = args
        labels = _labels(node, logits, labels)
        rows = np.arange(logits.shape[0])
        others = logits.copy()
        others[rows, labels] = -np.inf
        best = np.argmax(others, axis=1)
        return logits[rows, best] - logits[rows, labels], best
    if kind == "custom":
        value, vjp = node.attrs["fn"](*args)
        return np.asarray(value), vjp
    raise AutodiffError(f"unknown node kind {kind!r}")


def _grad_node(node: Node, args: list[np.ndarray], out: np.ndarray, saved: Any,
               g: np.ndarray) -> list[np.ndarray | None]:
    kind = node.kind
    if kind == "add":
        return [_unbroadcast(g, args[0].shape), _unbroadcast(g, args[1].shape)]
    if kind == "sub":
        return [_unbroadcast(g, args[0].shape), _unbroadcast(-g, args[1].shape)]
    if kind == "mul":
        a, b = args
        return [_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)]
    if kind == "matmul":
        a, b = args
        # the batch reduction for b may use any blocking; rows of a may not
        return [rowwise_matmul(g, np.ascontiguousarray(b.T)), a.T @ g]
    if kind == "relu":
        # subgradient 0 at the kink
        return [g * saved]
    if kind == "abs":
        return [g * np.sign(args[0])]
    if kind == "sign":
        return [np.zeros_like(args[0])]
    if kind in ("sum", "mean", "l2sq"):
        a = args[0]
        axis = node.attrs["axis"]
        gg = g if axis is None else np.expand_dims(g, axis)
        if kind == "sum":
            return [np.broadcast_to(gg, a.shape).copy()]
        if kind == "mean":
            count = a.size if axis is None else a.shape[axis]
            return [np.broadcast_to(gg / count, a.shape).copy()]
        return [2.0 * a * gg]
    if kind == "softmax_ce":
        probs = saved
        labels = args[1]
        grad = probs.copy()
        grad[np.arange(len(labels)), labels] -= 1.0
        return [grad * g[:, None], None]
    if kind == "margin":
        labels = args[1]
        rows = np.arange(len(labels))
        grad = np.zeros_like(args[0])
        grad[rows, saved] += g
        grad[rows, labels] -= g
        return [grad, None]
    if kind == "custom":
        return list(saved(g))
    raise AutodiffError(f"unknown node kind {kind!r}")


def forward(graph: Graph, bindings: Mapping[str, Any], check_finite: bool = True) -> dict[str, Tensor]:
    """Evaluate every node for ``bindings`` and cache intermediates for backward."""
    missing = [name for name in graph.inputs if name not in bindings]
    if missing:
        raise AutodiffError(f"unbound inputs: {', '.join(sorted(missing))}")
    bound = {name: as_array(bindings[name]) for name in graph.inputs}
    work = working_dtype(bound.values())
    values: list[np.ndarray] = [None] * len(graph.nodes)  # type: ignore[list-item]
    saved: list[Any] = [None] * len(graph.nodes)
    for node in graph.nodes:
        if node.kind in ("input", "const"):
            value = bound[node.attrs["name"]] if node.kind == "input" else node.attrs["value"]
            if np.issubdtype(value.dtype, np.floating) and value.dtype != work:
                value = value.astype(work)
        else:
            with np.errstate(over="ignore", invalid="ignore"):
                value, saved[node.id] = _eval_node(node, [values[i] for i in node.operands])
            if check_finite and np.issubdtype(value.dtype, np.floating) and not np.all(np.isfinite(value)):
                graph._values = None
                raise NonFiniteError(node.id, node.kind)
        values[node.id] = value
    graph._values = values
    graph._saved = saved
    graph._bound = dict(bindings)
    return {name: Tensor(values[i]) for name, i in graph.outputs.items()}


def backward(graph: Graph, output: str, wrt: Sequence[str] | None = None) -> dict[str, Tensor]:
    """Gradients of the scalar ``output`` with respect to the graph inputs.

    Bound :class:`Tensor` objects listed in ``wrt`` get their ``grad`` slot
    filled in place as well.
    """
    if graph._values is None:
        raise AutodiffError("backward called before forward")
    if output not in graph.outputs:
        raise AutodiffError(f"unknown output {output!r}")
    out_id = graph.outputs[output]
    values = graph._values
    if values[out_id].size != 1:
        raise AutodiffError(f"output {output!r} is not scalar (shape {values[out_id].shape})")
    names = list(graph.inputs) if wrt is None else list(wrt)
    for name in names:
        if name not in graph.inputs:
            raise AutodiffError(f"unknown input {name!r}")

    grads: list[np.ndarray | None] = [None] * len(graph.nodes)
    grads[out_id] = np.ones_like(values[out_id])
    for node in reversed(graph.nodes[: out_id + 1]):
        g = grads[node.id]
        if g is None or not node.operands:
            continue
        args = [values[i] for i in node.operands]
        for operand, og in zip(node.operands, _grad_node(node, args, values[node.id], graph._saved[node.id], g)):
            if og is None:
                continue
            if grads[operand] is None:
                grads[operand] = og
            else:
                grads[operand] = grads[operand] + og

    result = {}
    for name in names:
        node_id = graph.inputs[name]
        g = grads[node_id]
        if g is None:
            g = np.zeros_like(values[node_id], dtype=np.result_type(values[node_id], np.float64)
                              if np.issubdtype(values[node_id].dtype, np.integer) else values[node_id].dtype)
        result[name] = Tensor(g)
        bound = graph._bound.get(name)
        if isinstance(bound, Tensor):
            bound.grad = g
    return result


def value_and_grad(graph: Graph, bindings: Mapping[str, Any], output: str,
                   wrt: Sequence[str] | None = None) -> tuple[float, dict[str, np.ndarray]]:
    """Forward then backward; returns the scalar and plain gradient arrays."""
    outs = forward(graph, bindings)
    grads = backward(graph, output, wrt)
    return outs[output].item(), {k: v.data for k, v in grads.items()}


def finite_diff_errors(fn: Callable[[np.ndarray], tuple[float, np.ndarray]], point: Any,
                       step: float = 1e-6) -> np.ndarray:
    """Per-coordinate ``|analytic - central difference| / max(1, |analytic|)``.

    ``fn`` returns ``(value, gradient)``.  Coordinates whose evaluation is not
    finite come back as ``inf`` and are logged.
    """
    x0 = np.array(as_array(point), dtype=np.float64)
    _, analytic = fn(x0.copy())
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    errors = np.empty(x0.size)
    flat = x0.reshape(-1)
    bad = []
    for i in range(flat.size):
        plus = flat.copy()
        minus = flat.copy()
        plus[i] += step
        minus[i] -= step
        f_plus = fn(plus.reshape(x0.shape))[0]
        f_minus = fn(minus.reshape(x0.shape))[0]
        numeric = (f_plus - f_minus) / (2.0 * step)
        if not (np.isfinite(numeric) and np.isfinite(analytic[i])):
            errors[i] = np.inf
            bad.append(i)
            continue
        errors[i] = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
    if bad:
        log.warning("finite-difference check: non-finite evaluation at coordinates %s", bad)
    return errors.reshape(x0.shape)


def finite_diff_check(fn: Callable[[np.ndarray], tuple[float, np.ndarray]], point: Any,
                      step: float = 1e-6) -> float:
    """Maximum relative error between ``fn``'s analytic gradient and central differences."""
    errors = finite_diff_errors(fn, point, step)
    return float(errors.max()) if errors.size else 0.0
