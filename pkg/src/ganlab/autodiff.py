"""Minimal reverse-mode automatic differentiation on dense float64 arrays.

A ``Graph`` is an append-only tape of primitive records; insertion order is
topological order. ``backward`` walks the tape in reverse with a fixed
accumulation order (contributions arrive in descending consumer-node order,
inputs of one node are handled left to right), which makes gradients
bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

Array = np.ndarray

# Gradients keyed by node id; one entry per tracked leaf after backward().
GradientMap = Dict[int, Array]


class ShapeError(ValueError):
    """Input shapes do not conform to a primitive's rule."""


class DomainError(ValueError):
    """A primitive was evaluated outside its documented domain."""


class GraphError(ValueError):
    """Malformed graph usage (dangling node, non-scalar loss, mixed graphs)."""


def _as_array(value) -> Array:
    return np.asarray(value, dtype=np.float64)


class Tensor:
    """Dense float64 array, optionally tracked as a node of a Graph."""

    __slots__ = ("data", "graph", "node_id")

    def __init__(self, data, graph: Optional["Graph"] = None,
                 node_id: Optional[int] = None):
        self.data = _as_array(data)
        self.graph = graph
        self.node_id = node_id

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def tracked(self) -> bool:
        return self.graph is not None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data)

    def __repr__(self):
        tag = f", node={self.node_id}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{tag})"

    # Light operator sugar over the primitive catalog; constants are lifted
    # to untracked tensors.
    def __add__(self, other):
        return add(self, _lift(other, self.shape))

    def __sub__(self, other):
        return subtract(self, _lift(other, self.shape))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return multiply(self, _lift(other, self.shape))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other, None))


def _lift(value, shape) -> Tensor:
    if isinstance(value, Tensor):
        return value
    arr = _as_array(value)
    if shape is not None and arr.shape != shape:
        arr = np.broadcast_to(arr, shape).copy()
    return Tensor(arr)


def constant(value) -> Tensor:
    """Untracked tensor holding ``value``."""
    return Tensor(value)


class _Node:
    __slots__ = ("kind", "input_ids", "input_values", "value", "params")

    def __init__(self, kind, input_ids, input_values, value, params):
        self.kind = kind
        self.input_ids = input_ids        # node id per input, None = constant
        self.input_values = input_values  # cached forward value per input
        self.value = value
        self.params = params


class Graph:
    """Append-only record of applied primitives; node ids are list indices."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value) -> Tensor:
        """Register ``value`` as a tracked leaf and return its tensor."""
        arr = _as_array(value)
        self.nodes.append(_Node("leaf", (), (), arr, None))
        return Tensor(arr, self, len(self.nodes) - 1)

    def leaf_ids(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n.kind == "leaf"]

    def value_of(self, node_id: int) -> Array:
        return self.nodes[node_id].value

    def replay(self) -> list[Array]:
        """Recompute every node's forward value from recorded inputs.

        Leaves keep their recorded values; interior nodes are recomputed from
        the replayed values of their inputs. Returns the replayed values in
        node order (bit-identical to the cached ones for a well-formed graph).
        """
        values: list[Array] = []
        for node in self.nodes:
            if node.kind == "leaf":
                values.append(node.value)
                continue
            ins = tuple(
                values[nid] if nid is not None else const
                for nid, const in zip(node.input_ids, node.input_values)
            )
            values.append(_PRIMITIVES[node.kind].forward(ins, node.params))
        return values


@dataclass(frozen=True)
class _Primitive:
    forward: Callable[[Tuple[Array, ...], Optional[dict]], Array]
    vjp: Callable[[Array, Tuple[Array, ...], Array, Optional[dict],
                   Tuple[bool, ...]], Tuple[Optional[Array], ...]]
    arity: int  # -1 = variadic


def _require_same_shape(kind: str, a: Array, b: Array) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} differ")


def _sigmoid_stable(x: Array) -> Array:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# -- forward rules ----------------------------------------------------------

def _fwd_matmul(ins, params):
    a, b = ins
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return a @ b


def _fwd_add(ins, params):
    _require_same_shape("add", ins[0], ins[1])
    return ins[0] + ins[1]


def _fwd_subtract(ins, params):
    _require_same_shape("subtract", ins[0], ins[1])
    return ins[0] - ins[1]


def _fwd_multiply(ins, params):
    _require_same_shape("multiply", ins[0], ins[1])
    return ins[0] * ins[1]


def _fwd_scale(ins, params):
    return ins[0] * params["c"]


def _fwd_negate(ins, params):
    return -ins[0]


def _fwd_relu(ins, params):
    return np.maximum(ins[0], 0.0)


def _fwd_leaky_relu(ins, params):
    # max(x, alpha*x) == leaky relu for 0 <= alpha <= 1; fewer passes than
    # a where() select.
    x = ins[0]
    return np.maximum(x, params["alpha"] * x)


def _fwd_tanh(ins, params):
    return np.tanh(ins[0])


def _fwd_sigmoid(ins, params):
    return _sigmoid_stable(ins[0])


def _fwd_exp(ins, params):
    out = np.exp(ins[0])
    if not np.all(np.isfinite(out)):
        raise DomainError("exp: overflow to non-finite value")
    return out


def _fwd_log(ins, params):
    x = ins[0]
    if np.any(x <= 0.0):
        raise DomainError("log: input must be strictly positive")
    return np.log(x)


def _fwd_square(ins, params):
    return ins[0] * ins[0]


def _fwd_softplus(ins, params):
    return np.logaddexp(0.0, ins[0])


def _fwd_sum(ins, params):
    return np.asarray(np.sum(ins[0]))


def _fwd_mean(ins, params):
    return np.asarray(np.mean(ins[0]))


def _fwd_reshape(ins, params):
    x = ins[0]
    shape = tuple(params["shape"])
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}")
    return x.reshape(shape)


def _fwd_concat(ins, params):
    axis = params["axis"]
    try:
        return np.concatenate(ins, axis=axis)
    except ValueError as exc:
        raise ShapeError(
            f"concat: shapes {[i.shape for i in ins]} on axis {axis}") from exc


def _fwd_slice(ins, params):
    x = ins[0]
    axis, start, stop = params["axis"], params["start"], params["stop"]
    if axis >= x.ndim or not (0 <= start < stop <= x.shape[axis]):
        raise ShapeError(
            f"slice: [{start}:{stop}] on axis {axis} of shape {x.shape}")
    key = [np.s_[:]] * x.ndim
    key[axis] = np.s_[start:stop]
    return x[tuple(key)]


def _fwd_add_bias(ins, params):
    x, b = ins
    if x.ndim != 2 or b.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(
            f"broadcast_add_bias: shapes {x.shape} and {b.shape}")
    return x + b


def _fwd_min_const(ins, params):
    return np.minimum(ins[0], params["c"])


# -- vector-Jacobian products ------------------------------------------------
# Each returns one cotangent per input (None = not required / no gradient).
# ``needs`` flags which inputs are tracked, letting binary ops skip the
# cotangent of a constant operand. min_with_const uses the subgradient 0 at
# the kink so hinge terms are well defined there.

def _vjp_matmul(g, ins, out, params, needs):
    a, b = ins
    return (g @ b.T if needs[0] else None,
            a.T @ g if needs[1] else None)


def _vjp_add(g, ins, out, params, needs):
    return (g, g)


def _vjp_subtract(g, ins, out, params, needs):
    return (g, -g if needs[1] else None)


def _vjp_multiply(g, ins, out, params, needs):
    a, b = ins
    return (g * b if needs[0] else None,
            g * a if needs[1] else None)


def _vjp_scale(g, ins, out, params, needs):
    return (g * params["c"],)


def _vjp_negate(g, ins, out, params, needs):
    return (-g,)


def _vjp_relu(g, ins, out, params, needs):
    return (g * (ins[0] > 0),)


def _vjp_leaky_relu(g, ins, out, params, needs):
    x = ins[0]
    return (np.where(x > 0, g, params["alpha"] * g),)


def _vjp_tanh(g, ins, out, params, needs):
    return (g * (1.0 - out * out),)


def _vjp_sigmoid(g, ins, out, params, needs):
    return (g * out * (1.0 - out),)


def _vjp_exp(g, ins, out, params, needs):
    return (g * out,)


def _vjp_log(g, ins, out, params, needs):
    return (g / ins[0],)


def _vjp_square(g, ins, out, params, needs):
    return (2.0 * ins[0] * g,)


def _vjp_softplus(g, ins, out, params, needs):
    return (g * _sigmoid_stable(ins[0]),)


def _vjp_sum(g, ins, out, params, needs):
    return (np.broadcast_to(g, ins[0].shape),)


def _vjp_mean(g, ins, out, params, needs):
    x = ins[0]
    return (np.broadcast_to(g / x.size, x.shape),)


def _vjp_reshape(g, ins, out, params, needs):
    return (g.reshape(ins[0].shape),)


def _vjp_concat(g, ins, out, params, needs):
    axis = params["axis"]
    sizes = [x.shape[axis] for x in ins]
    splits = np.cumsum(sizes[:-1])
    pieces = np.split(g, splits, axis=axis)
    return tuple(p if need else None for p, need in zip(pieces, needs))


def _vjp_slice(g, ins, out, params, needs):
    x = ins[0]
    grad = np.zeros_like(x)
    key = [np.s_[:]] * x.ndim
    key[params["axis"]] = np.s_[params["start"]:params["stop"]]
    grad[tuple(key)] = g
    return (grad,)


def _vjp_add_bias(g, ins, out, params, needs):
    return (g, g.sum(axis=0) if needs[1] else None)


def _vjp_min_const(g, ins, out, params, needs):
    return (g * (ins[0] < params["c"]),)


_PRIMITIVES: Dict[str, _Primitive] = {
    "matmul": _Primitive(_fwd_matmul, _vjp_matmul, 2),
    "add": _Primitive(_fwd_add, _vjp_add, 2),
    "subtract": _Primitive(_fwd_subtract, _vjp_subtract, 2),
    "multiply": _Primitive(_fwd_multiply, _vjp_multiply, 2),
    "scale": _Primitive(_fwd_scale, _vjp_scale, 1),
    "negate": _Primitive(_fwd_negate, _vjp_negate, 1),
    "relu": _Primitive(_fwd_relu, _vjp_relu, 1),
    "leaky_relu": _Primitive(_fwd_leaky_relu, _vjp_leaky_relu, 1),
    "tanh": _Primitive(_fwd_tanh, _vjp_tanh, 1),
    "sigmoid": _Primitive(_fwd_sigmoid, _vjp_sigmoid, 1),
    "exp": _Primitive(_fwd_exp, _vjp_exp, 1),
    "log": _Primitive(_fwd_log, _vjp_log, 1),
    "square": _Primitive(_fwd_square, _vjp_square, 1),
    "softplus": _Primitive(_fwd_softplus, _vjp_softplus, 1),
    "sum": _Primitive(_fwd_sum, _vjp_sum, 1),
    "mean": _Primitive(_fwd_mean, _vjp_mean, 1),
    "reshape": _Primitive(_fwd_reshape, _vjp_reshape, 1),
    "concat": _Primitive(_fwd_concat, _vjp_concat, -1),
    "slice": _Primitive(_fwd_slice, _vjp_slice, 1),
    "broadcast_add_bias": _Primitive(_fwd_add_bias, _vjp_add_bias, 2),
    "min_with_const": _Primitive(_fwd_min_const, _vjp_min_const, 1),
}


def primitive_kinds() -> list[str]:
    return sorted(_PRIMITIVES)


def apply_primitive(kind: str, inputs: Sequence[Tensor], **params) -> Tensor:
    """Apply one catalog primitive.

    The output is tracked iff at least one input is tracked; all tracked
    inputs must live on the same graph.
    """
    prim = _PRIMITIVES.get(kind)
    if prim is None:
        raise GraphError(f"unknown primitive kind {kind!r}")
    if prim.arity >= 0 and len(inputs) != prim.arity:
        raise ShapeError(
            f"{kind}: expected {prim.arity} inputs, got {len(inputs)}")
    arrays = tuple(t.data for t in inputs)
    out = prim.forward(arrays, params or None)

    graph = None
    for t in inputs:
        if t.tracked:
            if graph is None:
                graph = t.graph
            elif graph is not t.graph:
                raise GraphError(f"{kind}: inputs belong to different graphs")
    if graph is None:
        return Tensor(out)
    ids = tuple(t.node_id if t.graph is graph else None for t in inputs)
    graph.nodes.append(_Node(kind, ids, arrays, out, params or None))
    return Tensor(out, graph, len(graph.nodes) - 1)


# Functional wrappers, one per catalog entry.

def matmul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("matmul", (a, b))


def add(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("add", (a, b))


def subtract(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("subtract", (a, b))


def multiply(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("multiply", (a, b))


def scale(x: Tensor, c: float) -> Tensor:
    return apply_primitive("scale", (x,), c=float(c))


def negate(x: Tensor) -> Tensor:
    return apply_primitive("negate", (x,))


def relu(x: Tensor) -> Tensor:
    return apply_primitive("relu", (x,))


def leaky_relu(x: Tensor, alpha: float = 0.1) -> Tensor:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"leaky_relu: alpha {alpha} outside [0, 1]")
    return apply_primitive("leaky_relu", (x,), alpha=float(alpha))


def tanh(x: Tensor) -> Tensor:
    return apply_primitive("tanh", (x,))


def sigmoid(x: Tensor) -> Tensor:
    return apply_primitive("sigmoid", (x,))


def exp(x: Tensor) -> Tensor:
    return apply_primitive("exp", (x,))


def log(x: Tensor) -> Tensor:
    return apply_primitive("log", (x,))


def square(x: Tensor) -> Tensor:
    return apply_primitive("square", (x,))


def softplus(x: Tensor) -> Tensor:
    return apply_primitive("softplus", (x,))


def tensor_sum(x: Tensor) -> Tensor:
    return apply_primitive("sum", (x,))


def tensor_mean(x: Tensor) -> Tensor:
    return apply_primitive("mean", (x,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return apply_primitive("reshape", (x,), shape=tuple(int(s) for s in shape))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return apply_primitive("concat", tuple(tensors), axis=int(axis))


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    return apply_primitive("slice", (x,), axis=int(axis),
                           start=int(start), stop=int(stop))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("broadcast_add_bias", (x, b))


def min_with_const(x: Tensor, c: float) -> Tensor:
    return apply_primitive("min_with_const", (x,), c=float(c))


def backward(graph: Graph, loss_node: int) -> GradientMap:
    """Gradients of a scalar node w.r.t. every leaf of the graph.

    Leaves the loss does not depend on get zero gradients. Accumulation order
    is fixed (reverse node order, inputs left to right), so repeated calls are
    bit-identical.
    """
    if not (0 <= loss_node < len(graph.nodes)):
        raise GraphError(f"dangling node id {loss_node}")
    if graph.nodes[loss_node].value.shape != ():
        raise GraphError(
            f"loss must be scalar, got shape "
            f"{graph.nodes[loss_node].value.shape}")

    grads: list[Optional[Array]] = [None] * len(graph.nodes)
    grads[loss_node] = np.ones(())
    for nid in range(loss_node, -1, -1):
        g = grads[nid]
        if g is None:
            continue
        node = graph.nodes[nid]
        if node.kind == "leaf":
            continue
        needs = tuple(in_id is not None for in_id in node.input_ids)
        contribs = _PRIMITIVES[node.kind].vjp(
            g, node.input_values, node.value, node.params, needs)
        for in_id, contrib in zip(node.input_ids, contribs):
            if in_id is None or contrib is None:
                continue
            if grads[in_id] is None:
                grads[in_id] = contrib
            else:
                grads[in_id] = grads[in_id] + contrib

    result: GradientMap = {}
    for nid in graph.leaf_ids():
        g = grads[nid]
        if g is None:
            g = np.zeros_like(graph.nodes[nid].value)
        result[nid] = np.array(g, dtype=np.float64)
    return result


@dataclass
class CheckReport:
    """Outcome of an analytic-vs-central-difference gradient comparison."""

    per_param: Dict[str, float]
    max_rel_error: float
    passed: bool
    step: float
    tolerance: float


# Relative error floor: below this magnitude the comparison degrades to an
# absolute check, which keeps finite-difference roundoff out of the verdict.
_REL_FLOOR = 1e-3


def finite_diff_check(f: Callable[[Dict[str, Tensor]], Tensor],
                      params: Dict[str, Array],
                      step: float = 1e-5,
                      tolerance: float = 1e-4) -> CheckReport:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` receives named leaf tensors (all on one fresh graph) and must return
    a scalar tensor. ``params`` maps the same names to float64 arrays.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = {k: _as_array(v) for k, v in params.items()}

    graph = Graph()
    leaves = {k: graph.leaf(v) for k, v in base.items()}
    loss = f(leaves)
    if not np.isfinite(loss.data):
        raise DomainError("finite_diff_check: non-finite loss value")
    if loss.tracked:
        grad_map = backward(loss.graph, loss.node_id)
        analytic = {k: grad_map[t.node_id] for k, t in leaves.items()}
    else:
        analytic = {k: np.zeros_like(v) for k, v in base.items()}

    def eval_at(values: Dict[str, Array]) -> float:
        out = f({k: Tensor(v) for k, v in values.items()})
        val = float(out.data)
        if not np.isfinite(val):
            raise DomainError("finite_diff_check: non-finite loss value")
        return val

    per_param: Dict[str, float] = {}
    for name, arr in base.items():
        numeric = np.zeros_like(arr)
        flat = arr.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = eval_at(base)
            flat[i] = orig - step
            lo = eval_at(base)
            flat[i] = orig
            num_flat[i] = (hi - lo) / (2.0 * step)
        a = analytic[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), _REL_FLOOR)
        rel = np.abs(a - numeric) / denom
        per_param[name] = float(rel.max()) if rel.size else 0.0

    worst = max(per_param.values()) if per_param else 0.0
    return CheckReport(per_param=per_param, max_rel_error=worst,
                       passed=worst < tolerance, step=step,
                       tolerance=tolerance)
