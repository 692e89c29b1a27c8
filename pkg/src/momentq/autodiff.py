"""Minimal define-by-run reverse-mode autodiff over float64 numpy arrays.

Every primitive records its parents and a closure mapping the output
gradient to parent gradients. ``stop_gradient`` keeps its parent link (so
leaves reached only through it still receive an all-zero gradient) but
contributes nothing on the backward pass.

Finite-difference checks run with stop-gradient outputs frozen at their
base-point values, so the numerical derivative is the derivative of the
same surrogate the analytic pass differentiates.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor", "ShapeError", "UnknownPrimitiveError", "NonFiniteError",
    "tensor", "constant", "no_grad",
    "matmul", "add", "multiply", "subtract", "scale", "relu", "sigmoid", "exp", "log",
    "softmax", "layer_norm", "mean", "sum", "squared_distance", "concat", "gather",
    "max_pool", "cosine_similarity", "stop_gradient",
    "linear", "softplus", "absolute", "log_softmax",
    "PRIMITIVES", "Graph", "forward_eval", "backward", "numerical_gradient", "grad_check",
]


class ShapeError(ValueError):
    pass


class UnknownPrimitiveError(KeyError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_state = threading.local()


def _get(name, default=None):
    return getattr(_state, name, default)


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "parents", "_backward", "op", "name")

    def __init__(self, values, requires_grad=False, name=None):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.parents: tuple = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    def numpy(self):
        return self.values

    def zero_grad(self):
        self.grad = None

    def backward(self):
        return backward(self)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(op={self.op}{tag}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def tensor(values, requires_grad=False, name=None) -> Tensor:
    return Tensor(values, requires_grad=requires_grad, name=name)


def constant(values) -> Tensor:
    return Tensor(values)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@contextlib.contextmanager
def no_grad():
    """Skip recording backward closures; forward values are unchanged."""
    prev = _get("no_grad", False)
    _state.no_grad = True
    try:
        yield
    finally:
        _state.no_grad = prev


@contextlib.contextmanager
def _check_finite():
    prev = _get("check_finite", False)
    _state.check_finite = True
    try:
        yield
    finally:
        _state.check_finite = prev


def _node(op, values, parents, backward_fn, name=None) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    out.op = op
    out.name = name
    if _get("check_finite", False) and not np.all(np.isfinite(values)):
        raise NonFiniteError(f"non-finite value produced by node {name or op!r}")
    if _get("no_grad", False):
        out.requires_grad = False
        out.parents = ()
        out._backward = None
        return out
    out.requires_grad = any(p.requires_grad for p in parents)
    out.parents = tuple(parents)
    out._backward = backward_fn if out.requires_grad else None
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op, a, b, name):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name or op}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------- primitives


def matmul(a, b, transpose_b=False, name=None) -> Tensor:
    """``a @ b`` (or ``a @ b.T`` over the last two axes); leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = a.values, b.values
    if av.ndim < 2:
        raise ShapeError(f"{name or 'matmul'}: left operand must be at least 2-D, got {av.shape}")
    vec = bv.ndim == 1
    if vec:
        if transpose_b:
            raise ShapeError(f"{name or 'matmul'}: transpose_b needs a matrix operand")
        bv = bv[:, None]
    bm = np.swapaxes(bv, -1, -2) if transpose_b else bv
    if av.shape[-1] != bm.shape[-2]:
        raise ShapeError(f"{name or 'matmul'}: inner dimensions differ, {a.shape} x {b.shape}"
                         + (" (b transposed)" if transpose_b else ""))
    try:
        out = np.matmul(av, bm)
    except ValueError as exc:
        raise ShapeError(f"{name or 'matmul'}: {exc}") from None
    if vec:
        out = out[..., 0]

    def bw(g):
        if vec:
            g = g[..., None]
        ga = np.matmul(g, np.swapaxes(bm, -1, -2))
        gbm = np.matmul(np.swapaxes(av, -1, -2), g)
        gbm = _unbroadcast(gbm, bm.shape)
        gb = np.swapaxes(gbm, -1, -2) if transpose_b else gbm
        if vec:
            gb = gb[:, 0]
        return _unbroadcast(ga, av.shape), gb

    return _node("matmul", out, (a, b), bw, name)


def add(a, b, name=None) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b, name)
    sa, sb = a.shape, b.shape
    return _node("add", a.values + b.values, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), name)


def subtract(a, b, name=None) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("subtract", a, b, name)
    sa, sb = a.shape, b.shape
    return _node("subtract", a.values - b.values, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), name)


def multiply(a, b, name=None) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("multiply", a, b, name)
    av, bv = a.values, b.values
    return _node("multiply", av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)), name)


def scale(x, c: float, name=None) -> Tensor:
    x = _as_tensor(x)
    c = float(c)
    return _node("scale", x.values * c, (x,), lambda g: (g * c,), name)


def relu(x, name=None) -> Tensor:
    x = _as_tensor(x)
    mask = x.values > 0
    return _node("relu", np.where(mask, x.values, 0.0), (x,), lambda g: (g * mask,), name)


def sigmoid(x, name=None) -> Tensor:
    x = _as_tensor(x)
    v = x.values
    # split by sign to avoid overflow in exp
    e = np.exp(-np.abs(v))
    out = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _node("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),), name)


def exp(x, name=None) -> Tensor:
    x = _as_tensor(x)
    out = np.exp(x.values)
    return _node("exp", out, (x,), lambda g: (g * out,), name)


def log(x, name=None) -> Tensor:
    x = _as_tensor(x)
    v = x.values
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(v)
    return _node("log", out, (x,), lambda g: (g / v,), name)


def softmax(x, axis=-1, name=None) -> Tensor:
    x = _as_tensor(x)
    z = x.values - x.values.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node("softmax", out, (x,), bw, name)


def layer_norm(x, axis=-1, eps=1e-5, name=None) -> Tensor:
    """Normalize to zero mean / unit variance along ``axis`` (no affine part)."""
    x = _as_tensor(x)
    mu = x.values.mean(axis=axis, keepdims=True)
    xc = x.values - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axis, keepdims=True) + eps)
    out = xc * inv

    def bw(g):
        gm = g.mean(axis=axis, keepdims=True)
        gy = (g * out).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - out * gy),)

    return _node("layer_norm", out, (x,), bw, name)


def mean(x, axis=None, keepdims=False, name=None) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    out = x.values.mean(axis=axis, keepdims=keepdims)
    n = x.values.size // max(out.size, 1) if axis is not None else x.values.size

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _node("mean", np.asarray(out, dtype=np.float64), (x,), bw, name)


def sum(x, axis=None, keepdims=False, name=None) -> Tensor:  # noqa: A001 - mirrors numpy
    x = _as_tensor(x)
    shape = x.shape
    out = x.values.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node("sum", np.asarray(out, dtype=np.float64), (x,), bw, name)


def squared_distance(a, b, name=None) -> Tensor:
    """Row-wise ``sum((a - b)**2)`` over the last axis, broadcasting leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("squared_distance", a, b, name)
    diff = a.values - b.values
    out = (diff * diff).sum(axis=-1)
    sa, sb = a.shape, b.shape

    def bw(g):
        gd = 2.0 * diff * g[..., None]
        return _unbroadcast(gd, sa), _unbroadcast(-gd, sb)

    return _node("squared_distance", out, (a, b), bw, name)


def concat(tensors: Sequence, axis=-1, name=None) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.values for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"{name or 'concat'}: {exc}") from None
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _node("concat", out, ts, bw, name)


def gather(table, indices, name=None) -> Tensor:
    """Rows of a 2-D ``table`` selected by an integer array of any shape."""
    table = _as_tensor(table)
    idx = np.asarray(indices, dtype=np.intp)
    if table.ndim != 2:
        raise ShapeError(f"{name or 'gather'}: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"{name or 'gather'}: index out of range for {table.shape[0]} rows")
    shape = table.shape

    def bw(g):
        acc = np.zeros(shape)
        np.add.at(acc, idx.reshape(-1), g.reshape(-1, shape[1]))
        return (acc,)

    return _node("gather", table.values[idx], (table,), bw, name)


def max_pool(x, axis=-2, name=None) -> Tensor:
    """Max over ``axis``; ties go to the lowest index."""
    x = _as_tensor(x)
    arg = np.argmax(x.values, axis=axis)
    out = np.take_along_axis(x.values, np.expand_dims(arg, axis), axis=axis).squeeze(axis)
    shape = x.shape

    def bw(g):
        acc = np.zeros(shape)
        np.put_along_axis(acc, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (acc,)

    return _node("max_pool", out, (x,), bw, name)


def cosine_similarity(a, b, eps=1e-12, name=None) -> Tensor:
    """Pairwise cosine over the last axis: (..., M, d) x (..., N, d) -> (..., M, N)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"{name or 'cosine_similarity'}: incompatible {a.shape} and {b.shape}")
    na = np.maximum(np.sqrt((a.values ** 2).sum(-1, keepdims=True)), eps)
    nb = np.maximum(np.sqrt((b.values ** 2).sum(-1, keepdims=True)), eps)
    an, bn = a.values / na, b.values / nb
    try:
        out = np.matmul(an, np.swapaxes(bn, -1, -2))
    except ValueError as exc:
        raise ShapeError(f"{name or 'cosine_similarity'}: {exc}") from None

    def bw(g):
        ga = (np.matmul(g, bn) - (g * out).sum(-1, keepdims=True) * an) / na
        gt = np.swapaxes(g, -1, -2)
        ot = np.swapaxes(out, -1, -2)
        gb = (np.matmul(gt, an) - (gt * ot).sum(-1, keepdims=True) * bn) / nb
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node("cosine_similarity", out, (a, b), bw, name)


def stop_gradient(x, name=None) -> Tensor:
    """Identity forward, zero gradient backward."""
    x = _as_tensor(x)
    tape = _get("sg_tape")
    if tape is not None and tape.replay:
        values = tape.values[tape.pos]
        tape.pos += 1
    else:
        values = x.values.copy()
        if tape is not None:
            tape.values.append(values)
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    out.op = "stop_gradient"
    out.name = name
    out.requires_grad = False
    out.parents = () if _get("no_grad", False) else (x,)
    out._backward = None
    return out


PRIMITIVES: Dict[str, Callable] = {
    "matmul": matmul, "add": add, "multiply": multiply, "subtract": subtract,
    "scale": scale, "relu": relu, "sigmoid": sigmoid, "exp": exp, "log": log,
    "softmax": softmax, "layer_norm": layer_norm, "mean": mean, "sum": sum,
    "squared_distance": squared_distance, "concat": concat, "gather": gather,
    "max_pool": max_pool, "cosine_similarity": cosine_similarity,
    "stop_gradient": stop_gradient,
}


# ---------------------------------------------------------------- composites


def linear(x, weight, bias=None) -> Tensor:
    y = matmul(x, weight)
    return add(y, bias) if bias is not None else y


def absolute(x) -> Tensor:
    x = _as_tensor(x)
    return add(relu(x), relu(scale(x, -1.0)))


def softplus(x) -> Tensor:
    """log(1 + e^x) as relu(x) + log(1 + exp(-|x|)); never overflows."""
    x = _as_tensor(x)
    neg_abs = subtract(x, scale(relu(x), 2.0))
    return add(relu(x), log(add(exp(neg_abs), 1.0)))


def log_softmax(x, axis=-1) -> Tensor:
    x = _as_tensor(x)
    # the shift cancels exactly, so it can stay off the graph
    shift = Tensor(x.values.max(axis=axis, keepdims=True))
    z = subtract(x, shift)
    return subtract(z, log(sum(exp(z), axis=axis, keepdims=True)))


# ---------------------------------------------------------------- engine


def _topo(root: Tensor) -> List[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> Dict[int, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf that requires grad.

    Leaves reachable only through ``stop_gradient`` get an all-zero gradient.
    Gradients accumulate across calls; reset with ``zero_grad``.
    """
    if loss.values.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topo(loss)
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for node in reversed(order):
        g = grads.pop(id(node), None) if node.parents else grads.get(id(node))
        if node.parents:
            if g is None or node._backward is None:
                continue
            for p, pg in zip(node.parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg
    for node in order:
        if not node.parents and node.requires_grad:
            g = grads.get(id(node))
            if g is None:
                g = np.zeros_like(node.values)
            else:
                g = np.asarray(g, dtype=np.float64).reshape(node.shape)
            node.grad = g if node.grad is None else node.grad + g
    return grads


# ---------------------------------------------------------------- declarative graphs


@dataclass
class GraphNode:
    name: str
    op: str
    inputs: List[str]
    attrs: dict = field(default_factory=dict)


@dataclass
class Graph:
    """An explicit op-DAG evaluated through the primitive registry."""

    nodes: List[GraphNode] = field(default_factory=list)

    def add(self, name, op, inputs, **attrs) -> "Graph":
        self.nodes.append(GraphNode(name, op, list(inputs), attrs))
        return self


def forward_eval(graph, inputs: Mapping[str, object]) -> Dict[str, Tensor]:
    """Evaluate ``graph`` (a :class:`Graph` or a callable) on named inputs.

    A callable receives the inputs as keyword ``Tensor`` arguments and may
    return a Tensor or a dict of Tensors.
    """
    env = {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in inputs.items()}
    if callable(graph) and not isinstance(graph, Graph):
        out = graph(**env)
        return out if isinstance(out, dict) else {"output": out}
    for node in graph.nodes:
        fn = PRIMITIVES.get(node.op)
        if fn is None:
            raise UnknownPrimitiveError(f"node {node.name!r}: unknown primitive {node.op!r}")
        missing = [i for i in node.inputs if i not in env]
        if missing:
            raise KeyError(f"node {node.name!r}: unbound inputs {missing}")
        args = [env[i] for i in node.inputs]
        try:
            if node.op == "concat":
                env[node.name] = fn(args, name=node.name, **node.attrs)
            else:
                env[node.name] = fn(*args, name=node.name, **node.attrs)
        except ShapeError as exc:
            raise ShapeError(f"node {node.name!r}: {exc}") from None
    return env


# ---------------------------------------------------------------- finite differences


class _SgTape:
    def __init__(self):
        self.values: list = []
        self.replay = False
        self.pos = 0


@contextlib.contextmanager
def _tape(tape):
    prev = _get("sg_tape")
    _state.sg_tape = tape
    try:
        yield
    finally:
        _state.sg_tape = prev


def _scalar(out) -> Tensor:
    if isinstance(out, dict):
        out = out["output"] if "output" in out else next(iter(out.values()))
    if out.values.size != 1:
        raise ShapeError(f"expected scalar output, got shape {out.shape}")
    return out


def numerical_gradient(fn: Callable[..., Tensor], point: Mapping[str, np.ndarray],
                       eps: float = 1e-5, wrt: Optional[Iterable[str]] = None,
                       freeze_stop_gradient: bool = True) -> Dict[str, np.ndarray]:
    """Central differences of scalar ``fn(**tensors)`` at ``point``.

    With ``freeze_stop_gradient`` every ``stop_gradient`` output keeps its
    base-point value during the perturbed evaluations.
    """
    base = {k: np.array(v, dtype=np.float64) for k, v in point.items()}
    names = list(wrt) if wrt is not None else list(base)
    tape = _SgTape()

    def run(vals):
        with no_grad():
            if freeze_stop_gradient:
                tape.pos = 0
            return float(_scalar(fn(**{k: Tensor(v) for k, v in vals.items()})).values)

    with _tape(tape if freeze_stop_gradient else None), _check_finite():
        run(base)
        tape.replay = True
        result = {}
        for k in names:
            g = np.zeros_like(base[k])
            flat = base[k].reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = run(base)
                flat[i] = orig - eps
                fm = run(base)
                flat[i] = orig
                gflat[i] = (fp - fm) / (2.0 * eps)
            result[k] = g
    return result


def analytic_gradient(fn: Callable[..., Tensor], point: Mapping[str, np.ndarray],
                      wrt: Optional[Iterable[str]] = None) -> Dict[str, np.ndarray]:
    names = set(wrt) if wrt is not None else set(point)
    leaves = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=k in names)
              for k, v in point.items()}
    with _check_finite():
        loss = _scalar(fn(**leaves))
    backward(loss)
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.values))
            for k, t in leaves.items() if k in names}


def grad_check(fn: Callable[..., Tensor], point: Mapping[str, np.ndarray],
               eps: float = 1e-5, wrt: Optional[Iterable[str]] = None) -> float:
    """Max over leaves of ||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-8)."""
    if not 0 < eps <= 1e-2:
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    for k, v in point.items():
        if not np.all(np.isfinite(v)):
            raise NonFiniteError(f"leaf {k!r} is not finite")
    ana = analytic_gradient(fn, point, wrt)
    num = numerical_gradient(fn, point, eps, wrt=list(ana))
    worst = 0.0
    for k in ana:
        a, n = ana[k], num[k]
        err = np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), 1e-8)
        worst = max(worst, float(err))
    return worst
