"""Dense tensors with reverse-mode automatic differentiation.

A Tensor wraps a numpy array and remembers the operation that produced it
(parent links plus a backward closure). Creation order doubles as a
topological order because parents always exist before their children, so
``backward`` simply replays live nodes in reverse creation order, visiting
each exactly once.

Training math runs in float32; the finite-difference harness builds
float64 graphs for headroom. Broadcasting is deliberately restricted to
bias-adds of a trailing vector, which keeps silent shape bugs out of the
network code.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DegenerateVectorError, DimensionError, GraphError, RankError

NORM_EPS = 1e-12

_thread = threading.local()


def _next_node_id() -> int:
    nid = getattr(_thread, "node_counter", 0)
    _thread.node_counter = nid + 1
    return nid


class Tensor:
    """N-d float array with optional gradient and tape bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "parents", "_backward_fn", "node_id", "_consumed")

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (), backward_fn=None):
        self.data = np.asarray(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.parents: tuple[Tensor, ...] = parents
        self._backward_fn: Callable | None = backward_fn
        self.node_id = _next_node_id()
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def is_leaf(self) -> bool:
        return self._backward_fn is None

    def item(self) -> float:
        if self.data.size != 1:
            raise RankError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data)

    def __repr__(self) -> str:  # pragma: no cover
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def constant(data, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype))


def parameter(data, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def _result(data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    # Constant-only subgraphs are pruned: no closure, no parent links.
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, backward_fn=backward_fn)
    return Tensor(data)


def _check_dtype(*tensors: Tensor) -> None:
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise DimensionError(f"mixed dtypes {dt} and {t.data.dtype}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to ``shape`` after numpy batch broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """a + b; shapes must match, except a trailing bias vector for b."""
    _check_dtype(a, b)
    if a.shape == b.shape:
        out = a.data + b.data

        def backward_fn(g):
            return g, g

    elif b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        out = a.data + b.data

        def backward_fn(g):
            return g, g.reshape(-1, g.shape[-1]).sum(axis=0)

    else:
        raise DimensionError(f"add: incompatible shapes {a.shape} and {b.shape}")
    return _result(out, (a, b), backward_fn)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_dtype(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    _check_dtype(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data * b.data

    def backward_fn(g):
        return g * b.data, g * a.data

    return _result(out, (a, b), backward_fn)


def affine(a: Tensor, mult: float = 1.0, shift: float = 0.0) -> Tensor:
    """mult * a + shift for python scalars."""
    mult = a.data.dtype.type(mult)
    shift = a.data.dtype.type(shift)
    return _result(a.data * mult + shift, (a,), lambda g: (g * mult,))


def scale(a: Tensor, mult: float) -> Tensor:
    return affine(a, mult=mult)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch semantics (both operands rank >= 2)."""
    _check_dtype(a, b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ for {a.shape} x {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError as exc:
        raise DimensionError(f"matmul: {a.shape} x {b.shape}: {exc}") from exc

    def backward_fn(g):
        ga = gb = None
        if a.requires_grad:
            if a.data.ndim == 2 and b.data.ndim > 2:
                ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
            else:
                ga = g @ np.swapaxes(b.data, -1, -2)
        if b.requires_grad:
            if b.data.ndim == 2 and a.data.ndim > 2:
                # batched input x shared weight: one flattened GEMM instead of
                # a stacked outer product plus reduction
                k = a.shape[-1]
                n = g.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _result(out, (a, b), backward_fn)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def swap_last2(a: Tensor) -> Tensor:
    axes = list(range(a.data.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    _check_dtype(*tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _result(out, tuple(tensors), backward_fn)


def sum_all(a: Tensor) -> Tensor:
    out = a.data.sum()

    def backward_fn(g):
        return (np.broadcast_to(g, a.shape).astype(a.data.dtype, copy=True),)

    return _result(out, (a,), backward_fn)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = a.data.mean()

    def backward_fn(g):
        return (np.full(a.shape, g / n, dtype=a.data.dtype),)

    return _result(out, (a,), backward_fn)


def sum_axis(a: Tensor, axis: int) -> Tensor:
    out = a.data.sum(axis=axis)

    def backward_fn(g):
        expanded = np.expand_dims(g, axis)
        return (np.broadcast_to(expanded, a.shape).astype(a.data.dtype, copy=True),)

    return _result(out, (a,), backward_fn)


def mean_axis(a: Tensor, axis: int) -> Tensor:
    n = a.shape[axis]
    out = a.data.mean(axis=axis)

    def backward_fn(g):
        expanded = np.expand_dims(g, axis) / n
        return (np.broadcast_to(expanded, a.shape).astype(a.data.dtype, copy=True),)

    return _result(out, (a,), backward_fn)


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product of two same-shape tensors (full contraction)."""
    return sum_all(mul(a, b))


def take_rows(a: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows along axis 0; duplicate indices accumulate gradient."""
    indices = np.asarray(indices, dtype=np.int64)
    out = a.data[indices]

    def backward_fn(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, indices, g)
        return (ga,)

    return _result(out, (a,), backward_fn)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the trailing axis, stabilized by max subtraction."""
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return ((g - inner) * y,)

    return _result(y, (a,), backward_fn)


def log_softmax_rows(a: Tensor) -> Tensor:
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def backward_fn(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _result(y, (a,), backward_fn)


def l2_normalize(a: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Scale each trailing vector to unit L2 norm; degenerate vectors error."""
    x = a.data
    norms = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    lowest = norms.min() if norms.size else 1.0
    if lowest < eps:
        raise DegenerateVectorError(f"vector norm {lowest:.3e} below guard {eps:.0e}")
    y = x / norms

    def backward_fn(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return ((g - y * inner) / norms,)

    return _result(y, (a,), backward_fn)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the trailing axis with learnable gain/bias."""
    _check_dtype(a, gain, bias)
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain/bias must be ({d},)")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + a.data.dtype.type(eps))
    xh = xc * inv
    out = xh * gain.data + bias.data

    def backward_fn(g):
        gxh = g * gain.data
        dx = inv * (gxh - gxh.mean(axis=-1, keepdims=True) - xh * (gxh * xh).mean(axis=-1, keepdims=True))
        dgain = (g * xh).reshape(-1, d).sum(axis=0)
        dbias = g.reshape(-1, d).sum(axis=0)
        return dx, dgain, dbias

    return _result(out, (a, gain, bias), backward_fn)


_GELU_C0 = 0.7978845608028654  # sqrt(2/pi)
_GELU_C1 = 0.044715


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation (smooth, so finite differences behave)."""
    x = a.data
    u = _GELU_C0 * (x + _GELU_C1 * x * x * x)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def backward_fn(g):
        du = _GELU_C0 * (1.0 + 3.0 * _GELU_C1 * x * x)
        dydx = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
        return (g * dydx.astype(x.dtype),)

    return _result(out, (a,), backward_fn)


def inject_rows(base: np.ndarray, pseudo: Tensor, positions: np.ndarray, sources: np.ndarray) -> Tensor:
    """Write pseudo rows into a constant (B, L, d) base.

    out[b, positions[b, s], :] = pseudo[b, sources[b, s], :]. The base gets
    no gradient; the pseudo block receives the gradient gathered from the
    written positions (accumulated, so a source row may appear twice).
    """
    if base.ndim != 3 or pseudo.data.ndim != 3:
        raise DimensionError(f"inject_rows: base {base.shape}, pseudo {pseudo.shape}")
    nbatch = base.shape[0]
    positions = np.asarray(positions, dtype=np.int64)
    sources = np.asarray(sources, dtype=np.int64)
    if sources.size and sources.max() >= pseudo.shape[1]:
        raise DimensionError(f"inject_rows: source row {sources.max()} >= {pseudo.shape[1]}")
    bidx = np.broadcast_to(np.arange(nbatch)[:, None], positions.shape)
    out = np.array(base, dtype=pseudo.data.dtype)
    out[bidx, positions] = pseudo.data[bidx, sources]

    def backward_fn(g):
        gp = np.zeros_like(pseudo.data)
        np.add.at(gp, (bidx, sources), g[bidx, positions])
        return (gp,)

    return _result(out, (pseudo,), backward_fn)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def _reachable(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack.extend(node.parents)
    return nodes


def backward(root: Tensor) -> None:
    """Populate grads of every requires_grad leaf reachable from a scalar root.

    Single-shot: the interior of a graph may be walked once per forward
    pass; a second call on the same graph raises GraphError. Leaves are
    reusable across graphs and accumulate into ``.grad``.
    """
    if root.shape != ():
        raise RankError(f"backward root must be scalar, got shape {root.shape}")
    nodes = _reachable(root)
    for node in nodes:
        if node._consumed and not node.is_leaf():
            raise GraphError("backward already ran on this graph; re-run the forward pass first")
    nodes.sort(key=lambda n: n.node_id, reverse=True)

    flows: dict[int, np.ndarray] = {id(root): np.ones((), dtype=root.data.dtype)}
    for node in nodes:
        grad = flows.pop(id(node), None)
        node._consumed = True
        if grad is None:
            continue
        if node.is_leaf():
            if node.requires_grad:
                node.grad = grad.copy() if node.grad is None else node.grad + grad
            continue
        parent_grads = node._backward_fn(grad)
        for parent, pgrad in zip(node.parents, parent_grads):
            if pgrad is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in flows:
                flows[key] = flows[key] + pgrad
            else:
                flows[key] = pgrad


# ---------------------------------------------------------------------------
# finite-difference harness
# ---------------------------------------------------------------------------


def finite_difference_check(
    build_loss: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    max_coords: int = 8,
    rng: np.random.Generator | None = None,
) -> float:
    """Worst relative error between analytic grads and central differences.

    ``build_loss`` must rebuild the forward graph from ``params`` on every
    call; params are expected to be float64 for headroom. Large tensors are
    probed at ``max_coords`` random coordinates.
    """
    rng = rng or np.random.default_rng(0)
    zero_grads(params)
    backward(build_loss())
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        aflat = ana.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            up = float(build_loss().data)
            flat[i] = orig - step
            down = float(build_loss().data)
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            err = abs(float(aflat[i]) - numeric) / max(abs(float(aflat[i])), abs(numeric), 1e-4)
            worst = max(worst, err)
    zero_grads(params)
    return worst
