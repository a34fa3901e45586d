"""Minimal reverse-mode autodiff over float64 numpy arrays.

Design notes:
  - every op validates that its output is finite; a NaN/Inf raises NonFinite
    at the op that produced it rather than three modules later
  - backward() walks the tape in reverse topological order with a per-call
    gradient buffer, then adds each node's total into .grad; running
    backward twice therefore doubles every gradient exactly
  - the primitive set is intentionally small; anything else (attention,
    chamfer selections, max-pooling) is composed from it by callers
"""

import math
from contextlib import contextmanager

import numpy as np

from .errors import NonFinite, ShapeMismatch

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (used for numeric probing)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A float64 array plus an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjps")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFinite("tensor constructed with non-finite values")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._vjps = ()

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A copy cut off from the tape; gradients never flow through it."""
        return Tensor(self.data.copy())

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def backward(self):
        """Accumulate d(self)/d(node) into .grad for every tape ancestor."""
        if self.data.size != 1:
            raise ShapeMismatch(f"backward needs a scalar, got shape {self.shape}")
        order = _toposort(self)
        buf = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = buf.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            for parent, vjp in zip(node._parents, node._vjps):
                if not (parent.requires_grad or parent._parents):
                    continue
                contrib = vjp(g)
                key = id(parent)
                if key in buf:
                    buf[key] = buf[key] + contrib
                else:
                    buf[key] = contrib

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _toposort(root):
    order, seen = [], {id(root)}
    stack = [(root, iter(root._parents))]
    while stack:
        node, it = stack[-1]
        child = next(it, None)
        if child is None:
            order.append(node)
            stack.pop()
        elif id(child) not in seen:
            seen.add(id(child))
            stack.append((child, iter(child._parents)))
    return order  # parents precede consumers


def tensor(data, requires_grad=False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _make(out_data, op, parents, vjps):
    if not np.isfinite(out_data).all():
        raise NonFinite(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    if _GRAD_ENABLED and any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjps = tuple(vjps)
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjps = ()
    return out


def _unbroadcast(g, shape):
    """Sum g down to `shape` (reverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --- primitives ---

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    out = a.data @ b.data
    return _make(out, "matmul", (a, b),
                 (lambda g: g @ b.data.T, lambda g: a.data.T @ g))


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return _make(out, "add", (a, b),
                 (lambda g: _unbroadcast(g, a.shape),
                  lambda g: _unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    return _make(out, "mul", (a, b),
                 (lambda g: _unbroadcast(g * b.data, a.shape),
                  lambda g: _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    if not math.isfinite(s):
        raise NonFinite("scale factor is not finite")
    return _make(a.data * s, "scale", (a,), (lambda g: g * s,))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeMismatch(f"transpose needs a matrix, got {a.shape}")
    return _make(a.data.T.copy(), "transpose", (a,), (lambda g: g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), "reshape", (a,),
                 (lambda g: g.reshape(old),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeMismatch("concat of zero tensors")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def make_vjp(i):
        lo, hi = bounds[i], bounds[i + 1]
        def vjp(g):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]
        return vjp

    return _make(out, "concat", tuple(tensors),
                 tuple(make_vjp(i) for i in range(len(tensors))))


def gather_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeMismatch("gather_rows takes a flat index array")
    if len(a.shape) < 1 or (idx.size and (idx.min() < 0 or idx.max() >= a.shape[0])):
        raise ShapeMismatch(f"gather index out of range for {a.shape}")

    def vjp(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)  # duplicate indices accumulate
        return out

    return _make(a.data[idx], "gather_rows", (a,), (vjp,))


def mean_reduce(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    shape = a.shape
    count = a.data.size if axis is None else shape[axis]

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape) / count

    return _make(np.asarray(out), "mean_reduce", (a,), (vjp,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return out * (g - dot)

    return _make(out, "softmax", (a,), (vjp,))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit population variance."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch("layer_norm affine shapes must match last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def vjp_x(g):
        gx = g * gamma.data
        # standard layer-norm backward through mean and variance
        return inv / d * (d * gx - gx.sum(axis=-1, keepdims=True)
                          - xhat * (gx * xhat).sum(axis=-1, keepdims=True))

    def vjp_gamma(g):
        return (g * xhat).reshape(-1, d).sum(axis=0)

    def vjp_beta(g):
        return g.reshape(-1, d).sum(axis=0)

    return _make(out, "layer_norm", (x, gamma, beta), (vjp_x, vjp_gamma, vjp_beta))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU: 0.5*x*(1 + tanh(c*(x + 0.044715*x^3)))."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v ** 3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v ** 2)
        return g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner)

    return _make(out, "gelu", (x,), (vjp,))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with b broadcast over rows."""
    return add(matmul(x, w), b)


def bilinear_sample_2d(grid: Tensor, gy, gx) -> Tensor:
    """Sample a (rows, cols, d) feature grid at fractional grid coordinates.

    Coordinates are in grid units (feature (r, c) sits at gy=r, gx=c) and are
    clamped to the grid hull. Differentiable with respect to the grid only;
    the sample locations are data, not parameters.

    Returns a (n, d) Tensor for n coordinate pairs.
    """
    if grid.data.ndim != 3:
        raise ShapeMismatch(f"bilinear grid must be (rows, cols, d), got {grid.shape}")
    rows, cols, d = grid.shape
    gy = np.clip(np.asarray(gy, dtype=np.float64).reshape(-1), 0.0, rows - 1.0)
    gx = np.clip(np.asarray(gx, dtype=np.float64).reshape(-1), 0.0, cols - 1.0)
    y0 = np.minimum(np.floor(gy), rows - 2 if rows > 1 else 0).astype(np.intp)
    x0 = np.minimum(np.floor(gx), cols - 2 if cols > 1 else 0).astype(np.intp)
    y0 = np.maximum(y0, 0)
    x0 = np.maximum(x0, 0)
    y1 = np.minimum(y0 + 1, rows - 1)
    x1 = np.minimum(x0 + 1, cols - 1)
    wy = (gy - y0)[:, None]
    wx = (gx - x0)[:, None]
    v = grid.data
    out = ((1 - wy) * (1 - wx) * v[y0, x0] + (1 - wy) * wx * v[y0, x1]
           + wy * (1 - wx) * v[y1, x0] + wy * wx * v[y1, x1])

    def vjp(g):
        gg = np.zeros_like(v)
        np.add.at(gg, (y0, x0), (1 - wy) * (1 - wx) * g)
        np.add.at(gg, (y0, x1), (1 - wy) * wx * g)
        np.add.at(gg, (y1, x0), wy * (1 - wx) * g)
        np.add.at(gg, (y1, x1), wy * wx * g)
        return gg

    return _make(out, "bilinear_sample_2d", (grid,), (vjp,))


# --- verification harness ---

def grad_check(f, params, eps: float = 1e-5, max_coords=None, rng=None) -> float:
    """Compare analytic gradients of scalar f() against central differences.

    Args:
        f: no-argument callable returning a scalar Tensor; must be
           deterministic and read current param data on every call.
        params: tensors perturbed by the check (requires_grad must be set).
        eps: central-difference step.
        max_coords: optional cap on probed coordinates per tensor; when set,
           coordinates are chosen by `rng` (or a fixed default) so huge
           tensors can be spot-checked. None probes every coordinate.
        rng: numpy Generator used only when max_coords is set.

    Returns:
        max over probed coordinates of |a-n| / max(1e-8, |a|+|n|).
    """
    params = list(params)
    out = f()
    if not np.isfinite(out.data).all():
        raise NonFinite("grad_check objective is not finite")
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        else:
            p.grad[...] = 0.0
    out.backward()
    analytic = [p.grad.copy() for p in params]

    if rng is None:
        rng = np.random.default_rng(0)
    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            aflat = a.reshape(-1)
            coords = range(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = rng.choice(flat.size, size=max_coords, replace=False)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + eps
                f_plus = float(f().data)
                flat[i] = orig - eps
                f_minus = float(f().data)
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * eps)
                rel = abs(aflat[i] - numeric) / max(1e-8, abs(aflat[i]) + abs(numeric))
                if rel > worst:
                    worst = rel
    return worst
