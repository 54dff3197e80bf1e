"""Math functions dispatched over ndarrays, tape Vars and forward-mode Duals.

Writing numeric code against these functions (plus the arithmetic operators)
makes it runnable in three modes with one implementation:

  * plain numpy arrays        -> fast evaluation, no derivatives
  * `graph.Var` tape nodes    -> reverse-mode gradients w.r.t. parameters
  * `Dual` pairs of the above -> forward-mode directional derivatives

A Dual whose members are Vars yields tangents that are themselves tape nodes,
so a later reverse pass differentiates *through* the tangent. That is how
spatial gradients of a network end up inside losses that are then
differentiated w.r.t. the network parameters.

Tangents carry an optional extra leading axis holding several directions at
once (e.g. 3 axis-aligned seeds to get a full spatial gradient in one sweep).
A tangent of None means identically zero.
"""

from __future__ import annotations

import numpy as np

from .graph import CompGraph, GraphError, Var


class Dual:
    """Forward-mode pair (primal, tangent); members are ndarrays or Vars."""

    __slots__ = ("primal", "tangent")
    __array_ufunc__ = None

    def __init__(self, primal, tangent=None):
        self.primal = primal
        self.tangent = tangent

    def __repr__(self):
        return f"Dual({self.primal!r}, tangent={'0' if self.tangent is None else '...'})"

    # arithmetic operators; product/chain rules on the tangent part
    def __add__(self, other):
        p, t = _split(other)
        return Dual(self.primal + p, _tadd(self.tangent, t))

    __radd__ = __add__

    def __sub__(self, other):
        p, t = _split(other)
        return Dual(self.primal - p, _tadd(self.tangent, _tneg(t)))

    def __rsub__(self, other):
        p, t = _split(other)
        return Dual(p - self.primal, _tadd(t, _tneg(self.tangent)))

    def __mul__(self, other):
        p, t = _split(other)
        tan = _tadd(None if self.tangent is None else self.tangent * p,
                    None if t is None else t * self.primal)
        return Dual(self.primal * p, tan)

    __rmul__ = __mul__

    def __truediv__(self, other):
        p, t = _split(other)
        val = self.primal / p
        tan = _tadd(None if self.tangent is None else self.tangent / p,
                    None if t is None else -(t * val / p))
        return Dual(val, tan)

    def __rtruediv__(self, other):
        p, t = _split(other)
        val = p / self.primal
        tan = _tadd(None if t is None else t / self.primal,
                    None if self.tangent is None
                    else -(self.tangent * val / self.primal))
        return Dual(val, tan)

    def __matmul__(self, other):
        p, t = _split(other)
        tan = _tadd(None if self.tangent is None else self.tangent @ p,
                    None if t is None else self.primal @ t)
        return Dual(self.primal @ p, tan)

    def __rmatmul__(self, other):
        p, t = _split(other)
        tan = _tadd(None if t is None else t @ self.primal,
                    None if self.tangent is None else p @ self.tangent)
        return Dual(p @ self.primal, tan)

    def __neg__(self):
        return Dual(-self.primal, _tneg(self.tangent))

    def __getitem__(self, key):
        tan = None if self.tangent is None else self.tangent[key]
        return Dual(self.primal[key], tan)


def _split(x):
    if isinstance(x, Dual):
        return x.primal, x.tangent
    return x, None


def _tadd(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


def _tneg(t):
    return None if t is None else -t


def _graph_of(*xs):
    for x in xs:
        if isinstance(x, Var):
            return x.graph
        if isinstance(x, Dual):
            g = _graph_of(x.primal, x.tangent)
            if g is not None:
                return g
    return None


def _lift(g, x):
    return x if isinstance(x, Var) else g.const(x)


def _unary(x, op, np_fn, dual_rule, aux=None):
    if isinstance(x, Dual):
        return dual_rule(x)
    if isinstance(x, Var):
        return x.graph.apply(op, (x,), aux=aux)
    return np_fn(np.asarray(x))


def sin(x):
    return _unary(x, "sin", np.sin,
                  lambda d: Dual(sin(d.primal),
                                 None if d.tangent is None else cos(d.primal) * d.tangent))


def cos(x):
    return _unary(x, "cos", np.cos,
                  lambda d: Dual(cos(d.primal),
                                 None if d.tangent is None else -(sin(d.primal) * d.tangent)))


def exp(x):
    def rule(d):
        val = exp(d.primal)
        return Dual(val, None if d.tangent is None else val * d.tangent)
    return _unary(x, "exp", np.exp, rule)


def log(x):
    return _unary(x, "log", np.log,
                  lambda d: Dual(log(d.primal),
                                 None if d.tangent is None else d.tangent / d.primal))


def sqrt(x):
    def rule(d):
        val = sqrt(d.primal)
        return Dual(val, None if d.tangent is None else d.tangent * (0.5 / val))
    return _unary(x, "sqrt", np.sqrt, rule)


def absolute(x):
    def rule(d):
        if d.tangent is None:
            return Dual(absolute(d.primal), None)
        s = sign(d.primal)
        return Dual(absolute(d.primal), s * d.tangent)
    return _unary(x, "abs", np.abs, rule)


def sign(x):
    # piecewise constant; only ever used on primal values
    if isinstance(x, Var):
        return x.graph.const(np.sign(x.value))
    if isinstance(x, Dual):
        return sign(x.primal)
    return np.sign(np.asarray(x))


def tanh(x):
    def rule(d):
        val = tanh(d.primal)
        return Dual(val, None if d.tangent is None else (1.0 - val * val) * d.tangent)
    return _unary(x, "tanh", np.tanh, rule)


def sigmoid(x):
    def np_fn(a):
        out = np.empty_like(a, dtype=np.float64)
        pos = a >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        ea = np.exp(a[~pos])
        out[~pos] = ea / (1.0 + ea)
        return out

    def rule(d):
        val = sigmoid(d.primal)
        return Dual(val, None if d.tangent is None else (val * (1.0 - val)) * d.tangent)

    return _unary(x, "sigmoid", lambda a: np_fn(np.asarray(a, dtype=np.float64)), rule)


def softplus(x, beta=1.0):
    def np_fn(a):
        ba = beta * a
        return (np.maximum(ba, 0.0) + np.log1p(np.exp(-np.abs(ba)))) / beta

    def rule(d):
        val = softplus(d.primal, beta)
        if d.tangent is None:
            return Dual(val, None)
        return Dual(val, sigmoid(d.primal * beta) * d.tangent)

    if isinstance(x, Dual):
        return rule(x)
    if isinstance(x, Var):
        return x.graph.apply("softplus", (x,), aux=float(beta))
    return np_fn(np.asarray(x, dtype=np.float64))


def clip(x, lo, hi):
    if isinstance(x, Var):
        return x.graph.apply("clip", (x,), aux=(float(lo), float(hi)))
    if isinstance(x, Dual):
        raise GraphError("clip on Dual values is not supported")
    return np.clip(x, lo, hi)


def sum_(x, axis=None, keepdims=False):
    if isinstance(x, Var):
        return x.graph.apply("sum", (x,), aux=(axis, keepdims))
    if isinstance(x, Dual):
        # tangent directions live in leading axes, so axis must be
        # right-anchored (negative) to mean the same thing for both parts
        if axis is not None and axis >= 0:
            raise GraphError("sum over Dual requires a negative axis")
        tan = None if x.tangent is None else sum_(x.tangent, axis, keepdims)
        return Dual(sum_(x.primal, axis, keepdims), tan)
    return np.sum(x, axis=axis, keepdims=keepdims)


def mean_(x, axis=None, keepdims=False):
    if isinstance(x, Var):
        return x.graph.apply("mean", (x,), aux=(axis, keepdims))
    if isinstance(x, Dual):
        if axis is not None and axis >= 0:
            raise GraphError("mean over Dual requires a negative axis")
        tan = None if x.tangent is None else mean_(x.tangent, axis, keepdims)
        return Dual(mean_(x.primal, axis, keepdims), tan)
    return np.mean(x, axis=axis, keepdims=keepdims)


def concat(parts, axis=-1):
    if any(isinstance(p, Dual) for p in parts):
        if axis != -1:
            raise GraphError("concat over Duals supports the last axis only")
        primals = [p.primal if isinstance(p, Dual) else p for p in parts]
        tangents = [p.tangent if isinstance(p, Dual) else None for p in parts]
        if all(t is None for t in tangents):
            return Dual(concat(primals, axis), None)
        ref = next(i for i, t in enumerate(tangents) if t is not None)
        extra = _shape(tangents[ref])[:_ndim(tangents[ref]) - _ndim(primals[ref])]
        filled = [t if t is not None else zeros_like_tangent(p, extra)
                  for p, t in zip(primals, tangents)]
        return Dual(concat(primals, axis), concat(filled, -1))
    g = _graph_of(*parts)
    if g is not None:
        return g.apply("concat", tuple(_lift(g, p) for p in parts), aux=axis)
    return np.concatenate([np.asarray(p) for p in parts], axis=axis)


def stack(parts, axis=0):
    g = _graph_of(*parts)
    if g is not None:
        return g.apply("stack", tuple(_lift(g, p) for p in parts), aux=axis)
    return np.stack(parts, axis=axis)


def transpose(x, axes):
    if isinstance(x, Var):
        return x.graph.apply("transpose", (x,), aux=tuple(axes))
    return np.transpose(x, axes)


def reshape(x, shape):
    if isinstance(x, Var):
        return x.graph.apply("reshape", (x,), aux=tuple(shape))
    return np.reshape(x, shape)


def take_rows(x, idx):
    idx = np.asarray(idx)
    if isinstance(x, Var):
        return x.graph.apply("take_rows", (x,), aux=idx)
    return x[idx]


def bilinear(grid, p):
    """Bilinear lookup into a constant (H, W, C) grid at points p=(x, y).

    Differentiable w.r.t. p when p is a Var. The grid itself never receives
    gradients.
    """
    grid = np.ascontiguousarray(grid, dtype=np.float64)
    if grid.ndim == 2:
        grid = grid[:, :, None]
    if isinstance(p, Dual):
        raise GraphError("bilinear sampling at Dual positions is not supported")
    if isinstance(p, Var):
        return p.graph.apply("bilinear", (p,), aux=grid)
    from .graph import _bilinear_forward
    return _bilinear_forward(grid, np.asarray(p, dtype=np.float64))


def zeros_like_tangent(primal, extra_shape):
    """A zero tangent for `primal` with leading direction axes `extra_shape`."""
    shape = tuple(extra_shape) + _shape(primal)
    if isinstance(primal, Var):
        return primal.graph.const(np.zeros(shape))
    return np.zeros(shape)


def _shape(x):
    return x.shape if hasattr(x, "shape") else np.shape(x)


def _ndim(x):
    return x.ndim if hasattr(x, "ndim") else np.ndim(x)


def value_of(x):
    """Concrete ndarray value of an ndarray, Var or Dual primal."""
    if isinstance(x, Dual):
        return value_of(x.primal)
    if isinstance(x, Var):
        return x.value
    return np.asarray(x)


def spatial_seed(x, n_dims=None):
    """Wrap points (n, d) in a Dual seeded with the d axis directions.

    The resulting tangent of a downstream scalar has shape (d, n, 1); use
    `gradient_from_tangent` to reshape it into per-point gradients (n, d).
    """
    val = value_of(x)
    if val.ndim != 2:
        raise GraphError("spatial_seed expects points of shape (n, d)")
    n, d = val.shape
    if n_dims is not None:
        d = n_dims
    seeds = np.broadcast_to(np.eye(d)[:, None, :], (d, n, d)).copy()
    if isinstance(x, Var):
        return Dual(x, x.graph.const(seeds))
    return Dual(val, seeds)


def gradient_from_tangent(tangent, n_points, n_dims=3):
    """Tangent (d, n, 1) of a scalar head -> per-point gradient (n, d)."""
    flat = reshape(tangent, (n_dims, n_points))
    return transpose(flat, (1, 0))


def spatial_gradient(f_eval, x, params=None):
    """Value, spatial gradient and recording graph of a scalar program.

    f_eval(graph, points) must accept Dual-seeded points of shape (n, d) and
    return a scalar head of shape (n, 1) (or (n,)). The returned graph allows
    a subsequent backward pass w.r.t. `params` through the gradient itself:
    the gradient node is exposed as graph.grad_output, the value node as
    graph.outputs[0].
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    g = CompGraph(params)
    seeded = spatial_seed(g.const(x))
    out = f_eval(g, seeded)
    if not isinstance(out, Dual) or out.tangent is None:
        raise GraphError("f_eval must propagate Dual tangents")
    primal = out.primal
    if len(primal.shape) == 1:
        primal = reshape(primal, (x.shape[0], 1))
    grad = gradient_from_tangent(out.tangent, x.shape[0], x.shape[1])
    g.outputs = [primal]
    g.grad_output = grad
    return primal.value.reshape(-1), grad.value, g
