"""Reverse-mode differentiation over flat parameter vectors.

The engine records array-valued operations on a tape (`CompGraph`) while the
forward computation runs, then walks the tape backwards to accumulate
adjoints. Values are plain numpy arrays; parameters live in a single flat
`ParamVector` and enter the graph as named leaf nodes. Accumulation order is
fixed by node id, so two backward passes over the same graph are bitwise
identical.

Second-order terms (anything built from a spatial gradient of a recorded
program) are handled by forward-mode duals layered on top of the tape, see
`ops.Dual`. The tape itself only ever needs first-order reverse mode.
"""

from __future__ import annotations

import numpy as np


class GraphError(Exception):
    """Raised for malformed graph construction."""


class NumericError(GraphError):
    """Raised when a non-finite value shows up during backward accumulation."""


class ParamVector:
    """Flat float array with a named-segment layout.

    layout is a list of (name, shape) pairs; segments are stored
    back-to-back in `values`. Views returned by `view()` alias the flat
    storage, so in-place updates to `values` are visible everywhere.
    """

    def __init__(self, values, layout):
        self.values = np.ascontiguousarray(values)
        if self.values.ndim != 1:
            raise GraphError("ParamVector values must be a flat 1-D array")
        self.layout = [(str(name), tuple(int(s) for s in shape)) for name, shape in layout]
        self._offsets = {}
        off = 0
        for name, shape in self.layout:
            if name in self._offsets:
                raise GraphError(f"duplicate segment name {name!r}")
            size = int(np.prod(shape)) if shape else 1
            self._offsets[name] = (off, shape)
            off += size
        if off != self.values.size:
            raise GraphError(
                f"layout covers {off} values but storage holds {self.values.size}"
            )
        if not np.all(np.isfinite(self.values)):
            raise GraphError("ParamVector contains non-finite values")

    @classmethod
    def from_arrays(cls, items):
        """Build from an ordered mapping or iterable of (name, array)."""
        pairs = items.items() if hasattr(items, "items") else items
        pairs = [(name, np.asarray(arr, dtype=np.float64)) for name, arr in pairs]
        flat = (np.concatenate([a.reshape(-1) for _, a in pairs])
                if pairs else np.zeros(0))
        return cls(flat, [(name, a.shape) for name, a in pairs])

    @property
    def size(self):
        return self.values.size

    def segment(self, name):
        """(offset, shape) of a named segment."""
        return self._offsets[name]

    def view(self, name):
        """Writable ndarray view of one segment, reshaped to its layout shape."""
        off, shape = self._offsets[name]
        size = int(np.prod(shape)) if shape else 1
        return self.values[off:off + size].reshape(shape)

    def to_dict(self):
        return {name: self.view(name) for name, _ in self.layout}

    def copy(self):
        return ParamVector(self.values.copy(), self.layout)

    def names(self):
        return [name for name, _ in self.layout]


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (the inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x, beta):
    # softplus(x) = log(1 + exp(beta x)) / beta, computed without overflow
    bx = beta * x
    return (np.maximum(bx, 0.0) + np.log1p(np.exp(-np.abs(bx)))) / beta


def _matmul_vjp_b(a, adj):
    # d(a @ b)/db for b 2-D, summing any stacked leading axes of a.
    if a.ndim == 2:
        return a.T @ adj
    k = a.shape[-1]
    return a.reshape(-1, k).T @ adj.reshape(-1, adj.shape[-1])


def _bilinear_corners(grid, p):
    """Corner indices, weights and values for bilinear lookup.

    grid: (H, W, C); p: (n, 2) as (x=column, y=row) in pixel units.
    Caller guarantees 0 <= x <= W-1 and 0 <= y <= H-1.
    """
    h, w = grid.shape[:2]
    x = p[:, 0]
    y = p[:, 1]
    x0 = np.clip(np.floor(x).astype(np.int64), 0, w - 2) if w > 1 else np.zeros(len(x), np.int64)
    y0 = np.clip(np.floor(y).astype(np.int64), 0, h - 2) if h > 1 else np.zeros(len(y), np.int64)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    v00 = grid[y0, x0]
    v01 = grid[y0, x0 + 1] if w > 1 else v00
    v10 = grid[y0 + 1, x0] if h > 1 else v00
    v11 = grid[y0 + 1, x0 + 1] if (h > 1 and w > 1) else v00
    return fx, fy, v00, v01, v10, v11


def _bilinear_forward(grid, p):
    fx, fy, v00, v01, v10, v11 = _bilinear_corners(grid, p)
    return ((1 - fy) * ((1 - fx) * v00 + fx * v01)
            + fy * ((1 - fx) * v10 + fx * v11))


def _bilinear_vjp(grid, p, adj):
    fx, fy, v00, v01, v10, v11 = _bilinear_corners(grid, p)
    dx = (1 - fy) * (v01 - v00) + fy * (v11 - v10)
    dy = (1 - fx) * (v10 - v00) + fx * (v11 - v01)
    return np.stack([(adj * dx).sum(axis=-1), (adj * dy).sum(axis=-1)], axis=-1)


# op -> forward(aux, *parent values) -> value
_FORWARD = {
    "add": lambda aux, a, b: a + b,
    "sub": lambda aux, a, b: a - b,
    "mul": lambda aux, a, b: a * b,
    "div": lambda aux, a, b: a / b,
    "neg": lambda aux, a: -a,
    "matmul": lambda aux, a, b: a @ b,
    "pow_const": lambda aux, a: a ** aux,
    "exp": lambda aux, a: np.exp(a),
    "log": lambda aux, a: np.log(a),
    "sqrt": lambda aux, a: np.sqrt(a),
    "sin": lambda aux, a: np.sin(a),
    "cos": lambda aux, a: np.cos(a),
    "tanh": lambda aux, a: np.tanh(a),
    "abs": lambda aux, a: np.abs(a),
    "sigmoid": lambda aux, a: _sigmoid(a),
    "softplus": lambda aux, a: _softplus(a, aux),
    "clip": lambda aux, a: np.clip(a, aux[0], aux[1]),
    "sum": lambda aux, a: a.sum(axis=aux[0], keepdims=aux[1]),
    "mean": lambda aux, a: a.mean(axis=aux[0], keepdims=aux[1]),
    "concat": lambda aux, *parts: np.concatenate(parts, axis=aux),
    "stack": lambda aux, *parts: np.stack(parts, axis=aux),
    "slice": lambda aux, a: a[aux],
    "take_rows": lambda aux, a: a[aux],
    "transpose": lambda aux, a: np.transpose(a, aux),
    "reshape": lambda aux, a: a.reshape(aux),
    "bilinear": lambda aux, p: _bilinear_forward(aux, p),
}


def _vjp_sum(aux, adj, value, a):
    axis, keepdims = aux
    if axis is None:
        return (np.broadcast_to(adj, a.shape),)
    if not keepdims:
        adj = np.expand_dims(adj, axis)
    return (np.broadcast_to(adj, a.shape),)


def _vjp_mean(aux, adj, value, a):
    axis, keepdims = aux
    count = a.size if axis is None else a.shape[axis]
    (g,) = _vjp_sum(aux, adj, value, a)
    return (g / count,)


def _vjp_concat(aux, adj, value, *parts):
    axis = aux
    out, start = [], 0
    for part in parts:
        n = part.shape[axis]
        key = [slice(None)] * adj.ndim
        key[axis] = slice(start, start + n)
        out.append(adj[tuple(key)])
        start += n
    return tuple(out)


def _vjp_stack(aux, adj, value, *parts):
    return tuple(np.take(adj, i, axis=aux) for i in range(len(parts)))


def _vjp_slice(aux, adj, value, a):
    g = np.zeros_like(a)
    g[aux] += adj
    return (g,)


def _vjp_take_rows(aux, adj, value, a):
    g = np.zeros_like(a)
    np.add.at(g, aux, adj)
    return (g,)


# op -> vjp(aux, adjoint, value, *parent values) -> parent adjoints
_VJP = {
    "add": lambda aux, adj, v, a, b: (_unbroadcast(adj, a.shape), _unbroadcast(adj, b.shape)),
    "sub": lambda aux, adj, v, a, b: (_unbroadcast(adj, a.shape), _unbroadcast(-adj, b.shape)),
    "mul": lambda aux, adj, v, a, b: (_unbroadcast(adj * b, a.shape), _unbroadcast(adj * a, b.shape)),
    "div": lambda aux, adj, v, a, b: (_unbroadcast(adj / b, a.shape),
                                      _unbroadcast(-adj * a / (b * b), b.shape)),
    "neg": lambda aux, adj, v, a: (-adj,),
    "matmul": lambda aux, adj, v, a, b: (_unbroadcast(adj @ np.swapaxes(b, -1, -2), a.shape),
                                         _matmul_vjp_b(a, adj)),
    "pow_const": lambda aux, adj, v, a: (adj * aux * a ** (aux - 1),),
    "exp": lambda aux, adj, v, a: (adj * v,),
    "log": lambda aux, adj, v, a: (adj / a,),
    "sqrt": lambda aux, adj, v, a: (adj * 0.5 / v,),
    "sin": lambda aux, adj, v, a: (adj * np.cos(a),),
    "cos": lambda aux, adj, v, a: (-adj * np.sin(a),),
    "tanh": lambda aux, adj, v, a: (adj * (1.0 - v * v),),
    "abs": lambda aux, adj, v, a: (adj * np.sign(a),),
    "sigmoid": lambda aux, adj, v, a: (adj * v * (1.0 - v),),
    "softplus": lambda aux, adj, v, a: (adj * _sigmoid(aux * a),),
    "clip": lambda aux, adj, v, a: (adj * ((a > aux[0]) & (a < aux[1])),),
    "sum": _vjp_sum,
    "mean": _vjp_mean,
    "concat": _vjp_concat,
    "stack": _vjp_stack,
    "slice": _vjp_slice,
    "take_rows": _vjp_take_rows,
    "transpose": lambda aux, adj, v, a: (np.transpose(adj, np.argsort(aux)),),
    "reshape": lambda aux, adj, v, a: (adj.reshape(a.shape),),
    "bilinear": lambda aux, adj, v, p: (_bilinear_vjp(aux, p, adj),),
}


class Var:
    """Handle to one tape node. Combines with Vars, arrays and scalars."""

    __slots__ = ("graph", "idx")
    __array_ufunc__ = None  # keep numpy from consuming Vars elementwise

    def __init__(self, graph, idx):
        self.graph = graph
        self.idx = idx

    @property
    def value(self):
        return self.graph._values[self.idx]

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(#{self.idx}, shape={self.value.shape})"

    def _binary(self, op, other, swap=False):
        g = self.graph
        other = other if isinstance(other, Var) else g.const(other)
        a, b = (other, self) if swap else (self, other)
        return g.apply(op, (a, b))

    def __add__(self, other):
        return self._binary("add", other)

    __radd__ = __add__

    def __sub__(self, other):
        return self._binary("sub", other)

    def __rsub__(self, other):
        return self._binary("sub", other, swap=True)

    def __mul__(self, other):
        return self._binary("mul", other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self._binary("div", other)

    def __rtruediv__(self, other):
        return self._binary("div", other, swap=True)

    def __matmul__(self, other):
        return self._binary("matmul", other)

    def __rmatmul__(self, other):
        return self._binary("matmul", other, swap=True)

    def __neg__(self):
        return self.graph.apply("neg", (self,))

    def __pow__(self, c):
        if isinstance(c, Var):
            raise GraphError("only constant exponents are supported")
        return self.graph.apply("pow_const", (self,), aux=float(c))

    def __getitem__(self, key):
        return self.graph.apply("slice", (self,), aux=key)


class CompGraph:
    """Operation tape over an optional bound ParamVector.

    Nodes store (op, parent ids, aux) plus the cached primal value; `replay`
    re-executes the recorded ops from the leaves and must reproduce the cached
    values bit-exactly.
    """

    def __init__(self, params=None, check_finite=True):
        self.params = params
        self.check_finite = check_finite
        self._ops = []      # (op, parents tuple, aux)
        self._values = []
        self._param_cache = {}
        self.outputs = []

    def __len__(self):
        return len(self._ops)

    def _push(self, op, parents, aux, value):
        self._ops.append((op, parents, aux))
        self._values.append(value)
        return Var(self, len(self._ops) - 1)

    def const(self, value):
        return self._push("const", (), None, np.asarray(value, dtype=np.float64))

    def param(self, name):
        """Leaf node aliasing one named segment of the bound ParamVector."""
        if self.params is None:
            raise GraphError("graph has no bound ParamVector")
        if name not in self._param_cache:
            var = self._push("param", (), name, self.params.view(name))
            self._param_cache[name] = var
        return self._param_cache[name]

    def param_dict(self):
        return {name: self.param(name) for name in self.params.names()}

    def apply(self, op, parents, aux=None):
        if op not in _FORWARD:
            raise GraphError(f"unsupported primitive {op!r}")
        for p in parents:
            if p.graph is not self:
                raise GraphError("cannot mix nodes from different graphs")
        value = _FORWARD[op](aux, *(self._values[p.idx] for p in parents))
        return self._push(op, tuple(p.idx for p in parents), aux, np.asarray(value))

    def replay(self):
        """Recompute every node value from the leaves; returns the new list."""
        values = []
        for i, (op, parents, aux) in enumerate(self._ops):
            if op == "const":
                values.append(self._values[i])
            elif op == "param":
                values.append(self.params.view(aux))
            else:
                values.append(np.asarray(_FORWARD[op](aux, *(values[j] for j in parents))))
        return values

    def _run_backward(self, outputs, seed):
        outputs = outputs if isinstance(outputs, (list, tuple)) else [outputs]
        seeds = seed if isinstance(seed, (list, tuple)) else [seed] * len(outputs)
        if len(seeds) != len(outputs):
            raise GraphError("seed length must equal output arity")
        adj = [None] * len(self._ops)
        for out, s in zip(outputs, seeds):
            s = np.broadcast_to(np.asarray(s, dtype=np.float64), out.value.shape)
            adj[out.idx] = s.copy() if adj[out.idx] is None else adj[out.idx] + s
        for i in range(len(self._ops) - 1, -1, -1):
            a = adj[i]
            if a is None:
                continue
            if self.check_finite and not np.all(np.isfinite(a)):
                op = self._ops[i][0]
                raise NumericError(f"non-finite adjoint at node {i} (op {op!r})")
            op, parents, aux = self._ops[i]
            if op in ("const", "param"):
                continue
            grads = _VJP[op](aux, a, self._values[i],
                             *(self._values[j] for j in parents))
            for j, g in zip(parents, grads):
                if g is None:
                    continue
                adj[j] = g.copy() if adj[j] is None else adj[j] + g
        return adj

    def backward(self, outputs, seed=1.0):
        """Gradient of seed-weighted outputs w.r.t. the bound ParamVector."""
        if self.params is None:
            raise GraphError("graph has no bound ParamVector")
        adj = self._run_backward(outputs, seed)
        grad = np.zeros(self.params.size)
        for name, var in self._param_cache.items():
            a = adj[var.idx]
            if a is None:
                continue
            off, shape = self.params.segment(name)
            size = int(np.prod(shape)) if shape else 1
            grad[off:off + size] = a.reshape(-1)
        return grad

    def input_grad(self, outputs, wrt, seed=1.0):
        """Adjoints of arbitrary nodes (e.g. a const input), for testing."""
        adj = self._run_backward(outputs, seed)
        return [adj[v.idx] if adj[v.idx] is not None
                else np.zeros_like(v.value) for v in wrt]


def record(fn, params, inputs):
    """Record fn(graph, input-var) over `params`, returning the graph.

    fn must be composed of the supported primitives; anything else raises
    GraphError during construction.
    """
    g = CompGraph(params)
    x = g.const(inputs)
    out = fn(g, x)
    out = out if isinstance(out, (list, tuple)) else [out]
    g.outputs = list(out)
    return g


def backward(g, seed=1.0):
    """Reverse pass over a recorded graph; returns the flat parameter gradient."""
    if not g.outputs:
        raise GraphError("graph has no recorded outputs")
    return g.backward(g.outputs, seed)
