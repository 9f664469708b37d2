"""Dense float64 tensors with reverse-mode autodiff, Adam, and seeded RNG.

The engine is define-by-run: every op on a :class:`Tensor` that requires
grad records its parents and a local backward rule. ``Tensor.backward()``
walks the recorded graph in reverse topological order.

The op vocabulary is deliberately small. There is no general broadcasting:
binary ops take equal shapes or a Python scalar, and row-vector bias adds
go through :func:`bias_add`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "ShapeError", "NumericError", "UsageError",
    "tensor", "add", "sub", "mul", "neg", "matmul", "bias_add", "relu", "log", "exp",
    "softmax", "log_softmax", "sum", "mean", "reshape", "gather_rows", "concat",
    "segment_mean", "conv3x3", "Graph", "forward", "backward", "AdamState", "adam_step",
    "seeded_rng", "gradcheck", "RNG_ALGORITHM",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for an op."""


class NumericError(ArithmeticError):
    """An op produced NaN or Inf."""


class UsageError(RuntimeError):
    """The graph API was driven in the wrong order."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, *, op="leaf", parents=(), backward=None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if 0 in arr.shape:
            raise ShapeError(f"{name or op}: zero-sized dimension in shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = op
        self.parents = tuple(parents)
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_leaf(self):
        return not self.parents

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def detach(self):
        """Return a constant leaf sharing this tensor's values."""
        return Tensor(self.data, requires_grad=False, name=self.name, op="detach")

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every grad-requiring leaf."""
        if self.data.size != 1:
            _raise_not_scalar(self)
        order = _topo_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node.parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _raise_not_scalar(t):
    raise UsageError(f"{t.name or t.op}: expected a scalar output, got shape {t.shape}")


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
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


def tensor(data, requires_grad=False, name=None):
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(op, data, parents, backward):
    if not np.all(np.isfinite(data)):
        names = ", ".join(p.name or p.op for p in parents)
        raise NumericError(f"{op}: non-finite output (inputs: {names})")
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, op=op, parents=parents, backward=backward)
    return Tensor(data, op=op)


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape} "
                         f"({a.name or a.op}, {b.name or b.op})")


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _node("add", a.data + c, (a,), lambda g: (g,))
    _same_shape("add", a, b)
    return _node("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _node("sub", a.data - c, (a,), lambda g: (g,))
    _same_shape("sub", a, b)
    return _node("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a):
    return _node("neg", -a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _node("mul", a.data * c, (a,), lambda g: (g * c,))
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _node("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def bias_add(x, b):
    """Add a vector ``b`` of shape (F,) to every row of ``x`` (..., F)."""
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"bias_add: bias {b.shape} does not match trailing dim of {x.shape}")
    lead = tuple(range(x.data.ndim - 1))
    return _node("bias_add", x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)))


def relu(x):
    mask = x.data > 0
    return _node("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def log(x):
    xd = x.data
    if np.any(xd <= 0):
        raise NumericError(f"log: non-positive input ({x.name or x.op})")
    return _node("log", np.log(xd), (x,), lambda g: (g / xd,))


def exp(x):
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _node("exp", out, (x,), lambda g: (g * out,))


def _softmax_np(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x):
    """Softmax along the last axis."""
    s = _softmax_np(x.data)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _node("softmax", s, (x,), bw)


def log_softmax(x):
    """Numerically stable log-softmax along the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def bw(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return _node("log_softmax", out, (x,), bw)


# ----------------------------------------------------------------- reductions

def sum(x, axis=None):  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    if axis is None:
        return _node("sum", np.array([x.data.sum()]), (x,),
                     lambda g: (np.full(shape, g.reshape(-1)[0]),))
    ax = axis % x.data.ndim
    out = x.data.sum(axis=ax)
    if out.ndim == 0:
        out = out.reshape(1)
    return _node("sum", out, (x,),
                 lambda g: (np.broadcast_to(np.expand_dims(g.reshape(out.shape), ax), shape).copy(),))


def mean(x, axis=None):
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / n)


# ------------------------------------------------------------- linear algebra

def matmul(a, b):
    """2-D ``(m,k)@(k,n)`` or batched 3-D ``(B,m,k)@(B,k,n)``; no broadcasting."""
    ad, bd = a.data, b.data
    ok = ad.ndim == bd.ndim and ad.ndim in (2, 3) and ad.shape[-1] == bd.shape[-2]
    if ok and ad.ndim == 3:
        ok = ad.shape[0] == bd.shape[0]
    if not ok:
        raise ShapeError(f"matmul: cannot multiply {ad.shape} by {bd.shape} "
                         f"({a.name or a.op}, {b.name or b.op})")

    def bw(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _node("matmul", ad @ bd, (a, b), bw)


# -------------------------------------------------------------------- shaping

def reshape(x, shape):
    shape = tuple(shape)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {old} -> {shape}: {exc}") from None
    return _node("reshape", out, (x,), lambda g: (g.reshape(old),))


def gather_rows(x, index):
    """Select rows of a 2-D tensor; index ``-1`` yields an all-zero row.

    Gradients scatter-add back onto the selected rows, so a row picked k
    times receives k contributions.
    """
    if x.data.ndim != 2:
        raise ShapeError(f"gather_rows: expected 2-D input, got {x.shape}")
    idx = np.asarray(index, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("gather_rows: index must be 1-D")
    if idx.size and (idx.max() >= x.shape[0] or idx.min() < -1):
        raise ShapeError(f"gather_rows: index out of range for {x.shape[0]} rows")
    valid = idx >= 0
    pad = not valid.all()
    if pad:
        out = np.zeros((idx.size, x.shape[1]))
        out[valid] = x.data[idx[valid]]
    else:
        out = x.data[idx]
    rows = x.shape

    def bw(g):
        gx = np.zeros(rows)
        if pad:
            np.add.at(gx, idx[valid], g[valid])
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return _node("gather_rows", out, (x,), bw)


def concat(tensors: Sequence[Tensor]):
    """Concatenate along the last axis."""
    tensors = list(tensors)
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise ShapeError(f"concat: leading dims differ {lead} vs {t.shape[:-1]}")
    widths = np.cumsum([t.shape[-1] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=-1)
    return _node("concat", out, tensors, lambda g: tuple(np.split(g, widths, axis=-1)))


def segment_mean(x, segment_ids, n_segments):
    """Mean of the rows of ``x`` within each segment; returns (n_segments, F)."""
    seg = np.asarray(segment_ids, dtype=np.int64)
    if x.data.ndim != 2 or seg.shape != (x.shape[0],):
        raise ShapeError(f"segment_mean: ids {seg.shape} do not match rows of {x.shape}")
    counts = np.bincount(seg, minlength=n_segments).astype(np.float64)
    if np.any(counts == 0):
        raise ShapeError("segment_mean: empty segment")
    out = np.zeros((n_segments, x.shape[1]))
    np.add.at(out, seg, x.data)
    out /= counts[:, None]
    return _node("segment_mean", out, (x,), lambda g: ((g / counts[:, None])[seg],))


def _im2col3x3(x):
    B, H, W, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    return np.concatenate([xp[:, dy:dy + H, dx:dx + W, :] for dy in range(3) for dx in range(3)],
                          axis=-1).reshape(-1, 9 * c)


def conv3x3(x, w):
    """Stride-1, zero-padded 3x3 convolution of (B, H, W, Cin) by (9*Cin, Cout).

    Weight rows are ordered (dy, dx, cin) with dy, dx in {-1, 0, 1}.
    """
    if x.data.ndim != 4 or w.data.ndim != 2 or w.shape[0] != 9 * x.shape[-1]:
        raise ShapeError(f"conv3x3: input {x.shape} incompatible with weight {w.shape}")
    B, H, W, cin = x.shape
    cols = _im2col3x3(x.data)
    wd = w.data
    cout = wd.shape[1]
    out = (cols @ wd).reshape(B, H, W, cout)
    need_gx = x.requires_grad

    def bw(g):
        gw = cols.T @ g.reshape(-1, cout)
        gx = None
        if need_gx:
            # transpose conv = conv with spatially flipped, channel-transposed kernels
            flipped = wd.reshape(3, 3, cin, cout)[::-1, ::-1].transpose(0, 1, 3, 2).reshape(9 * cout, cin)
            gx = (_im2col3x3(g) @ flipped).reshape(B, H, W, cin)
        return gx, gw

    return _node("conv3x3", out, (x, w), bw)


# ------------------------------------------------------------------ graph API

class Graph:
    """A named-leaf wrapper around a tensor function.

    ``fn`` receives the bound leaves as keyword arguments and returns a
    Tensor. After :meth:`forward`, :meth:`backward` returns gradients of the
    (scalar) output keyed by leaf name.
    """

    def __init__(self, fn: Callable[..., Tensor]):
        self.fn = fn
        self.leaves: dict[str, Tensor] = {}
        self.output: Tensor | None = None
        self.nodes: list[Tensor] = []

    def forward(self, bindings):
        leaves = {}
        for name, value in bindings.items():
            if isinstance(value, Tensor):
                leaf = Tensor(value.data.copy(), requires_grad=value.requires_grad, name=name)
            else:
                leaf = Tensor(value, requires_grad=True, name=name)
            leaves[name] = leaf
        self.leaves = leaves
        self.output = self.fn(**leaves)
        self.nodes = _topo_order(self.output)
        return self.output

    def backward(self):
        if self.output is None:
            raise UsageError("backward called before forward")
        for leaf in self.leaves.values():
            leaf.zero_grad()
        self.output.backward()
        return {name: (leaf.grad if leaf.grad is not None else np.zeros(leaf.shape))
                for name, leaf in self.leaves.items() if leaf.requires_grad}


def forward(graph: Graph, leaf_bindings) -> Tensor:
    return graph.forward(leaf_bindings)


def backward(graph: Graph):
    return graph.backward()


# ---------------------------------------------------------------------- Adam

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update, in place on ``params``.

    ``params`` are Tensors or float arrays; ``grads`` align with them.
    Moment buffers are created lazily on the first call.
    """
    if len(params) != len(grads):
        raise ShapeError(f"adam_step: {len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros(_arr(p).shape) for p in params]
        state.v = [np.zeros(_arr(p).shape) for p in params]
    state.step += 1
    b1, b2, t = state.beta1, state.beta2, state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        arr = _arr(p)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != arr.shape or state.m[i].shape != arr.shape:
            raise ShapeError(f"adam_step: param {i} shape {arr.shape} vs grad {g.shape}")
        m = state.m[i] = b1 * state.m[i] + (1 - b1) * g
        v = state.v[i] = b2 * state.v[i] + (1 - b2) * (g * g)
        arr -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def _arr(p):
    return p.data if isinstance(p, Tensor) else p


# ----------------------------------------------------------------------- RNG

RNG_ALGORITHM = "philox4x64-10/seedsequence"


def seeded_rng(seed, *stream):
    """Deterministic generator: Philox4x64-10 keyed by ``SeedSequence([seed, *stream])``.

    Extra ``stream`` integers derive independent substreams from one seed.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, stream)])))


# ------------------------------------------------------------ gradient check

def gradcheck(fn, inputs, h=1e-6):
    """Compare autodiff to central differences for each named input.

    Returns ``{name: relative error}`` where the error is the max-norm
    difference divided by the larger max-norm of the two gradients.
    """
    graph = Graph(fn)
    graph.forward({k: np.array(v, dtype=np.float64) for k, v in inputs.items()})
    analytic = graph.backward()
    errors = {}
    for name, value in inputs.items():
        base = np.array(value, dtype=np.float64)
        numeric = np.zeros_like(base)
        flat = numeric.reshape(-1)
        for j in range(base.size):
            plus, minus = base.copy(), base.copy()
            plus.reshape(-1)[j] += h
            minus.reshape(-1)[j] -= h
            args_p = {k: (plus if k == name else np.asarray(v, dtype=np.float64)) for k, v in inputs.items()}
            args_m = {k: (minus if k == name else np.asarray(v, dtype=np.float64)) for k, v in inputs.items()}
            fp = fn(**{k: Tensor(v) for k, v in args_p.items()}).item()
            fm = fn(**{k: Tensor(v) for k, v in args_m.items()}).item()
            flat[j] = (fp - fm) / (2 * h)
        a = analytic[name]
        scale = max(np.abs(a).max(), np.abs(numeric).max())
        errors[name] = 0.0 if scale == 0 else float(np.abs(a - numeric).max() / scale)
    return errors
