"""Small reverse-mode autodiff on top of numpy.

Every op builds a node holding its inputs and a closure that pushes the
output gradient back into them. ``backward`` walks the nodes in reverse
topological order once and then tears the graph down.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

LN_EPS = 1e-5

_grad_enabled = True


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""

    def __init__(self, op: str):
        super().__init__(f"op '{op}' produced non-finite values")
        self.op = op
        self.term: str | None = None  # loss term being built, set by callers


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(op)


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    _check_finite(op, data)
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _shape_error(op: str, *tensors: Tensor, detail: str = "") -> ValueError:
    shapes = ", ".join(str(t.shape) for t in tensors)
    msg = f"{op}: incompatible shapes {shapes}"
    if detail:
        msg += f" ({detail})"
    return ValueError(msg)


# ---------------------------------------------------------------------------
# elementwise / broadcasting


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise _shape_error("add", a, b) from None

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make("add", out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError:
        raise _shape_error("sub", a, b) from None

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make("sub", out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise _shape_error("mul", a, b) from None

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make("mul", out, (a, b), bw)


def square(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        _accum(a, 2.0 * a.data * g)

    return _make("square", a.data * a.data, (a,), bw)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0

    def bw(g):
        _accum(a, g * mask)

    return _make("relu", a.data * mask, (a,), bw)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)

    def bw(g):
        _accum(a, g * (1.0 - y * y))

    return _make("tanh", y, (a,), bw)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _sigmoid_np(a.data)

    def bw(g):
        _accum(a, g * y * (1.0 - y))

    return _make("sigmoid", y, (a,), bw)


def bce_with_logits(logits, target) -> Tensor:
    """Elementwise binary cross-entropy on logits, stable for large |logit|."""
    z = as_tensor(logits)
    y = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=z.dtype)
    x = z.data
    out = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))

    def bw(g):
        _accum(z, g * (_sigmoid_np(x) - y))

    return _make("bce_with_logits", out, (z,), bw)


# ---------------------------------------------------------------------------
# reductions / shape


def sum_(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape))

    return _make("sum", np.asarray(out), (a,), bw)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(sum_(a, axis), 1.0 / float(n))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise _shape_error("reshape", a, detail=f"target {tuple(shape)}") from None

    def bw(g):
        _accum(a, g.reshape(a.shape))

    return _make("reshape", out, (a,), bw)


def swap_last(a) -> Tensor:
    """Transpose the last two axes."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise _shape_error("swap_last", a, detail="needs >= 2 dims")

    def bw(g):
        _accum(a, np.swapaxes(g, -1, -2))

    return _make("swap_last", np.swapaxes(a.data, -1, -2), (a,), bw)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise _shape_error("concat", *ts) from None
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def bw(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[ax] = slice(lo, hi)
                _accum(t, g[tuple(idx)])

    return _make("concat", out, ts, bw)


def slice_(a, idx) -> Tensor:
    """Basic (view-style) indexing; advanced integer indexing is also accepted."""
    a = as_tensor(a)
    try:
        out = a.data[idx]
    except IndexError as exc:
        raise ValueError(f"slice: {exc} on shape {a.shape}") from None

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accum(a, full)

    return _make("slice", np.array(out, copy=True), (a,), bw)


def max_pool(a, axis: int = -2) -> Tensor:
    """Max over ``axis``. Gradient goes to the first (lowest-index) maximiser."""
    a = as_tensor(a)
    arg = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def bw(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        _accum(a, full)

    return _make("max_pool", out, (a,), bw)


def embedding(table, ids) -> Tensor:
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError(f"embedding: ids must be integers, got {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"embedding: token id out of range [0, {table.shape[0]}) (got {ids.min()}..{ids.max()})"
        )

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        _accum(table, full)

    return _make("embedding", table.data[ids], (table,), bw)


# ---------------------------------------------------------------------------
# linear algebra and normalisation


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise _shape_error("matmul", a, b)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise _shape_error("matmul", a, b) from None

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            if b.ndim == 2:
                # fold batch dims: one big gemm instead of a batched one
                a2 = a.data.reshape(-1, a.shape[-1])
                g2 = g.reshape(-1, g.shape[-1])
                _accum(b, a2.T @ g2)
            else:
                _accum(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _make("matmul", out, (a, b), bw)


def softmax(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        _accum(a, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _make("softmax", y, (a,), bw)


def layer_norm(x, gamma=None, beta=None, eps: float = LN_EPS) -> Tensor:
    """Normalise over the last axis, then optional affine ``gamma * xhat + beta``."""
    x = as_tensor(x)
    gamma = None if gamma is None else as_tensor(gamma)
    beta = None if beta is None else as_tensor(beta)
    d = x.shape[-1]
    for p in (gamma, beta):
        if p is not None and p.shape != (d,):
            raise _shape_error("layer_norm", x, p, detail="affine params must be (d,)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    parents = [p for p in (x, gamma, beta) if p is not None]

    def bw(g):
        red = tuple(range(g.ndim - 1))
        if gamma is not None and gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=red))
        if beta is not None and beta.requires_grad:
            _accum(beta, g.sum(axis=red))
        if x.requires_grad:
            gh = g * gamma.data if gamma is not None else g
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            _accum(x, gx)

    return _make("layer_norm", out, parents, bw)


# ---------------------------------------------------------------------------
# LSTM pieces: gate pre-activations come from a concat+matmul+add; the two
# fused elementwise nodes below finish the cell so each cell is a handful of
# graph nodes rather than a dozen.


def _lstm_state(gates, c_prev) -> Tensor:
    gates, c_prev = as_tensor(gates), as_tensor(c_prev)
    hid = c_prev.shape[-1]
    if gates.shape[-1] != 4 * hid:
        raise _shape_error("lstm_cell", gates, c_prev, detail="gates must be 4*hidden wide")
    gi = _sigmoid_np(gates.data[..., :hid])
    gf = _sigmoid_np(gates.data[..., hid : 2 * hid])
    gg = np.tanh(gates.data[..., 2 * hid : 3 * hid])
    c = gf * c_prev.data + gi * gg

    def bw(g):
        if gates.requires_grad:
            full = np.zeros_like(gates.data)
            full[..., :hid] = g * gg * gi * (1.0 - gi)
            full[..., hid : 2 * hid] = g * c_prev.data * gf * (1.0 - gf)
            full[..., 2 * hid : 3 * hid] = g * gi * (1.0 - gg * gg)
            _accum(gates, full)
        _accum(c_prev, g * gf)

    return _make("lstm_state", c, (gates, c_prev), bw)


def _lstm_output(gates, c) -> Tensor:
    gates, c = as_tensor(gates), as_tensor(c)
    hid = c.shape[-1]
    go = _sigmoid_np(gates.data[..., 3 * hid :])
    tc = np.tanh(c.data)

    def bw(g):
        if gates.requires_grad:
            full = np.zeros_like(gates.data)
            full[..., 3 * hid :] = g * tc * go * (1.0 - go)
            _accum(gates, full)
        _accum(c, g * go * (1.0 - tc * tc))

    return _make("lstm_output", go * tc, (gates, c), bw)


def lstm_cell(x, h_prev, c_prev, weight, bias) -> tuple[Tensor, Tensor]:
    """One LSTM step. ``weight`` is (d_in + hidden, 4*hidden), gate order i, f, g, o."""
    x, h_prev, c_prev = as_tensor(x), as_tensor(h_prev), as_tensor(c_prev)
    hid = h_prev.shape[-1]
    if c_prev.shape != h_prev.shape:
        raise _shape_error("lstm_cell", h_prev, c_prev, detail="h and c must match")
    w = as_tensor(weight)
    if w.shape != (x.shape[-1] + hid, 4 * hid):
        raise _shape_error("lstm_cell", x, h_prev, w, detail="weight must be (d_in+hidden, 4*hidden)")
    gates = add(matmul(concat([x, h_prev], axis=-1), w), bias)
    c = _lstm_state(gates, c_prev)
    h = _lstm_output(gates, c)
    return h, c


# ---------------------------------------------------------------------------

_OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softmax": softmax,
    "layer_norm": layer_norm,
    "concat": lambda *ts, axis=-1: concat(ts, axis=axis),
    "slice": slice_,
    "max_pool": max_pool,
    "embedding": embedding,
}


def forward_op(op: str, *inputs, **kwargs) -> Tensor:
    """Dispatch one of the named primitive ops."""
    try:
        fn = _OPS[op]
    except KeyError:
        raise ValueError(f"unknown op '{op}'; expected one of {sorted(_OPS)}") from None
    return fn(*inputs, **kwargs)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Sequence[Tensor] | None = None) -> list[np.ndarray] | None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it.

    The graph is released afterwards, so calling this twice on the same loss
    raises. With ``params`` given, parameters the loss never reached get a
    zero gradient and the list of their gradients is returned.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("backward: loss does not depend on any parameter")
    if loss._backward is None and loss.op != "leaf":
        raise RuntimeError("backward: graph already consumed")
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node.grad = None
    if params is None:
        return None
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    return [p.grad for p in params]


# ---------------------------------------------------------------------------
# optimiser


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray | None],
    state: dict,
    lr: float | Sequence[float],
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """In-place AdamW update with bias correction.

    ``state`` starts as ``{}`` and carries ``t`` plus first/second moments.
    ``lr`` may be per-parameter. Parameters with ``None`` gradient are skipped.
    """
    b1, b2 = betas
    if not state:
        state["t"] = 0
        state["m"] = [np.zeros_like(p.data) for p in params]
        state["v"] = [np.zeros_like(p.data) for p in params]
    state["t"] += 1
    t = state["t"]
    lrs = [lr] * len(params) if np.isscalar(lr) else list(lr)
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v, step in zip(params, grads, state["m"], state["v"], lrs):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"adam_step: grad shape {g.shape} != param shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            p.data *= 1.0 - step * weight_decay
        p.data -= step * (m / c1) / (np.sqrt(v / c2) + eps)


def global_norm(grads: Iterable[np.ndarray | None]) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads if g is not None)))
