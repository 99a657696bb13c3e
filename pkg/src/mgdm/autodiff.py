"""Reverse-mode automatic differentiation over dense float64 arrays.

The graph is a dynamic tape: every operation returns a new ``Tensor``
recording its parent tensors and a closure that computes vector-Jacobian
products. ``backward`` replays the records once, in reverse topological
order, and accumulates gradients into the ``.grad`` buffers of leaf
tensors. A ``no_grad`` context suspends recording entirely (teacher
forwards, finite-difference probes).

Conventions:
  * compute dtype is float64 end to end;
  * broadcasting in binary ops is limited to leading-axis expansion:
    shapes must match exactly or one must be a trailing suffix of the
    other (scalars included);
  * tensors are immutable after creation, except for ``.grad``.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

# per-thread so concurrent graphs (sweep cells, teacher forwards) stay isolated
_tape_state = threading.local()


@contextlib.contextmanager
def no_grad():
    """Suspend tape recording inside the block, for the current thread."""
    prev = getattr(_tape_state, "enabled", True)
    _tape_state.enabled = False
    try:
        yield
    finally:
        _tape_state.enabled = prev


def is_recording() -> bool:
    return getattr(_tape_state, "enabled", True)


class Tensor:
    """Dense float64 array plus an accumulated gradient buffer.

    Leaves created with ``requires_grad=True`` own a zero-initialised
    ``.grad`` that ``backward`` accumulates into. Intermediate results
    instead carry a tape record: their parents and a local backward rule.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def is_leaf(self) -> bool:
        return not self._parents

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        """Copy of the value with no graph attached."""
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("division only by python scalars")
        return mul(self, as_tensor(1.0 / other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def parameter(data) -> Tensor:
    """Leaf tensor that participates in gradient accumulation."""
    return Tensor(data, requires_grad=True)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    """Internal tape-node constructor. ``vjp(g)`` must return one gradient
    (or None) per parent, aligned positionally."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if is_recording() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


# -- backward pass -----------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable requires_grad leaf.

    Repeated calls without zeroing grads add up. Raises on non-scalar loss.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    # Reverse topological order, iteratively (graphs can be deep).
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for p, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in flowing:
                flowing[key] = flowing[key] + pg
            else:
                flowing[key] = pg


# -- broadcasting helpers ----------------------------------------------


def _check_broadcast(a: tuple[int, ...], b: tuple[int, ...]) -> None:
    if a == b:
        return
    small, big = (a, b) if len(a) < len(b) else (b, a)
    if len(small) == len(big) or big[len(big) - len(small):] != small:
        raise ValueError(
            f"shapes {a} and {b} are not leading-axis broadcastable"
        )


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    return g.sum(axis=tuple(range(extra)))


# -- elementwise primitives ----------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape)
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape)
    return _node(
        a.data - b.data,
        (a, b),
        lambda g: (_reduce_to(g, a.shape), -_reduce_to(g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape)
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)),
    )


def neg(x: Tensor) -> Tensor:
    return _node(-x.data, (x,), lambda g: (-g,))


def exp(x: Tensor) -> Tensor:
    out_data = np.exp(x.data)
    return _node(out_data, (x,), lambda g: (g * out_data,))


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_stable(x.data)
    return _node(s, (x,), lambda g: (g * s * (1.0 - s),))


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x), elementwise."""
    s = _sigmoid_stable(x.data)
    return _node(
        x.data * s,
        (x,),
        lambda g: (g * s * (1.0 + x.data * (1.0 - s)),),
    )


def softplus(x: Tensor) -> Tensor:
    """ln(1 + e^x), stable for large |x|: max(x, 0) + log1p(e^-|x|)."""
    d = x.data
    out = np.maximum(d, 0.0) + np.log1p(np.exp(-np.abs(d)))
    return _node(out, (x,), lambda g: (g * _sigmoid_stable(d),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _node(t, (x,), lambda g: (g * (1.0 - t * t),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


# -- reductions and losses -----------------------------------------------


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    return _node(
        np.asarray(x.data.sum()),
        (x,),
        lambda g: (np.broadcast_to(g, x.shape),),
    )


def mean(x: Tensor) -> Tensor:
    return tsum(x) * (1.0 / x.size)


def mse(x: Tensor, y: Tensor) -> Tensor:
    """Mean of squared differences over all elements; shapes must match."""
    if x.shape != y.shape:
        raise ValueError(f"mse shape mismatch: {x.shape} vs {y.shape}")
    d = sub(x, y)
    return tsum(mul(d, d)) * (1.0 / x.size)


# -- linear algebra ------------------------------------------------------


def matmul(x: Tensor, w: Tensor) -> Tensor:
    """Contract the last axis of ``x`` with a 2-D matrix ``w`` (K, M)."""
    if w.ndim != 2:
        raise ValueError(f"matmul expects a 2-D right operand, got {w.shape}")
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"matmul shape mismatch: {x.shape} @ {w.shape}")
    k, m = w.shape

    def vjp(g):
        gx = g @ w.data.T
        gw = x.data.reshape(-1, k).T @ g.reshape(-1, m)
        return gx, gw

    return _node(x.data @ w.data, (x, w), vjp)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return add(y, b) if b is not None else y


# -- shape manipulation ---------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    return _node(
        x.data.reshape(shape),
        (x,),
        lambda g: (g.reshape(x.shape),),
    )


def getitem(x: Tensor, idx) -> Tensor:
    out_data = x.data[idx]

    def vjp(g):
        buf = np.zeros_like(x.data)
        np.add.at(buf, idx, g)
        return (buf,)

    return _node(out_data, (x,), vjp)


def stack(tensors: list[Tensor], axis: int) -> Tensor:
    data = np.stack([t.data for t in tensors], axis=axis)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _node(data, tuple(tensors), vjp)


def embedding_lookup(table: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows of a (V, D) table by an integer index array."""
    idx = np.asarray(idx)

    def vjp(g):
        buf = np.zeros_like(table.data)
        np.add.at(buf, idx, g)
        return (buf,)

    return _node(table.data[idx], (table,), vjp)


# -- normalisation ---------------------------------------------------------

LAYER_NORM_EPS = 1e-5


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Normalise over the last (channel) axis, then apply the affine map.

    gain and bias are (D,) vectors broadcast over leading axes.
    """
    d = x.shape[-1]
    if d == 0:
        raise ValueError("layer_norm over an empty channel axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        dgain = _reduce_to(g * xhat, gain.shape)
        dbias = _reduce_to(g, bias.shape)
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dgain, dbias

    return _node(out, (x, gain, bias), vjp)


# -- causal depthwise convolution -------------------------------------------


def conv1d_causal(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Depthwise causal conv along the token axis.

    x: (B, L, D); kernel: (D, W); bias: (D,). Output position t sees
    tokens <= t only (left zero-padding of W-1); kernel[:, -1] multiplies
    the current token.
    """
    if x.ndim != 3 or kernel.ndim != 2:
        raise ValueError("conv1d_causal expects x (B,L,D) and kernel (D,W)")
    b_, l_, d_ = x.shape
    dk, w_ = kernel.shape
    if dk != d_:
        raise ValueError(f"kernel channels {dk} != input channels {d_}")
    xp = np.concatenate([np.zeros((b_, w_ - 1, d_)), x.data], axis=1)
    out = np.zeros((b_, l_, d_))
    for w in range(w_):
        out += kernel.data[:, w] * xp[:, w:w + l_, :]
    out += bias.data

    def vjp(g):
        gk = np.empty_like(kernel.data)
        for w in range(w_):
            gk[:, w] = (g * xp[:, w:w + l_, :]).sum(axis=(0, 1))
        gb = g.sum(axis=(0, 1))
        gp = np.concatenate([g, np.zeros((b_, w_ - 1, d_))], axis=1)
        kf = kernel.data[:, ::-1]
        gx = np.zeros((b_, l_, d_))
        for w in range(w_):
            gx += kf[:, w] * gp[:, w:w + l_, :]
        return gx, gk, gb

    return _node(out, (x, kernel, bias), vjp)


def global_grad_norm(params) -> float:
    """L2 norm over the concatenated grads of an iterable of tensors."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    return float(np.sqrt(total))
