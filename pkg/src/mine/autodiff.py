"""Minimal reverse-mode differentiation on f64 numpy arrays.

Define-by-run tape: every op returns a Tensor holding its value, its
parents, and a closure that routes the output gradient to the parents.
Ops are array-level (a matmul is one node), so training loops spend
their time inside BLAS, not in Python graph bookkeeping.

Gradients only flow where they are wanted: explicitly constructed
Tensors are differentiable leaves, raw arrays fed to ops are constants,
and interior nodes inherit the need for gradients from their parents.
Everything is float64; broadcasting follows numpy and gradients are
summed back across broadcast axes.
"""

import numpy as np

from .errors import ShapeError, StateError

__all__ = [
    "Tensor",
    "constant",
    "add",
    "sub",
    "neg",
    "mul",
    "matmul",
    "transpose_last2",
    "getitem",
    "relu",
    "softmax",
    "tsum",
    "tmean",
    "reshape",
    "stack",
    "backward",
    "adam_init",
    "adam_step",
]


class Tensor:
    """Array node in the computation graph.

    Directly constructed Tensors are differentiable leaves (parameters);
    use constant() for data that never needs gradients.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, parents=(), requires_grad=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._backward = None
        if requires_grad is None:
            requires_grad = (
                any(p.requires_grad for p in parents) if parents else True
            )
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    # operator sugar; constants are wrapped on the fly
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def backward(self):
        backward(self)


def constant(data) -> Tensor:
    """A graph leaf that never receives gradients."""
    return Tensor(data, requires_grad=False)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _accumulate(t: Tensor, g: np.ndarray, owned: bool = True):
    """Add g into t.grad. owned=False marks g as a view of someone
    else's buffer, forcing a copy on first write."""
    if t.grad is None:
        t.grad = np.asarray(g) if owned else np.array(g)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape):
    """Sum gradient over axes that were broadcast in the forward pass.

    Returns (grad, owned): owned is False when g passed through
    untouched and is still someone else's buffer.
    """
    owned = False
    while g.ndim > len(shape):
        g = g.sum(axis=0)
        owned = True
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
            owned = True
    return g, owned


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data + b.data, (a, b))

    def back(g):
        if a.requires_grad:
            ga, owned = _unbroadcast(g, a.data.shape)
            _accumulate(a, ga, owned)
        if b.requires_grad:
            gb, owned = _unbroadcast(g, b.data.shape)
            _accumulate(b, gb, owned)

    out._backward = back
    return out


def neg(a) -> Tensor:
    a = _wrap(a)
    out = Tensor(-a.data, (a,))

    def back(g):
        if a.requires_grad:
            _accumulate(a, -g)

    out._backward = back
    return out


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data - b.data, (a, b))

    def back(g):
        if a.requires_grad:
            ga, owned = _unbroadcast(g, a.data.shape)
            _accumulate(a, ga, owned)
        if b.requires_grad:
            gb, _ = _unbroadcast(-g, b.data.shape)
            _accumulate(b, gb, True)

    out._backward = back
    return out


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data * b.data, (a, b))

    def back(g):
        if a.requires_grad:
            ga, _ = _unbroadcast(g * b.data, a.data.shape)
            _accumulate(a, ga, True)
        if b.requires_grad:
            gb, _ = _unbroadcast(g * a.data, b.data.shape)
            _accumulate(b, gb, True)

    out._backward = back
    return out


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(np.matmul(a.data, b.data), (a, b))

    def back(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            ga, _ = _unbroadcast(ga, a.data.shape)
            _accumulate(a, ga, True)
        if b.requires_grad:
            if b.data.ndim == 2 and a.data.ndim > 2:
                # shared weight matrix applied across batch: one GEMM
                am = a.data.reshape(-1, a.data.shape[-1])
                gm = g.reshape(-1, g.shape[-1])
                _accumulate(b, am.T @ gm, True)
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                gb, _ = _unbroadcast(gb, b.data.shape)
                _accumulate(b, gb, True)

    out._backward = back
    return out


def transpose_last2(a) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.swapaxes(a.data, -1, -2), (a,))

    def back(g):
        if a.requires_grad:
            _accumulate(a, np.swapaxes(g, -1, -2), owned=False)

    out._backward = back
    return out


def getitem(a, idx) -> Tensor:
    """Basic indexing only (slices / ints / Ellipsis): selected regions
    must be disjoint for the scatter-add in the backward pass."""
    a = _wrap(a)
    out = Tensor(a.data[idx], (a,))

    def back(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[idx] += g
            _accumulate(a, buf, True)

    out._backward = back
    return out


def relu(a) -> Tensor:
    """max(x, 0); the subgradient at the kink is fixed to 0."""
    a = _wrap(a)
    out = Tensor(np.maximum(a.data, 0.0), (a,))

    def back(g):
        if a.requires_grad:
            _accumulate(a, g * (a.data > 0.0), True)

    out._backward = back
    return out


def softmax(a) -> Tensor:
    """Row-wise softmax over the last axis, stabilized by max subtraction."""
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y, (a,))

    def back(g):
        if a.requires_grad:
            dot = np.sum(g * y, axis=-1, keepdims=True)
            _accumulate(a, y * (g - dot), True)

    out._backward = back
    return out


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), (a,))

    def back(g):
        if a.requires_grad:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(g, a.data.shape), owned=False)

    out._backward = back
    return out


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims), (a,))

    def back(g):
        if a.requires_grad:
            g = g / count
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(g, a.data.shape), owned=False)

    out._backward = back
    return out


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    out = Tensor(a.data.reshape(shape), (a,))

    def back(g):
        if a.requires_grad:
            _accumulate(a, g.reshape(a.data.shape), owned=False)

    out._backward = back
    return out


def stack(tensors, axis: int = 0) -> Tensor:
    """Stack equal-shape tensors along a new axis."""
    tensors = [_wrap(t) for t in tensors]
    out = Tensor(np.stack([t.data for t in tensors], axis=axis), tuple(tensors))

    def back(g):
        pieces = np.moveaxis(g, axis, 0)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                _accumulate(t, piece, owned=False)

    out._backward = back
    return out


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar node; fills .grad on every
    requiring node of the graph."""
    if not isinstance(loss, Tensor):
        raise StateError("backward expects a Tensor produced by a forward pass")
    if loss.data.size != 1:
        raise StateError(f"backward needs a scalar loss, got shape {loss.data.shape}")

    topo = []
    visited = set()
    stack_ = [(loss, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack_.append((p, False))

    for node in topo:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.requires_grad:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# Adam


def adam_init(params) -> dict:
    """Fresh optimizer state for a list of parameter Tensors."""
    return {
        "m": [np.zeros_like(p.data) for p in params],
        "v": [np.zeros_like(p.data) for p in params],
        "t": 0,
    }


def adam_step(params, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """In-place Adam update with bias correction.

    grads entries may be None (parameter unused this step: treated as a
    zero gradient, so the parameter only decays its moments).
    """
    if len(params) != len(grads) or len(params) != len(state["m"]):
        raise ShapeError("params, grads and state must be parallel lists")
    state["t"] += 1
    t = state["t"]
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if g is None:
            g = 0.0
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
