"""Minimal dense-tensor engine with reverse-mode differentiation.

Values are double-precision numpy arrays; every differentiable operation
records its inputs so that `backward` can replay the tape in reverse
topological order. The op set is deliberately small: enough to express
masked attention, the segmentation losses, and the embedding losses, and
nothing else (no convolution, no broadcasting beyond bias-style expansion).

`finite_difference_check` is the verification oracle used by both the test
suite and the `gradcheck` CLI command.
"""

from __future__ import annotations

import numpy as np

# Additive attention-mask constant. Finite so that masked logits never turn
# into -inf (which would poison gradients with NaNs); large enough that a
# masked position's probability underflows to exactly 0 after the max shift.
BIG_NEGATIVE = 1e9

_grad_enabled = True


class no_grad:
    """Context manager that disables tape recording (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A dense float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_backward_done")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None
        self._backward_done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all arithmetic routes through the op functions below
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return mul_scalar(self, other)
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul_scalar(self, 1.0 / other)
        return div(self, _as_tensor(other))

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def backward(self):
        backward(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, vjp) -> Tensor:
    """Create an op result, recording the tape only when grads are live."""
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        out._parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce an upstream gradient back to a broadcast input's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape),
                                         _unbroadcast(g * a.data, b.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g / b.data, a.shape),
                                         _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def mul_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make(a.data * s, (a,), lambda g: (g * s,))


def add_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make(a.data + s, (a,), lambda g: (g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    return _make(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ValueError("transpose expects a 2-d tensor")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _make(out, (a,), vjp)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul_scalar(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (g * 2.0 * a.data,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid(a: Tensor) -> Tensor:
    out = _stable_sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), computed without overflow."""
    out = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))
    return _make(out, (a,), lambda g: (g * _stable_sigmoid(a.data),))


def clip_min(a: Tensor, lo: float) -> Tensor:
    """max(a, lo); gradient is zero on the clipped region."""
    mask = a.data > lo
    return _make(np.where(mask, a.data, lo), (a,), lambda g: (g * mask,))


def logsumexp(a: Tensor, axis=-1, keepdims=False) -> Tensor:
    shift = np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(a.data - shift)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + shift
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def vjp(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        return (gg * (e / s),)

    return _make(out, (a,), vjp)


def softmax(a: Tensor, axis=-1) -> Tensor:
    return exp(sub(a, logsumexp(a, axis=axis, keepdims=True)))


def masked_softmax(logits: Tensor, additive_mask) -> Tensor:
    """Softmax over the last axis of `logits + additive_mask`.

    Mask entries are 0 (attend) or -BIG_NEGATIVE (ignore); the mask is a
    constant, not a differentiable input. Rows whose every position is
    masked fall back to a plain softmax of the raw logits, so the result
    never contains NaN and every row sums to 1.
    """
    mask = additive_mask.data if isinstance(additive_mask, Tensor) else np.asarray(additive_mask, dtype=np.float64)
    masked = logits.data + mask
    dead = np.all(np.broadcast_to(mask, masked.shape) <= -BIG_NEGATIVE / 2, axis=-1, keepdims=True)
    z = np.where(dead, logits.data, masked)
    shift = np.max(z, axis=-1, keepdims=True)
    e = np.exp(z - shift)
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (p * (g - np.sum(g * p, axis=-1, keepdims=True)),)

    return _make(p, (logits,), vjp)


def take_rows(a: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.intp)
    out = a.data[idx]

    def vjp(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, idx, g)
        return (acc,)

    return _make(out, (a,), vjp)


def gather_pairs(a: Tensor, rows, cols) -> Tensor:
    """Pick a[rows[i], cols[i]] into a 1-d tensor."""
    r = np.asarray(rows, dtype=np.intp)
    c = np.asarray(cols, dtype=np.intp)
    out = a.data[r, c]

    def vjp(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, (r, c), g)
        return (acc,)

    return _make(out, (a,), vjp)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    """Columns [start, stop) of a 2-d tensor."""
    if a.data.ndim != 2:
        raise ValueError("slice_cols expects a 2-d tensor")
    out = a.data[:, start:stop].copy()

    def vjp(g):
        acc = np.zeros_like(a.data)
        acc[:, start:stop] = g
        return (acc,)

    return _make(out, (a,), vjp)


def concat(tensors, axis=0) -> Tensor:
    tensors = tuple(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, bounds, axis=axis))

    return _make(out, tensors, vjp)


# ---------------------------------------------------------------------------
# composite ops
# ---------------------------------------------------------------------------

def linear(a: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Row-wise affine map: a @ weight.T + bias, weight is (out, in)."""
    return add(matmul(a, transpose(weight)), bias)


def layernorm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then rescale."""
    mu = tmean(a, axis=-1, keepdims=True)
    centered = sub(a, mu)
    var = tmean(square(centered), axis=-1, keepdims=True)
    inv = div(Tensor(np.ones_like(var.data)), sqrt(add_scalar(var, eps)))
    return add(mul(mul(centered, inv), gain), bias)


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Scalar product of two same-shape tensors."""
    return tsum(mul(a, b))


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

class ComputeGraph:
    """Topologically ordered record of the ops reachable from one output."""

    def __init__(self, root: Tensor):
        order = []
        seen = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in seen:
                continue
            if expanded:
                seen.add(id(node))
                order.append(node)
            else:
                stack.append((node, True))
                for p in node._parents:
                    if id(p) not in seen and p.requires_grad:
                        stack.append((p, False))
        self.nodes = order  # parents before children

    def __len__(self):
        return len(self.nodes)


def backward(loss: Tensor):
    """Populate `.grad` on every requires_grad tensor reachable from `loss`."""
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._backward_done:
        raise RuntimeError("backward already ran for this tensor; rebuild the graph first")
    if not loss.requires_grad:
        raise ValueError("loss does not require grad; nothing to differentiate")
    loss._backward_done = True

    graph = ComputeGraph(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = g.copy()
        else:
            node.grad = node.grad + g
        if node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=np.float64)


def finite_difference_check(f, x: Tensor, eps: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` maps a Tensor to a scalar Tensor and must be deterministic. The
    analytic gradient comes from one reverse pass; each coordinate is then
    probed with a symmetric bump of `eps`.
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    backward(out)
    analytic = np.zeros_like(probe.data) if probe.grad is None else probe.grad

    flat = x.data.reshape(-1)
    err = 0.0
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] += eps
        hi = f(Tensor(bumped.reshape(x.shape))).item()
        bumped[i] = flat[i] - eps
        lo = f(Tensor(bumped.reshape(x.shape))).item()
        fd = (hi - lo) / (2.0 * eps)
        a = analytic.reshape(-1)[i]
        err = max(err, abs(a - fd) / max(1.0, abs(a)))
    return err
