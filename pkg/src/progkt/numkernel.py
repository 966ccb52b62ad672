"""Dense float64 tensors with tape-based reverse-mode autodiff, plus Adam.

Usage::

    with Tape() as tape:
        y = tanh(x @ w)
        loss = y.sum()
    tape.backward(loss)      # or backward(loss)

Operations only record when a tape is active and at least one input
requires a gradient; outside a tape everything runs as plain numpy.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

DTYPE = np.float64
BCE_EPS = 1e-7

_tape_stack: list["Tape"] = []


class DimensionError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class Tape:
    """Ordered record of differentiable operations for one forward pass."""

    def __init__(self):
        self.ops = []

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack.remove(self)
        return False

    def record(self, out, inputs, backward_fn):
        out._tape = self
        out._is_op = True
        self.ops.append((out, inputs, backward_fn))

    def backward(self, loss: "Tensor"):
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise ContractError("loss does not depend on any tensor requiring grad")
        if loss._tape is not None and loss._tape is not self:
            raise ContractError("loss was recorded on a different tape")
        loss._accumulate(np.ones_like(loss.data))
        for out, inputs, fn in reversed(self.ops):
            if out.grad is None:
                continue
            grads = fn(out.grad)
            for inp, g in zip(inputs, grads):
                if g is not None and inp.requires_grad:
                    inp._accumulate(g)
            out.grad = None  # intermediate buffers are freed as soon as consumed
        self.ops = []


def _active_tape():
    return _tape_stack[-1] if _tape_stack else None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_tape", "_is_op", "name")
    __array_ufunc__ = None  # make ndarray (op) Tensor defer to the Tensor methods

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._tape = None
        self._is_op = False
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        g = np.asarray(g, dtype=DTYPE)
        if g.shape != self.data.shape:
            g = _unbroadcast(g, self.data.shape)
        # out-of-place accumulation: ``g`` may be shared with another input
        self.grad = g if self.grad is None else self.grad + g

    def backward(self):
        if self._tape is None:
            raise ContractError("tensor was not produced on a tape")
        self._tape.backward(self)

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

    def __getitem__(self, key):
        return take(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _make(data, inputs, backward_fn):
    """Wrap an op result and record it when something upstream needs a gradient."""
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(out, inputs, backward_fn)
    return out


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    """Elementwise (Hadamard) product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def tanh(x):
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x):
    x = as_tensor(x)
    y = _sigmoid(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def exp(x):
    x = as_tensor(x)
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def log(x):
    x = as_tensor(x)
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


def leaky_relu(x, slope=0.2):
    x = as_tensor(x)
    scale = np.where(x.data > 0, 1.0, slope)
    return _make(x.data * scale, (x,), lambda g: (g * scale,))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, (a, b), backward)


def tanh_recurrence(x, w):
    """Run h_k = tanh(x_k + h_{k-1} @ w.T) over axis 1 of ``x`` (batch, steps, hidden).

    The initial state is zero. Fused op: one tape entry, backward is an
    explicit backprop-through-time loop.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.shape != (x.shape[2], x.shape[2]):
        raise DimensionError(f"tanh_recurrence: input {x.shape} incompatible with weight {w.shape}")
    n, steps, hdim = x.shape
    xd, wd = x.data, w.data
    h = np.empty_like(xd)
    prev = np.zeros((n, hdim))
    for k in range(steps):
        prev = np.tanh(xd[:, k] + prev @ wd.T)
        h[:, k] = prev

    def backward(g):
        gx = np.empty_like(xd)
        gw = np.zeros_like(wd)
        carry = np.zeros((n, hdim))
        for k in range(steps - 1, -1, -1):
            dpre = (g[:, k] + carry) * (1.0 - h[:, k] ** 2)
            gx[:, k] = dpre
            if k > 0:
                gw += dpre.T @ h[:, k - 1]
            carry = dpre @ wd
        return gx, gw

    return _make(h, (x, w), backward)


# ---------------------------------------------------------------- structural

def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat: incompatible shapes {shapes} on axis {axis}") from exc
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(data, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return _make(data, tuple(tensors),
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def gather_rows(table, index):
    """Look up rows of a 2-D table; result shape is ``index.shape + (d,)``."""
    table = as_tensor(table)
    index = np.asarray(index, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError(f"gather_rows: table must be 2-D, got {table.shape}")
    n = table.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise IndexError(f"gather_rows: index out of range for table with {n} rows")

    def backward(g):
        return (scatter_rows(table.shape[0], index.reshape(-1), g.reshape(-1, table.shape[1])),)

    return _make(table.data[index], (table,), backward)


def scatter_rows(n_rows, index, rows):
    """Sum ``rows`` into an (n_rows, d) array at ``index``; a sparse product is far
    faster than ``np.add.at`` for long index vectors."""
    m = len(index)
    onehot = sparse.csr_matrix((np.ones(m), (index, np.arange(m))), shape=(n_rows, m))
    return np.asarray(onehot @ rows)


def take(x, key):
    """Basic or fancy indexing, as in ``x[key]``."""
    x = as_tensor(x)
    shape = x.shape

    keys = key if isinstance(key, tuple) else (key,)
    fancy = any(isinstance(k, (list, np.ndarray)) for k in keys)

    def backward(g):
        out = np.zeros(shape)
        if fancy:
            np.add.at(out, key, g)
        else:
            out[key] += g
        return (out,)

    return _make(x.data[key], (x,), backward)


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def swapaxes(x, a1, a2):
    x = as_tensor(x)
    return _make(np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),))


def conv1d(x, w, b, width):
    """Valid 1-D convolution over axis 1: (n, T, e) with kernel (width * e, f) -> (n, T - width + 1, f).

    Same result as ``unfold1d(x, width) @ w + b`` without materialising the
    unfolded windows.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    n, steps, e = x.shape
    if width > steps or w.shape[0] != width * e:
        raise DimensionError(f"conv1d: input {x.shape}, kernel {w.shape}, width {width}")
    out_steps = steps - width + 1
    xd, wd = x.data, w.data
    out = np.broadcast_to(b.data, (n, out_steps, w.shape[1])).copy()
    for i in range(width):
        out += xd[:, i:i + out_steps] @ wd[i * e:(i + 1) * e]

    def backward(g):
        gx = np.zeros_like(xd)
        gw = np.empty_like(wd)
        g2 = g.reshape(-1, g.shape[-1])
        for i in range(width):
            blk = wd[i * e:(i + 1) * e]
            gx[:, i:i + out_steps] += g @ blk.T
            gw[i * e:(i + 1) * e] = xd[:, i:i + out_steps].reshape(-1, e).T @ g2
        return gx, gw, g2.sum(axis=0)

    return _make(out, (x, w, b), backward)


def unfold1d(x, width):
    """Sliding windows over axis 1: (n, T, e) -> (n, T - width + 1, width * e)."""
    x = as_tensor(x)
    n, steps, e = x.shape
    if width > steps:
        raise DimensionError(f"unfold1d: window {width} longer than sequence {steps}")
    out_steps = steps - width + 1
    cols = [x.data[:, i:i + out_steps] for i in range(width)]

    def backward(g):
        gx = np.zeros_like(x.data)
        for i in range(width):
            gx[:, i:i + out_steps] += g[..., i * e:(i + 1) * e]
        return (gx,)

    return _make(np.concatenate(cols, axis=-1), (x,), backward)


# ---------------------------------------------------------------- reductions

def sum_(x, axis=None, keepdims=False):
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), 1.0 / count)


def max_(x, axis):
    """Max over one axis; the gradient goes to the first maximal entry."""
    x = as_tensor(x)
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _make(np.squeeze(out, axis), (x,), backward)


# ---------------------------------------------------------------- normalisation and losses

def softmax(x, axis=-1, mask=None):
    """Max-stabilised softmax. Entries where ``mask`` is False get weight exactly 0
    and never influence the valid entries."""
    x = as_tensor(x)
    xd = x.data
    if xd.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    if mask is None:
        shifted = xd - xd.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
        top = np.where(mask, xd, -np.inf).max(axis=axis, keepdims=True)
        top = np.where(np.isfinite(top), top, 0.0)
        e = np.where(mask, np.exp(np.where(mask, xd - top, 0.0)), 0.0)
    total = e.sum(axis=axis, keepdims=True)
    y = e / np.where(total > 0, total, 1.0)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), backward)


def softmax_row(s):
    """Softmax of a single 1 x n row."""
    s = as_tensor(s)
    if s.ndim != 2 or s.shape[0] != 1 or s.shape[1] == 0:
        raise DimensionError(f"softmax_row expects a non-empty 1 x n row, got {s.shape}")
    return softmax(s, axis=-1)


def bce_loss(pred, target, mask=None, eps=BCE_EPS):
    """Summed binary cross-entropy over the masked entries of ``pred``."""
    pred = as_tensor(pred)
    r = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=DTYPE)
    m = np.ones_like(r) if mask is None else np.asarray(
        mask.data if isinstance(mask, Tensor) else mask, dtype=DTYPE)
    if r.shape != pred.shape or m.shape != pred.shape:
        raise DimensionError(f"bce_loss: pred {pred.shape}, target {r.shape}, mask {m.shape}")
    p = np.clip(pred.data, eps, 1.0 - eps)
    terms = -(r * np.log(p) + (1.0 - r) * np.log(1.0 - p))
    loss = np.sum(np.where(m > 0, terms, 0.0))
    inside = (pred.data > eps) & (pred.data < 1.0 - eps)

    def backward(g):
        d = (-r / p + (1.0 - r) / (1.0 - p)) * inside
        return (np.where(m > 0, g * d, 0.0),)

    return _make(np.asarray(loss), (pred,), backward)


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy of (n, k) logits against integer labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape}, labels {labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        d = np.exp(logp)
        d[np.arange(n), labels] -= 1.0
        return (g * d / n,)

    return _make(np.asarray(loss), (logits,), backward)


def backward(loss: Tensor):
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise ContractError("loss was not produced on a tape")
    loss._tape.backward(loss)


# ---------------------------------------------------------------- parameters and Adam

def uniform_init(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState):
    """Bias-corrected Adam update, applied to each ``param.data`` in place."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(grads) != len(params):
        raise ContractError("adam_step: one gradient per parameter required")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            raise ContractError(f"adam_step: missing gradient for parameter {p.name or p.shape}")
        if m.shape != p.data.shape:
            raise DimensionError(f"adam_step: moment shape {m.shape} vs parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    """Adam over a fixed list of parameters; parameters without a gradient are
    treated as having a zero gradient."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step(self.params, grads, self.state)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------- gradient checking

def gradcheck(loss_fn, params, rng, n_coords=100, h=1e-5, floor=1e-6):
    """Compare tape gradients with central differences on random coordinates.

    ``loss_fn`` takes no arguments and returns a scalar Tensor built from
    ``params``. Returns the maximum relative error
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.
    """
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    sizes = np.array([p.data.size for p in params])
    flat = rng.choice(sizes.sum(), size=min(n_coords, sizes.sum()), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for f in flat:
        which = int(np.searchsorted(offsets, f, side="right") - 1)
        p = params[which]
        idx = np.unravel_index(f - offsets[which], p.shape)
        old = p.data[idx]
        p.data[idx] = old + h
        up = loss_fn().item()
        p.data[idx] = old - h
        down = loss_fn().item()
        p.data[idx] = old
        numeric = (up - down) / (2 * h)
        a = analytic[which][idx]
        err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        worst = max(worst, err)
    return worst
