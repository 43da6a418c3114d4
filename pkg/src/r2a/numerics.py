"""Dense float64 tensors with reverse-mode autodiff, Adam and loss primitives.

The graph is built eagerly: every operation on a :class:`Tensor` that needs
a gradient records its parents and a vector-Jacobian closure.  ``backward``
walks the graph once in reverse topological order.  Leaf tensors created
with ``requires_grad=True`` accumulate into ``.grad`` across calls; callers
reset with :meth:`Tensor.zero_grad` between steps.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64

_grad_enabled = True


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


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse-mode AD."""

    __slots__ = ("data", "_grad", "requires_grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self._grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

    @classmethod
    def _make(cls, data, parents, backward, op):
        out = cls.__new__(cls)
        out.data = data
        out._grad = None
        out.name = None
        out.op = op
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # ------------------------------------------------------------------ basics
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def grad(self):
        if self._grad is None:
            return np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = None if value is None else np.asarray(value, dtype=DTYPE)

    def zero_grad(self):
        self._grad = None

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    # --------------------------------------------------------------- backward
    def _topo(self):
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return order

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            return
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(self._topo()):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._grad = g.copy() if node._grad is None else node._grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                k = id(p)
                grads[k] = grads[k] + pg if k in grads else pg

    # ------------------------------------------------------------- arithmetic
    def __add__(self, other):
        other = _as_tensor(other)
        a, b = self.data, other.data
        return Tensor._make(
            a + b, (self, other),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other):
        other = _as_tensor(other)
        a, b = self.data, other.data
        return Tensor._make(
            a - b, (self, other),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")

    def __rsub__(self, other):
        return _as_tensor(other) - self

    def __mul__(self, other):
        other = _as_tensor(other)
        a, b = self.data, other.data
        return Tensor._make(
            a * b, (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)), "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)
        a, b = self.data, other.data
        return Tensor._make(
            a / b, (self, other),
            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)),
            "div")

    def __rtruediv__(self, other):
        return _as_tensor(other) / self

    def __pow__(self, k):
        if not np.isscalar(k):
            raise TypeError("only scalar exponents are supported")
        a = self.data
        return Tensor._make(a ** k, (self,), lambda g: (g * k * a ** (k - 1),), "pow")

    def __matmul__(self, other):
        other = _as_tensor(other)
        a, b = self.data, other.data
        if a.ndim < 2:
            raise ValueError("left operand of @ must be at least 2-D")
        if b.ndim == 1:
            out = a @ b

            def backward(g):
                return g[..., None] * b, np.tensordot(g, a, axes=(tuple(range(g.ndim)),) * 2)

            return Tensor._make(out, (self, other), backward, "matvec")

        out = a @ b

        def backward(g):
            ga = g @ np.swapaxes(b, -1, -2)
            if b.ndim == 2 and a.ndim > 2:
                gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape)
            return _unbroadcast(ga, a.shape), gb

        return Tensor._make(out, (self, other), backward, "matmul")

    def __getitem__(self, idx):
        a = self.data
        out = a[idx]

        def backward(g):
            full = np.zeros_like(a)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor._make(np.array(out, dtype=DTYPE), (self,), backward, "index")

    # -------------------------------------------------------------- reductions
    def sum(self, axis=None, keepdims=False):
        a = self.data
        out = a.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return Tensor._make(np.asarray(out, dtype=DTYPE), (self,), backward, "sum")

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[i] for i in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def max(self, axis):
        """Max along one axis; the gradient goes to the first maximiser."""
        a = self.data
        idx = np.argmax(a, axis=axis)
        out = np.take_along_axis(a, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

        def backward(g):
            full = np.zeros_like(a)
            np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
            return (full,)

        return Tensor._make(out, (self,), backward, "max")

    # ------------------------------------------------------------------ shape
    def reshape(self, *shape):
        a = self.data
        return Tensor._make(a.reshape(*shape), (self,), lambda g: (g.reshape(a.shape),), "reshape")

    def transpose(self, *axes):
        axes = axes or tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)
        return Tensor._make(self.data.transpose(axes), (self,),
                            lambda g: (g.transpose(inv),), "transpose")

    @property
    def T(self):
        return self.transpose()

    # ----------------------------------------------------------- elementwise
    def exp(self):
        y = np.exp(self.data)
        return Tensor._make(y, (self,), lambda g: (g * y,), "exp")

    def log(self):
        a = self.data
        return Tensor._make(np.log(a), (self,), lambda g: (g / a,), "log")

    def tanh(self):
        y = np.tanh(self.data)
        return Tensor._make(y, (self,), lambda g: (g * (1.0 - y * y),), "tanh")

    def sigmoid(self):
        y = _sigmoid(self.data)
        return Tensor._make(y, (self,), lambda g: (g * y * (1.0 - y),), "sigmoid")

    def relu(self):
        """max(0, x); the subgradient at exactly 0 is 0."""
        pos = self.data > 0
        return Tensor._make(np.where(pos, self.data, 0.0), (self,), lambda g: (g * pos,), "relu")

    def abs(self):
        s = np.sign(self.data)
        return Tensor._make(np.abs(self.data), (self,), lambda g: (g * s,), "abs")

    def sqrt(self):
        y = np.sqrt(self.data)
        safe = np.where(y > 0, y, 1.0)
        return Tensor._make(y, (self,), lambda g: (np.where(y > 0, g / (2.0 * safe), 0.0),), "sqrt")


def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def tensor(data, requires_grad=False, name=None):
    return Tensor(data, requires_grad=requires_grad, name=name)


def parameter(data, name=None):
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


def concat(tensors, axis=-1):
    tensors = [_as_tensor(t) for t in tensors]
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    splits = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(out, tuple(tensors), backward, "concat")


def stack(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return Tensor._make(out, tuple(tensors), backward, "stack")


def where(cond, a, b):
    cond = np.asarray(cond, dtype=bool)
    a, b = _as_tensor(a), _as_tensor(b)
    out = np.where(cond, a.data, b.data)

    def backward(g):
        return (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                _unbroadcast(np.where(cond, 0.0, g), b.shape))

    return Tensor._make(out, (a, b), backward, "where")


def take_rows(table, ids):
    """Gather ``table[ids]`` (embedding lookup); gradient scatters back."""
    ids = np.asarray(ids)
    t = table.data

    def backward(g):
        full = np.zeros_like(t)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, t.shape[-1]))
        return (full,)

    return Tensor._make(t[ids], (table,), backward, "take_rows")


def gather_positions(x, index):
    """``out[b, i] = x[b, index[b, i]]`` for a [B, L, ...] tensor."""
    index = np.asarray(index)
    a = x.data
    bidx = np.arange(a.shape[0])[:, None]
    out = a[bidx, index]

    def backward(g):
        full = np.zeros_like(a)
        np.add.at(full, (bidx, index), g)
        return (full,)

    return Tensor._make(out, (x,), backward, "gather")


# ---------------------------------------------------------------------------
# Softmax family
# ---------------------------------------------------------------------------

def softmax(scores, mask=None, axis=-1):
    """Masked, max-stabilised softmax; masked entries are exactly zero."""
    scores = _as_tensor(scores)
    s = scores.data
    if mask is None:
        keep = np.ones(s.shape, dtype=bool)
    else:
        keep = np.broadcast_to(np.asarray(mask, dtype=bool), s.shape)
    if not keep.any(axis=axis).all():
        raise ValueError("softmax: every position is masked in at least one row")
    shifted = np.where(keep, s, -np.inf)
    shifted = shifted - shifted.max(axis=axis, keepdims=True)
    e = np.where(keep, np.exp(shifted), 0.0)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._make(y, (scores,), backward, "softmax")


def log_softmax(x, axis=-1):
    x = _as_tensor(x)
    a = x.data
    shifted = a - a.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    p = np.exp(y)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(y, (x,), backward, "log_softmax")


def cross_entropy(logits, labels, weights=None):
    """Mean negative log-likelihood of integer ``labels`` under ``logits``.

    ``weights`` (same shape as ``labels``) turns it into a weighted mean;
    zero weights drop entries, e.g. padded positions.
    """
    labels = np.asarray(labels, dtype=np.int64)
    logp = log_softmax(logits, axis=-1)
    onehot = np.zeros(logp.shape)
    np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
    nll = -(logp * onehot).sum(axis=-1)
    if weights is None:
        return nll.mean()
    w = np.asarray(weights, dtype=DTYPE)
    return (nll * w).sum() * (1.0 / w.sum())


def mse(pred, target):
    diff = pred - np.asarray(target, dtype=DTYPE)
    return (diff * diff).mean()


# ---------------------------------------------------------------------------
# Distances
# ---------------------------------------------------------------------------

MARGIN = 0.1


def cosine_similarity(a, b, axis=-1):
    a, b = _as_tensor(a), _as_tensor(b)
    na = np.linalg.norm(a.data, axis=axis)
    nb = np.linalg.norm(b.data, axis=axis)
    if np.any(na == 0) or np.any(nb == 0):
        raise ValueError("cosine similarity is undefined for a zero vector")
    # Rescaling by each vector's own largest magnitude makes the result
    # bitwise scale-invariant: division is correctly rounded, so c*a and a
    # map to the same normalised vector whenever c*a is representable. The
    # cosine ignores scale, so holding the factor constant keeps gradients exact.
    a = a / np.max(np.abs(a.data), axis=axis, keepdims=True)
    b = b / np.max(np.abs(b.data), axis=axis, keepdims=True)
    dot = (a * b).sum(axis=axis)
    return dot / ((a * a).sum(axis=axis).sqrt() * (b * b).sum(axis=axis).sqrt())


def soft_margin_cosine_distance(a, b, axis=-1):
    """max(0, 1 - cos(a, b) - 0.1), batched over leading axes.

    Lies in [0, 1.9] and is zero once the cosine reaches 0.9.
    """
    return (1.0 - MARGIN - cosine_similarity(a, b, axis=axis)).relu()


# ---------------------------------------------------------------------------
# Dropout
# ---------------------------------------------------------------------------

def dropout(x, rate, rng, training=True):
    """Inverted dropout: identity at inference, rescaled mask in training."""
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def adam_step(params, grads, state, names=None):
    """One bias-corrected Adam update; ``params`` arrays are updated in place."""
    if state.learning_rate <= 0:
        raise ValueError("learning rate must be positive")
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            label = names[i] if names else f"#{i}"
            raise FloatingPointError(f"non-finite gradient for parameter {label}")
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p) for p in params]
        state.second_moment = [np.zeros_like(p) for p in params]
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params, state


class Adam:
    """Adam over a fixed list of leaf tensors."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.state = AdamState(learning_rate=lr, beta1=betas[0], beta2=betas[1], epsilon=eps)

    @property
    def lr(self):
        return self.state.learning_rate

    @lr.setter
    def lr(self, value):
        self.state.learning_rate = value

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state,
                  names=[p.name or f"#{i}" for i, p in enumerate(self.params)])


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def finite_difference_check(f, params, eps=1e-5, max_coords=None, rng=None):
    """Max relative error between backprop and central differences.

    ``f`` is a zero-argument callable returning a scalar Tensor that depends
    on ``params``.  The error per coordinate is
    ``|analytic - numeric| / max(1, |numeric|)``.  With ``max_coords`` only a
    random subset of each parameter's coordinates is probed.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    out = f()
    if not np.isfinite(out.data).all():
        raise FloatingPointError("f is not finite at the base point")
    out.backward()
    analytic = [p.grad.copy() for p in params]
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = rng.choice(flat.size, size=max_coords, replace=False)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + eps
                fp = f().data
                flat[i] = orig - eps
                fm = f().data
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise FloatingPointError("f is not finite near the base point")
                num = float((fp - fm) / (2 * eps))
                err = abs(a.reshape(-1)[i] - num) / max(1.0, abs(num))
                worst = max(worst, err)
    for p in params:
        p.zero_grad()
    return worst
