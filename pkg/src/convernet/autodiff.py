"""A small reverse-mode autodiff engine over dense float64 arrays.

Operations executed while a :class:`Tape` is active are recorded on it when
any input requires a gradient.  ``tape.backward(loss)`` then walks the
recorded nodes in reverse creation order, which is a valid topological order
because a node can only be created after its inputs.

Outside a tape nothing is recorded, so inference runs at plain numpy speed.
"""
import threading
import warnings

import numpy as np

from . import kernels
from .errors import ConfigError, NumericError, ShapeError, TapeError

MAX_RANK = 3
INIT_STD_GRID = (0.01, 0.05, 0.1, 0.2)

_state = threading.local()
_debug = {"check_finite": False}


def set_debug(flag=True):
    """Toggle NaN/Inf checking on every op output (off by default)."""
    _debug["check_finite"] = bool(flag)


def _tapes():
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def current_tape():
    stack = _tapes()
    return stack[-1] if stack else None


class Value:
    """Dense array node; ``grad`` is allocated lazily on the first backward."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds maximum rank {MAX_RANK}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Value{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True).reshape(self.data.shape)
        else:
            self.grad += g

    # operator sugar
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sum(self):
        return total(self)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of operations for one forward pass.

    Use as a context manager; nested tapes shadow outer ones.  A tape can be
    differentiated once; call :meth:`reset` to reuse it.
    """

    def __init__(self):
        self.nodes = []
        self._done = False

    def __enter__(self):
        _tapes().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tapes()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def reset(self):
        for node in self.nodes:
            node.out._tape = None
        self.nodes = []
        self._done = False

    def record(self, out, inputs, backward):
        if self._done:
            raise TapeError("tape already differentiated; call reset() before recording")
        out._tape = self
        self.nodes.append(_Node(out, inputs, backward))

    def backward(self, loss):
        if self._done:
            raise TapeError("backward already ran on this tape; call reset() first")
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise TapeError("loss does not depend on any value that requires grad")
        self._done = True
        loss._accumulate(np.ones_like(loss.data))
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            node.backward(g)
            node.out.grad = None
        # the loss keeps its seed gradient for inspection
        loss.grad = np.ones_like(loss.data)


def backward(loss):
    """Differentiate ``loss`` on the tape that recorded it."""
    tape = loss._tape
    if tape is None:
        raise TapeError("loss was not produced on a tape")
    tape.backward(loss)


def as_value(x):
    return x if isinstance(x, Value) else Value(x)


def _finish(data, inputs, backward_fn):
    out = Value.__new__(Value)
    out.data = data
    out.grad = None
    out.name = None
    out._tape = None
    if _debug["check_finite"] and not np.all(np.isfinite(data)):
        raise NumericError("non-finite value produced")
    tape = current_tape()
    needs = any(v.requires_grad for v in inputs)
    out.requires_grad = needs and tape is not None
    if out.requires_grad:
        tape.record(out, inputs, backward_fn)
    return out


# ---------------------------------------------------------------------------
# broadcasting: equal shapes, scalar, or a vector over the rows of the other


def _check_broadcast(a, b):
    sa, sb = a.shape, b.shape
    if sa == sb or a.data.ndim == 0 or b.data.ndim == 0:
        return
    if b.data.ndim == 1 and sa and sa[-1] == sb[0]:
        return
    if a.data.ndim == 1 and sb and sb[-1] == sa[0]:
        return
    raise ShapeError(f"cannot broadcast shapes {sa} and {sb}")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return g.sum()
    return g.reshape(-1, shape[0]).sum(axis=0)


def add(a, b):
    a, b = as_value(a), as_value(b)
    _check_broadcast(a, b)

    def back(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return _finish(a.data + b.data, (a, b), back)


def sub(a, b):
    a, b = as_value(a), as_value(b)
    _check_broadcast(a, b)

    def back(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(-_unbroadcast(g, b.shape))

    return _finish(a.data - b.data, (a, b), back)


def mul(a, b):
    a, b = as_value(a), as_value(b)
    _check_broadcast(a, b)

    def back(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _finish(a.data * b.data, (a, b), back)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(x):
    x = as_value(x)
    y = _sigmoid(x.data)

    def back(g):
        x._accumulate(g * y * (1.0 - y))

    return _finish(y, (x,), back)


def tanh(x):
    x = as_value(x)
    y = np.tanh(x.data)

    def back(g):
        x._accumulate(g * (1.0 - y * y))

    return _finish(y, (x,), back)


def relu(x):
    x = as_value(x)
    pos = x.data > 0

    def back(g):
        x._accumulate(g * pos)

    return _finish(np.where(pos, x.data, 0.0), (x,), back)


def exp(x):
    x = as_value(x)
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    if not np.all(np.isfinite(y)):
        raise NumericError("exp overflow")

    def back(g):
        x._accumulate(g * y)

    return _finish(y, (x,), back)


def log(x):
    x = as_value(x)
    if np.any(x.data <= 0):
        raise NumericError("log of non-positive value")

    def back(g):
        x._accumulate(g / x.data)

    return _finish(np.log(x.data), (x,), back)


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "sigmoid": sigmoid, "tanh": tanh,
    "relu": relu, "exp": exp, "log": log,
}


def elementwise(op, *args):
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# structural ops


def matmul(a, b):
    """``a[..., k] @ b[k, n]``; leading dims of ``a`` are treated as rows."""
    a, b = as_value(a), as_value(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def back(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            k, n = b.shape
            b._accumulate(a.data.reshape(-1, k).T @ g.reshape(-1, n))

    return _finish(out, (a, b), back)


def concat(parts):
    """Concatenate along the last axis."""
    parts = [as_value(p) for p in parts]
    if not parts:
        raise ShapeError("concat needs at least one part")
    if len(parts) == 1:
        return parts[0]
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise ShapeError(f"concat leading-dim mismatch: {parts[0].shape} vs {p.shape}")
    widths = [p.shape[-1] for p in parts]
    bounds = np.cumsum([0] + widths)

    def back(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                p._accumulate(g[..., lo:hi])

    return _finish(np.concatenate([p.data for p in parts], axis=-1), tuple(parts), back)


def stack_time(steps):
    """Stack ``T`` values of shape [B, d] into [B, T, d]."""
    steps = [as_value(s) for s in steps]

    def back(g):
        for t, s in enumerate(steps):
            if s.requires_grad:
                s._accumulate(g[:, t])

    return _finish(np.stack([s.data for s in steps], axis=1), tuple(steps), back)


def getitem(x, idx):
    x = as_value(x)
    out = x.data[idx]
    if out.ndim > MAX_RANK:
        raise ShapeError("indexing produced rank > 3")

    def back(g):
        if not x.requires_grad:
            return
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad[idx] += g

    return _finish(np.array(out, copy=True), (x,), back)


def reshape(x, shape):
    x = as_value(x)
    out = x.data.reshape(shape)
    if out.ndim > MAX_RANK:
        raise ShapeError("reshape produced rank > 3")

    def back(g):
        x._accumulate(g.reshape(x.shape))

    return _finish(out, (x,), back)


def total(x):
    x = as_value(x)

    def back(g):
        x._accumulate(np.broadcast_to(g, x.shape))

    return _finish(np.array(x.data.sum()), (x,), back)


def mean(x):
    x = as_value(x)
    n = x.data.size

    def back(g):
        x._accumulate(np.broadcast_to(g / n, x.shape))

    return _finish(np.array(x.data.mean()), (x,), back)


def mean_over_time(x, count):
    """Mean of the first ``count`` rows along the time axis.

    ``x`` is [T, d] with an int ``count`` or [B, T, d] with a length-B array.
    Rows at or beyond the count are padding and get no gradient.
    """
    x = as_value(x)
    single = x.ndim == 2
    data = x.data[None] if single else x.data
    counts = np.atleast_1d(np.asarray(count, dtype=np.int64))
    if np.any(counts < 1):
        raise ShapeError("mean_over_time needs count >= 1")
    if np.any(counts > data.shape[1]) or counts.shape[0] != data.shape[0]:
        raise ShapeError(f"counts {counts} do not fit input of shape {x.shape}")
    mask = (np.arange(data.shape[1])[None, :] < counts[:, None]).astype(np.float64)
    weights = mask / counts[:, None]
    out = np.einsum("bt,btd->bd", weights, data)

    def back(g):
        g2 = g[None] if single else g
        full = weights[:, :, None] * g2[:, None, :]
        x._accumulate(full[0] if single else full)

    return _finish(out[0] if single else out, (x,), back)


def select(mask, new, old):
    """Row-wise choice: ``new`` where mask[b] is true else ``old`` (both [B, d])."""
    new, old = as_value(new), as_value(old)
    if new.shape != old.shape:
        raise ShapeError(f"select shape mismatch: {new.shape} vs {old.shape}")
    m = np.asarray(mask, dtype=bool).reshape((-1,) + (1,) * (new.ndim - 1))

    def back(g):
        if new.requires_grad:
            new._accumulate(np.where(m, g, 0.0))
        if old.requires_grad:
            old._accumulate(np.where(m, 0.0, g))

    return _finish(np.where(m, new.data, old.data), (new, old), back)


def take_rows(x, positions):
    """Gather x[b, positions[b]] from [B, T, d] into [B, d]."""
    x = as_value(x)
    positions = np.asarray(positions, dtype=np.int64)
    b = np.arange(x.shape[0])

    def back(g):
        full = np.zeros_like(x.data)
        full[b, positions] = g
        x._accumulate(full)

    return _finish(x.data[b, positions].copy(), (x,), back)


# ---------------------------------------------------------------------------
# fused ops with hand-written backward rules


LN_EPS = 1e-8


def layer_norm(z, alpha, beta, groups=1, eps=LN_EPS):
    """Standardise each length-H block of the last axis, then scale/shift.

    The last axis of ``z`` holds ``groups`` blocks of size H; ``alpha`` and
    ``beta`` have the full last-axis length so every block has its own gain.
    Standard deviation is the population std, floored at ``eps``.
    """
    z, alpha, beta = as_value(z), as_value(alpha), as_value(beta)
    width = z.shape[-1]
    if width % groups or alpha.shape != (width,) or beta.shape != (width,):
        raise ShapeError(f"layer_norm shapes: z {z.shape}, alpha {alpha.shape}, beta {beta.shape}, groups {groups}")
    H = width // groups
    if H < 2:
        raise ShapeError("layer_norm needs at least 2 units per block")
    z2 = np.ascontiguousarray(z.data).reshape(-1, H)
    a2 = alpha.data.reshape(groups, H)
    b2 = beta.data.reshape(groups, H)
    out, xhat, sigma, floored = kernels.ln_forward(z2, a2, b2, eps)

    def back(g):
        dz, da, db = kernels.ln_backward(np.ascontiguousarray(g).reshape(-1, H), xhat, sigma, floored, a2)
        z._accumulate(dz.reshape(z.shape))
        alpha._accumulate(da.reshape(width))
        beta._accumulate(db.reshape(width))

    return _finish(out.reshape(z.shape), (z, alpha, beta), back)


def standardize(z, eps=LN_EPS):
    """Pre-affine layer normalisation of a plain array (no graph)."""
    z = np.asarray(z, dtype=np.float64)
    H = z.shape[-1]
    out, _, _, _ = kernels.ln_forward(np.ascontiguousarray(z).reshape(-1, H), np.ones((1, H)), np.zeros((1, H)), eps)
    return out.reshape(z.shape)


def length_attention(w, h, lengths, per_length=True):
    """Softmax-weighted sum of the first s rows of h[b] with logits w[:s, s-1].

    With ``per_length=False`` every length uses column 0, i.e. one position
    weight vector shared by all sequences.
    """
    w, h = as_value(w), as_value(h)
    lengths = np.asarray(lengths, dtype=np.int64)
    L = w.shape[0]
    if w.ndim != 2 or w.shape[1] != L or h.ndim != 3:
        raise ShapeError(f"attention shapes: w {w.shape}, h {h.shape}")
    if np.any(lengths < 1) or np.any(lengths > L) or np.any(lengths > h.shape[1]):
        raise ShapeError(f"sequence length outside [1, {L}]: {lengths}")
    hd = np.ascontiguousarray(h.data)
    out, attn = kernels.attention_forward(hd, np.ascontiguousarray(w.data), lengths, per_length)

    def back(g):
        dh, dw = kernels.attention_backward(np.ascontiguousarray(g), hd, attn, lengths, L, per_length)
        h._accumulate(dh)
        w._accumulate(dw)

    out_v = _finish(out, (w, h), back)
    return out_v, attn


def embed_pool(table, ids, counts):
    """Mean of embedding rows for each post; empty posts pool to zeros.

    ``ids`` is int [B, T, W] and ``counts`` int [B, T].  Row 0 (padding)
    never receives gradient.
    """
    table = as_value(table)
    ids = np.ascontiguousarray(ids, dtype=np.int64)
    counts = np.ascontiguousarray(counts, dtype=np.int64)
    V = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        from .errors import VocabularyError
        raise VocabularyError(f"word id outside vocabulary of size {V}")
    out = kernels.pool_forward(np.ascontiguousarray(table.data), ids, counts)

    def back(g):
        table._accumulate(kernels.pool_backward(np.ascontiguousarray(g), ids, counts, V))

    return _finish(out, (table,), back)


def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=0.9, eps=1e-8):
    """Batch normalisation over rows of [B, d].

    In training mode batch statistics are used (biased variance) and the
    running buffers are updated in place: r <- momentum * r + (1 - momentum) * batch.
    """
    x, gamma, beta = as_value(x), as_value(gamma), as_value(beta)
    if training:
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mu = running_mean.copy()
        var = running_var.copy()
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def back(g):
        gamma._accumulate((g * xhat).sum(axis=0))
        beta._accumulate(g.sum(axis=0))
        gx = g * gamma.data
        if training:
            dx = inv * (gx - gx.mean(axis=0) - xhat * (gx * xhat).mean(axis=0))
        else:
            dx = gx * inv
        x._accumulate(dx)

    return _finish(out, (x, gamma, beta), back)


BCE_CLAMP = 1e-7


def bce_loss(pred, labels, pos_weight=1.0, clamp=BCE_CLAMP):
    """Batch-mean binary cross entropy on probabilities in (0, 1)."""
    pred = as_value(pred)
    g = np.asarray(labels, dtype=np.float64).reshape(pred.shape)
    if not np.all((g == 0) | (g == 1)):
        from .errors import DataError
        raise DataError("labels must be 0 or 1")
    p = np.clip(pred.data, clamp, 1.0 - clamp)
    w = np.where(g == 1, pos_weight, 1.0)
    n = max(p.size, 1)
    loss = -(w * (g * np.log(p) + (1.0 - g) * np.log1p(-p))).sum() / n

    def back(grad):
        pred._accumulate(grad * w * (p - g) / (p * (1.0 - p)) / n)

    return _finish(np.array(loss), (pred,), back)


# ---------------------------------------------------------------------------


def gaussian_init(shape, std, seed, name=None):
    """Zero-mean Gaussian parameter, deterministic for a given seed."""
    if not std > 0:
        raise ConfigError(f"init std must be positive, got {std}")
    if not any(np.isclose(std, s) for s in INIT_STD_GRID):
        warnings.warn(f"init std {std} is off the grid {INIT_STD_GRID}", stacklevel=2)
    rng = np.random.default_rng(seed)
    return Value(rng.normal(0.0, std, size=shape), requires_grad=True, name=name)


def parameter(data, name=None):
    return Value(data, requires_grad=True, name=name)
