"""Minimal reverse-mode automatic differentiation over numpy arrays.

Operations executed while a :class:`Tape` is active are recorded in execution
order together with a closure that maps the output gradient to input
gradients.  ``Tape.backward`` replays those closures in reverse.  Nothing is
recorded when no tape is active or when no input requires a gradient, which
doubles as inference mode.

    with Tape() as tape:
        loss = ad.mean(ad.square(x @ w))
    tape.backward(loss)
    w.grad
"""

import contextlib
import warnings

import numpy as np

from .errors import ContractError, DimensionError

_TAPES = []
_STE_SURROGATE = [False]


def round_half_away(x):
    """Round half away from zero (the rounding convention used throughout)."""
    x = np.asarray(x)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_leaf")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if dtype is None:
            arr = np.asarray(data)
            if arr.dtype.kind != "f":
                arr = arr.astype(np.float64)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._leaf = True

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    __neg__ = lambda self: neg(self)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


class Tape:
    """Flat record of executed operations for one backward pass."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out, inputs, backward):
        self.nodes.append((out, inputs, backward))

    def clear(self):
        self.nodes = []

    def backward(self, root, grad=None):
        """Accumulate d(root)/d(leaf) into ``.grad`` of every leaf requiring grad."""
        if grad is None:
            if root.size != 1:
                raise ContractError(f"backward from non-scalar of shape {root.shape} needs an explicit grad")
            grad = np.ones_like(root.data)
        grads = {id(root): np.asarray(grad, dtype=root.dtype)}
        leaves = {}
        for out, inputs, fn in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = fn(g)
            for t, gi in zip(inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if t._leaf:
                    leaves[key] = t
        for key, t in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
            t.grad = g if t.grad is None else t.grad + g
        if id(root) in grads and root._leaf and root.requires_grad:
            root.grad = grads[id(root)]


def _active_tape():
    return _TAPES[-1] if _TAPES else None


def _make(data, inputs, backward):
    """Wrap an op result, recording it on the active tape when needed."""
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data)
    if needs:
        out.requires_grad = True
        out._leaf = False
        tape.record(out, inputs, backward)
    return out


@contextlib.contextmanager
def ste_surrogate():
    """Make straight-through nodes forward the identity.

    Used by :func:`grad_check`: the true derivative of rounding or nearest-code
    selection is zero almost everywhere, so straight-through nodes are compared
    against the identity map they stand in for.
    """
    prev = _STE_SURROGATE[0]
    _STE_SURROGATE[0] = True
    try:
        yield
    finally:
        _STE_SURROGATE[0] = prev


def _coerce(a, b):
    # Python scalars take the dtype of the tensor they combine with.
    if not isinstance(a, Tensor) and np.isscalar(a) and isinstance(b, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    if not isinstance(b, Tensor) and np.isscalar(b) and isinstance(a, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    return as_tensor(a), as_tensor(b)


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(name, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} are incompatible") from None


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = _coerce(a, b)
    _check_broadcast("add", a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _coerce(a, b)
    _check_broadcast("sub", a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _coerce(a, b)
    _check_broadcast("mul", a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = _coerce(a, b)
    _check_broadcast("div", a, b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def neg(x):
    x = as_tensor(x)
    return _make(-x.data, (x,), lambda g: (-g,))


def power(x, p):
    x = as_tensor(x)
    p = float(p)
    return _make(x.data ** p, (x,), lambda g: (g * p * x.data ** (p - 1),))


def square(x):
    x = as_tensor(x)
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def sqrt(x):
    x = as_tensor(x)
    out = np.sqrt(x.data)

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            gx = np.where(out > 0, g / (2.0 * np.where(out > 0, out, 1.0)), 0.0)
        return (gx,)

    return _make(out, (x,), backward)


def abs_(x):
    x = as_tensor(x)
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),))


def _sigmoid_np(x):
    # Branches keep exp() from overflowing on either tail.
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x):
    x = as_tensor(x)
    out = _sigmoid_np(np.asarray(x.data))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def softplus(x):
    """log(1 + exp(x)), evaluated stably."""
    x = as_tensor(x)
    out = np.logaddexp(0.0, x.data)
    return _make(out, (x,), lambda g: (g * _sigmoid_np(np.asarray(x.data)),))


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x):
    x = as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def clamp_min(x, floor):
    x = as_tensor(x)
    mask = x.data > floor
    return _make(np.where(mask, x.data, floor), (x,), lambda g: (g * mask,))


def stop_gradient(x):
    x = as_tensor(x)
    return Tensor(x.data)


def round_ste(x):
    """Round half away from zero forward, identity backward."""
    x = as_tensor(x)
    out = x.data.copy() if _STE_SURROGATE[0] else round_half_away(x.data).astype(x.dtype)
    return _make(out, (x,), lambda g: (g,))


def straight_through(x, q):
    """Forward the values of ``q`` while routing gradients to ``x`` unchanged."""
    x = as_tensor(x)
    q = np.asarray(q.data if isinstance(q, Tensor) else q, dtype=x.dtype)
    if q.shape != x.shape:
        raise DimensionError(f"straight_through: shapes {x.shape} and {q.shape} differ")
    out = x.data.copy() if _STE_SURROGATE[0] else q.copy()
    return _make(out, (x,), lambda g: (g,))


# ---------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), backward)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _make(out, (x,), backward)


def softmax(x, axis=-1):
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward)


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return _make(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def l1(a, b=None):
    """Mean absolute difference (mean absolute value when ``b`` is omitted)."""
    a = as_tensor(a)
    if b is None:
        return mean(abs_(a))
    b = as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"l1: shapes {a.shape} and {b.shape} differ")
    return mean(abs_(sub(a, b)))


def l2norm(x, axis=-1, keepdims=False):
    x = as_tensor(x)
    out = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g * x.data / safe, 0.0),)

    return _make(out if keepdims else np.squeeze(out, axis=axis), (x,), backward)


def cosine_similarity(a, b, axis=-1, on_zero=None):
    """Cosine similarity along ``axis``.

    Pairs where either vector has zero norm yield 0 with zero gradient; a
    warning is issued (or ``on_zero(count)`` called) when that happens.
    """
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("cosine_similarity", a, b)
    na = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    nb = np.sqrt((b.data * b.data).sum(axis=axis, keepdims=True))
    ok = (na > 0) & (nb > 0)
    if not ok.all():
        count = int((~ok).sum())
        if on_zero is not None:
            on_zero(count)
        else:
            warnings.warn(f"cosine_similarity: {count} zero-norm vector(s); similarity set to 0",
                          RuntimeWarning, stacklevel=2)
    na_s = np.where(ok, na, 1.0)
    nb_s = np.where(ok, nb, 1.0)
    dot = (a.data * b.data).sum(axis=axis, keepdims=True)
    cos = np.where(ok, dot / (na_s * nb_s), 0.0)

    def backward(g):
        g = np.expand_dims(g, axis)
        ga = np.where(ok, g * (b.data / (na_s * nb_s) - cos * a.data / (na_s * na_s)), 0.0)
        gb = np.where(ok, g * (a.data / (na_s * nb_s) - cos * b.data / (nb_s * nb_s)), 0.0)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _make(np.squeeze(cos, axis=axis), (a, b), backward)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    if b.ndim == 2 and a.ndim > 2:
        # (..., K) @ (K, N): one 2-D product instead of a batched one
        lead, K = a.shape[:-1], a.shape[-1]
        a2 = np.ascontiguousarray(a.data).reshape(-1, K)
        out = (a2 @ b.data).reshape(lead + (b.shape[1],))

        def backward2(g):
            g2 = g.reshape(-1, b.shape[1])
            return ((g2 @ b.data.T).reshape(a.shape), a2.T @ g2)

        return _make(out, (a, b), backward2)
    try:
        out = a.data @ b.data
    except ValueError:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible") from None

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _make(out, (a, b), backward)


def _pair(padding):
    if isinstance(padding, int):
        return padding, padding
    left, right = padding
    return int(left), int(right)


def conv1d(x, w, b=None, stride=1, padding=0):
    """1-D cross-correlation. x: (B, C_in, T), w: (C_out, C_in, K), b: (C_out,).

    ``padding`` is an explicit zero-padding amount, either one int for both
    ends or a ``(left, right)`` pair.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv1d: input {x.shape} and weight {w.shape} are incompatible")
    left, right = _pair(padding)
    B, C, T = x.shape
    O, _, K = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (left, right))) if left or right else x.data
    Tp = T + left + right
    if Tp < K:
        raise DimensionError(f"conv1d: padded length {Tp} shorter than kernel {K}")
    T_out = (Tp - K) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, K, axis=2)[:, :, ::stride][:, :, :T_out]
    cols = win.transpose(0, 2, 1, 3).reshape(B * T_out, C * K)
    wm = w.data.reshape(O, C * K)
    out = (cols @ wm.T).reshape(B, T_out, O).transpose(0, 2, 1)
    inputs = (x, w)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[None, :, None]
        inputs = (x, w, b)
    out = np.ascontiguousarray(out)

    def backward(g):
        gm = g.transpose(0, 2, 1).reshape(B * T_out, O)
        gw = (gm.T @ cols).reshape(O, C, K)
        gcols = (gm @ wm).reshape(B, T_out, C, K)
        gxp = np.zeros((B, C, Tp), dtype=g.dtype)
        end = stride * (T_out - 1) + 1
        for k in range(K):
            gxp[:, :, k:k + end:stride] += gcols[:, :, :, k].transpose(0, 2, 1)
        gx = gxp[:, :, left:left + T]
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2)))
        return tuple(grads)

    return _make(out, inputs, backward)


def conv1d_transpose(x, w, b=None, stride=1, crop=0):
    """Transposed 1-D convolution. x: (B, C_in, L), w: (C_in, C_out, K).

    Full output length is (L - 1) * stride + K, then ``crop`` (int or
    ``(left, right)``) samples are removed from the ends.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"conv1d_transpose: input {x.shape} and weight {w.shape} are incompatible")
    left, right = _pair(crop)
    B, C, L = x.shape
    _, O, K = w.shape
    full = (L - 1) * stride + K
    if left + right >= full:
        raise DimensionError(f"conv1d_transpose: crop {left + right} removes the whole output of length {full}")
    xm = x.data.transpose(0, 2, 1).reshape(B * L, C)
    wm = w.data.reshape(C, O * K)
    P = (xm @ wm).reshape(B, L, O, K)
    y = np.zeros((B, O, full), dtype=P.dtype)
    end = stride * (L - 1) + 1
    for k in range(K):
        y[:, :, k:k + end:stride] += P[:, :, :, k].transpose(0, 2, 1)
    out = y[:, :, left:full - right]
    inputs = (x, w)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[None, :, None]
        inputs = (x, w, b)
    out = np.ascontiguousarray(out)

    def backward(g):
        gy = np.zeros((B, O, full), dtype=g.dtype)
        gy[:, :, left:full - right] = g
        gP = np.empty((B, L, O, K), dtype=g.dtype)
        for k in range(K):
            gP[:, :, :, k] = gy[:, :, k:k + end:stride].transpose(0, 2, 1)
        gPm = gP.reshape(B * L, O * K)
        gx = (gPm @ wm.T).reshape(B, L, C).transpose(0, 2, 1)
        gw = (xm.T @ gPm).reshape(C, O, K)
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2)))
        return tuple(grads)

    return _make(out, inputs, backward)


# ---------------------------------------------------------------- indexing and shape


def reshape(x, shape):
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {x.shape} to {shape}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None):
    x = as_tensor(x)
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, (x,), lambda g: (np.transpose(g, inv),))


def getitem(x, idx):
    x = as_tensor(x)
    out = x.data[idx]

    def backward(g):
        gx = np.zeros_like(x.data, dtype=g.dtype)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(np.ascontiguousarray(out), (x,), backward)


def frames(x, size, hop):
    """Overlapping frames along the last axis: (..., T) -> (..., n_frames, size)."""
    x = as_tensor(x)
    T = x.shape[-1]
    if T < size:
        raise DimensionError(f"frames: length {T} shorter than frame size {size}")
    n = 1 + (T - size) // hop
    win = np.lib.stride_tricks.sliding_window_view(x.data, size, axis=-1)[..., ::hop, :][..., :n, :]
    out = np.ascontiguousarray(win)

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        if size % hop == 0:
            span = n * hop
            for c in range(size // hop):
                chunk = g[..., c * hop:(c + 1) * hop].reshape(g.shape[:-2] + (span,))
                gx[..., c * hop:c * hop + span] += chunk
        else:
            for f in range(n):
                gx[..., f * hop:f * hop + size] += g[..., f, :]
        return (gx,)

    return _make(out, (x,), backward)


def gather(x, indices, axis=0):
    """Select entries of ``x`` along ``axis`` (embedding lookup for axis=0)."""
    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.int64)
    n = x.shape[axis]
    if indices.size and (indices.min() < 0 or indices.max() >= n):
        raise IndexError(f"gather: index out of range [0, {n}) along axis {axis}")
    out = np.take(x.data, indices, axis=axis)

    def backward(g):
        gx = np.zeros_like(x.data, dtype=g.dtype)
        gm = np.moveaxis(gx, axis, 0)
        gg = np.moveaxis(g, list(range(axis, axis + indices.ndim)), list(range(indices.ndim)))
        np.add.at(gm, indices, gg)
        return (gx,)

    return _make(out, (x,), backward)


def scatter_add(target, indices, values):
    """Copy of ``target`` with rows of ``values`` added at ``indices`` (axis 0)."""
    target, values = as_tensor(target), as_tensor(values)
    indices = np.asarray(indices, dtype=np.int64)
    if values.shape != indices.shape + target.shape[1:]:
        raise DimensionError(f"scatter_add: values {values.shape} do not match indices {indices.shape} "
                             f"into target {target.shape}")
    out = target.data.copy()
    np.add.at(out, indices, values.data)
    return _make(out, (target, values), lambda g: (g, g[indices]))


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tuple(tensors), lambda g: tuple(np.split(g, sizes, axis=axis)))


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return _make(out, tuple(tensors),
                 lambda g: tuple(np.squeeze(s, axis=axis) for s in np.split(g, n, axis=axis)))


def hypot(re, im):
    """sqrt(re^2 + im^2) with a zero gradient where the magnitude is zero."""
    re, im = as_tensor(re), as_tensor(im)
    out = np.hypot(re.data, im.data)

    def backward(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g * re.data / safe, 0.0), np.where(out > 0, g * im.data / safe, 0.0))

    return _make(out, (re, im), backward)


_OPS = {
    "add": add, "sub": sub, "mul": mul, "div": div, "matmul": matmul,
    "conv1d": conv1d, "conv1d_transpose": conv1d_transpose,
    "relu": relu, "tanh": tanh, "sigmoid": sigmoid, "softmax": softmax,
    "log": log, "exp": exp, "sum": sum_, "mean": mean, "l1": l1, "l2norm": l2norm,
    "cosine_similarity": cosine_similarity, "gather": gather, "scatter_add": scatter_add,
    "round_ste": round_ste,
}


def forward_op(name, *inputs, **kwargs):
    """Dispatch an operation by identifier."""
    try:
        fn = _OPS[name]
    except KeyError:
        raise ContractError(f"unknown op {name!r}; known ops: {sorted(_OPS)}") from None
    return fn(*inputs, **kwargs)


def grad_check(f, x, eps=1e-6):
    """Max relative error between the tape gradient of scalar ``f(x)`` and central differences.

    ``f`` takes a Tensor and returns a one-element Tensor. Straight-through
    nodes are evaluated as their identity surrogate in both passes.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    with ste_surrogate():
        xt = Tensor(x0.copy(), requires_grad=True)
        with Tape() as tape:
            out = f(xt)
        if out.size != 1:
            raise ContractError(f"grad_check needs a scalar-valued f, got shape {out.shape}")
        tape.backward(out)
        analytic = xt.grad if xt.grad is not None else np.zeros_like(x0)

        numeric = np.zeros_like(x0)
        flat = x0.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(Tensor(x0.copy())).data)
            flat[i] = orig - eps
            fm = float(f(Tensor(x0.copy())).data)
            flat[i] = orig
            numeric.reshape(-1)[i] = (fp - fm) / (2.0 * eps)
    return float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + 1e-12)))
