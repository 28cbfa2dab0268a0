"""Minimal reverse-mode differentiation over dense numpy arrays.

A ``Tensor`` wraps an ndarray. While a ``Tape`` is active (``with Tape():``),
every op records the node together with vector-Jacobian callbacks for its
parents; ``backward`` then sweeps the tape in reverse and accumulates
gradients into ``Tensor.grad``. With no tape active the same ops run as
plain numpy computations (inference mode).

Every op output is checked for NaN/Inf (disable via ``set_finite_checks``).
Gradient correctness of each primitive is established against central
finite differences; see ``finite_difference_check``.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import expit

from .errors import InvalidArgument, NumericError

_TAPE_STACK: list["Tape"] = []
_CHECK_FINITE = True


def set_finite_checks(enabled: bool) -> None:
    global _CHECK_FINITE
    _CHECK_FINITE = enabled


def _ensure_finite(arr, what="op output"):
    if _CHECK_FINITE and not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")
    return arr


class Tape:
    """Ordered record of op nodes; context manager activating recording."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False


def _current_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """Dense real array participating in reverse-mode differentiation."""

    __slots__ = ("value", "grad", "_parents", "_vjps", "name")

    def __init__(self, value, parents=(), vjps=(), name=None):
        self.value = np.asarray(value)
        self.grad = None
        self._parents = parents
        self._vjps = vjps
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.value.shape}, dtype={self.value.dtype}{tag})"

    # Operator sugar for the common binary ops.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return neg(self)


def parameter(value, name=None):
    """Leaf tensor (not produced by an op); gradients accumulate here."""
    return Tensor(np.asarray(value), name=name)


def _value(x):
    return x.value if isinstance(x, Tensor) else np.asarray(x)


def _record(out_value, parents_and_vjps, name=None):
    """Create the output Tensor, registering it on the active tape."""
    _ensure_finite(out_value, name or "op output")
    tape = _current_tape()
    tracked = [(p, vjp) for p, vjp in parents_and_vjps if isinstance(p, Tensor)]
    if tape is None or not tracked:
        return Tensor(out_value)
    parents = tuple(p for p, _ in tracked)
    vjps = tuple(v for _, v in tracked)
    node = Tensor(out_value, parents, vjps, name=name)
    tape.nodes.append(node)
    return node


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise / arithmetic primitives
# ---------------------------------------------------------------------------

def add(a, b):
    av, bv = _value(a), _value(b)
    out = av + bv
    return _record(out, [
        (a, lambda g: _unbroadcast(g, av.shape)),
        (b, lambda g: _unbroadcast(g, bv.shape)),
    ])


def sub(a, b):
    av, bv = _value(a), _value(b)
    out = av - bv
    return _record(out, [
        (a, lambda g: _unbroadcast(g, av.shape)),
        (b, lambda g: _unbroadcast(-g, bv.shape)),
    ])


def neg(a):
    return _record(-_value(a), [(a, lambda g: -g)])


def mul(a, b):
    av, bv = _value(a), _value(b)
    out = av * bv
    return _record(out, [
        (a, lambda g: _unbroadcast(g * bv, av.shape)),
        (b, lambda g: _unbroadcast(g * av, bv.shape)),
    ])


def div(a, b):
    av, bv = _value(a), _value(b)
    out = av / bv
    return _record(out, [
        (a, lambda g: _unbroadcast(g / bv, av.shape)),
        (b, lambda g: _unbroadcast(-g * av / (bv * bv), bv.shape)),
    ])


def relu(x):
    xv = _value(x)
    out = np.maximum(xv, 0)
    return _record(out, [(x, lambda g: g * (xv > 0))])


def tanh(x):
    out = np.tanh(_value(x))
    return _record(out, [(x, lambda g: g * (1.0 - out * out))])


def sigmoid(x):
    out = expit(_value(x))
    return _record(out, [(x, lambda g: g * out * (1.0 - out))])


def exp(x):
    out = np.exp(_value(x))
    return _record(out, [(x, lambda g: g * out)])


def log(x):
    xv = _value(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xv)
    return _record(out, [(x, lambda g: g / xv)])


def tsum(x, axis=None, keepdims=False):
    xv = _value(x)
    out = xv.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, xv.shape).copy()

    return _record(out, [(x, vjp)])


def tmean(x, axis=None, keepdims=False):
    xv = _value(x)
    n = xv.size if axis is None else xv.shape[axis]
    out = xv.mean(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g) / n
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, xv.shape).copy()

    return _record(out, [(x, vjp)])


# ---------------------------------------------------------------------------
# Shape primitives
# ---------------------------------------------------------------------------

def reshape(x, shape):
    xv = _value(x)
    return _record(xv.reshape(shape), [(x, lambda g: g.reshape(xv.shape))])


def transpose(x, axes):
    # contiguous output: keeps downstream reductions layout-independent
    inv = np.argsort(axes)
    out = np.ascontiguousarray(_value(x).transpose(axes))
    return _record(out, [(x, lambda g: g.transpose(inv))])


def concat(tensors, axis=0):
    vals = [_value(t) for t in tensors]
    out = np.concatenate(vals, axis=axis)
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            return g[tuple(idx)]

        return vjp

    return _record(out, [(t, make_vjp(i)) for i, t in enumerate(tensors)])


def narrow(x, axis, start, length):
    """Contiguous slice along one axis; backward zero-pads."""
    xv = _value(x)
    idx = [slice(None)] * xv.ndim
    idx[axis] = slice(start, start + length)
    out = xv[tuple(idx)]

    def vjp(g):
        full = np.zeros_like(xv)
        full[tuple(idx)] = g
        return full

    return _record(out, [(x, vjp)])


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b):
    av, bv = _value(a), _value(b)
    out = av @ bv

    def vjp_a(g):
        return _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)

    def vjp_b(g):
        return _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)

    return _record(out, [(a, vjp_a), (b, vjp_b)])


def linear(x, weight, bias=None):
    """Affine map on the last axis: x[..., d_in] @ weight.T + bias."""
    xv, wv = _value(x), _value(weight)
    if xv.shape[-1] != wv.shape[1]:
        raise InvalidArgument(
            f"linear: input width {xv.shape[-1]} != weight fan-in {wv.shape[1]}")
    out = xv @ wv.T
    pairs = [
        (x, lambda g: g @ wv),
        (weight, lambda g: np.tensordot(g, xv, axes=(range(g.ndim - 1),
                                                     range(xv.ndim - 1)))),
    ]
    if bias is not None:
        bv = _value(bias)
        out = out + bv
        pairs.append((bias, lambda g: _unbroadcast(g, bv.shape)))
    return _record(out, pairs)


def softmax(x):
    xv = _value(x)
    shifted = xv - xv.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return out * (g - (g * out).sum(axis=-1, keepdims=True))

    return _record(out, [(x, vjp)])


def layer_norm(x, gain, offset, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    xv, gv, ov = _value(x), _value(gain), _value(offset)
    d = xv.shape[-1]
    if d == 0:
        raise InvalidArgument("layer_norm on axis of extent 0")
    mu = xv.mean(axis=-1, keepdims=True)
    var = xv.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu) * inv_std
    out = gv * xhat + ov

    def vjp_x(g):
        gx = g * gv
        return inv_std * (gx - gx.mean(axis=-1, keepdims=True)
                          - xhat * (gx * xhat).mean(axis=-1, keepdims=True))

    batch_axes = tuple(range(xv.ndim - 1))
    return _record(out, [
        (x, vjp_x),
        (gain, lambda g: (g * xhat).sum(axis=batch_axes)),
        (offset, lambda g: g.sum(axis=batch_axes)),
    ])


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def _corr_forward(x, w, stride):
    # x: [C_in, T], w: [C_out, C_in, k] -> [C_out, L]
    k = w.shape[2]
    win = np.lib.stride_tricks.sliding_window_view(x, k, axis=1)[:, ::stride]
    return np.tensordot(w, win, axes=([1, 2], [0, 2]))


def _corr_input_adjoint(gy, w, stride, t_len):
    # gy: [C_out, L], w: [C_out, C_in, k] -> [C_in, T]
    c_in, k = w.shape[1], w.shape[2]
    n_frames = gy.shape[1]
    out = np.zeros((c_in, t_len), dtype=gy.dtype)
    for n in range(k):
        # contribution of kernel tap n to positions n, n+stride, ...
        out[:, n:n + stride * n_frames:stride] += w[:, :, n].T @ gy
    return out


def _corr_kernel_adjoint(gy, x, stride, k):
    # gy: [C_out, L], x: [C_in, T] -> [C_out, C_in, k]
    win = np.lib.stride_tricks.sliding_window_view(x, k, axis=1)[:, ::stride]
    return np.tensordot(gy, win, axes=([1], [1]))


def conv1d(x, kernels, stride=1, padding="valid"):
    """1-D cross-correlation: x [C_in, T] * kernels [C_out, C_in, k].

    `valid` gives L = floor((T - k)/stride) + 1. `same` (stride 1 only)
    zero-pads symmetrically, extra zero on the right for even k.
    """
    xv, wv = _value(x), _value(kernels)
    c_out, c_in, k = wv.shape
    if xv.ndim != 2 or xv.shape[0] != c_in:
        raise InvalidArgument(f"conv1d: input shape {xv.shape} incompatible "
                              f"with kernels {wv.shape}")
    if stride < 1:
        raise InvalidArgument("conv1d: stride must be >= 1")
    if padding == "same":
        if stride != 1:
            raise InvalidArgument("conv1d: same-padding requires stride 1")
        left, right = (k - 1) // 2, k // 2
    elif padding == "valid":
        left = right = 0
    else:
        raise InvalidArgument(f"conv1d: unknown padding {padding!r}")
    xp = np.pad(xv, ((0, 0), (left, right))) if left or right else xv
    t_pad = xp.shape[1]
    if t_pad < k:
        raise InvalidArgument(f"conv1d: kernel size {k} exceeds padded length {t_pad}")
    out = _corr_forward(xp, wv, stride)

    def vjp_x(g):
        gx = _corr_input_adjoint(np.ascontiguousarray(g), wv, stride, t_pad)
        return gx[:, left:t_pad - right] if (left or right) else gx

    def vjp_w(g):
        return _corr_kernel_adjoint(np.ascontiguousarray(g), xp, stride, k)

    return _record(out, [(x, vjp_x), (kernels, vjp_w)])


def conv1d_transpose(y, kernels, stride=1):
    """Adjoint of valid-mode conv1d: y [C_in, L] -> [C_out, (L-1)*stride + k].

    kernels: [C_in, C_out, k].
    """
    yv, wv = _value(y), _value(kernels)
    c_in, c_out, k = wv.shape
    if yv.ndim != 2 or yv.shape[0] != c_in:
        raise InvalidArgument(f"conv1d_transpose: input shape {yv.shape} "
                              f"incompatible with kernels {wv.shape}")
    if stride < 1:
        raise InvalidArgument("conv1d_transpose: stride must be >= 1")
    t_len = (yv.shape[1] - 1) * stride + k
    out = _corr_input_adjoint(yv, wv, stride, t_len)

    def vjp_y(g):
        return _corr_forward(np.ascontiguousarray(g), wv, stride)

    def vjp_w(g):
        # dL/dw[ci, co, n] = sum_l y[ci, l] * g[co, stride*l + n]
        return _corr_kernel_adjoint(yv, np.ascontiguousarray(g), stride, k)

    return _record(out, [(y, vjp_y), (kernels, vjp_w)])


def avg_pool_time(x):
    """Global mean over the trailing time axis."""
    return tmean(x, axis=-1)


# ---------------------------------------------------------------------------
# Framing / overlap-add (adjoint pair) on a [..., L, d] layout
# ---------------------------------------------------------------------------

def frame_time(x, size, hop, n_frames):
    """Gather overlapping frames along axis -2: [..., L, d] -> [..., S, size, d].

    Positions past L read as zero (implicit right padding).
    """
    xv = _value(x)
    length = xv.shape[-2]
    need = (n_frames - 1) * hop + size
    pad = [(0, 0)] * xv.ndim
    pad[-2] = (0, max(0, need - length))
    xp = np.pad(xv, pad)
    out = np.stack([xp[..., s * hop:s * hop + size, :] for s in range(n_frames)],
                   axis=-3)

    def vjp(g):
        gx = np.zeros(xp.shape, dtype=g.dtype)
        for s in range(n_frames):
            gx[..., s * hop:s * hop + size, :] += g[..., s, :, :]
        return gx[..., :length, :]

    return _record(out, [(x, vjp)])


def overlap_add_time(frames, hop, out_len):
    """Scatter-add frames [..., S, size, d] back to [..., out_len, d]."""
    fv = _value(frames)
    n_frames, size = fv.shape[-3], fv.shape[-2]
    full = (n_frames - 1) * hop + size
    out = np.zeros(fv.shape[:-3] + (full, fv.shape[-1]), dtype=fv.dtype)
    for s in range(n_frames):
        out[..., s * hop:s * hop + size, :] += fv[..., s, :, :]
    out = out[..., :out_len, :]

    def vjp(g):
        pad = [(0, 0)] * g.ndim
        pad[-2] = (0, full - out_len)
        gp = np.pad(g, pad)
        return np.stack([gp[..., s * hop:s * hop + size, :]
                         for s in range(n_frames)], axis=-3)

    return _record(out, [(frames, vjp)])


def coverage_counts(length, size, hop, n_frames, dtype=np.float64):
    """How many frames overlap each of the first `length` positions."""
    full = (n_frames - 1) * hop + size
    counts = np.zeros(full, dtype=dtype)
    for s in range(n_frames):
        counts[s * hop:s * hop + size] += 1.0
    return counts[:length]


# ---------------------------------------------------------------------------
# Attention (composite of the primitives above)
# ---------------------------------------------------------------------------

def scaled_dot_attention(q, k, v, heads):
    """Multi-head scaled dot-product attention on [B, L, d] inputs.

    Splits d into `heads` heads, applies softmax(QK^T/sqrt(d_head))V per
    head and concatenates. Output mixing is the caller's concern.
    """
    d = _value(q).shape[-1]
    if d % heads != 0:
        raise InvalidArgument(f"head count {heads} does not divide width {d}")
    d_head = d // heads

    def split(x):
        b, n, _ = _value(x).shape
        x = reshape(x, (b, n, heads, d_head))
        return transpose(x, (0, 2, 1, 3))  # [B, h, L, d_head]

    qh, kh, vh = split(q), split(k), split(v)
    scores = mul(matmul(qh, transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(d_head))
    ctx = matmul(softmax(scores), vh)  # [B, h, L, d_head]
    ctx = transpose(ctx, (0, 2, 1, 3))
    b, n = _value(q).shape[:2]
    return reshape(ctx, (b, n, d))


# ---------------------------------------------------------------------------
# Backward sweep and verification
# ---------------------------------------------------------------------------

def backward(tape, loss):
    """Reverse sweep over `tape` seeding d(loss)/d(loss) = 1.

    Accumulates into `.grad` of every tensor reachable from `loss`;
    leaves not reached keep grad None (treat as zero).
    """
    if loss.value.ndim != 0 and loss.value.size != 1:
        raise InvalidArgument("backward: loss must be scalar")
    grads: dict[int, np.ndarray] = {
        id(loss): np.ones_like(loss.value)
    }
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        for parent, vjp in zip(node._parents, node._vjps):
            contrib = vjp(g)
            prev = grads.get(id(parent))
            grads[id(parent)] = contrib if prev is None else prev + contrib
    # whatever remains in `grads` belongs to leaves (never produced on tape)
    leaves = {}
    for node in tape.nodes:
        for parent in node._parents:
            leaves[id(parent)] = parent
    leaves[id(loss)] = loss
    for tid, g in grads.items():
        t = leaves.get(tid)
        if t is not None:
            t.grad = g if t.grad is None else t.grad + g


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


def finite_difference_check(f, tensors, h=1e-5, max_coords=64, rng=None):
    """Max relative error between analytic and central-difference gradients.

    `f(*tensors)` must return a scalar Tensor and be re-runnable. Checks a
    random coordinate subset (at least `max_coords` per tensor, or all).
    Double precision inputs expected.
    """
    rng = rng or np.random.default_rng(0)
    zero_grads(tensors)
    with Tape() as tape:
        loss = f(*tensors)
    backward(tape, loss)

    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.value)
        flat = t.value.reshape(-1)
        n = flat.size
        coords = (np.arange(n) if n <= max_coords
                  else rng.choice(n, size=max_coords, replace=False))
        aflat = analytic.reshape(-1)
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + h
            fp = float(_value(f(*tensors)))
            flat[idx] = orig - h
            fm = float(_value(f(*tensors)))
            flat[idx] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = float(aflat[idx])
            diff = abs(a - numeric)
            if diff <= 1e-7:
                continue
            worst = max(worst, diff / max(abs(a) + abs(numeric), 1e-6))
    zero_grads(tensors)
    return worst
