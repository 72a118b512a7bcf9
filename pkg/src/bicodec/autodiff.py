"""Dense tensors with reverse-mode automatic differentiation.

Everything downstream (warping, networks, entropy models, training) is built
on the ops in this module.  Data lives in numpy arrays; recording a graph is
implicit: any op whose inputs require gradients attaches a backward closure,
and ``Tensor.backward()`` replays the closures in reverse topological order.

Gradients are plain numpy arrays accumulated on ``Tensor.grad``.  Inference
code should run under ``no_grad()`` so no graph is recorded.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from scipy import special as _sp

__all__ = [
    "Tensor",
    "tensor",
    "parameter",
    "no_grad",
    "is_grad_enabled",
    "set_debug_checks",
    "backprop",
    "concat",
    "pad2d",
    "conv2d",
    "conv2d_transpose",
    "leaky_relu",
    "bilinear_sample",
    "matmul",
    "maximum",
    "add_uniform_noise",
    "round_half_away",
    "AdamState",
    "adam_step",
    "clip_global_grad_norm",
    "numerical_gradient",
    "gradient_check",
]

_GRAD_ENABLED = True
_DEBUG_CHECKS = False


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / oracles)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def set_debug_checks(flag: bool) -> None:
    """When on, every op output is checked for NaN/Inf (slow; tests only)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(flag)


def _as_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype not in (np.float32, np.float64):
        return arr.astype(np.float64)
    return arr


class Tensor:
    """N-dimensional array of reals, optionally tracked by the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_grad_owned")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._grad_owned = False

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ValueError(f"item() needs a one-element tensor, got shape {self.data.shape}")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None
        self._grad_owned = False

    # -- graph machinery ----------------------------------------------------

    def backward(self) -> None:
        """Populate ``grad`` on every reachable tensor that requires it."""
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar loss, got shape {self.data.shape}")
        topo = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)
                # Intermediates are one-shot; drop closure and grad buffer so
                # activation memory frees as the sweep walks back.
                node._backward = None
                node._parents = ()
                if not node.requires_grad:
                    node.grad = None
                    node._grad_owned = False

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __pow__(self, p):
        return pow_scalar(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # method-style ops used pervasively
    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def abs(self):
        return absolute(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def softplus(self):
        return softplus(self)


def tensor(data, dtype=None) -> Tensor:
    return Tensor(data, dtype=dtype)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _toposort(root: Tensor):
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def _accum(t: Tensor, g: np.ndarray) -> None:
    # First assignment may alias the upstream buffer; consumers must not
    # mutate .grad in place (clip_global_grad_norm reassigns for this reason).
    # Once this node owns a freshly allocated buffer, later adds are in place.
    if t.grad is None:
        t.grad = np.asarray(g)
        t._grad_owned = False
    elif t._grad_owned and t.grad.shape == np.shape(g):
        t.grad += g
    else:
        t.grad = t.grad + g
        t._grad_owned = True


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _make(data: np.ndarray, parents, backward) -> Tensor:
    if _DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values produced by an op")
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad or p._backward is not None for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
        out.requires_grad = False
    return out


# -- elementwise / arithmetic ----------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data + b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), bwd)


def neg(a) -> Tensor:
    a = _wrap(a)

    def bwd(g):
        _accum(a, -g)

    return _make(-a.data, (a,), bwd)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data * b.data

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data / b.data

    def bwd(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * out_data / b.data, b.data.shape))

    return _make(out_data, (a, b), bwd)


def pow_scalar(a, p: float) -> Tensor:
    a = _wrap(a)
    p = float(p)
    out_data = a.data**p

    def bwd(g):
        _accum(a, g * p * a.data ** (p - 1.0))

    return _make(out_data, (a,), bwd)


def exp(a) -> Tensor:
    a = _wrap(a)
    out_data = np.exp(a.data)

    def bwd(g):
        _accum(a, g * out_data)

    return _make(out_data, (a,), bwd)


def log(a) -> Tensor:
    a = _wrap(a)

    def bwd(g):
        _accum(a, g / a.data)

    return _make(np.log(a.data), (a,), bwd)


def absolute(a) -> Tensor:
    a = _wrap(a)

    def bwd(g):
        _accum(a, g * np.sign(a.data))

    return _make(np.abs(a.data), (a,), bwd)


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    out_data = _sp.expit(a.data)

    def bwd(g):
        _accum(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), bwd)


def tanh(a) -> Tensor:
    a = _wrap(a)
    out_data = np.tanh(a.data)

    def bwd(g):
        _accum(a, g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), bwd)


def softplus(a) -> Tensor:
    a = _wrap(a)
    out_data = np.logaddexp(0.0, a.data)

    def bwd(g):
        _accum(a, g * _sp.expit(a.data))

    return _make(out_data, (a,), bwd)


def std_normal_cdf(a) -> Tensor:
    """Phi(x) for the standard normal; gradient is the normal pdf."""
    a = _wrap(a)
    out_data = _sp.ndtr(a.data)

    def bwd(g):
        _accum(a, g * np.exp(-0.5 * a.data * a.data) / math.sqrt(2.0 * math.pi))

    return _make(out_data, (a,), bwd)


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the gradient to the first argument."""
    a, b = _wrap(a), _wrap(b)
    take_a = a.data >= b.data
    out_data = np.where(take_a, a.data, b.data)

    def bwd(g):
        _accum(a, _unbroadcast(np.where(take_a, g, 0.0), a.data.shape))
        _accum(b, _unbroadcast(np.where(take_a, 0.0, g), b.data.shape))

    return _make(out_data, (a, b), bwd)


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    """max(x, slope*x); gradient at exactly 0 is the slope (fixed convention)."""
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"leaky_relu slope must be in [0, 1), got {slope}")
    a = _wrap(a)
    mult = np.where(a.data > 0, a.data.dtype.type(1.0), a.data.dtype.type(slope))

    def bwd(g):
        _accum(a, g * mult)

    return _make(a.data * mult, (a,), bwd)


def add_uniform_noise(a, rng: np.random.Generator) -> Tensor:
    """x + U(-0.5, 0.5); the noise is a constant for the backward pass."""
    a = _wrap(a)
    noise = rng.uniform(-0.5, 0.5, size=a.data.shape).astype(a.data.dtype, copy=False)

    def bwd(g):
        _accum(a, g)

    return _make(a.data + noise, (a,), bwd)


def round_half_away(a) -> Tensor:
    """Round to nearest integer, halves away from zero.  Not differentiable."""
    a = _wrap(a)
    data = a.data
    return Tensor(np.sign(data) * np.floor(np.abs(data) + 0.5))


# -- shape ops ---------------------------------------------------------------


def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape))

    return _make(out_data, (a,), bwd)


def reduce_mean(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    scale = a.data.size / out_data.size

    def bwd(g):
        gg = np.asarray(g) / scale
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape))

    return _make(out_data, (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)

    def bwd(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), bwd)


def transpose(a, axes) -> Tensor:
    a = _wrap(a)
    inv = np.argsort(axes)

    def bwd(g):
        _accum(a, g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), bwd)


def getitem(a, idx) -> Tensor:
    a = _wrap(a)
    out_data = a.data[idx]

    def bwd(g):
        buf = np.zeros_like(a.data)
        buf[idx] = g
        _accum(a, buf)

    return _make(out_data, (a,), bwd)


def concat(tensors, axis: int) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _make(out_data, tuple(tensors), bwd)


def pad2d(a, pad: int, mode: str = "zero") -> Tensor:
    """Pad the trailing two axes of a [B,C,H,W] tensor."""
    a = _wrap(a)
    if pad == 0:
        return a * 1.0 if a.requires_grad else a
    widths = ((0, 0), (0, 0), (pad, pad), (pad, pad))
    if mode == "zero":
        out_data = np.pad(a.data, widths)
    elif mode == "edge":
        out_data = np.pad(a.data, widths, mode="edge")
    else:
        raise ValueError(f"unknown pad mode {mode!r}")

    def bwd(g):
        core = g[:, :, pad:-pad, pad:-pad]
        if mode == "zero":
            _accum(a, core)
            return
        gg = core.copy()
        # edge mode: fold the replicated border sums back onto the edges
        gg[:, :, 0, :] += g[:, :, :pad, pad:-pad].sum(axis=2)
        gg[:, :, -1, :] += g[:, :, -pad:, pad:-pad].sum(axis=2)
        gg[:, :, :, 0] += g[:, :, pad:-pad, :pad].sum(axis=3)
        gg[:, :, :, -1] += g[:, :, pad:-pad, -pad:].sum(axis=3)
        gg[:, :, 0, 0] += g[:, :, :pad, :pad].sum(axis=(2, 3))
        gg[:, :, 0, -1] += g[:, :, :pad, -pad:].sum(axis=(2, 3))
        gg[:, :, -1, 0] += g[:, :, -pad:, :pad].sum(axis=(2, 3))
        gg[:, :, -1, -1] += g[:, :, -pad:, -pad:].sum(axis=(2, 3))
        _accum(a, gg)

    return _make(out_data, (a,), bwd)


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching semantics (stacks of 2-D)."""
    a, b = _wrap(a), _wrap(b)
    out_data = a.data @ b.data

    def bwd(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        _accum(a, _unbroadcast(ga, a.data.shape))
        _accum(b, _unbroadcast(gb, b.data.shape))

    return _make(out_data, (a, b), bwd)


# -- convolution --------------------------------------------------------------


def _check_conv_shapes(x, w, b, op):
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"{op}: input must be [B,C,H,W] and weight 4-D, got {x.shape} and {w.shape}")
    if b is not None and b.ndim != 1:
        raise ValueError(f"{op}: bias must be 1-D, got shape {b.shape}")


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int):
    """Patches of a padded [B,C,Hp,Wp] array as a [C*kh*kw, B*Ho*Wo] matrix.

    Channel-major patch layout keeps the materializing copy sequential along
    the width axis, which is what makes CPU convolution affordable here.
    """
    bsz, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    sb, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(c, kh, kw, bsz, ho, wo),
        strides=(sc, sh, sw, sb, sh * stride, sw * stride),
        writeable=False,
    )
    return view.reshape(c * kh * kw, bsz * ho * wo), ho, wo


def _col2im(cols: np.ndarray, bsz, c, hp, wp, kh, kw, stride, ho, wo, dtype):
    """Adjoint of _im2col: scatter-add patch rows back into a padded image."""
    out = np.zeros((bsz, c, hp, wp), dtype=dtype)
    patches = cols.reshape(c, kh, kw, bsz, ho, wo)
    disjoint = stride >= kh and stride >= kw
    for i in range(kh):
        for j in range(kw):
            dst = out[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride]
            src = patches[:, i, j].transpose(1, 0, 2, 3)
            if disjoint:
                dst[...] = src
            else:
                dst += src
    return out


def _pad_hw(arr: np.ndarray, padding: int) -> np.ndarray:
    if not padding:
        return arr
    return np.pad(arr, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of [B,Cin,H,W] with [Cout,Cin,kH,kW] plus bias."""
    x, w = _wrap(x), _wrap(w)
    b = _wrap(b) if b is not None else None
    _check_conv_shapes(x.data, w.data, None if b is None else b.data, "conv2d")
    cout, cin_w, kh, kw = w.data.shape
    bsz, cin, h, wid = x.data.shape
    if cin != cin_w:
        raise ValueError(f"conv2d: input has {cin} channels but weight expects {cin_w}")
    if b is not None and b.data.shape[0] != cout:
        raise ValueError(f"conv2d: bias length {b.data.shape[0]} != output channels {cout}")
    if h + 2 * padding < kh or wid + 2 * padding < kw:
        raise ValueError(f"conv2d: kernel {kh}x{kw} exceeds padded input {h + 2 * padding}x{wid + 2 * padding}")

    xp = _pad_hw(x.data, padding)
    # the reshape inside _im2col materializes the patch matrix once; the
    # backward closure reuses it for the weight gradient
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    wmat = w.data.reshape(cout, cin * kh * kw)
    out = wmat @ cols
    if b is not None:
        out += b.data[:, None]
    out_data = out.reshape(cout, bsz, ho, wo).transpose(1, 0, 2, 3)
    hp, wp = xp.shape[2], xp.shape[3]

    def bwd(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(cout, bsz * ho * wo)
        if w.requires_grad or w._backward is not None:
            _accum(w, (gmat @ cols.T).reshape(w.data.shape))
        if x.requires_grad or x._backward is not None:
            gcols = wmat.T @ gmat
            gxp = _col2im(gcols, bsz, cin, hp, wp, kh, kw, stride, ho, wo, g.dtype)
            _accum(x, gxp[:, :, padding : hp - padding, padding : wp - padding] if padding else gxp)
        if b is not None:
            _accum(b, gmat.sum(axis=1))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out_data, parents, bwd)


def conv2d_transpose(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of conv2d: [B,Cin,H,W] with weight [Cin,Cout,kH,kW].

    Forward equals the input-gradient pass of a conv2d with the same
    geometry, so <conv2d(v, w), y> == <v, conv2d_transpose(y, w)>.
    """
    x, w = _wrap(x), _wrap(w)
    b = _wrap(b) if b is not None else None
    _check_conv_shapes(x.data, w.data, None if b is None else b.data, "conv2d_transpose")
    cin_w, cout, kh, kw = w.data.shape
    bsz, cin, h, wid = x.data.shape
    if cin != cin_w:
        raise ValueError(f"conv2d_transpose: input has {cin} channels but weight expects {cin_w}")
    if b is not None and b.data.shape[0] != cout:
        raise ValueError(f"conv2d_transpose: bias length {b.data.shape[0]} != output channels {cout}")

    ho = (h - 1) * stride - 2 * padding + kh
    wo = (wid - 1) * stride - 2 * padding + kw
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d_transpose: output size {ho}x{wo} is empty")
    hp, wp = ho + 2 * padding, wo + 2 * padding

    wmat = w.data.reshape(cin, cout * kh * kw)
    xmat = x.data.transpose(1, 0, 2, 3).reshape(cin, bsz * h * wid)
    cols = wmat.T @ xmat
    full = _col2im(cols, bsz, cout, hp, wp, kh, kw, stride, h, wid, x.data.dtype)
    out_data = full[:, :, padding : hp - padding, padding : wp - padding] if padding else full
    if b is not None:
        out_data = out_data + b.data[None, :, None, None]

    def bwd(g):
        gcols, _, _ = _im2col(_pad_hw(g, padding), kh, kw, stride)
        if x.requires_grad or x._backward is not None:
            gx = (wmat @ gcols).reshape(cin, bsz, h, wid).transpose(1, 0, 2, 3)
            _accum(x, gx)
        if w.requires_grad or w._backward is not None:
            _accum(w, (xmat @ gcols.T).reshape(w.data.shape))
        if b is not None:
            _accum(b, g.sum(axis=(0, 2, 3)))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out_data, parents, bwd)


# -- bilinear sampling ---------------------------------------------------------


def _scatter_add(flat_target, idx, values):
    flat_target += np.bincount(idx.reshape(-1), weights=values.reshape(-1), minlength=flat_target.size)


def bilinear_sample(source, coords) -> Tensor:
    """4-tap bilinear lookup of [B,C,H,W] at absolute pixel coords [B,2,H,W].

    Channel 0 of coords is x (width axis), channel 1 is y.  Positions are
    clamped to the border, so sampling is total and the op stays
    differentiable w.r.t. both inputs (clamped coords get zero gradient).
    """
    source, coords = _wrap(source), _wrap(coords)
    bsz, c, h, w = source.data.shape
    if coords.data.shape[0] != bsz or coords.data.shape[1] != 2:
        raise ValueError(f"bilinear_sample: coords must be [B,2,H,W], got {coords.data.shape}")
    ho, wo = coords.data.shape[2], coords.data.shape[3]

    cx = np.clip(coords.data[:, 0], 0.0, w - 1.0)
    cy = np.clip(coords.data[:, 1], 0.0, h - 1.0)
    x0 = np.floor(cx)
    y0 = np.floor(cy)
    fx = cx - x0
    fy = cy - y0
    x0i = x0.astype(np.intp)
    y0i = y0.astype(np.intp)
    x1i = np.minimum(x0i + 1, w - 1)
    y1i = np.minimum(y0i + 1, h - 1)

    src = source.data
    bidx = np.arange(bsz, dtype=np.intp)[:, None, None, None]
    cidx = np.arange(c, dtype=np.intp)[None, :, None, None]
    y0e, y1e = y0i[:, None], y1i[:, None]
    x0e, x1e = x0i[:, None], x1i[:, None]
    v00 = src[bidx, cidx, y0e, x0e]
    v01 = src[bidx, cidx, y0e, x1e]
    v10 = src[bidx, cidx, y1e, x0e]
    v11 = src[bidx, cidx, y1e, x1e]

    fxe = fx[:, None]
    fye = fy[:, None]
    top = v00 + fxe * (v01 - v00)
    bot = v10 + fxe * (v11 - v10)
    out_data = top + fye * (bot - top)

    def bwd(g):
        if source.requires_grad or source._backward is not None:
            w00 = (1.0 - fxe) * (1.0 - fye)
            w01 = fxe * (1.0 - fye)
            w10 = (1.0 - fxe) * fye
            w11 = fxe * fye
            gsrc = np.zeros(bsz * c * h * w, dtype=g.dtype)
            base = (bidx * c + cidx) * h
            i00 = ((base + y0e) * w + x0e)
            i01 = ((base + y0e) * w + x1e)
            i10 = ((base + y1e) * w + x0e)
            i11 = ((base + y1e) * w + x1e)
            i00 = np.broadcast_to(i00, g.shape)
            i01 = np.broadcast_to(i01, g.shape)
            i10 = np.broadcast_to(i10, g.shape)
            i11 = np.broadcast_to(i11, g.shape)
            _scatter_add(gsrc, i00, g * w00)
            _scatter_add(gsrc, i01, g * w01)
            _scatter_add(gsrc, i10, g * w10)
            _scatter_add(gsrc, i11, g * w11)
            _accum(source, gsrc.reshape(bsz, c, h, w))
        if coords.requires_grad or coords._backward is not None:
            ddx = (1.0 - fye) * (v01 - v00) + fye * (v11 - v10)
            ddy = (1.0 - fxe) * (v10 - v00) + fxe * (v11 - v01)
            in_x = ((coords.data[:, 0] > 0.0) & (coords.data[:, 0] < w - 1.0))[:, None]
            in_y = ((coords.data[:, 1] > 0.0) & (coords.data[:, 1] < h - 1.0))[:, None]
            gx = (g * ddx * in_x).sum(axis=1)
            gy = (g * ddy * in_y).sum(axis=1)
            _accum(coords, np.stack([gx, gy], axis=1))

    return _make(out_data, (source, coords), bwd)


def backprop(loss: Tensor) -> None:
    """Run reverse-mode accumulation from a scalar loss node."""
    loss.backward()


# -- optimizer ----------------------------------------------------------------


class AdamState:
    """Adam moment accumulators for a named parameter set."""

    def __init__(self, params: dict, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def state_arrays(self):
        """Flat name->array view of the accumulators, for checkpointing."""
        out = {}
        for k, arr in self.m.items():
            out["adam.m." + k] = arr
        for k, arr in self.v.items():
            out["adam.v." + k] = arr
        return out

    def load_state_arrays(self, arrays: dict, t: int, lr: float) -> None:
        self.t = int(t)
        self.lr = float(lr)
        for k in self.m:
            self.m[k] = arrays["adam.m." + k].reshape(self.m[k].shape).copy()
            self.v[k] = arrays["adam.v." + k].reshape(self.v[k].shape).copy()


def adam_step(state: AdamState, params: dict) -> None:
    """One bias-corrected Adam update; parameters with grad None are skipped."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for k, p in params.items():
        if p.grad is None:
            continue
        g = p.grad
        if g.shape != p.data.shape:
            raise ValueError(f"adam_step: gradient shape {g.shape} != parameter shape {p.data.shape} for {k!r}")
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def clip_global_grad_norm(params, max_norm: float) -> float:
    """Scale all gradients so the global L2 norm is at most max_norm.

    Returns the scale that was applied (1.0 when the norm is already small).
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    tensors = list(params.values()) if isinstance(params, dict) else list(params)
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in tensors if p.grad is not None))
    if total <= max_norm or total == 0.0:
        return 1.0
    scale = max_norm / total
    for p in tensors:
        if p.grad is not None:
            p.grad = p.grad * scale
            p._grad_owned = True
    return scale


# -- gradient verification oracle ---------------------------------------------


def numerical_gradient(f, t: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central-difference d f()/d t, evaluating f with grads disabled."""
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f().item()
            flat[i] = orig - eps
            fm = f().item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def gradient_check(f, tensors, eps: float = 1e-5) -> float:
    """Compare backprop gradients of scalar f() against central differences.

    Returns the worst relative error over all elements of all tensors,
    where rel = |ad - fd| / max(|ad|, |fd|, 1e-4).
    """
    seq = list(tensors.values()) if isinstance(tensors, dict) else list(tensors)
    for t in seq:
        t.requires_grad = True
        t.zero_grad()
    loss = f()
    loss.backward()
    worst = 0.0
    for t in seq:
        ad = t.grad if t.grad is not None else np.zeros_like(t.data)
        fd = numerical_gradient(f, t, eps)
        denom = np.maximum(np.maximum(np.abs(ad), np.abs(fd)), 1e-4)
        worst = max(worst, float(np.max(np.abs(ad - fd) / denom)))
    return worst
