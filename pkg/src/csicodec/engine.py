"""Dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap row-major numpy arrays. Complex-valued tensors are stored as
real arrays with a leading axis of size 2 (plane 0 = real part, plane 1 =
imaginary part), so the "real view" of a complex tensor is the storage
itself and gradients of complex leaves are the plane-wise real gradients
(equivalent to treating real/imaginary parts as independent parameters).

A ``Tape`` records primitive applications in execution order while active;
``Tape.backward`` replays the adjoints in reverse, accumulating gradients
for every leaf with ``requires_grad`` exactly once.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor", "Tape", "tape", "tensor", "param", "constant",
    "add", "sub", "mul", "div", "neg", "matmul", "dense",
    "exp", "log", "sqrt", "relu", "leaky_relu", "sigmoid",
    "tsum", "tmean", "reshape", "concat", "slice_axis", "stop_gradient",
    "conv2d", "conv2d_transpose", "depthwise_conv2d",
    "complex_conv2d", "complex_transposed_conv2d",
    "cplx", "creal", "cimag", "magnitude", "complex_to_channels",
    "channels_to_complex", "softmax", "log_softmax", "layer_norm",
    "batchnorm", "RunningStats", "max_pool_with_index", "max_unpool",
    "scatter_fixed", "mse", "grad_check",
]


class EngineError(Exception):
    """Contract violation inside the tensor engine."""


class DimensionError(EngineError):
    """Operand shapes incompatible with the requested primitive."""


class Tensor:
    """Immutable-by-convention value node. ``data`` is a numpy array."""

    __slots__ = ("data", "requires_grad", "_tracked")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.requires_grad = bool(requires_grad)
        # tracked = participates in the active tape's gradient flow
        self._tracked = self.requires_grad

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

    def item(self):
        return float(self.data)

    def real_view(self):
        """Storage as a real array; for complex tensors the leading axis of
        size 2 holds the real then imaginary plane."""
        return self.data

    def to_complex(self):
        """Interleaved complex copy of a plane-stacked tensor (tests/IO)."""
        if self.data.shape[0] != 2:
            raise DimensionError("not a plane-stacked complex tensor")
        return self.data[0] + 1j * self.data[1]

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad=False, dtype=None):
    arr = np.asarray(data, dtype=dtype)
    return Tensor(arr, requires_grad=requires_grad)


def param(data, dtype=None):
    return tensor(data, requires_grad=True, dtype=dtype)


def constant(data, dtype=None):
    return tensor(data, requires_grad=False, dtype=dtype)


def from_complex(arr, requires_grad=False):
    """Plane-stack an interleaved complex numpy array (copies)."""
    arr = np.asarray(arr)
    real_dtype = np.float64 if arr.dtype == np.complex128 else np.float32
    return tensor(np.stack([arr.real, arr.imag]).astype(real_dtype),
                  requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# Tape


class Tape:
    """Ordered record of primitive applications for one forward pass."""

    def __init__(self):
        self._nodes = []  # (out Tensor, inputs tuple, backward fn)
        self._active = False

    def _record(self, out, inputs, backward):
        self._nodes.append((out, inputs, backward))

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise EngineError("a tape is already active; tapes are single-owner")
        _ACTIVE_TAPE = self
        self._active = True
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        self._active = False
        return False

    def backward(self, loss):
        """Replay adjoints in reverse order; returns {leaf Tensor: grad}.

        ``loss`` must be a real scalar produced under this tape.
        """
        if loss.size != 1:
            raise EngineError("backward requires a scalar loss")
        grads = {loss: np.ones_like(loss.data)}
        for out, inputs, backward in reversed(self._nodes):
            g = grads.pop(out, None)
            if g is None:
                continue
            partials = backward(g)
            for inp, pg in zip(inputs, partials):
                if pg is None or not inp._tracked:
                    continue
                acc = grads.get(inp)
                if acc is None:
                    grads[inp] = pg
                else:
                    grads[inp] = acc + pg
        return {t: g for t, g in grads.items() if t.requires_grad}


_ACTIVE_TAPE = None


def tape():
    return Tape()


def backward(tp, loss):
    """Module-level alias for ``Tape.backward``."""
    return tp.backward(loss)


def _apply(out_data, inputs, backward_fn):
    """Wrap a primitive result, recording it on the active tape if any
    tracked input participates."""
    out = Tensor(out_data)
    if _ACTIVE_TAPE is not None and any(t._tracked for t in inputs):
        out._tracked = True
        _ACTIVE_TAPE._record(out, inputs, backward_fn)
    return out


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(grad, shape):
    """Sum-reduce a broadcast gradient back to ``shape``."""
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
# Elementwise arithmetic


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _apply(out, (a, b), bwd)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _apply(out, (a, b), bwd)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    out = a.data * b.data

    def bwd(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))

    return _apply(out, (a, b), bwd)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    out = a.data / b.data

    def bwd(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _apply(out, (a, b), bwd)


def neg(a):
    return _apply(-a.data, (a,), lambda g: (-g,))


def exp(a):
    out = np.exp(a.data)
    return _apply(out, (a,), lambda g: (g * out,))


def log(a):
    return _apply(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    out = np.sqrt(a.data)
    return _apply(out, (a,), lambda g: (g / (2.0 * out),))


def relu(a):
    mask = a.data > 0
    return _apply(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def leaky_relu(a, slope=0.2):
    mask = a.data > 0
    out = np.where(mask, a.data, slope * a.data)
    return _apply(out, (a,), lambda g: (np.where(mask, g, slope * g),))


def sigmoid(a):
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _apply(out, (a,), lambda g: (g * out * (1.0 - out),))


def stop_gradient(a):
    return Tensor(a.data)


# ---------------------------------------------------------------------------
# Reductions and shape ops


def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _apply(out, (a,), bwd)


def tmean(a, axis=None, keepdims=False):
    out = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))

    def bwd(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape) / count,)

    return _apply(out, (a,), bwd)


def reshape(a, shape):
    return _apply(a.data.reshape(shape), (a,),
                  lambda g: (g.reshape(a.shape),))


def concat(parts, axis=0):
    parts = [_as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _apply(out, tuple(parts), bwd)


def slice_axis(a, axis, start, stop):
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def bwd(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _apply(a.data[idx].copy(), (a,), bwd)


# ---------------------------------------------------------------------------
# Linear algebra


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul expects >= 2-D operands")
    out = np.matmul(a.data, b.data)

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _apply(out, (a, b), bwd)


def dense(x, w, b=None):
    """Affine map ``x @ w.T + b`` with ``w`` of shape (out, in).

    ``x`` may be a single vector (in,) or a batch (N, in).
    """
    single = x.ndim == 1
    if x.shape[-1] != w.shape[1]:
        raise DimensionError(
            f"dense: input dim {x.shape[-1]} != weight in-dim {w.shape[1]}")
    if b is not None and b.shape != (w.shape[0],):
        raise DimensionError("dense: bias shape mismatch")
    xm = reshape(x, (1, -1)) if single else x
    out = matmul(xm, transpose2d(w))
    if b is not None:
        out = add(out, reshape(b, (1, -1)))
    return reshape(out, (-1,)) if single else out


def transpose2d(a):
    if a.ndim != 2:
        raise DimensionError("transpose2d expects a matrix")
    return _apply(a.data.T.copy(), (a,), lambda g: (g.T.copy(),))


def swap_last2(a):
    """Transpose the trailing two axes (batched matrix transpose)."""
    if a.ndim < 2:
        raise DimensionError("swap_last2 expects >= 2-D input")
    out = np.ascontiguousarray(np.swapaxes(a.data, -1, -2))
    return _apply(out, (a,), lambda g: (np.swapaxes(g, -1, -2).copy(),))


# ---------------------------------------------------------------------------
# Convolution (real)


def _conv_out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _im2col(x, kh, kw, stride, pad):
    """(N,C,H,W) -> contiguous (N,Ho,Wo,C,kh,kw) patch matrix."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # N,C,Ho,Wo,kh,kw
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))


def _conv_fwd_cols(cols, w):
    n, ho, wo = cols.shape[:3]
    co = w.shape[0]
    flat = cols.reshape(n * ho * wo, -1)
    y = flat @ w.reshape(co, -1).T
    return np.ascontiguousarray(y.reshape(n, ho, wo, co).transpose(0, 3, 1, 2))


def _conv_bwd_w_cols(gy, cols, kshape):
    n, ho, wo = cols.shape[:3]
    gy_flat = gy.transpose(0, 2, 3, 1).reshape(n * ho * wo, -1)
    return (gy_flat.T @ cols.reshape(n * ho * wo, -1)).reshape(kshape)


def _conv_fwd(x, w, stride, pad):
    return _conv_fwd_cols(_im2col(x, w.shape[2], w.shape[3], stride, pad), w)


def _conv_bwd_w(gy, x, stride, pad, kshape):
    cols = _im2col(x, kshape[2], kshape[3], stride, pad)
    return _conv_bwd_w_cols(gy, cols, kshape)


def _conv_bwd_x(gy, w, stride, pad, x_shape):
    """Input adjoint of conv2d via a patch-gradient GEMM and scatter-add."""
    n, c, h, wdt = x_shape
    co, _, kh, kw = w.shape
    ho, wo = gy.shape[2], gy.shape[3]
    gy_flat = gy.transpose(0, 2, 3, 1).reshape(n * ho * wo, co)
    gcols = (gy_flat @ w.reshape(co, -1)).reshape(n, ho, wo, c, kh, kw)
    # accumulate in channels-last layout so the strided adds stay view-only
    gxp = np.zeros((n, h + 2 * pad, wdt + 2 * pad, c), dtype=gy.dtype)
    for u in range(kh):
        for v in range(kw):
            gxp[:, u:u + stride * ho:stride, v:v + stride * wo:stride, :] += \
                gcols[:, :, :, :, u, v]
    gx = np.ascontiguousarray(gxp.transpose(0, 3, 1, 2))
    if pad:
        return gx[:, :, pad:-pad, pad:-pad]
    return gx


def _with_batch(x):
    """Allow (C,H,W) single-sample inputs; returns (array4d, had_batch)."""
    if x.ndim == 3:
        return x[None], False
    if x.ndim == 4:
        return x, True
    raise DimensionError("conv expects (C,H,W) or (N,C,H,W)")


def conv2d(x, w, stride=1, pad=0):
    """Real 2-D cross-correlation, x:(N,Cin,H,W), w:(Cout,Cin,k,k)."""
    xd, batched = _with_batch(x.data)
    if w.ndim != 4:
        raise DimensionError("conv2d kernel must be 4-D")
    if xd.shape[1] != w.shape[1]:
        raise DimensionError(
            f"conv2d: input channels {xd.shape[1]} != kernel channels {w.shape[1]}")
    if xd.shape[2] + 2 * pad < w.shape[2] or xd.shape[3] + 2 * pad < w.shape[3]:
        raise DimensionError("conv2d: kernel larger than padded input")
    cols = _im2col(xd, w.shape[2], w.shape[3], stride, pad)
    out = _conv_fwd_cols(cols, w.data)
    x_shape = xd.shape

    def bwd(g):
        g4 = g if g.ndim == 4 else g[None]
        gx = _conv_bwd_x(g4, w.data, stride, pad, x_shape)
        gw = _conv_bwd_w_cols(g4, cols, w.shape)
        return (gx if batched else gx[0]), gw

    return _apply(out if batched else out[0], (x, w), bwd)


def conv2d_transpose(x, w, stride=1, pad=0):
    """Adjoint of ``conv2d``: x:(N,Cin,h,w), w:(Cin,Cout,k,k).

    Output spatial size is ``(h - 1) * stride - 2 * pad + k``.
    """
    xd, batched = _with_batch(x.data)
    if xd.shape[1] != w.shape[0]:
        raise DimensionError(
            f"conv2d_transpose: input channels {xd.shape[1]} != kernel in {w.shape[0]}")
    kh = w.shape[2]
    h_out = (xd.shape[2] - 1) * stride - 2 * pad + kh
    w_out = (xd.shape[3] - 1) * stride - 2 * pad + w.shape[3]
    if h_out <= 0 or w_out <= 0:
        raise DimensionError("conv2d_transpose: nonpositive output size")
    out_shape = (xd.shape[0], w.shape[1], h_out, w_out)
    out = _conv_bwd_x(xd, w.data, stride, pad, out_shape)

    def bwd(g):
        g4 = g if g.ndim == 4 else g[None]
        gcols = _im2col(g4, kh, w.shape[3], stride, pad)
        gx = _conv_fwd_cols(gcols, w.data)
        gw = _conv_bwd_w_cols(xd, gcols, w.shape)
        return (gx if batched else gx[0]), gw

    return _apply(out if batched else out[0], (x, w), bwd)


def depthwise_conv2d(x, w, pad=0):
    """Per-channel 3x3-style convolution, w:(C,k,k), stride 1."""
    xd, batched = _with_batch(x.data)
    c, kh, kw = w.shape
    if xd.shape[1] != c:
        raise DimensionError("depthwise_conv2d: channel mismatch")
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = xd.shape[2] + 2 * pad - kh + 1
    wo = xd.shape[3] + 2 * pad - kw + 1
    out = np.zeros((xd.shape[0], c, ho, wo), dtype=xd.dtype)
    for u in range(kh):
        for v in range(kw):
            out += xp[:, :, u:u + ho, v:v + wo] * w.data[None, :, u, v, None, None]

    def bwd(g):
        g4 = g if g.ndim == 4 else g[None]
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for u in range(kh):
            for v in range(kw):
                gxp[:, :, u:u + ho, v:v + wo] += g4 * w.data[None, :, u, v, None, None]
                gw[:, u, v] = (g4 * xp[:, :, u:u + ho, v:v + wo]).sum(axis=(0, 2, 3))
        gx = gxp[:, :, pad:-pad, pad:-pad] if pad else gxp
        return (gx if batched else gx[0]), gw

    return _apply(out if batched else out[0], (x, w), bwd)


# ---------------------------------------------------------------------------
# Complex helpers (leading plane axis of size 2)


def cplx(re, im):
    """Stack real/imaginary plane tensors into a complex tensor."""
    if re.shape != im.shape:
        raise DimensionError("cplx: plane shapes differ")
    r = reshape(re, (1,) + re.shape)
    i = reshape(im, (1,) + im.shape)
    return concat([r, i], axis=0)


def creal(x):
    return reshape(slice_axis(x, 0, 0, 1), x.shape[1:])


def cimag(x):
    return reshape(slice_axis(x, 0, 1, 2), x.shape[1:])


def complex_conv2d(x, w, stride=1, pad=0):
    """Complex convolution via the (A + iB) plane expansion.

    x: (2, N, Cin, H, W) or (2, Cin, H, W); w: (2, Cout, Cin, k, k) with
    plane 0 = A (real kernels), plane 1 = B (imaginary kernels). Odd k only.
    Computed as one real convolution with the block kernel [[A,-B],[B,A]]
    over plane-stacked channels, which equals the four-convolution form:
    y = conv(xr,A) - conv(xi,B) + i(conv(xr,B) + conv(xi,A)).
    """
    if x.shape[0] != 2 or w.shape[0] != 2:
        raise DimensionError("complex_conv2d expects plane-stacked operands")
    if w.shape[3] % 2 == 0 or w.shape[4] % 2 == 0:
        raise DimensionError("complex_conv2d requires odd kernel extents")
    if pad < 0:
        raise DimensionError("complex_conv2d requires pad >= 0")
    a, b = creal(w), cimag(w)
    w_big = concat([concat([a, neg(b)], axis=1),
                    concat([b, a], axis=1)], axis=0)
    single = x.ndim == 4
    planes = complex_to_channels(reshape(x, (2, 1) + x.shape[1:]) if single else x)
    y = conv2d(planes, w_big, stride, pad)
    out = channels_to_complex(y)
    return reshape(out, (2,) + out.shape[2:]) if single else out


def complex_transposed_conv2d(x, w, stride=1, pad=0):
    """Adjoint-direction complex convolution; w: (2, Cin, Cout, k, k).

    Same block-kernel trick as ``complex_conv2d`` on the transposed real
    primitive. Unlike ``complex_conv2d`` even kernel extents are allowed
    (needed for exact spatial doubling at stride 2).
    """
    if x.shape[0] != 2 or w.shape[0] != 2:
        raise DimensionError("complex_transposed_conv2d expects plane-stacked operands")
    a, b = creal(w), cimag(w)
    w_big = concat([concat([a, b], axis=1),
                    concat([neg(b), a], axis=1)], axis=0)
    single = x.ndim == 4
    planes = complex_to_channels(reshape(x, (2, 1) + x.shape[1:]) if single else x)
    y = conv2d_transpose(planes, w_big, stride, pad)
    out = channels_to_complex(y)
    return reshape(out, (2,) + out.shape[2:]) if single else out


def magnitude(x):
    """Elementwise complex modulus of a plane-stacked tensor."""
    if x.shape[0] != 2:
        raise DimensionError("magnitude expects a plane-stacked tensor")
    r, i = x.data[0], x.data[1]
    out = np.sqrt(r * r + i * i)

    def bwd(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.stack([g * r / safe, g * i / safe]),)

    return _apply(out, (x,), bwd)


def complex_to_channels(x):
    """(2, N, C, H, W) -> (N, 2C, H, W): real channels then imaginary."""
    return concat([creal(x), cimag(x)], axis=1)


def channels_to_complex(x):
    """(N, 2C, H, W) -> (2, N, C, H, W); first half of channels = real."""
    c = x.shape[1] // 2
    return cplx(slice_axis(x, 1, 0, c), slice_axis(x, 1, c, 2 * c))


# ---------------------------------------------------------------------------
# Softmax / normalisation


def softmax(x, axis=-1, temperature=1.0):
    """Numerically stabilised softmax of ``x / temperature`` along ``axis``."""
    if temperature <= 0:
        raise EngineError("softmax temperature must be positive")
    scaled = mul(x, 1.0 / temperature) if temperature != 1.0 else x
    shift = constant(scaled.data.max(axis=axis, keepdims=True))
    e = exp(sub(scaled, shift))
    return div(e, tsum(e, axis=axis, keepdims=True))


def log_softmax(x, axis=-1):
    shift = constant(x.data.max(axis=axis, keepdims=True))
    z = sub(x, shift)
    return sub(z, log(tsum(exp(z), axis=axis, keepdims=True)))


def layer_norm(x, gamma, beta, axis=1, eps=1e-5):
    """Normalise over ``axis`` per position; affine params broadcast along it."""
    mu = tmean(x, axis=axis, keepdims=True)
    xc = sub(x, mu)
    var = tmean(mul(xc, xc), axis=axis, keepdims=True)
    inv = div(xc, sqrt(add(var, eps)))
    shape = [1] * x.ndim
    shape[axis] = x.shape[axis]
    return add(mul(inv, reshape(gamma, shape)), reshape(beta, shape))


class RunningStats:
    """Exponential running mean/variance for batch normalisation."""

    def __init__(self, channels, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)

    def update(self, mean, var, momentum):
        self.mean = (1.0 - momentum) * self.mean + momentum * mean.astype(self.mean.dtype)
        self.var = (1.0 - momentum) * self.var + momentum * var.astype(self.var.dtype)

    def state(self):
        return {"mean": self.mean.copy(), "var": self.var.copy()}

    def load(self, state):
        self.mean = state["mean"].copy()
        self.var = state["var"].copy()


def batchnorm(x, gamma, beta, running, mode, momentum=0.1, eps=1e-5):
    """Per-channel batch normalisation over a (N, C, H, W) or (N, C) tensor.

    ``mode``: "train" normalises by batch statistics and updates ``running``;
    "eval" normalises by running statistics; "stats_only" behaves like train
    for the forward value and running update, but contributes no parameter
    adjoints (gamma/beta and the batch statistics are held constant).
    """
    if mode not in ("train", "eval", "stats_only"):
        raise EngineError(f"unknown batchnorm mode {mode!r}")
    xd = x.data
    if xd.ndim == 4:
        axes, shape = (0, 2, 3), (1, -1, 1, 1)
    elif xd.ndim == 2:
        axes, shape = (0,), (1, -1)
    else:
        raise DimensionError("batchnorm expects (N,C,H,W) or (N,C)")
    if mode in ("train", "stats_only") and xd.shape[0] < 2:
        raise EngineError("batchnorm: degenerate batch of size 1 in train mode")

    if mode == "eval":
        mean, var = running.mean, running.var
    else:
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        running.update(mean, var, momentum)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean.reshape(shape)) * inv_std.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    if mode == "train":
        def bwd(g):
            gxh = g * gamma.data.reshape(shape)
            term = gxh - gxh.mean(axis=axes, keepdims=True) \
                - xhat * (gxh * xhat).mean(axis=axes, keepdims=True)
            gx = term * inv_std.reshape(shape)
            ggamma = (g * xhat).sum(axis=axes)
            gbeta = g.sum(axis=axes)
            return gx, ggamma, gbeta

        return _apply(out, (x, gamma, beta), bwd)

    if mode == "stats_only":
        def bwd(g):
            gx = g * (gamma.data.reshape(shape) * inv_std.reshape(shape))
            return gx, None, None

        return _apply(out, (x, gamma, beta), bwd)

    def bwd(g):
        gx = g * (gamma.data.reshape(shape) * inv_std.reshape(shape))
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        return gx, ggamma, gbeta

    return _apply(out, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# Pooling


def max_pool_with_index(x, window):
    """Non-overlapping max pooling on the trailing two axes.

    Returns (values, indices) where indices are row-major flat positions
    *within each window*; ties resolve to the smallest flat index.
    """
    wh, ww = (window, window) if isinstance(window, int) else window
    h, w = x.shape[-2], x.shape[-1]
    if h % wh or w % ww:
        raise DimensionError("max_pool window must divide the spatial extents")
    lead = x.shape[:-2]
    hp, wp = h // wh, w // ww
    blocks = x.data.reshape(lead + (hp, wh, wp, ww))
    blocks = np.moveaxis(blocks, -3, -2)          # ..., hp, wp, wh, ww
    flat = blocks.reshape(lead + (hp, wp, wh * ww))
    idx = flat.argmax(axis=-1)
    values = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        gflat = np.zeros(lead + (hp, wp, wh * ww), dtype=g.dtype)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        gb = gflat.reshape(lead + (hp, wp, wh, ww))
        gb = np.moveaxis(gb, -2, -3)
        return (gb.reshape(x.shape).copy(),)

    vals = _apply(values, (x,), bwd)
    return vals, idx.astype(np.int64)


def max_unpool(values, indices, out_shape):
    """Inverse of ``max_pool_with_index``: scatter maxima, zeros elsewhere."""
    lead = values.shape[:-2]
    hp, wp = values.shape[-2], values.shape[-1]
    h, w = out_shape[-2], out_shape[-1]
    wh, ww = h // hp, w // wp
    if indices.min() < 0 or indices.max() >= wh * ww:
        raise EngineError("max_unpool: corrupt indication (index out of range)")
    flat = np.zeros(lead + (hp, wp, wh * ww), dtype=values.dtype)
    np.put_along_axis(flat, indices[..., None], values.data[..., None], axis=-1)
    blocks = flat.reshape(lead + (hp, wp, wh, ww))
    out = np.moveaxis(blocks, -2, -3).reshape(out_shape)

    def bwd(g):
        gb = g.reshape(lead + (hp, wh, wp, ww))
        gb = np.moveaxis(gb, -3, -2).reshape(lead + (hp, wp, wh * ww))
        gv = np.take_along_axis(gb, indices[..., None], axis=-1)[..., 0]
        return (gv,)

    return _apply(out, (values,), bwd)


def scatter_fixed(values, positions, out_shape):
    """Scatter-add a flat vector of values to fixed flat positions.

    values: (n,) tensor; positions: (n,) int array into the flattened
    ``out_shape``. Coincident positions accumulate.
    """
    if positions.min() < 0 or positions.max() >= int(np.prod(out_shape)):
        raise EngineError("scatter_fixed: position out of range")
    flat = np.zeros(int(np.prod(out_shape)), dtype=values.dtype)
    np.add.at(flat, positions, values.data.reshape(-1))

    def bwd(g):
        return (g.reshape(-1)[positions].reshape(values.shape),)

    return _apply(flat.reshape(out_shape), (values,), bwd)


# ---------------------------------------------------------------------------
# Losses / verification


def mse(a, b):
    d = sub(a, b)
    return tmean(mul(d, d))


def grad_check(f, x, eps=1e-5):
    """Max relative error between central differences and the tape gradient.

    ``f`` maps a Tensor to a real scalar Tensor and must be deterministic.
    ``x`` should be double precision. Per coordinate the error is
    |g_fd - g_tape| / max(1e-8, |g|) with |g| the larger magnitude estimate.
    """
    x0 = x.data.astype(np.float64, copy=True)
    leaf = param(x0.copy())
    with tape() as tp:
        loss = f(leaf)
    g_tape = tp.backward(loss).get(leaf)
    if g_tape is None:
        g_tape = np.zeros_like(x0)

    g_fd = np.zeros_like(x0)
    flat = x0.reshape(-1)
    fd_flat = g_fd.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(constant(x0.copy())).data)
        flat[i] = orig - eps
        fm = float(f(constant(x0.copy())).data)
        flat[i] = orig
        fd_flat[i] = (fp - fm) / (2.0 * eps)

    delta = np.abs(g_fd - g_tape)
    denom = np.maximum(1e-8, np.maximum(np.abs(g_fd), np.abs(g_tape)))
    return float((delta / denom).max())
