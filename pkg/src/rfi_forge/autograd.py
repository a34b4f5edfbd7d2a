"""Minimal dense-tensor library with reverse-mode automatic differentiation.

Just enough operations to express the segmentation network: matmul,
convolutions (plain / transposed / depthwise), layer norm, softmax,
activations, reductions and reshapes.  The graph is recorded eagerly per
forward pass and dropped after backward; no graph reuse.

Values are float32 by default.  Passing float64 arrays (or creating
parameters with dtype=np.float64) switches a computation into 64-bit
"shadow" mode, which the finite-difference gradient tests rely on.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf


class ShapeError(ValueError):
    """Raised when an operation receives incompatible shapes."""


class StaleGraphError(RuntimeError):
    """Raised when backward() is called twice on the same recorded graph."""


class NonFiniteLossError(FloatingPointError):
    """Raised when the scalar fed to backward() is NaN or Inf."""


def _as_float(data, dtype=None):
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """Dense real N-d array with optional gradient tracking.

    ``grad`` is populated (as a plain ndarray of the same shape) by
    :func:`backward`.  Operations never mutate their inputs.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn",
                 "_consumed")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_float(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward_fn = None
        self._consumed = False

    # -- bookkeeping ------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, _wrap(-1.0, self.dtype))

    def __sub__(self, other):
        return add(self, -_wrap(other, self.dtype))

    def __rsub__(self, other):
        return add(_wrap(other, self.dtype), -self)

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise TypeError("tensor/tensor division not supported; use mul with a reciprocal")
        return mul(self, _wrap(1.0 / float(scalar), self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data, parents, backward_fn):
    """Build an interior graph node; tracks grad iff any parent does."""
    out = Tensor(data)
    if any(p.requires_grad or p._backward_fn is not None for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _unbroadcast(g, shape):
    """Sum gradient ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / linear ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def bwd(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))

    return _node(data, (a, b), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def bwd(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(data, (a, b), bwd)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    mask = x.data >= 0
    data = np.where(mask, x.data, slope * x.data)

    def bwd(g):
        return (np.where(mask, g, slope * g),)

    return _node(data, (x,), bwd)


def gelu(x: Tensor) -> Tensor:
    # exact erf form so the analytic derivative is exact too; the cdf is
    # recomputed in backward to keep the recorded graph lean
    xd = x.data
    data = (xd * 0.5 * (1.0 + erf(xd / math.sqrt(2.0)))).astype(xd.dtype)

    def bwd(g):
        cdf = 0.5 * (1.0 + erf(xd / math.sqrt(2.0)))
        pdf = np.exp(-0.5 * xd * xd) / math.sqrt(2.0 * math.pi)
        return (g * (cdf + xd * pdf).astype(xd.dtype),)

    return _node(data, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    data = 1.0 / (1.0 + np.exp(-x.data))

    def bwd(g):
        return (g * data * (1.0 - data),)

    return _node(data, (x,), bwd)


def sqrt(x: Tensor) -> Tensor:
    data = np.sqrt(x.data)

    def bwd(g):
        return (g * (0.5 / data),)

    return _node(data, (x,), bwd)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * data).sum(axis=-1, keepdims=True)
        return (data * (g - dot),)

    return _node(data, (x,), bwd)


def attention_core(q: Tensor, k: Tensor, v: Tensor,
                   bias: Tensor | None = None) -> Tensor:
    """Scaled dot-product attention, softmax(q k^T / sqrt(d) + bias) v, fused
    into one graph node.

    The composite expression retains every (..., T, T) intermediate until
    backward; this variant keeps only the attention weights, which matters
    for the windowed-attention stages where T x T blocks dominate memory.
    """
    dk = q.shape[-1]
    scale = 1.0 / math.sqrt(dk)
    kt = np.swapaxes(k.data, -1, -2)
    scores = (q.data @ kt) * scale
    if bias is not None:
        scores = scores + bias.data
    scores -= scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    attn = scores
    data = attn @ v.data

    def bwd(g):
        dv = _unbroadcast(np.swapaxes(attn, -1, -2) @ g, v.shape)
        dattn = g @ np.swapaxes(v.data, -1, -2)
        ds = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
        dq = _unbroadcast((ds @ k.data) * scale, q.shape)
        dkv = _unbroadcast((np.swapaxes(ds, -1, -2) @ q.data) * scale, k.shape)
        if bias is not None:
            return dq, dkv, dv, _unbroadcast(ds, bias.shape)
        return dq, dkv, dv

    parents = (q, k, v) if bias is None else (q, k, v, bias)
    return _node(data, parents, bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer norm over the last axis with affine parameters."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(
            f"layer_norm affine shape {gamma.shape}/{beta.shape} does not match "
            f"feature dim {x.shape[-1]}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gamma.data + beta.data

    def bwd(g):
        n = x.shape[-1]
        gx_hat = g * gamma.data
        dx = inv * (gx_hat
                    - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        return dx, dgamma, dbeta

    return _node(data, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = x.data.reshape(shape)

    def bwd(g):
        return (g.reshape(x.shape),)

    return _node(data, (x,), bwd)


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(a % x.data.ndim for a in axes)
    inv = np.argsort(axes)
    data = x.data.transpose(axes)

    def bwd(g):
        return (g.transpose(inv),)

    return _node(data, (x,), bwd)


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(data, tuple(tensors), bwd)


def crop2d(x: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    """Crop the trailing two axes of an (..., H, W) tensor."""
    data = x.data[..., top:top + height, left:left + width]

    def bwd(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[..., top:top + height, left:left + width] = g
        return (full,)

    return _node(data, (x,), bwd)


def index_select(table: Tensor, idx) -> Tensor:
    """Gather rows of ``table`` by an integer index array."""
    idx = np.asarray(idx)
    data = table.data[idx]

    def bwd(g):
        dt = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(dt, idx, g)
        return (dt,)

    return _node(data, (table,), bwd)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            axes = (axis,) if np.isscalar(axis) else tuple(axis)
            g = np.expand_dims(g, tuple(a % x.data.ndim for a in axes))
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=False),)

    return _node(data, (x,), bwd)


def tmean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------

def _cols(xp, kh, kw, stride):
    """im2col view: (N, C, Ho, Wo, kh, kw) of an already-padded input."""
    v = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return v[:, :, ::stride, ::stride]


def _dilate(x, stride):
    if stride == 1:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, (h - 1) * stride + 1, (w - 1) * stride + 1), dtype=x.dtype)
    out[:, :, ::stride, ::stride] = x
    return out


def _conv_forward_raw(x, w, stride, pad):
    n, cin, h, ww = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input channels {cin} != kernel channels {cin_w}")
    if h + 2 * pad < kh or ww + 2 * pad < kw:
        raise ShapeError(f"conv2d: input {h}x{ww} too small for {kh}x{kw} kernel with pad {pad}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = _cols(xp, kh, kw, stride)                     # N,C,Ho,Wo,kh,kw
    n_, c_, ho, wo, _, _ = cols.shape
    flat = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n_, ho, wo, c_ * kh * kw)
    y = flat @ w.reshape(cout, -1).T                     # N,Ho,Wo,O
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2)), flat


def _conv_input_grad(gy, w, stride, pad, xshape):
    """Gradient of a conv w.r.t. its input; also the transposed-conv forward."""
    n, cin, h, wd = xshape
    cout, _, kh, kw = w.shape
    gd = _dilate(gy, stride)
    gp = np.pad(gd, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    wflip = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    full, _ = _conv_forward_raw(gp, wflip, 1, 0)          # N,Cin,(Ho-1)s+kh-1+...
    canvas = np.zeros((n, cin, h + 2 * pad, wd + 2 * pad), dtype=gy.dtype)
    fh = min(full.shape[2], canvas.shape[2])
    fw = min(full.shape[3], canvas.shape[3])
    canvas[:, :, :fh, :fw] = full[:, :, :fh, :fw]
    return canvas[:, :, pad:pad + h, pad:pad + wd]


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """2-d convolution (cross-correlation), NCHW input, OIHW kernel."""
    y, _ = _conv_forward_raw(x.data, w.data, stride, pad)
    cout, _, kh, kw = w.shape
    if bias is not None:
        y = y + bias.data.reshape(1, cout, 1, 1)

    def bwd(g):
        # the im2col matrix is rebuilt here rather than kept alive on the
        # graph; it is the largest array a conv touches
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        cols = _cols(xp, kh, kw, stride)
        flat = cols.transpose(0, 2, 3, 1, 4, 5).reshape(-1, x.shape[1] * kh * kw)
        gflat = g.transpose(0, 2, 3, 1).reshape(-1, cout)       # (N*Ho*Wo, O)
        dw = (gflat.T @ flat).reshape(w.shape)
        dx = _conv_input_grad(g, w.data, stride, pad, x.shape)
        if bias is not None:
            return dx, dw, g.sum(axis=(0, 2, 3))
        return dx, dw

    parents = (x, w) if bias is None else (x, w, bias)
    return _node(y, parents, bwd)


def conv2d_transpose(x: Tensor, w: Tensor, bias: Tensor | None = None,
                     stride: int = 2) -> Tensor:
    """Transposed convolution; kernel layout (Cin, Cout, kh, kw), no padding."""
    cin, cout, kh, kw = w.shape
    if x.shape[1] != cin:
        raise ShapeError(f"conv2d_transpose: input channels {x.shape[1]} != kernel {cin}")
    # forward of a transposed conv == input-gradient of the matching conv,
    # whose kernel layout (O=Cin, I=Cout, kh, kw) is exactly our w layout
    n, _, h, wd = x.shape
    out_h = (h - 1) * stride + kh
    out_w = (wd - 1) * stride + kw
    y = _conv_input_grad(x.data, w.data, stride, 0, (n, cout, out_h, out_w))
    if bias is not None:
        y = y + bias.data.reshape(1, cout, 1, 1)

    def bwd(g):
        # dx: correlate g with the kernel at the forward stride
        gp = np.pad(g, ((0, 0), (0, 0), (0, 0), (0, 0)))
        cols = _cols(gp, kh, kw, stride)                 # N,Cout,H,W,kh,kw
        dx = np.einsum("nohwkl,cokl->nchw", cols[:, :, :h, :wd], w.data, optimize=True)
        dw = np.einsum("nohwkl,nchw->cokl", cols[:, :, :h, :wd], x.data, optimize=True)
        if bias is not None:
            return dx, dw, g.sum(axis=(0, 2, 3))
        return dx, dw

    parents = (x, w) if bias is None else (x, w, bias)
    return _node(y, parents, bwd)


def depthwise_conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None,
                     pad: int = 1) -> Tensor:
    """Per-channel 3x3 (or kxk) convolution; kernel layout (C, kh, kw)."""
    c, kh, kw = w.shape
    if x.shape[1] != c:
        raise ShapeError(f"depthwise_conv2d: channels {x.shape[1]} != kernel {c}")
    h, ww = x.shape[2], x.shape[3]
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    # accumulate shifted copies per tap; keeps peak memory at one feature map
    y = np.zeros(x.shape[:2] + (h + 2 * pad - kh + 1, ww + 2 * pad - kw + 1),
                 dtype=x.dtype)
    oh, ow = y.shape[2], y.shape[3]
    for i in range(kh):
        for j in range(kw):
            y += w.data[None, :, i, j, None, None] * xp[:, :, i:i + oh, j:j + ow]
    if bias is not None:
        y = y + bias.data.reshape(1, c, 1, 1)

    def bwd(g):
        xpad = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        dw = np.empty_like(w.data)
        for i in range(kh):
            for j in range(kw):
                dw[:, i, j] = (xpad[:, :, i:i + oh, j:j + ow] * g).sum(axis=(0, 2, 3))
        gp = np.pad(g, ((0, 0), (0, 0), (kh - 1 - pad, kh - 1 - pad),
                        (kw - 1 - pad, kw - 1 - pad)))
        dx = np.zeros(x.shape, dtype=g.dtype)
        wf = w.data[:, ::-1, ::-1]
        for i in range(kh):
            for j in range(kw):
                dx += wf[None, :, i, j, None, None] * gp[:, :, i:i + h, j:j + ww]
        if bias is not None:
            return dx, dw, g.sum(axis=(0, 2, 3))
        return dx, dw

    parents = (x, w) if bias is None else (x, w, bias)
    return _node(y, parents, bwd)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise StaleGraphError("backward() already ran on this graph; re-run forward first")
    if not np.isfinite(loss.data).all():
        raise NonFiniteLossError("loss is NaN or Inf")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
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
            if id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        node._consumed = True
        if g is None:
            continue
        if node.requires_grad and node._backward_fn is None:
            node.grad = g if node.grad is None else node.grad + g
        if node._backward_fn is None:
            continue
        parent_grads = node._backward_fn(g)
        parents = node._parents
        # release the closure (and the forward arrays it captured) as soon as
        # this node has propagated; peak memory tracks the live frontier only
        node._backward_fn = None
        node._parents = ()
        for p, pg in zip(parents, parent_grads):
            if pg is None:
                continue
            if not (p.requires_grad or p._backward_fn is not None):
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# oracles and optimizer
# ---------------------------------------------------------------------------

def finite_diff_grad(f, params: dict, h: float = 1e-3) -> dict:
    """Central-difference gradients of a scalar function of named parameters.

    ``f`` takes the params dict and returns a float; params map names to
    Tensors whose data is perturbed in place coordinate by coordinate.
    """
    if h <= 0:
        raise ValueError("finite_diff_grad: h must be positive")
    grads = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        g = np.zeros_like(flat, dtype=np.float64)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(params)
            flat[i] = orig - h
            fm = f(params)
            flat[i] = orig
            g[i] = (fp - fm) / (2.0 * h)
        grads[name] = g.reshape(p.shape)
    return grads


def adam_init(params: dict) -> dict:
    return {
        "t": 0,
        "m": {k: np.zeros_like(p.data) for k, p in params.items()},
        "v": {k: np.zeros_like(p.data) for k, p in params.items()},
    }


def adam_step(params: dict, grads: dict, state: dict, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One Adam update over a dict of named parameter Tensors, in place."""
    state["t"] += 1
    t = state["t"]
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} != param {p.data.shape} for '{name}'")
        m = state["m"][name]
        v = state["v"][name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.data.dtype)
    return params, state
