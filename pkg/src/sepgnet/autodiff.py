"""Minimal reverse-mode differentiation over dense numpy tensors.

Covers exactly the operations the networks need: elementwise arithmetic,
matmul / linear, 2-D convolution (direct and masked), transpose convolution,
max pooling, batch normalization, channel concatenation, global average
pooling, the straight-through sign used for mask gates, and a weighted
cross-entropy with ignorable positions.

Convolution is cross-correlation with zero padding, computed by flattening
image patches into columns and multiplying by the reshaped kernel, so the
heavy lifting lands in BLAS. All computation is deterministic for a fixed
thread count. Tensors carry whatever float dtype their data has; gradient
checks run the whole graph in float64.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "no_grad",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "kron",
    "reshape",
    "transpose",
    "slice_",
    "concat",
    "relu",
    "tensor_sum",
    "tensor_mean",
    "conv2d",
    "masked_conv2d",
    "transpose_conv2d",
    "max_pool2d",
    "batch_norm",
    "global_average_pool",
    "linear",
    "sign_ste",
    "weighted_cross_entropy",
]

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (cheap inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense array with an optional gradient and a backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def _accum(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar tensor")
            grad = np.ones_like(self.data)
        self._accum(np.asarray(grad, dtype=self.data.dtype))

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def _wrap(data, parents: Sequence[Tensor]) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _data(x):
    return x.data if isinstance(x, Tensor) else x


def add(a, b) -> Tensor:
    at, bt = isinstance(a, Tensor), isinstance(b, Tensor)
    out = _wrap(_data(a) + _data(b), [x for x in (a, b) if isinstance(x, Tensor)])
    if out.requires_grad:

        def _bw():
            if at and a.requires_grad:
                a._accum(_unbroadcast(out.grad, a.data.shape))
            if bt and b.requires_grad:
                b._accum(_unbroadcast(out.grad, b.data.shape))

        out._backward = _bw
    return out


def sub(a, b) -> Tensor:
    at, bt = isinstance(a, Tensor), isinstance(b, Tensor)
    out = _wrap(_data(a) - _data(b), [x for x in (a, b) if isinstance(x, Tensor)])
    if out.requires_grad:

        def _bw():
            if at and a.requires_grad:
                a._accum(_unbroadcast(out.grad, a.data.shape))
            if bt and b.requires_grad:
                b._accum(_unbroadcast(-out.grad, b.data.shape))

        out._backward = _bw
    return out


def mul(a, b) -> Tensor:
    at, bt = isinstance(a, Tensor), isinstance(b, Tensor)
    out = _wrap(_data(a) * _data(b), [x for x in (a, b) if isinstance(x, Tensor)])
    if out.requires_grad:

        def _bw():
            if at and a.requires_grad:
                a._accum(_unbroadcast(out.grad * _data(b), a.data.shape))
            if bt and b.requires_grad:
                b._accum(_unbroadcast(out.grad * _data(a), b.data.shape))

        out._backward = _bw
    return out


def neg(a) -> Tensor:
    out = _wrap(-a.data, [a])
    if out.requires_grad:

        def _bw():
            a._accum(-out.grad)

        out._backward = _bw
    return out


def matmul(a, b) -> Tensor:
    at, bt = isinstance(a, Tensor), isinstance(b, Tensor)
    ad, bd = _data(a), _data(b)
    if ad.ndim != 2 or bd.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if ad.shape[1] != bd.shape[0]:
        raise ValueError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}")
    out = _wrap(ad @ bd, [x for x in (a, b) if isinstance(x, Tensor)])
    if out.requires_grad:

        def _bw():
            if at and a.requires_grad:
                a._accum(out.grad @ bd.T)
            if bt and b.requires_grad:
                b._accum(ad.T @ out.grad)

        out._backward = _bw
    return out


def kron(a, b) -> Tensor:
    """Kronecker product of two 2-D tensors."""
    at, bt = isinstance(a, Tensor), isinstance(b, Tensor)
    ad, bd = _data(a), _data(b)
    if ad.ndim != 2 or bd.ndim != 2:
        raise ValueError("kron expects 2-D operands")
    m, n = ad.shape
    p, q = bd.shape
    out = _wrap(np.kron(ad, bd), [x for x in (a, b) if isinstance(x, Tensor)])
    if out.requires_grad:

        def _bw():
            gv = out.grad.reshape(m, p, n, q)
            if at and a.requires_grad:
                a._accum(np.einsum("mpnq,pq->mn", gv, bd))
            if bt and b.requires_grad:
                b._accum(np.einsum("mpnq,mn->pq", gv, ad))

        out._backward = _bw
    return out


def reshape(a, shape) -> Tensor:
    old = a.data.shape
    out = _wrap(a.data.reshape(shape), [a])
    if out.requires_grad:

        def _bw():
            a._accum(out.grad.reshape(old))

        out._backward = _bw
    return out


def transpose(a, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = _wrap(a.data.transpose(axes), [a])
    if out.requires_grad:

        def _bw():
            a._accum(out.grad.transpose(inverse))

        out._backward = _bw
    return out


def slice_(a, key) -> Tensor:
    """Basic slicing; backward scatters the gradient into a zero buffer."""
    out = _wrap(a.data[key].copy(), [a])
    if out.requires_grad:

        def _bw():
            buf = np.zeros_like(a.data)
            buf[key] += out.grad
            a._accum(buf)

        out._backward = _bw
    return out


def concat(tensors: Iterable[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    out = _wrap(np.concatenate([t.data for t in tensors], axis=axis), tensors)
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)

        def _bw():
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    idx = [slice(None)] * out.grad.ndim
                    idx[axis] = slice(lo, hi)
                    t._accum(out.grad[tuple(idx)])

        out._backward = _bw
    return out


def relu(a) -> Tensor:
    out = _wrap(np.maximum(a.data, 0), [a])
    if out.requires_grad:
        keep = a.data > 0

        def _bw():
            a._accum(out.grad * keep)

        out._backward = _bw
    return out


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    out = _wrap(a.data.sum(axis=axis, keepdims=keepdims), [a])
    if out.requires_grad:

        def _bw():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.data.shape).copy())

        out._backward = _bw
    return out


def tensor_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    out = _wrap(a.data.mean(axis=axis, keepdims=keepdims), [a])
    if out.requires_grad:

        def _bw():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.data.shape) / count)

        out._backward = _bw
    return out


def sign_ste(a) -> Tensor:
    """Sign gate with a straight-through backward.

    Forward maps nonnegative entries to 1 and negative ones to 0. Backward
    passes the incoming gradient through unchanged where the input magnitude
    is at most 1 and blocks it elsewhere, so gates far from the threshold
    stop collecting gradient.
    """
    out = _wrap((a.data >= 0).astype(a.data.dtype), [a])
    if out.requires_grad:
        window = np.abs(a.data) <= 1.0

        def _bw():
            a._accum(out.grad * window)

        out._backward = _bw
    return out


# -- convolution ---------------------------------------------------------


def _im2col(xp: np.ndarray, k: int, stride: int):
    n, c, h, w = xp.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    s0, s1, s2, s3 = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, k, k, ho, wo),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )
    cols = windows.reshape(n, c * k * k, ho * wo)
    return np.ascontiguousarray(cols), ho, wo


def _col2im(dcols: np.ndarray, xp_shape, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c, h, w = xp_shape
    dxp = np.zeros(xp_shape, dtype=dcols.dtype)
    dwin = dcols.reshape(n, c, k, k, ho, wo)
    for ki in range(k):
        for kj in range(k):
            dxp[:, :, ki : ki + ho * stride : stride, kj : kj + wo * stride : stride] += dwin[
                :, :, ki, kj
            ]
    return dxp


def _pad2d(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d(x, weight, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    x is (N, C_in, H, W); weight is (C_out, C_in, k, k) with odd k. Output
    spatial size is floor((H + 2p - k) / s) + 1 per axis.
    """
    xd, wd = _data(x), _data(weight)
    if xd.ndim != 4 or wd.ndim != 4:
        raise ValueError("conv2d expects NCHW input and OIKK weight")
    co, ci, kh, kw = wd.shape
    if kh != kw:
        raise ValueError("only square kernels are supported")
    if kh % 2 != 1:
        raise ValueError("kernel size must be odd")
    if xd.shape[1] != ci:
        raise ValueError(f"channel mismatch: input has {xd.shape[1]}, kernel expects {ci}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    n, _, h, w = xd.shape
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ValueError("kernel does not fit inside the padded input")

    xp = _pad2d(xd, padding)
    cols, ho, wo = _im2col(xp, kh, stride)
    w2 = wd.reshape(co, ci * kh * kw)
    out_data = np.matmul(w2, cols).reshape(n, co, ho, wo)
    parents = [t for t in (x, weight) if isinstance(t, Tensor)]
    out = _wrap(out_data, parents)
    if out.requires_grad:
        xt = isinstance(x, Tensor) and x.requires_grad
        wt = isinstance(weight, Tensor) and weight.requires_grad

        def _bw():
            g = out.grad.reshape(n, co, ho * wo)
            if wt:
                dw = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0)
                weight._accum(dw.reshape(wd.shape))
            if xt:
                dcols = np.matmul(w2.T, g)
                dxp = _col2im(dcols, xp.shape, kh, stride, ho, wo)
                if padding:
                    dxp = dxp[:, :, padding:-padding, padding:-padding]
                x._accum(dxp)

        out._backward = _bw
    return out


def masked_conv2d(x, weight, mask, stride: int = 1, padding: int = 0) -> Tensor:
    """Convolution with a constant binary channel-connectivity mask.

    The effective kernel is weight * mask per (out, in) channel pair, so the
    weight gradient is masked identically and connections the mask closes get
    exactly zero gradient. The mask itself is a constant here; layers that
    learn the mask build it from gates with differentiable tensor ops.
    """
    from .relmatrix import RelationshipMatrix

    md = mask.entries if isinstance(mask, RelationshipMatrix) else np.asarray(mask)
    wd = _data(weight)
    if md.shape != wd.shape[:2]:
        raise ValueError(f"mask shape {md.shape} does not match kernel channels {wd.shape[:2]}")
    mconst = md.astype(wd.dtype)[:, :, None, None]
    return conv2d(x, mul(weight, mconst), stride=stride, padding=padding)


def transpose_conv2d(x, weight, stride: int = 2, padding: int = 0) -> Tensor:
    """Transpose convolution (fractionally strided); weight is (C_in, C_out, k, k).

    Output spatial size is (H - 1) * stride - 2 * padding + k.
    """
    xd, wd = _data(x), _data(weight)
    if xd.ndim != 4 or wd.ndim != 4:
        raise ValueError("transpose_conv2d expects NCHW input and IOKK weight")
    ci, co, kh, kw = wd.shape
    if kh != kw:
        raise ValueError("only square kernels are supported")
    if xd.shape[1] != ci:
        raise ValueError(f"channel mismatch: input has {xd.shape[1]}, kernel expects {ci}")
    n, _, h, w = xd.shape
    hf = (h - 1) * stride + kh
    wf = (w - 1) * stride + kw
    if hf - 2 * padding < 1 or wf - 2 * padding < 1:
        raise ValueError("padding swallows the whole output")

    w2 = wd.reshape(ci, co * kh * kw)
    cols = np.matmul(w2.T, xd.reshape(n, ci, h * w))
    full = _col2im(cols, (n, co, hf, wf), kh, stride, h, w)
    out_data = full[:, :, padding : hf - padding, padding : wf - padding]
    parents = [t for t in (x, weight) if isinstance(t, Tensor)]
    out = _wrap(out_data, parents)
    if out.requires_grad:
        xt = isinstance(x, Tensor) and x.requires_grad
        wt = isinstance(weight, Tensor) and weight.requires_grad

        def _bw():
            gfull = np.zeros((n, co, hf, wf), dtype=out.grad.dtype)
            gfull[:, :, padding : hf - padding, padding : wf - padding] = out.grad
            gcols, _, _ = _im2col(gfull, kh, stride)
            if xt:
                dx = np.matmul(w2, gcols).reshape(xd.shape)
                x._accum(dx)
            if wt:
                dwt = np.matmul(gcols, xd.reshape(n, ci, h * w).transpose(0, 2, 1)).sum(axis=0)
                weight._accum(dwt.T.reshape(wd.shape))

        out._backward = _bw
    return out


def max_pool2d(x, window: int = 2) -> Tensor:
    """Non-overlapping max pooling; spatial dims must divide the window."""
    xd = x.data
    n, c, h, w = xd.shape
    if h % window or w % window:
        raise ValueError(f"spatial size ({h}, {w}) not divisible by window {window}")
    ho, wo = h // window, w // window
    tiles = (
        xd.reshape(n, c, ho, window, wo, window)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, ho, wo, window * window)
    )
    idx = tiles.argmax(axis=-1)
    out_data = np.take_along_axis(tiles, idx[..., None], axis=-1)[..., 0]
    out = _wrap(out_data, [x])
    if out.requires_grad:

        def _bw():
            dtiles = np.zeros_like(tiles)
            np.put_along_axis(dtiles, idx[..., None], out.grad[..., None], axis=-1)
            dx = (
                dtiles.reshape(n, c, ho, wo, window, window)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(n, c, h, w)
            )
            x._accum(dx)

        out._backward = _bw
    return out


def global_average_pool(x) -> Tensor:
    """(N, C, H, W) -> (N, C) spatial mean."""
    xd = x.data
    n, c, h, w = xd.shape
    out = _wrap(xd.mean(axis=(2, 3)), [x])
    if out.requires_grad:

        def _bw():
            x._accum(np.broadcast_to(out.grad[:, :, None, None], xd.shape) / (h * w))

        out._backward = _bw
    return out


def linear(x, weight, bias=None) -> Tensor:
    """x (N, C_in) times weight (C_out, C_in), plus optional bias (C_out,)."""
    xd, wd = _data(x), _data(weight)
    if xd.shape[1] != wd.shape[1]:
        raise ValueError(f"linear shape mismatch: {xd.shape} vs {wd.shape}")
    out_data = xd @ wd.T
    if bias is not None:
        out_data = out_data + _data(bias)
    parents = [t for t in (x, weight, bias) if isinstance(t, Tensor)]
    out = _wrap(out_data, parents)
    if out.requires_grad:

        def _bw():
            if isinstance(x, Tensor) and x.requires_grad:
                x._accum(out.grad @ wd)
            if isinstance(weight, Tensor) and weight.requires_grad:
                weight._accum(out.grad.T @ xd)
            if bias is not None and isinstance(bias, Tensor) and bias.requires_grad:
                bias._accum(out.grad.sum(axis=0))

        out._backward = _bw
    return out


def batch_norm(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization of an NCHW tensor.

    In training mode the batch statistics normalize and the running buffers
    are updated in place (running variance uses the unbiased estimate). In
    eval mode the running buffers normalize.
    """
    xd = x.data
    if xd.ndim != 4:
        raise ValueError("batch_norm expects an NCHW tensor")
    n, c, h, w = xd.shape
    count = n * h * w
    if training:
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        unbiased = var * count / (count - 1) if count > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mean = running_mean.astype(xd.dtype)
        var = running_var.astype(xd.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out_data = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    out = _wrap(out_data, [x, gamma, beta])
    if out.requires_grad:

        def _bw():
            g = out.grad
            if gamma.requires_grad:
                gamma._accum((g * xhat).sum(axis=(0, 2, 3)))
            if beta.requires_grad:
                beta._accum(g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                gx = g * gamma.data[None, :, None, None]
                if training:
                    sum_gx = gx.sum(axis=(0, 2, 3))
                    sum_gx_xhat = (gx * xhat).sum(axis=(0, 2, 3))
                    dx = (
                        gx
                        - (sum_gx / count)[None, :, None, None]
                        - xhat * (sum_gx_xhat / count)[None, :, None, None]
                    ) * inv_std[None, :, None, None]
                else:
                    dx = gx * inv_std[None, :, None, None]
                x._accum(dx)

        out._backward = _bw
    return out


def weighted_cross_entropy(logits, targets, weights, ignore_mask=None) -> Tensor:
    """Mean class-weighted cross-entropy over non-ignored positions.

    logits is (N, C) or (N, C, H, W); targets holds integer labels of shape
    (N,) or (N, H, W). Positions with a negative label, or marked True in
    ignore_mask, contribute neither loss nor gradient. With every position
    ignored the loss is 0 with zero gradient.
    """
    ld = logits.data
    targets = np.asarray(targets)
    if ld.ndim == 4:
        n, c, h, w = ld.shape
        flat_logits = ld.transpose(0, 2, 3, 1).reshape(-1, c)
        flat_targets = targets.reshape(-1)
        flat_ignore = None if ignore_mask is None else np.asarray(ignore_mask).reshape(-1)
    elif ld.ndim == 2:
        n, c = ld.shape
        flat_logits = ld
        flat_targets = targets.reshape(-1)
        flat_ignore = None if ignore_mask is None else np.asarray(ignore_mask).reshape(-1)
    else:
        raise ValueError("logits must be (N, C) or (N, C, H, W)")
    if flat_targets.shape[0] != flat_logits.shape[0]:
        raise ValueError("targets do not match logits positions")
    weights = np.asarray(weights, dtype=ld.dtype)
    if weights.shape != (c,):
        raise ValueError(f"weights must have shape ({c},)")

    keep = flat_targets >= 0
    if flat_ignore is not None:
        keep &= ~flat_ignore.astype(bool)
    kept = np.flatnonzero(keep)
    if kept.size and flat_targets[kept].max() >= c:
        raise ValueError("target label out of range")

    if kept.size == 0:
        loss_val = np.zeros((), dtype=ld.dtype)
        out = _wrap(loss_val, [logits])
        if out.requires_grad:

            def _bw_empty():
                logits._accum(np.zeros_like(ld))

            out._backward = _bw_empty
        return out

    z = flat_logits[kept]
    y = flat_targets[kept]
    m = z.max(axis=1, keepdims=True)
    shifted = z - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True)) + m
    wy = weights[y]
    losses = wy * (lse[:, 0] - z[np.arange(kept.size), y])
    loss_val = np.asarray(losses.mean(), dtype=ld.dtype)
    out = _wrap(loss_val, [logits])
    if out.requires_grad:

        def _bw():
            softmax = np.exp(z - lse)
            softmax[np.arange(kept.size), y] -= 1.0
            softmax *= wy[:, None] / kept.size
            flat = np.zeros_like(flat_logits)
            flat[kept] = softmax * out.grad
            if ld.ndim == 4:
                logits._accum(flat.reshape(n, h, w, c).transpose(0, 3, 1, 2))
            else:
                logits._accum(flat)

        out._backward = _bw
    return out
