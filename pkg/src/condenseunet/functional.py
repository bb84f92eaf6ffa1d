"""Differentiable image primitives: (grouped) convolution, transposed
convolution, max pooling, batch normalization and channel softmax.

Convolution is cross-correlation with zero padding.  Kernels use an
im2col gather that is rebuilt in the backward pass instead of being kept
alive between passes; at desk scale memory is the scarcer resource.
"""
from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _check_conv(x: np.ndarray, w: np.ndarray, stride: int, padding: int, groups: int) -> None:
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    if stride < 1:
        raise ShapeError(f"stride must be positive, got {stride}")
    if padding < 0:
        raise ShapeError(f"padding must be non-negative, got {padding}")
    ci, co = x.shape[1], w.shape[0]
    if groups < 1 or ci % groups or co % groups:
        raise ShapeError(f"groups={groups} must divide input channels {ci} and output channels {co}")
    if w.shape[1] * groups != ci:
        raise ShapeError(
            f"weight expects {w.shape[1]} channels per group x {groups} groups = "
            f"{w.shape[1] * groups}, input has {ci}"
        )
    kh, kw = w.shape[2:]
    if x.shape[2] + 2 * padding < kh or x.shape[3] + 2 * padding < kw:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {x.shape[2:]} (padding {padding})")


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int, groups: int) -> np.ndarray:
    """(N, Ci, H, W) -> (N, groups, Ci/groups*kh*kw, Ho*Wo)."""
    n, ci = x.shape[:2]
    xp = _pad(x, padding)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2:4]
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3))
    return cols.reshape(n, groups, (ci // groups) * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, in_shape: tuple, kh: int, kw: int, stride: int, padding: int,
            ho: int, wo: int) -> np.ndarray:
    """Adjoint of ``_im2col``: scatter-add columns back to an (N, Ci, H, W) image."""
    n, ci, h, w = in_shape
    cols = cols.reshape(n, ci, kh, kw, ho, wo)
    out = np.zeros((n, ci, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    if padding:
        out = out[:, :, padding:padding + h, padding:padding + w]
    return out


def _conv_forward(x, w, stride, padding, groups):
    n, ci, h, wd = x.shape
    co, cg, kh, kw = w.shape
    ho, wo = conv_output_size(h, kh, stride, padding), conv_output_size(wd, kw, stride, padding)
    wg = w.reshape(groups, co // groups, cg * kh * kw)
    if kh == kw == 1 and stride == 1 and padding == 0:
        cols = x.reshape(n, groups, cg, h * wd)
    else:
        cols = _im2col(x, kh, kw, stride, padding, groups)
    return np.matmul(wg, cols).reshape(n, co, ho, wo)


def _conv_input_grad(g, w, in_hw, stride, padding, groups):
    """Gradient of conv2d w.r.t. its input; also the transposed-convolution forward."""
    n, co, ho, wo = g.shape
    _, cg, kh, kw = w.shape
    wg = w.reshape(groups, co // groups, cg * kh * kw)
    gg = g.reshape(n, groups, co // groups, ho * wo)
    dcols = np.matmul(wg.transpose(0, 2, 1), gg)
    if kh == kw == 1 and stride == 1 and padding == 0:
        return dcols.reshape(n, groups * cg, ho, wo)
    return _col2im(dcols, (n, groups * cg) + tuple(in_hw), kh, kw, stride, padding, ho, wo)


def _conv_weight_grad(x, g, w_shape, stride, padding, groups):
    n, co, ho, wo = g.shape
    _, cg, kh, kw = w_shape
    if kh == kw == 1 and stride == 1 and padding == 0:
        cols = x.reshape(n, groups, cg, ho * wo)
    else:
        cols = _im2col(x, kh, kw, stride, padding, groups)
    gg = g.reshape(n, groups, co // groups, ho * wo)
    gw = np.matmul(gg, cols.transpose(0, 1, 3, 2)).sum(axis=0)
    return gw.reshape(w_shape)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    """Grouped 2-D cross-correlation.

    ``weight`` has shape (Co, Ci/groups, kh, kw); output channel block ``g``
    sees only input channel block ``g``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    _check_conv(x.data, weight.data, stride, padding, groups)
    out = _conv_forward(x.data, weight.data, stride, padding, groups)
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"bias shape {bias.shape} does not match {weight.shape[0]} output channels")
        out = out + bias.data.reshape(1, -1, 1, 1)
    in_hw = x.shape[2:]

    def backward(g):
        gx = _conv_input_grad(g, weight.data, in_hw, stride, padding, groups) if x.requires_grad else None
        gw = _conv_weight_grad(x.data, g, weight.shape, stride, padding, groups) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, backward, "conv2d")


def conv_transpose_output_size(size: int, kernel: int, stride: int, padding: int = 0,
                               output_padding: int = 0) -> int:
    return (size - 1) * stride + kernel - 2 * padding + output_padding


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
                     padding: int = 0, output_padding: int = 0) -> Tensor:
    """Transposed convolution, the exact adjoint of ``conv2d`` with the same weight.

    ``weight`` has shape (Ci, Co, kh, kw).  The output spatial size is
    ``(in - 1) * stride + k - 2 * padding + output_padding``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if stride < 1:
        raise ShapeError(f"stride must be positive, got {stride}")
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    if weight.shape[0] != x.shape[1]:
        raise ShapeError(f"weight expects {weight.shape[0]} input channels, input has {x.shape[1]}")
    if not 0 <= output_padding < stride:
        raise ShapeError(f"output_padding={output_padding} must be in [0, stride)")
    kh, kw = weight.shape[2:]
    out_hw = (conv_transpose_output_size(x.shape[2], kh, stride, padding, output_padding),
              conv_transpose_output_size(x.shape[3], kw, stride, padding, output_padding))
    if min(out_hw) < 1:
        raise ShapeError(f"transposed convolution output would be empty: {out_hw}")
    # conv2d maps (Co-channel, out_hw) -> (Ci-channel, in_hw) with this weight; we apply its adjoint.
    out = _conv_input_grad(x.data, weight.data, out_hw, stride, padding, 1)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)

    def backward(g):
        gx = _conv_forward(g, weight.data, stride, padding, 1) if x.requires_grad else None
        gw = _conv_weight_grad(g, x.data, weight.shape, stride, padding, 1) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, backward, "conv_transpose2d")


def maxpool2d(x: Tensor, kernel: int = 2, stride: Optional[int] = None) -> Tensor:
    """Max pooling without padding; ties go to the first element of the window."""
    stride = kernel if stride is None else stride
    if stride < 1 or kernel < 1:
        raise ShapeError("maxpool2d kernel and stride must be positive")
    n, c, h, w = x.shape
    if h < kernel or w < kernel:
        raise ShapeError(f"pooling window {kernel} larger than input {h}x{w}")
    win = sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2:4]
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        for t in range(kernel * kernel):
            i, j = divmod(t, kernel)
            gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g * (arg == t)
        return (gx,)

    return Tensor._make(out, (x,), backward, "maxpool2d")


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: Optional[np.ndarray],
                running_var: Optional[np.ndarray], training: bool, momentum: float = 0.9,
                eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In training mode the batch statistics normalize the input and the running
    buffers are updated in place as ``r = momentum * r + (1 - momentum) * batch``
    (unbiased variance).  Eval mode requires populated running buffers.
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm affine parameters must have shape ({c},)")
    shape = (1, c, 1, 1)
    if training:
        count = x.shape[0] * x.shape[2] * x.shape[3]
        if count <= 1:
            raise ShapeError("batchnorm in training mode needs more than one value per channel")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if running_mean is not None:
            running_mean *= momentum
            running_mean += (1.0 - momentum) * mu
        if running_var is not None:
            running_var *= momentum
            running_var += (1.0 - momentum) * var * (count / (count - 1))
    else:
        if running_mean is None or running_var is None:
            raise ValueError("eval-mode batchnorm needs populated running statistics")
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(shape).astype(x.dtype)) * inv_std.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(shape)
            if training:
                m = gxhat.mean(axis=(0, 2, 3), keepdims=True)
                mx = (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
                gx = (gxhat - m - xhat * mx) * inv_std.reshape(shape)
            else:
                gx = gxhat * inv_std.reshape(shape)
        return gx, ggamma, gbeta

    return Tensor._make(out, (x, gamma, beta), backward, "batchnorm2d")


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over axis 1, so the class scores at every pixel sum to one."""
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return Tensor._make(out, (x,), backward, "softmax")


def add_same(a: Tensor, b: Tensor) -> Tensor:
    """Element-wise addition that refuses to broadcast."""
    if a.shape != b.shape:
        raise ShapeError(f"add needs identical shapes, got {a.shape} and {b.shape}")
    return a + b
