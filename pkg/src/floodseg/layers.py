"""Forward and backward passes for the layers used by the segmentation nets.

Public functions take a single raster ``[C, H, W]`` or a batch
``[N, C, H, W]`` and return the same rank they were given.

Internally the kernels (``*_cm`` functions) work on channel-major batches
``[C, N, H, W]``: im2col then reads and writes contiguous rows and the matmul
output needs no transpose. ``model`` keeps activations in that layout.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ShapeError


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: int = 1
    dilation: int = 1
    padding: int = 0

    def __post_init__(self):
        kh, kw = self.kernel
        if min(self.in_channels, self.out_channels, kh, kw, self.stride, self.dilation) < 1:
            raise ShapeError(f"invalid conv spec {self}")
        if self.padding < 0:
            raise ShapeError(f"negative padding in {self}")

    @property
    def effective_kernel(self) -> tuple[int, int]:
        kh, kw = self.kernel
        return self.dilation * (kh - 1) + 1, self.dilation * (kw - 1) + 1

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        eh, ew = self.effective_kernel
        hp, wp = h + 2 * self.padding, w + 2 * self.padding
        if eh > hp or ew > wp:
            raise ShapeError(f"receptive field {eh}x{ew} exceeds padded input {hp}x{wp}")
        return (hp - eh) // self.stride + 1, (wp - ew) // self.stride + 1


class LayerGrads(NamedTuple):
    d_weights: np.ndarray | None
    d_bias: np.ndarray | None
    d_input: np.ndarray


def to_cm(x: np.ndarray) -> np.ndarray:
    """``[C,H,W]`` or ``[N,C,H,W]`` to channel-major ``[C,N,H,W]``."""
    if x.ndim == 3:
        return x[:, None]
    if x.ndim != 4:
        raise ShapeError(f"expected a [C,H,W] or [N,C,H,W] tensor, got shape {x.shape}")
    return np.ascontiguousarray(x.transpose(1, 0, 2, 3))


def from_cm(x: np.ndarray, single: bool) -> np.ndarray:
    return np.ascontiguousarray(x[:, 0]) if single else np.ascontiguousarray(x.transpose(1, 0, 2, 3))


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x


def _windows(xp, kh, kw, stride, dilation, ho, wo):
    """Strided view ``[C, kh, kw, N, ho, wo]`` of a padded channel-major batch."""
    c, n = xp.shape[:2]
    sc, sn, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(c, kh, kw, n, ho, wo),
        strides=(sc, sh * dilation, sw * dilation, sn, sh * stride, sw * stride),
        writeable=False,
    )


def _scatter_windows(cols, hp, wp, stride, dilation):
    """Adjoint of ``_windows``: sum ``cols [C, kh, kw, N, ho, wo]`` into ``[C, N, hp, wp]``."""
    c, kh, kw, n, ho, wo = cols.shape
    out = np.zeros((c, n, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        r0 = i * dilation
        for j in range(kw):
            c0 = j * dilation
            out[:, :, r0:r0 + stride * (ho - 1) + 1:stride, c0:c0 + stride * (wo - 1) + 1:stride] += cols[:, i, j]
    return out


def _check_conv(c_in: int, weights: np.ndarray, spec: ConvSpec):
    if weights.shape != (spec.out_channels, spec.in_channels, *spec.kernel):
        raise ShapeError(
            f"weights shape {weights.shape} does not match spec "
            f"{(spec.out_channels, spec.in_channels, *spec.kernel)}"
        )
    if c_in != spec.in_channels:
        raise ShapeError(f"input has {c_in} channels, spec expects {spec.in_channels}")


# -- channel-major kernels -------------------------------------------------------

def im2col_cm(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Column matrix ``[Cin*kh*kw, N*ho*wo]``."""
    ho, wo = spec.output_size(x.shape[2], x.shape[3])
    win = _windows(_pad(x, spec.padding), *spec.kernel, spec.stride, spec.dilation, ho, wo)
    return win.reshape(spec.in_channels * spec.kernel[0] * spec.kernel[1], -1)


def conv2d_cm(x, weights, bias, spec: ConvSpec) -> tuple[np.ndarray, np.ndarray]:
    """Returns the output ``[Cout, N, ho, wo]`` and the im2col matrix for reuse."""
    _check_conv(x.shape[0], weights, spec)
    ho, wo = spec.output_size(x.shape[2], x.shape[3])
    cols = im2col_cm(x, spec)
    out = weights.reshape(spec.out_channels, -1) @ cols
    out += bias[:, None]
    return out.reshape(spec.out_channels, x.shape[1], ho, wo), cols


def conv2d_backward_cm(cols, input_shape, weights, spec: ConvSpec, up) -> LayerGrads:
    c, n, h, w = input_shape
    ho, wo = up.shape[2:]
    up2 = up.reshape(spec.out_channels, -1)
    d_w = (up2 @ cols.T).reshape(weights.shape)
    d_b = up2.sum(axis=1)
    d_cols = (weights.reshape(spec.out_channels, -1).T @ up2).reshape(c, *spec.kernel, n, ho, wo)
    p = spec.padding
    d_xp = _scatter_windows(d_cols, h + 2 * p, w + 2 * p, spec.stride, spec.dilation)
    d_x = d_xp[:, :, p:p + h, p:p + w] if p else d_xp
    return LayerGrads(d_w, d_b, d_x)


def conv_transpose2d_cm(x, weights, bias, stride: int, output_padding: int = 0) -> np.ndarray:
    cin, cout, kh, kw = weights.shape
    if x.shape[0] != cin:
        raise ShapeError(f"weights {weights.shape} incompatible with input channels {x.shape[0]}")
    n, h, w = x.shape[1:]
    ho, wo = conv_transpose_output_size(h, w, (kh, kw), stride, output_padding)
    cols = (weights.reshape(cin, -1).T @ x.reshape(cin, -1)).reshape(cout, kh, kw, n, h, w)
    out = _scatter_windows(cols, ho, wo, stride, 1)
    out += bias[:, None, None, None]
    return out


def conv_transpose2d_backward_cm(x, weights, stride: int, up, output_padding: int = 0) -> LayerGrads:
    cin, cout, kh, kw = weights.shape
    n, h, w = x.shape[1:]
    expected = (cout, n, *conv_transpose_output_size(h, w, (kh, kw), stride, output_padding))
    if up.shape != expected:
        raise ShapeError(f"upstream shape {up.shape} does not match transposed-conv output {expected}")
    # d_input is a strided convolution of the upstream with the same kernel
    cols = _windows(up, kh, kw, stride, 1, h, w).reshape(cout * kh * kw, -1)
    d_x = (weights.reshape(cin, -1) @ cols).reshape(cin, n, h, w)
    d_w = (x.reshape(cin, -1) @ cols.T).reshape(weights.shape)
    d_b = up.sum(axis=(1, 2, 3))
    return LayerGrads(d_w, d_b, d_x)


def softmax_xent_cm(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """``logits [K, N, H, W]``, ``labels [N, H, W]``."""
    k = logits.shape[0]
    lab = np.asarray(labels)
    if lab.shape != logits.shape[1:]:
        raise ShapeError(f"labels shape {lab.shape} does not match logits {logits.shape}")
    lab = lab.astype(np.int64, copy=False)
    if lab.size and (lab.min() < 0 or lab.max() >= k):
        raise ValueError(f"labels must lie in 0..{k - 1}")
    z = logits - logits.max(axis=0, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=0, keepdims=True))
    picked = np.take_along_axis(log_p, lab[None], axis=0)
    n_pix = lab.size
    loss = float(-picked.sum() / n_pix)
    grad = np.exp(log_p)
    onehot = np.arange(k).reshape(k, 1, 1, 1) == lab[None]
    grad -= onehot
    grad /= n_pix
    return loss, grad


# -- public API ------------------------------------------------------------------

def conv2d(x: np.ndarray, weights: np.ndarray, bias: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Dilated, strided, zero-padded 2-D cross-correlation plus bias."""
    out, _ = conv2d_cm(to_cm(x), weights, bias, spec)
    return from_cm(out, x.ndim == 3)


def conv2d_backward(x: np.ndarray, weights: np.ndarray, spec: ConvSpec, upstream: np.ndarray) -> LayerGrads:
    xc = to_cm(x)
    _check_conv(xc.shape[0], weights, spec)
    ho, wo = spec.output_size(xc.shape[2], xc.shape[3])
    uc = to_cm(upstream)
    if uc.shape != (spec.out_channels, xc.shape[1], ho, wo):
        raise ShapeError(f"upstream shape {upstream.shape} does not match conv output")
    g = conv2d_backward_cm(im2col_cm(xc, spec), xc.shape, weights, spec, uc)
    return g._replace(d_input=from_cm(g.d_input, x.ndim == 3))


def conv_transpose_output_size(h: int, w: int, kernel, stride: int, output_padding: int = 0):
    kh, kw = kernel
    return (h - 1) * stride + kh + output_padding, (w - 1) * stride + kw + output_padding


def conv_transpose2d(
    x: np.ndarray, weights: np.ndarray, bias: np.ndarray, stride: int, output_padding: int = 0
) -> np.ndarray:
    """Transposed convolution, weights ``[Cin, Cout, kh, kw]``.

    Output extent is ``(H - 1) * stride + kh + output_padding``. The extra
    ``output_padding`` rows/columns (``< stride``) receive only the bias; they
    let a decoder stage restore an odd extent lost to floor pooling.
    """
    if stride < 1 or not 0 <= output_padding < stride:
        raise ShapeError(f"need stride >= 1 and 0 <= output_padding < stride, got {stride}, {output_padding}")
    if weights.ndim != 4:
        raise ShapeError(f"weights must be [Cin,Cout,kh,kw], got {weights.shape}")
    return from_cm(conv_transpose2d_cm(to_cm(x), weights, bias, stride, output_padding), x.ndim == 3)


def conv_transpose2d_backward(
    x: np.ndarray, weights: np.ndarray, stride: int, upstream: np.ndarray, output_padding: int = 0
) -> LayerGrads:
    g = conv_transpose2d_backward_cm(to_cm(x), weights, stride, to_cm(upstream), output_padding)
    return g._replace(d_input=from_cm(g.d_input, x.ndim == 3))


def maxpool_output_size(h: int, w: int, window: int, stride: int) -> tuple[int, int]:
    if window > h or window > w:
        raise ShapeError(f"pool window {window} exceeds input extent {h}x{w}")
    return (h - window) // stride + 1, (w - window) // stride + 1


def maxpool2d(x: np.ndarray, window: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Max pooling over the two trailing axes. Returns the pooled tensor and,
    per output cell, the flat ``row * W + col`` input position of the winner
    (first in scan order on ties). Leading axes are treated as batch axes."""
    single = x.ndim == 3
    xb = x[None] if single else x
    if xb.ndim != 4:
        raise ShapeError(f"expected rank 3 or 4 tensor, got shape {x.shape}")
    a, b, h, w = xb.shape
    ho, wo = maxpool_output_size(h, w, window, stride)
    xb = np.ascontiguousarray(xb)
    sa, sb, sh, sw = xb.strides
    win = as_strided(
        xb,
        shape=(a, b, ho, wo, window, window),
        strides=(sa, sb, sh * stride, sw * stride, sh, sw),
        writeable=False,
    ).reshape(a, b, ho, wo, window * window)
    local = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    rows = np.arange(ho)[:, None] * stride + local // window
    cols = np.arange(wo)[None, :] * stride + local % window
    idx = rows * w + cols
    if single:
        return out[0], idx[0]
    return out, idx


def maxpool2d_backward(input_shape, indices: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    single = len(input_shape) == 3
    shape = (1, *input_shape) if single else tuple(input_shape)
    a, b, h, w = shape
    idx = indices.reshape(a, b, -1)
    offsets = (np.arange(a * b) * (h * w)).reshape(a, b, 1)
    flat = np.bincount(
        (idx + offsets).ravel(), weights=upstream.reshape(a, b, -1).ravel(), minlength=a * b * h * w
    )
    d_x = flat.reshape(shape).astype(upstream.dtype, copy=False)
    return d_x[0] if single else d_x


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    # subgradient 0 at x == 0
    return upstream * (x > 0)


def softmax(logits: np.ndarray, axis: int = -3) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean per-pixel cross-entropy and its gradient w.r.t. the logits.

    ``logits`` is ``[K, H, W]`` or ``[N, K, H, W]``; ``labels`` holds class ids
    with the same layout minus the class axis.
    """
    single = logits.ndim == 3
    lab = np.asarray(labels)
    lab = lab[None] if single else lab
    loss, grad = softmax_xent_cm(to_cm(logits), lab)
    return loss, from_cm(grad, single)
