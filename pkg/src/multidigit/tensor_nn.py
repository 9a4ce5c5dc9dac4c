"""Layer kernels with hand-derived gradients.

Tensors are plain numpy arrays in NHWC layout. Every spatial op accepts a
single image ``(H, W, C)`` or a batch ``(B, H, W, C)``; flat ops accept
``(D,)`` or ``(B, D)``. Kernels preserve the input dtype, so training runs in
float32 while gradient checks run in float64.

Each layer comes as a ``*_forward`` / ``*_backward`` pair. The forward returns
``(out, cache)`` and the backward consumes ``(dout, cache)``. The bare names
(``conv2d``, ``max_pool2d``, ...) return only the output.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when tensor shapes are inconsistent with a layer's geometry."""


def _as_batch(x: np.ndarray, ndim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.ndim == ndim - 1:
        return x[None], True
    if x.ndim != ndim:
        raise ShapeError(f"expected {ndim - 1}-d or {ndim}-d input, got shape {x.shape}")
    return x, False


def _unbatch(y: np.ndarray, squeezed: bool) -> np.ndarray:
    return y[0] if squeezed else y


# --------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    """Patches of a padded NHWC batch as ``(B, out_h, out_w, kh*kw*C)``."""
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # B, H', W', C, kh, kw
    win = win[:, : (out_h - 1) * stride + 1 : stride, : (out_w - 1) * stride + 1 : stride]
    b, c = xp.shape[0], xp.shape[3]
    # order patch entries as (kh, kw, C) to match the weight layout
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    return cols.reshape(b, out_h, out_w, kh * kw * c)


def _col2im(dcols: np.ndarray, padded_shape: tuple, kh: int, kw: int, stride: int) -> np.ndarray:
    b, out_h, out_w, _ = dcols.shape
    c = padded_shape[3]
    dcols = dcols.reshape(b, out_h, out_w, kh, kw, c)
    dxp = np.zeros(padded_shape, dtype=dcols.dtype)
    h_end = (out_h - 1) * stride + 1
    w_end = (out_w - 1) * stride + 1
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + h_end : stride, j : j + w_end : stride, :] += dcols[:, :, :, i, j, :]
    return dxp


def _same_geometry(h: int, w: int, kh: int, kw: int, stride: int):
    out_h = -(-h // stride)
    out_w = -(-w // stride)
    ph, pw = kh // 2, kw // 2
    # extra bottom/right rows so every strided window fits
    need_h = (out_h - 1) * stride + kh
    need_w = (out_w - 1) * stride + kw
    pads = ((ph, max(need_h - h - ph, 0)), (pw, max(need_w - w - pw, 0)))
    return out_h, out_w, pads


def conv2d_forward(x, w, b, stride: int = 1):
    """Zero-padded "same" convolution.

    ``w`` has shape ``(kh, kw, Cin, Cout)`` with odd spatial extents; output
    extents are ``ceil(H / stride)``.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    xb, squeezed = _as_batch(x, 4)
    kh, kw, cin, cout = w.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel spatial size must be odd, got {kh}x{kw}")
    if xb.shape[3] != cin:
        raise ShapeError(f"input has {xb.shape[3]} channels, kernel expects {cin}")
    if b.shape != (cout,):
        raise ShapeError(f"bias shape {b.shape} does not match {cout} output channels")
    _, h, wd, _ = xb.shape
    out_h, out_w, pads = _same_geometry(h, wd, kh, kw, stride)
    xp = np.pad(xb, ((0, 0), pads[0], pads[1], (0, 0)))
    cols = _im2col(xp, kh, kw, stride, out_h, out_w)
    out = cols @ w.reshape(-1, cout) + b
    cache = (cols, xp.shape, pads, w, stride, squeezed, (h, wd))
    return _unbatch(out, squeezed), cache


def conv2d_backward(dout, cache):
    """Returns ``(dx, dw, db)``."""
    cols, padded_shape, pads, w, stride, squeezed, (h, wd) = cache
    dout = dout[None] if squeezed else dout
    kh, kw, cin, cout = w.shape
    flat_cols = cols.reshape(-1, cols.shape[-1])
    flat_dout = dout.reshape(-1, cout)
    dw = (flat_cols.T @ flat_dout).reshape(w.shape)
    db = flat_dout.sum(axis=0)
    dcols = dout @ w.reshape(-1, cout).T
    dxp = _col2im(dcols, padded_shape, kh, kw, stride)
    dx = dxp[:, pads[0][0] : pads[0][0] + h, pads[1][0] : pads[1][0] + wd, :]
    return _unbatch(dx, squeezed), dw, db


def conv2d(x, w, b, stride: int = 1):
    return conv2d_forward(x, w, b, stride)[0]


# --------------------------------------------------------------------------
# locally connected


def locally_connected_forward(x, w, b):
    """Convolution-shaped receptive fields with unshared weights.

    ``w`` has shape ``(H, W, kh, kw, Cin, Cout)`` and ``b`` ``(H, W, Cout)``;
    stride is 1 with zero padding, so output extents match the input.
    """
    xb, squeezed = _as_batch(x, 4)
    if w.ndim != 6:
        raise ShapeError(f"locally connected weights must be 6-d, got shape {w.shape}")
    oh, ow, kh, kw, cin, cout = w.shape
    _, h, wd, c = xb.shape
    if (h, wd, c) != (oh, ow, cin):
        raise ShapeError(f"input {xb.shape[1:]} does not match per-location kernels for {(oh, ow, cin)}")
    if b.shape != (oh, ow, cout):
        raise ShapeError(f"bias shape {b.shape} does not match {(oh, ow, cout)}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel spatial size must be odd, got {kh}x{kw}")
    _, _, pads = _same_geometry(h, wd, kh, kw, 1)
    xp = np.pad(xb, ((0, 0), pads[0], pads[1], (0, 0)))
    cols = _im2col(xp, kh, kw, 1, h, wd)  # B, H, W, P
    wf = w.reshape(oh * ow, kh * kw * cin, cout)
    # batched matmul over locations: (HW, B, P) @ (HW, P, Cout)
    cols_l = cols.reshape(cols.shape[0], oh * ow, -1).transpose(1, 0, 2)
    out = np.matmul(cols_l, wf).transpose(1, 0, 2).reshape(-1, oh, ow, cout) + b
    cache = (cols_l, xp.shape, pads, w, squeezed, (h, wd))
    return _unbatch(out, squeezed), cache


def locally_connected_backward(dout, cache):
    cols_l, padded_shape, pads, w, squeezed, (h, wd) = cache
    dout = dout[None] if squeezed else dout
    oh, ow, kh, kw, cin, cout = w.shape
    bsz = dout.shape[0]
    dout_l = dout.reshape(bsz, oh * ow, cout).transpose(1, 0, 2)  # HW, B, Cout
    dw = np.matmul(cols_l.transpose(0, 2, 1), dout_l).reshape(w.shape)
    db = dout.sum(axis=0)
    wf = w.reshape(oh * ow, kh * kw * cin, cout)
    dcols = np.matmul(dout_l, wf.transpose(0, 2, 1)).transpose(1, 0, 2).reshape(bsz, oh, ow, -1)
    dxp = _col2im(dcols, padded_shape, kh, kw, 1)
    dx = dxp[:, pads[0][0] : pads[0][0] + h, pads[1][0] : pads[1][0] + wd, :]
    return _unbatch(dx, squeezed), dw, db


def locally_connected(x, w, b):
    return locally_connected_forward(x, w, b)[0]


# --------------------------------------------------------------------------
# fully connected


def fully_connected_forward(x, w, b):
    """Affine map ``x @ w + b`` with ``w`` of shape ``(D, M)``."""
    xb, squeezed = _as_batch(x, 2)
    if w.ndim != 2 or xb.shape[1] != w.shape[0]:
        raise ShapeError(f"input width {xb.shape[1]} does not match weights {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"bias shape {b.shape} does not match {w.shape[1]} outputs")
    out = xb @ w + b
    return _unbatch(out, squeezed), (xb, w, squeezed)


def fully_connected_backward(dout, cache):
    xb, w, squeezed = cache
    dout = dout[None] if squeezed else dout
    dw = xb.T @ dout
    db = dout.sum(axis=0)
    dx = dout @ w.T
    return _unbatch(dx, squeezed), dw, db


def fully_connected(x, w, b):
    return fully_connected_forward(x, w, b)[0]


# --------------------------------------------------------------------------
# activations


def rectifier_forward(x):
    x = np.asarray(x)
    mask = x > 0
    return np.where(mask, x, 0).astype(x.dtype, copy=False), mask


def rectifier_backward(dout, mask):
    return dout * mask


def rectifier(x):
    return rectifier_forward(x)[0]


def maxout_forward(x, pieces: int):
    """Max over ``pieces`` consecutive channels: channel ``c`` of the output
    is the max of input channels ``c*pieces ... c*pieces + pieces - 1``."""
    x = np.asarray(x)
    if pieces < 1 or x.shape[-1] % pieces:
        raise ShapeError(f"{x.shape[-1]} channels are not divisible into groups of {pieces}")
    grouped = x.reshape(*x.shape[:-1], x.shape[-1] // pieces, pieces)
    idx = grouped.argmax(axis=-1)
    out = np.take_along_axis(grouped, idx[..., None], axis=-1)[..., 0]
    return out, (idx, pieces, x.shape)


def maxout_backward(dout, cache):
    idx, pieces, shape = cache
    dx = np.zeros((*dout.shape, pieces), dtype=dout.dtype)
    np.put_along_axis(dx, idx[..., None], dout[..., None], axis=-1)
    return dx.reshape(shape)


def maxout(x, pieces: int):
    return maxout_forward(x, pieces)[0]


# --------------------------------------------------------------------------
# pooling and normalization


_POOL_OFFSETS = ((0, 0), (0, 1), (1, 0), (1, 1))


def max_pool2d_forward(x, stride: int = 2):
    """2x2 max pooling; windows hanging off the bottom/right edge are
    clipped to the valid region. Output extents are ``ceil(H / stride)``."""
    if stride not in (1, 2):
        raise ValueError(f"pool stride must be 1 or 2, got {stride}")
    xb, squeezed = _as_batch(x, 4)
    bsz, h, w, c = xb.shape
    if xb.size == 0:
        raise ShapeError("cannot pool an empty tensor")
    out_h, out_w = -(-h // stride), -(-w // stride)
    need_h, need_w = (out_h - 1) * stride + 2, (out_w - 1) * stride + 2
    xp = np.full((bsz, need_h, need_w, c), -np.inf, dtype=xb.dtype)
    xp[:, :h, :w] = xb
    cands = np.stack(
        [
            xp[:, i : i + (out_h - 1) * stride + 1 : stride, j : j + (out_w - 1) * stride + 1 : stride]
            for i, j in _POOL_OFFSETS
        ]
    )
    # argmax keeps the first maximum in row-major window order
    arg = cands.argmax(axis=0)
    out = np.take_along_axis(cands, arg[None], axis=0)[0]
    return _unbatch(out, squeezed), (arg, stride, xb.shape, squeezed)


def max_pool2d_backward(dout, cache):
    arg, stride, shape, squeezed = cache
    dout = dout[None] if squeezed else dout
    bsz, h, w, c = shape
    out_h, out_w = arg.shape[1:3]
    need_h, need_w = (out_h - 1) * stride + 2, (out_w - 1) * stride + 2
    dxp = np.zeros((bsz, need_h, need_w, c), dtype=dout.dtype)
    for k, (i, j) in enumerate(_POOL_OFFSETS):
        dxp[:, i : i + (out_h - 1) * stride + 1 : stride, j : j + (out_w - 1) * stride + 1 : stride] += np.where(
            arg == k, dout, 0
        )
    return _unbatch(dxp[:, :h, :w], squeezed)


def max_pool2d(x, stride: int = 2):
    return max_pool2d_forward(x, stride)[0]


def _box_sum3(x: np.ndarray) -> np.ndarray:
    """Sum over each 3x3 spatial neighborhood (clipped), for a batch."""
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    h, w = x.shape[1:3]
    out = np.zeros(x.shape, dtype=np.result_type(x.dtype, np.float32))
    for i in range(3):
        for j in range(3):
            out += xp[:, i : i + h, j : j + w]
    return out


def _neighbor_counts(h: int, w: int) -> np.ndarray:
    rows = np.minimum(np.arange(h) + 1, h - 1) - np.maximum(np.arange(h) - 1, 0) + 1
    cols = np.minimum(np.arange(w) + 1, w - 1) - np.maximum(np.arange(w) - 1, 0) + 1
    return np.outer(rows, cols)[None, :, :, None]


def subtractive_normalize_forward(x):
    """Subtract the per-channel mean of each value's 3x3 neighborhood.

    Neighborhoods are clipped at the borders, so the mean there is taken over
    fewer values. The op is linear; the cache only holds the geometry.
    """
    xb, squeezed = _as_batch(x, 4)
    counts = _neighbor_counts(*xb.shape[1:3]).astype(xb.dtype)
    out = xb - _box_sum3(xb) / counts
    return _unbatch(out.astype(xb.dtype, copy=False), squeezed), (counts, squeezed)


def subtractive_normalize_backward(dout, cache):
    counts, squeezed = cache
    dout = dout[None] if squeezed else dout
    dx = dout - _box_sum3(dout / counts)
    return _unbatch(dx.astype(dout.dtype, copy=False), squeezed)


def subtractive_normalize(x):
    return subtractive_normalize_forward(x)[0]


# --------------------------------------------------------------------------
# dropout


def dropout_forward(x, rate: float, train: bool, rng: np.random.Generator | None = None):
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)`` at train
    time so evaluation is the identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = np.asarray(x)
    if not train or rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * mask, mask


def dropout_backward(dout, mask):
    return dout if mask is None else dout * mask


def dropout(x, rate: float, train: bool = False, rng: np.random.Generator | None = None):
    return dropout_forward(x, rate, train, rng)[0]


# --------------------------------------------------------------------------
# softmax


def log_softmax(z, axis: int = -1):
    """Numerically stable ``z - logsumexp(z)`` along ``axis``."""
    z = np.asarray(z)
    if z.shape[axis] < 1:
        raise ShapeError("log_softmax needs at least one class")
    if not np.all(np.isfinite(z)):
        raise ValueError("log_softmax input contains non-finite values")
    zmax = z.max(axis=axis, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted.astype(np.float64)).sum(axis=axis, keepdims=True))
    return (shifted - lse).astype(z.dtype if z.dtype.kind == "f" else np.float64)


def softmax(z, axis: int = -1):
    return np.exp(log_softmax(z, axis=axis))
