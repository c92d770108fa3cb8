"""Dense float32 kernels: convolution, pooling, activation, affine and add.

Tensors are plain ``numpy.ndarray`` objects of dtype float32 in NCHW layout.
Every kernel returns a freshly allocated array and never mutates its inputs.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

DTYPE = np.float32


def as_tensor(x) -> np.ndarray:
    """Return ``x`` as a C-contiguous float32 array (no copy if already one)."""
    return np.ascontiguousarray(x, dtype=DTYPE)


def _check_rank(x: np.ndarray, rank: int, name: str) -> None:
    if x.ndim != rank:
        raise ShapeError(f"{name} must have rank {rank}, got shape {x.shape}")


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (N, C, OH, OW, kh, kw) strided view, no copy
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d_forward(x, weight, bias, stride: int = 1, padding: int = 0) -> np.ndarray:
    """2-D cross-correlation of an NCHW batch with an OIHW filter bank.

    The kernel is not flipped. Output spatial size is
    ``floor((in + 2*padding - kernel) / stride) + 1``.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    _check_rank(x, 4, "conv input")
    _check_rank(weight, 4, "conv weight")
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride={stride} / padding={padding}")
    n, c, h, w = x.shape
    o, i, kh, kw = weight.shape
    if c != i:
        raise ShapeError(f"conv input has {c} channels but weight expects {i} (weight shape {weight.shape})")
    if bias.shape != (o,):
        raise ShapeError(f"conv bias must have shape ({o},), got {bias.shape}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h}x{w} (padding {padding})")
    win = _windows(_pad(x, padding), kh, kw, stride)
    out = np.tensordot(win, weight, axes=([1, 4, 5], [1, 2, 3]))  # N, OH, OW, O
    out = out.transpose(0, 3, 1, 2) + bias[None, :, None, None]
    return np.ascontiguousarray(out, dtype=DTYPE)


def conv2d_backward(x, weight, dout, stride: int = 1, padding: int = 0, need_params: bool = True):
    """Gradients of :func:`conv2d_forward` given its input and the output cotangent.

    Returns ``(dx, dweight, dbias)``; the last two are ``None`` when
    ``need_params`` is false.
    """
    x, weight, dout = as_tensor(x), as_tensor(weight), as_tensor(dout)
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    oh, ow = conv_output_size(h, kh, stride, padding), conv_output_size(w, kw, stride, padding)
    if dout.shape != (n, o, oh, ow):
        raise ShapeError(f"conv cotangent shape {dout.shape} != forward output shape {(n, o, oh, ow)}")

    dweight = dbias = None
    if need_params:
        win = _windows(_pad(x, padding), kh, kw, stride)
        dweight = np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3])).astype(DTYPE)
        dbias = dout.sum(axis=(0, 2, 3), dtype=DTYPE)

    dcols = np.tensordot(dout, weight, axes=([1], [0]))  # N, OH, OW, C, kh, kw
    dcols = dcols.transpose(0, 3, 1, 2, 4, 5)
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=DTYPE)
    for p in range(kh):
        for q in range(kw):
            dxp[:, :, p:p + stride * oh:stride, q:q + stride * ow:stride] += dcols[..., p, q]
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(dxp), dweight, dbias


def _pool_windows(x: np.ndarray, window: int, stride: int) -> np.ndarray:
    _check_rank(x, 4, "pool input")
    if window < 1 or stride < 1:
        raise ShapeError(f"invalid pooling window={window} / stride={stride}")
    if x.shape[2] < window or x.shape[3] < window:
        raise ShapeError(f"pooling window {window} larger than spatial extent {x.shape[2:]}")
    return _windows(x, window, window, stride)


def maxpool2d(x, window: int, stride: int | None = None):
    """Max pooling. Returns ``(output, argmax)``.

    ``argmax`` holds, per output cell, the flat row-major offset inside its
    window. Ties resolve to the first offset.
    """
    stride = window if stride is None else stride
    x = as_tensor(x)
    win = _pool_windows(x, window, stride)
    flat = win.reshape(*win.shape[:4], window * window)
    argmax = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), argmax


def maxpool2d_backward(argmax, dout, input_shape, window: int, stride: int | None = None) -> np.ndarray:
    stride = window if stride is None else stride
    dout = as_tensor(dout)
    if dout.shape != argmax.shape:
        raise ShapeError(f"maxpool cotangent shape {dout.shape} != output shape {argmax.shape}")
    oh, ow = dout.shape[2:]
    dx = np.zeros(input_shape, dtype=DTYPE)
    for p in range(window):
        for q in range(window):
            routed = np.where(argmax == p * window + q, dout, DTYPE(0))
            dx[:, :, p:p + stride * oh:stride, q:q + stride * ow:stride] += routed
    return dx


def avgpool2d(x, window: int, stride: int | None = None) -> np.ndarray:
    stride = window if stride is None else stride
    x = as_tensor(x)
    win = _pool_windows(x, window, stride)
    return np.ascontiguousarray(win.mean(axis=(4, 5), dtype=DTYPE))


def avgpool2d_backward(dout, input_shape, window: int, stride: int | None = None) -> np.ndarray:
    stride = window if stride is None else stride
    dout = as_tensor(dout)
    oh, ow = dout.shape[2:]
    if oh != conv_output_size(input_shape[2], window, stride, 0) or ow != conv_output_size(input_shape[3], window, stride, 0):
        raise ShapeError(f"avgpool cotangent shape {dout.shape} does not match input shape {input_shape}")
    share = dout / DTYPE(window * window)
    dx = np.zeros(input_shape, dtype=DTYPE)
    for p in range(window):
        for q in range(window):
            dx[:, :, p:p + stride * oh:stride, q:q + stride * ow:stride] += share
    return dx


def relu(x) -> np.ndarray:
    return np.maximum(as_tensor(x), DTYPE(0))


def relu_backward(x, dout) -> np.ndarray:
    """Mask the cotangent where the input is <= 0 (derivative at 0 is 0)."""
    x, dout = as_tensor(x), as_tensor(dout)
    if x.shape != dout.shape:
        raise ShapeError(f"relu cotangent shape {dout.shape} != input shape {x.shape}")
    return np.where(x > 0, dout, DTYPE(0))


def linear(x, weight, bias) -> np.ndarray:
    """Affine map ``x @ weight.T + bias`` for ``x`` of shape (N, F), weight (O, F)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    _check_rank(x, 2, "linear input")
    _check_rank(weight, 2, "linear weight")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear input has {x.shape[1]} features but weight expects {weight.shape[1]}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear bias must have shape ({weight.shape[0]},), got {bias.shape}")
    return x @ weight.T + bias


def linear_backward(x, weight, dout, need_params: bool = True):
    x, weight, dout = as_tensor(x), as_tensor(weight), as_tensor(dout)
    if dout.shape != (x.shape[0], weight.shape[0]):
        raise ShapeError(f"linear cotangent shape {dout.shape} != output shape {(x.shape[0], weight.shape[0])}")
    dx = dout @ weight
    if not need_params:
        return dx, None, None
    return dx, dout.T @ x, dout.sum(axis=0, dtype=DTYPE)


def add(a, b) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}")
    return a + b


def add_backward(dout):
    dout = as_tensor(dout)
    return dout, dout
