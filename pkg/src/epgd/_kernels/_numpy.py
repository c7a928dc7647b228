"""Pure-NumPy convolution and pooling kernels.

Fallback backend used when the compiled extension is unavailable. Both
backends implement the same four functions with identical semantics,
including the first-maximum tie rule for pooling argmax.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv2d_forward(x, w, b):
    """Valid cross-correlation of an HxWxCin image with a KhxKwxCinxCout bank.

    Returns an (H-Kh+1, W-Kw+1, Cout) array.
    """
    kh, kw, cin, cout = w.shape
    # windows: (oh, ow, cin, kh, kw)
    windows = sliding_window_view(x, (kh, kw), axis=(0, 1))
    y = np.einsum("ijckl,klcm->ijm", windows, w, optimize=True)
    y += b
    return y


def conv2d_backward(x, w, dy):
    """Gradients of conv2d_forward. Returns (dx, dw, db)."""
    kh, kw, cin, cout = w.shape
    windows = sliding_window_view(x, (kh, kw), axis=(0, 1))
    db = dy.sum(axis=(0, 1))
    dw = np.einsum("ijckl,ijm->klcm", windows, dy, optimize=True)
    # dx is the full correlation of dy with the spatially flipped kernels.
    pad = ((kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0))
    dy_pad = np.pad(dy, pad)
    w_flip = w[::-1, ::-1]  # (kh, kw, cin, cout), flipped spatially
    dwin = sliding_window_view(dy_pad, (kh, kw), axis=(0, 1))
    dx = np.einsum("ijmkl,klcm->ijc", dwin, w_flip, optimize=True)
    return dx, dw, db


def maxpool_forward(x, size):
    """Non-overlapping size x size max pooling over an HxWxC image.

    Trailing rows/columns that do not fill a window are dropped. Returns
    (y, argmax) where argmax holds the row-major in-window index of the
    first maximum, as used by maxpool_backward.
    """
    h, w, c = x.shape
    oh, ow = h // size, w // size
    window = (
        x[: oh * size, : ow * size]
        .reshape(oh, size, ow, size, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(oh, ow, size * size, c)
    )
    arg = window.argmax(axis=2).astype(np.int64)
    y = np.take_along_axis(window, arg[:, :, None, :], axis=2)[:, :, 0, :]
    return y, arg


def maxpool_backward(arg, dy, h, w, size):
    """Scatter dy back through the pooling argmax to an HxWxC gradient."""
    oh, ow, c = dy.shape
    dx = np.zeros((h, w, c), dtype=dy.dtype)
    rows = arg // size
    cols = arg % size
    oi = np.arange(oh)[:, None, None]
    oj = np.arange(ow)[None, :, None]
    ck = np.arange(c)[None, None, :]
    np.add.at(dx, (oi * size + rows, oj * size + cols, ck), dy)
    return dx
