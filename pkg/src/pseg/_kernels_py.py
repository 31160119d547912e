"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, k, stride, ho, wo):
    c = x.shape[0]
    win = sliding_window_view(x, (k, k), axis=(1, 2))
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (c, ho, wo, k, k) -> (c, k, k, ho, wo)
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(c * k * k, ho * wo)


def col2im(cols, c, hp, wp, k, stride, ho, wo):
    x = np.zeros((c, hp, wp), dtype=cols.dtype)
    cols = cols.reshape(c, k, k, ho, wo)
    for ki in range(k):
        for kj in range(k):
            x[:, ki : ki + stride * (ho - 1) + 1 : stride, kj : kj + stride * (wo - 1) + 1 : stride] += cols[:, ki, kj]
    return x


def erode_valid(labels, radius):
    # Edge padding reproduces a window clamped at the border.
    size = 2 * radius + 1
    padded = np.pad(labels, radius, mode="edge")
    win = sliding_window_view(padded, (size, size))
    return (win.min(axis=(2, 3)) == labels) & (win.max(axis=(2, 3)) == labels)


def window_scatter(feats, centers, threshold):
    inside = np.abs(centers @ feats.T) >= threshold
    d = feats.shape[1]
    outer = (feats[:, :, None] * feats[:, None, :]).reshape(len(feats), d * d)
    scat = (inside.astype(np.float64) @ outer).reshape(len(centers), d, d)
    return scat, inside.sum(axis=1).astype(np.int64)
