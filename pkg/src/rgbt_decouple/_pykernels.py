"""Numpy implementations of the hot kernels, used when the extension is absent."""

import numpy as np


def im2col(x, stride):
    n, c, h, w = x.shape
    ho = (h - 1) // stride + 1
    wo = (w - 1) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((c, 3, 3, n, ho, wo), dtype=np.float64)
    for kh in range(3):
        for kw in range(3):
            win = xp[:, :, kh:kh + stride * (ho - 1) + 1:stride, kw:kw + stride * (wo - 1) + 1:stride]
            cols[:, kh, kw] = win.transpose(1, 0, 2, 3)
    return cols.reshape(c * 9, n * ho * wo)


def col2im(cols_t, n, c, h, w, stride):
    ho = (h - 1) // stride + 1
    wo = (w - 1) // stride + 1
    d = cols_t.reshape(c, 3, 3, n, ho, wo)
    out = np.zeros((n, c, h + 2, w + 2), dtype=np.float64)
    for kh in range(3):
        for kw in range(3):
            out[:, :, kh:kh + stride * (ho - 1) + 1:stride, kw:kw + stride * (wo - 1) + 1:stride] += (
                d[:, kh, kw].transpose(1, 0, 2, 3)
            )
    return np.ascontiguousarray(out[:, :, 1:h + 1, 1:w + 1])


def confusion_matrix(label, pred, k):
    bad = (label < 0) | (label >= k) | (pred < 0) | (pred >= k)
    if bad.any():
        raise ValueError(f"class index out of range at flat position {int(np.argmax(bad))}")
    return np.bincount(label * k + pred, minlength=k * k).reshape(k, k).astype(np.int64)


def fnv1a64(data):
    h = 0xCBF29CE484222325
    for byte in bytes(data):
        h = ((h ^ byte) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h
