"""Region decoupling: unimodal probability maps are pulled (L1) toward the
fused prediction restricted to its argmax class, with the fused side detached."""

import numpy as np

from . import tensor as T
from .tensor import ShapeError

NORM_TOL = 1e-4


def onehot_mask(p_fuse, axis=-3):
    """One-hot of the per-pixel argmax over the class axis; ties go to the lowest index."""
    p = T.as_tensor(p_fuse).data
    if p.ndim < 3:
        raise ShapeError(f"onehot_mask expects [..., K, H, W], got {p.shape}")
    err = np.abs(p.sum(axis=axis) - 1.0)
    if err.max() > NORM_TOL:
        raise ValueError(f"probability map not normalised (max |sum-1| = {err.max():.3g})")
    k = p.shape[axis]
    idx = np.argmax(p, axis=axis)
    mask = np.moveaxis(idx[..., None] == np.arange(k), -1, axis % p.ndim)
    return mask.astype(np.float64)


def masked_target(p_fuse):
    p = T.as_tensor(p_fuse)
    return T.stop_gradient(T.mul(p, T.Tensor(onehot_mask(p))))


def rdr_loss(p_fuse, p_rgb, p_t, weight=1.0):
    p_fuse, p_rgb, p_t = T.as_tensor(p_fuse), T.as_tensor(p_rgb), T.as_tensor(p_t)
    if not p_fuse.shape == p_rgb.shape == p_t.shape:
        raise ShapeError(f"rdr: shapes differ {p_fuse.shape}, {p_rgb.shape}, {p_t.shape}")
    target = masked_target(p_fuse)
    l_rgb = T.mean(T.abs_(T.sub(target, p_rgb)))
    l_t = T.mean(T.abs_(T.sub(target, p_t)))
    return T.mul(T.add(l_rgb, l_t), float(weight))
