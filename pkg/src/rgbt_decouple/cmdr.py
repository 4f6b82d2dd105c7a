"""Cross-modal decoupling: sign-consistency masking of fused decoder features
and an MSE pull of the unimodal decoder features toward those detached targets."""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .sff import ChannelDescriptor
from .tensor import ShapeError


@dataclass
class DecoupledTargets:
    f_d_rgb: list
    f_d_t: list
    stages: tuple


def _values(d):
    return (d.values if isinstance(d, ChannelDescriptor) else T.as_tensor(d)).data


def sign_consistency_gate(F, X):
    """1.0 where ``F[c] * X[c] > 0``, else 0.0. A constant: nothing flows through it."""
    f, x = _values(F), _values(X)
    if f.shape != x.shape:
        raise ShapeError(f"descriptor shapes differ: {f.shape} vs {x.shape}")
    return (f * x > 0).astype(np.float64)


def mask_channels(f, gate):
    return T.channel_mul(T.Tensor(gate), T.as_tensor(f))


def decouple_stage(f_fuse, F, R, T_):
    """Detached RGB and thermal targets for one stage."""
    g_rgb = sign_consistency_gate(F, R)
    g_t = sign_consistency_gate(F, T_)
    return (
        T.stop_gradient(mask_channels(f_fuse, g_rgb)),
        T.stop_gradient(mask_channels(f_fuse, g_t)),
    )


def decouple(f_fuse, F, R, T_, stages=None):
    """Build targets for each stage.

    A single map plus descriptors gives a one-stage target set; lists of maps
    and descriptors (one per stage) give one target pair per stage.
    """
    if not isinstance(f_fuse, (list, tuple)):
        f_fuse, F, R, T_ = [f_fuse], [F], [R], [T_]
    if not len(f_fuse) == len(F) == len(R) == len(T_):
        raise ShapeError("decouple: per-stage lists have different lengths")
    pairs = [decouple_stage(*args) for args in zip(f_fuse, F, R, T_)]
    return DecoupledTargets(
        [p[0] for p in pairs],
        [p[1] for p in pairs],
        tuple(stages) if stages is not None else tuple(range(len(pairs))),
    )


def _stage_mse(target, feat):
    if target.shape != feat.shape:
        raise ShapeError(f"cmdr: target {target.shape} vs feature {feat.shape}")
    return T.mean(T.square(T.sub(T.stop_gradient(target), feat)))


def cmdr_loss(targets, f_rgb_dec, f_t_dec):
    """Sum over stages of per-stage mean squared error, for both modalities."""
    n = len(targets.stages)
    if not len(f_rgb_dec) == len(f_t_dec) == n:
        raise ShapeError(f"cmdr: {n} target stages but {len(f_rgb_dec)}/{len(f_t_dec)} features")
    terms = [_stage_mse(t, f) for t, f in zip(targets.f_d_rgb, f_rgb_dec)]
    terms += [_stage_mse(t, f) for t, f in zip(targets.f_d_t, f_t_dec)]
    total = terms[0]
    for term in terms[1:]:
        total = T.add(total, term)
    return total
