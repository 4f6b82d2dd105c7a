"""Synergistic feature fusion: descriptor-gated exchange plus spatial attention.

All feature maps are ``[N, C, H, W]``; an unbatched ``[C, H, W]`` map is
accepted and promoted to ``N = 1``. Channel descriptors are ``[N, C]``.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import tensor as T
from .tensor import ShapeError


class Source(str, Enum):
    RGB = "rgb"
    THERMAL = "thermal"
    FUSED = "fused"


@dataclass
class ChannelDescriptor:
    values: T.Tensor
    source: Source

    @property
    def channels(self):
        return self.values.shape[-1]


def hidden_width(channels, reduction=4):
    return max(channels // reduction, 4)


def init_mlp(channels, rng, reduction=4):
    hidden = hidden_width(channels, reduction)
    return {
        "w1": rng.normal(0.0, np.sqrt(2.0 / channels), (channels, hidden)),
        "b1": np.zeros((1, hidden)),
        "w2": rng.normal(0.0, np.sqrt(1.0 / hidden), (hidden, channels)),
        "b2": np.zeros((1, channels)),
    }


def identity_mlp(channels, reduction=4):
    """MLP weights that reproduce non-negative inputs exactly (test helper)."""
    hidden = hidden_width(channels, reduction)
    if hidden < channels:
        raise ValueError("identity MLP needs hidden width >= channels")
    w1 = np.zeros((channels, hidden))
    w1[:, :channels] = np.eye(channels)
    return {"w1": w1, "b1": np.zeros((1, hidden)), "w2": w1.T.copy(), "b2": np.zeros((1, channels))}


class SffParams:
    """Parameters of one fusion block at a single encoder scale.

    Keys are ``{rgb,thermal,fused}.{w1,b1,w2,b2}`` for the descriptor MLPs and
    ``merge.w`` (``[2C, 2C]``) / ``merge.b`` (``[1, 2C]``) for the 1x1 merge conv.
    """

    def __init__(self, channels, tensors):
        self.channels = channels
        self.tensors = tensors

    @classmethod
    def init(cls, channels, rng, reduction=4):
        arrays = {}
        for src in Source:
            for key, value in init_mlp(channels, rng, reduction).items():
                arrays[f"{src.value}.{key}"] = value
        arrays["merge.w"] = rng.normal(0.0, np.sqrt(1.0 / (2 * channels)), (2 * channels, 2 * channels))
        arrays["merge.b"] = np.zeros((1, 2 * channels))
        return cls(channels, {k: T.parameter(v) for k, v in arrays.items()})

    def mlp(self, source):
        p = source.value
        return tuple(self.tensors[f"{p}.{k}"] for k in ("w1", "b1", "w2", "b2"))

    def __getitem__(self, key):
        return self.tensors[key]


def _batched(f):
    f = T.as_tensor(f)
    if f.ndim == 3:
        return T.reshape(f, (1,) + f.shape), True
    if f.ndim != 4:
        raise ShapeError(f"expected a [C,H,W] or [N,C,H,W] feature map, got {f.shape}")
    return f, False


def _unbatch(x, squeeze):
    return T.reshape(x, x.shape[1:]) if squeeze else x


def pooled_stats(f):
    """``0.5 * (GAP(f) + GMP(f))`` per channel."""
    return T.mul(T.add(T.global_avg_pool(f), T.global_max_pool(f)), 0.5)


def mlp_apply(x, weights):
    w1, b1, w2, b2 = weights
    return T.relu(x @ w1 + b1) @ w2 + b2


def descriptor_of(f, which, p):
    f, squeeze = _batched(f)
    if f.shape[1] != p.channels:
        raise ShapeError(f"descriptor_of: map has {f.shape[1]} channels, params built for {p.channels}")
    which = Source(which)
    values = mlp_apply(pooled_stats(f), p.mlp(which))
    if squeeze:
        values = T.reshape(values, (p.channels,))
    return ChannelDescriptor(values, which)


def exchange_gate(R, T_):
    """Shared exchange weight ``1 - sigmoid(T*R)`` per channel."""
    r = R.values if isinstance(R, ChannelDescriptor) else T.as_tensor(R)
    t = T_.values if isinstance(T_, ChannelDescriptor) else T.as_tensor(T_)
    if r.shape != t.shape:
        raise ShapeError(f"descriptor shapes differ: {r.shape} vs {t.shape}")
    return T.sub(1.0, T.sigmoid(T.mul(t, r)))


def gated_exchange(f_rgb, f_t, R, T_, gate_override=None):
    """Cross-inject each stream into the other, weighted by the shared gate.

    ``gate_override`` replaces the computed gate with a constant (used to
    reduce the block to plain additive fusion in tests).
    """
    f_rgb, f_t = T.as_tensor(f_rgb), T.as_tensor(f_t)
    if f_rgb.shape != f_t.shape:
        raise ShapeError(f"gated_exchange: stream shapes differ {f_rgb.shape} vs {f_t.shape}")
    if gate_override is None:
        gate = exchange_gate(R, T_)
    else:
        gate = T.Tensor(np.full(f_rgb.shape[:-2], float(gate_override)))
    if gate.shape != f_rgb.shape[:-2]:
        raise ShapeError(f"gate {gate.shape} does not index channels of {f_rgb.shape}")
    return (
        T.add(f_rgb, T.channel_mul(gate, f_t)),
        T.add(f_t, T.channel_mul(gate, f_rgb)),
    )


def attention_maps(f1_rgb, f1_t, p):
    """Per-channel spatial softmax of the merge conv, scaled by ``H*W``."""
    a, squeeze = _batched(f1_rgb)
    b, _ = _batched(f1_t)
    if a.shape != b.shape:
        raise ShapeError(f"merge_attention: stream shapes differ {a.shape} vs {b.shape}")
    c, h, w = a.shape[1:]
    logits = T.conv1x1(T.concat([a, b], axis=1), p["merge.w"], p["merge.b"])
    att = T.mul(T.softmax(logits, axis="spatial"), float(h * w))
    return (
        _unbatch(T.slice_channels(att, 0, c), squeeze),
        _unbatch(T.slice_channels(att, c, 2 * c), squeeze),
    )


def merge_attention(f1_rgb, f1_t, p):
    att_rgb, att_t = attention_maps(f1_rgb, f1_t, p)
    return T.mul(f1_rgb, att_rgb), T.mul(f1_t, att_t)


def fuse(f2_rgb, f2_t):
    f2_rgb, f2_t = T.as_tensor(f2_rgb), T.as_tensor(f2_t)
    if f2_rgb.shape != f2_t.shape:
        raise ShapeError(f"fuse: shapes differ {f2_rgb.shape} vs {f2_t.shape}")
    return T.add(f2_rgb, f2_t)


def sff_forward(f_rgb, f_t, p, gate_override=None):
    """Full fusion block. Returns ``(f_fuse, R, T)``."""
    R = descriptor_of(f_rgb, Source.RGB, p)
    T_ = descriptor_of(f_t, Source.THERMAL, p)
    f1_rgb, f1_t = gated_exchange(f_rgb, f_t, R, T_, gate_override)
    f2_rgb, f2_t = merge_attention(f1_rgb, f1_t, p)
    return fuse(f2_rgb, f2_t), R, T_
