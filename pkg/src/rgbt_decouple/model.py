"""Three-branch encoder/decoder: RGB, thermal, and a fused stream built from
per-scale fusion blocks. The RGB and thermal branches read only their own
encoder and decoder groups, so either runs standalone at inference."""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .sff import Source, SffParams, descriptor_of, init_mlp, sff_forward
from .tensor import ShapeError

GROUPS = ("rgb_encoder", "t_encoder", "sff", "rgb_decoder", "fused_decoder", "t_decoder")
MODALITIES = ("rgb", "t")
FUSIONS = ("sff", "add")


class MissingGroupError(KeyError):
    def __init__(self, group):
        super().__init__(group)
        self.group = group

    def __str__(self):
        return f"parameter group {self.group!r} is not loaded"


def unimodal_groups(modality):
    if modality not in MODALITIES:
        raise ValueError(f"unknown modality {modality!r}; expected one of {MODALITIES}")
    return (f"{modality}_encoder", f"{modality}_decoder")


@dataclass(frozen=True)
class NetworkConfig:
    in_rgb: int = 3
    in_t: int = 1
    widths: tuple = (8, 16, 32)
    n_classes: int = 4
    fusion: str = "sff"
    reduction: int = 4
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2:
            raise ValueError("need at least two encoder stages")
        if min(self.widths) < 4:
            raise ValueError(f"stage widths must be >= 4, got {self.widths}")
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")

    @property
    def downsample(self):
        return 2 ** len(self.widths)

    def check_input(self, h, w):
        f = self.downsample
        if h % f or w % f:
            raise ShapeError(f"input {h}x{w} not divisible by 2^{len(self.widths)} = {f}")


@dataclass
class BranchOutputs:
    p_rgb: T.Tensor
    p_fuse: T.Tensor
    p_t: T.Tensor
    logits: dict
    dec_feats: dict
    R: list
    T: list
    F: list
    fused_skips: list = field(default_factory=list)


def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)


def init_params(config):
    """Fresh parameter arrays for every group, drawn from ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    widths, k = config.widths, config.n_classes
    params = {}
    for group, cin in (("rgb_encoder", config.in_rgb), ("t_encoder", config.in_t)):
        g = {}
        for i, w in enumerate(widths):
            g[f"e{i}.w"] = _he(rng, (w, cin, 3, 3), cin * 9)
            g[f"e{i}.b"] = np.zeros(w)
            cin = w
        params[group] = g
    sff = {}
    for i, c in enumerate(widths):
        if config.fusion == "sff":
            block = SffParams.init(c, rng, config.reduction)
            arrays = {key: t.data for key, t in block.tensors.items()}
        else:
            arrays = {}
            for src in Source:
                for key, v in init_mlp(c, rng, config.reduction).items():
                    arrays[f"{src.value}.{key}"] = v
            for m in MODALITIES:
                arrays[f"proj_{m}.w"] = rng.normal(0.0, np.sqrt(1.0 / c), (c, c))
                arrays[f"proj_{m}.b"] = np.zeros((1, c))
        sff.update({f"s{i}.{key}": v for key, v in arrays.items()})
    params["sff"] = sff
    for group in ("rgb_decoder", "fused_decoder", "t_decoder"):
        g = {}
        last = len(widths) - 1
        for i in range(last, -1, -1):
            cin = widths[i] if i == last else widths[i + 1] + widths[i]
            g[f"d{i}.w"] = _he(rng, (widths[i], cin, 3, 3), cin * 9)
            g[f"d{i}.b"] = np.zeros(widths[i])
        g["head.w"] = _he(rng, (4 * k, widths[0], 3, 3), widths[0] * 9)
        g["head.b"] = np.zeros(4 * k)
        params[group] = g
    return params


class Network:
    """Holds a config and (possibly partial) parameter groups of ``Tensor`` leaves."""

    def __init__(self, config, params=None):
        self.config = config
        if params is None:
            params = init_params(config)
        self.params = {
            g: {n: v if isinstance(v, T.Tensor) else T.parameter(v) for n, v in group.items()}
            for g, group in params.items()
        }

    # -- parameter bookkeeping ------------------------------------------------

    def named_parameters(self):
        for g in GROUPS:
            for n, t in self.params.get(g, {}).items():
                yield g, n, t

    def zero_grad(self):
        for _, _, t in self.named_parameters():
            t.grad = None

    def arrays(self):
        return {g: {n: t.data for n, t in grp.items()} for g, grp in self.params.items()}

    def num_parameters(self, groups=GROUPS):
        return sum(t.data.size for g, _, t in self.named_parameters() if g in groups)

    def group(self, name, params=None):
        params = self.params if params is None else params
        try:
            return params[name]
        except KeyError:
            raise MissingGroupError(name) from None

    def sff_block(self, i, params=None):
        g = self.group("sff", params)
        prefix = f"s{i}."
        return SffParams(self.config.widths[i], {k[len(prefix):]: v for k, v in g.items() if k.startswith(prefix)})

    # -- building blocks -------------------------------------------------------

    @staticmethod
    def encode(x, enc):
        feats = []
        i = 0
        while f"e{i}.w" in enc:
            x = T.relu(T.conv3x3(x, enc[f"e{i}.w"], enc[f"e{i}.b"], stride=2))
            feats.append(x)
            i += 1
        return feats

    @staticmethod
    def decode(skips, dec):
        """Returns ``(stage_features, logits)``; stage features are indexed by scale."""
        n = len(skips)
        feats = [None] * n
        x = skips[-1]
        for i in range(n - 1, -1, -1):
            if i < n - 1:
                x = T.concat([T.upsample2x(x), skips[i]], axis=1)
            x = T.relu(T.conv3x3(x, dec[f"d{i}.w"], dec[f"d{i}.b"]))
            feats[i] = x
        logits = T.pixel_shuffle2x(T.conv3x3(x, dec["head.w"], dec["head.b"]))
        return feats, logits

    def _fuse_scale(self, i, f_rgb, f_t, params, gate_override=None):
        block = self.sff_block(i, params)
        if self.config.fusion == "sff":
            f_fuse, R, T_ = sff_forward(f_rgb, f_t, block, gate_override)
        else:
            f_fuse = T.add(
                T.conv1x1(f_rgb, block["proj_rgb.w"], block["proj_rgb.b"]),
                T.conv1x1(f_t, block["proj_t.w"], block["proj_t.b"]),
            )
            # Additive fusion uses R and T only for the decoupling gate.
            with T.no_grad():
                R = descriptor_of(f_rgb, Source.RGB, block)
                T_ = descriptor_of(f_t, Source.THERMAL, block)
        # F only ever enters the binary sign gate, which passes no gradient.
        with T.no_grad():
            F = descriptor_of(f_fuse, Source.FUSED, block)
        return f_fuse, R, T_, F

    def _prepare(self, x, channels):
        x = T.as_tensor(x)
        squeeze = x.ndim == 3
        if squeeze:
            x = T.Tensor(x.data[None])
        if x.ndim != 4 or x.shape[1] != channels:
            raise ShapeError(f"expected input [N,{channels},H,W], got {x.shape}")
        self.config.check_input(x.shape[2], x.shape[3])
        return x, squeeze

    # -- forward passes ----------------------------------------------------------

    def forward_full(self, rgb, t, params=None, gate_override=None):
        params = self.params if params is None else params
        rgb, squeeze = self._prepare(rgb, self.config.in_rgb)
        t, _ = self._prepare(t, self.config.in_t)
        if rgb.shape[2:] != t.shape[2:] or rgb.shape[0] != t.shape[0]:
            raise ShapeError(f"modalities disagree in batch/spatial shape: {rgb.shape} vs {t.shape}")
        enc_r = self.encode(rgb, self.group("rgb_encoder", params))
        enc_t = self.encode(t, self.group("t_encoder", params))
        fused, Rs, Ts, Fs = [], [], [], []
        for i, (fr, ft) in enumerate(zip(enc_r, enc_t)):
            f_fuse, R, T_, F = self._fuse_scale(i, fr, ft, params, gate_override)
            fused.append(f_fuse)
            Rs.append(R)
            Ts.append(T_)
            Fs.append(F)
        feats, logits, probs = {}, {}, {}
        for branch, skips, group in (
            ("rgb", enc_r, "rgb_decoder"),
            ("fuse", fused, "fused_decoder"),
            ("t", enc_t, "t_decoder"),
        ):
            feats[branch], logits[branch] = self.decode(skips, self.group(group, params))
            probs[branch] = T.softmax(logits[branch], axis=1)
        if squeeze:
            probs = {b: T.reshape(p, p.shape[1:]) for b, p in probs.items()}
        return BranchOutputs(probs["rgb"], probs["fuse"], probs["t"], logits, feats, Rs, Ts, Fs, fused)

    def forward_unimodal(self, x, modality, params=None, return_logits=False):
        """Probability map of one unimodal branch, touching only its two groups."""
        params = self.params if params is None else params
        enc_name, dec_name = unimodal_groups(modality)
        channels = self.config.in_rgb if modality == "rgb" else self.config.in_t
        x, squeeze = self._prepare(x, channels)
        enc = self.group(enc_name, params)
        dec = self.group(dec_name, params)
        _, logits = self.decode(self.encode(x, enc), dec)
        p = T.softmax(logits, axis=1)
        if squeeze:
            p = T.reshape(p, p.shape[1:])
        return (p, logits) if return_logits else p


def config_from_arrays(arrays, seed=0, reduction=4):
    """Recover a :class:`NetworkConfig` from parameter shapes (any loaded subset)."""
    enc = arrays.get("rgb_encoder") or arrays.get("t_encoder")
    dec = arrays.get("rgb_decoder") or arrays.get("fused_decoder") or arrays.get("t_decoder")
    if enc is None or dec is None:
        raise MissingGroupError("rgb_encoder" if enc is None else "rgb_decoder")
    widths = []
    i = 0
    while f"e{i}.w" in enc:
        widths.append(enc[f"e{i}.w"].shape[0])
        i += 1
    in_rgb = arrays["rgb_encoder"]["e0.w"].shape[1] if "rgb_encoder" in arrays else 3
    in_t = arrays["t_encoder"]["e0.w"].shape[1] if "t_encoder" in arrays else 1
    fusion = "sff"
    if "sff" in arrays and any(".proj_rgb." in k for k in arrays["sff"]):
        fusion = "add"
    return NetworkConfig(in_rgb, in_t, tuple(widths), dec["head.w"].shape[0] // 4, fusion, reduction, seed)
