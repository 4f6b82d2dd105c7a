"""Synthetic paired RGB/thermal scenes with modality-dependent object visibility.

Class 0 is background. Class 1 shows up only in RGB, class 2 only in thermal,
class 3 in both. Images are rendered from the final label mask, so a pixel's
appearance in each modality is a function of its label alone (plus noise).
"""

import json
import struct
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

N_CLASSES = 4

# Clean per-class appearance; background where a class is invisible.
RGB_COLORS = np.array([
    [0.40, 0.40, 0.40],
    [0.80, 0.30, 0.25],
    [0.40, 0.40, 0.40],
    [0.25, 0.35, 0.80],
])
THERMAL_LEVELS = np.array([0.25, 0.25, 0.75, 0.55])


class Visibility(str, Enum):
    RGB_ONLY = "RGB_ONLY"
    T_ONLY = "T_ONLY"
    BOTH = "BOTH"


VISIBILITY = {1: Visibility.RGB_ONLY, 2: Visibility.T_ONLY, 3: Visibility.BOTH}


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusSpec:
    n_train: int = 200
    n_test: int = 50
    height: int = 32
    width: int = 32
    n_classes: int = N_CLASSES
    min_objects: int = 1
    max_objects: int = 3
    noise_sigma: float = 0.1
    seed: int = 0
    stages: int = 3

    def validate(self):
        if self.n_train < 1 or self.n_test < 1:
            raise CorpusError("sample counts must be >= 1")
        f = 2 ** self.stages
        if self.height % f or self.width % f:
            raise CorpusError(f"H, W = {self.height}, {self.width} must be divisible by 2^{self.stages} = {f}")
        if self.n_classes != N_CLASSES:
            raise CorpusError(f"the generator renders exactly {N_CLASSES} classes, got {self.n_classes}")
        if not 1 <= self.min_objects <= self.max_objects:
            raise CorpusError("need 1 <= min_objects <= max_objects")
        if self.noise_sigma < 0:
            raise CorpusError("noise_sigma must be >= 0")
        return self


@dataclass
class ObjectRecord:
    cls: int
    shape: str
    # rect: (top, left, bottom, right), exclusive end; disc: (cy, cx, radius)
    geometry: tuple
    visibility: str

    def mask(self, h, w):
        yy, xx = np.mgrid[0:h, 0:w]
        if self.shape == "rect":
            t, l, b, r = self.geometry
            return (yy >= t) & (yy < b) & (xx >= l) & (xx < r)
        cy, cx, rad = self.geometry
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= rad ** 2


@dataclass
class BimodalSample:
    rgb: np.ndarray
    thermal: np.ndarray
    label: np.ndarray
    meta: list = field(default_factory=list)


@dataclass
class Corpus:
    spec: CorpusSpec
    train: list
    test: list

    def split(self, name):
        return {"train": self.train, "test": self.test}[name]


def render(label, rng=None, sigma=0.0):
    """RGB ``[3,H,W]`` and thermal ``[1,H,W]`` images for a label mask."""
    rgb = RGB_COLORS[label].transpose(2, 0, 1).copy()
    th = THERMAL_LEVELS[label][None].copy()
    if sigma > 0:
        rgb += rng.normal(0.0, sigma, rgb.shape)
        th += rng.normal(0.0, sigma, th.shape)
    return np.clip(rgb, 0.0, 1.0), np.clip(th, 0.0, 1.0)


def _sample_object(rng, h, w):
    cls = int(rng.integers(1, N_CLASSES))
    if rng.random() < 0.5:
        oh, ow = (int(v) for v in rng.integers(max(h // 6, 2), max(h // 2, 3), size=2))
        top = int(rng.integers(0, h - oh + 1))
        left = int(rng.integers(0, w - ow + 1))
        return ObjectRecord(cls, "rect", (top, left, top + oh, left + ow), VISIBILITY[cls].value)
    rad = int(rng.integers(max(h // 10, 2), max(h // 4, 3)))
    cy = int(rng.integers(rad, h - rad))
    cx = int(rng.integers(rad, w - rad))
    return ObjectRecord(cls, "disc", (cy, cx, rad), VISIBILITY[cls].value)


def generate_sample(rng, spec):
    h, w = spec.height, spec.width
    label = np.zeros((h, w), dtype=np.int64)
    meta = []
    for _ in range(int(rng.integers(spec.min_objects, spec.max_objects + 1))):
        obj = _sample_object(rng, h, w)
        label[obj.mask(h, w)] = obj.cls  # later objects win
        meta.append(obj)
    rgb, th = render(label, rng, spec.noise_sigma)
    return BimodalSample(rgb, th, label, meta)


def generate(spec=None):
    spec = (spec or CorpusSpec()).validate()
    rng = np.random.default_rng(spec.seed)
    train = [generate_sample(rng, spec) for _ in range(spec.n_train)]
    test = [generate_sample(rng, spec) for _ in range(spec.n_test)]
    return Corpus(spec, train, test)


def owner_map(sample):
    """Index of the meta object that owns each pixel (-1 for background)."""
    h, w = sample.label.shape
    own = np.full((h, w), -1, dtype=np.int64)
    for i, obj in enumerate(sample.meta):
        own[obj.mask(h, w)] = i
    return own


# -- missing-modality simulation -------------------------------------------------

class DropMode(str, Enum):
    ZERO = "ZERO"
    NOISE = "NOISE"


def drop_modality(sample, which, mode=DropMode.ZERO, seed=0):
    """Replace one modality by zeros (signal loss) or U[0,1] noise (corruption)."""
    mode = DropMode(mode)
    if which not in ("rgb", "t"):
        raise ValueError(f"unknown modality {which!r}")
    img = sample.rgb if which == "rgb" else sample.thermal
    if mode is DropMode.ZERO:
        new = np.zeros_like(img)
    else:
        new = np.random.default_rng(seed).random(img.shape)
    if which == "rgb":
        return BimodalSample(new, sample.thermal, sample.label, sample.meta)
    return BimodalSample(sample.rgb, new, sample.label, sample.meta)


# -- container ---------------------------------------------------------------------

CORPUS_MAGIC = b"RTFC"
CORPUS_VERSION = 1


def _pack_blob(raw):
    return struct.pack("<I", len(raw)) + raw


def encode_corpus(corpus):
    spec = asdict(corpus.spec)
    parts = [CORPUS_MAGIC, struct.pack("<H", CORPUS_VERSION), _pack_blob(json.dumps(spec, sort_keys=True).encode())]
    for split in (corpus.train, corpus.test):
        for s in split:
            parts.append(s.rgb.astype("<f8").tobytes())
            parts.append(s.thermal.astype("<f8").tobytes())
            parts.append(s.label.astype("<u1").tobytes())
            meta = [asdict(m) for m in s.meta]
            parts.append(_pack_blob(json.dumps(meta, sort_keys=True).encode()))
    return b"".join(parts)


class _Cursor:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CorpusError(f"corpus file truncated at byte offset {self.pos} (wanted {n} bytes, {len(self.buf) - self.pos} left)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def blob(self):
        (n,) = struct.unpack("<I", self.take(4))
        return self.take(n)


def decode_corpus(buf, expect_classes=None):
    c = _Cursor(buf)
    if c.take(4) != CORPUS_MAGIC:
        raise CorpusError("not a corpus file (bad magic)")
    (version,) = struct.unpack("<H", c.take(2))
    if version != CORPUS_VERSION:
        raise CorpusError(f"corpus version {version} unsupported (expected {CORPUS_VERSION})")
    raw = json.loads(c.blob())
    spec = CorpusSpec(**raw)
    if expect_classes is not None and spec.n_classes != expect_classes:
        raise CorpusError(f"corpus has {spec.n_classes} classes, expected {expect_classes}")
    h, w = spec.height, spec.width
    splits = []
    for count in (spec.n_train, spec.n_test):
        items = []
        for _ in range(count):
            rgb = np.frombuffer(c.take(8 * 3 * h * w), "<f8").reshape(3, h, w).astype(np.float64)
            th = np.frombuffer(c.take(8 * h * w), "<f8").reshape(1, h, w).astype(np.float64)
            label = np.frombuffer(c.take(h * w), "<u1").reshape(h, w).astype(np.int64)
            meta = [ObjectRecord(m["cls"], m["shape"], tuple(m["geometry"]), m["visibility"]) for m in json.loads(c.blob())]
            items.append(BimodalSample(rgb, th, label, meta))
        splits.append(items)
    if c.pos != len(buf):
        raise CorpusError(f"{len(buf) - c.pos} trailing bytes after offset {c.pos}")
    return Corpus(spec, *splits)


def save_corpus(path, corpus):
    with open(path, "wb") as fh:
        fh.write(encode_corpus(corpus))


def load_corpus(path, expect_classes=None):
    with open(path, "rb") as fh:
        return decode_corpus(fh.read(), expect_classes)


def stack(samples):
    """Batch arrays ``(rgb[N,3,H,W], thermal[N,1,H,W], label[N,H,W])``."""
    return (
        np.stack([s.rgb for s in samples]),
        np.stack([s.thermal for s in samples]),
        np.stack([s.label for s in samples]),
    )
