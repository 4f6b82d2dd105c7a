"""Parameter bundle container.

Layout (all integers little-endian)::

    b"RTFD1"
    u32 group_count
    per group:  u16 name_len, name, u32 tensor_count
      per tensor: u16 name_len, name, u8 ndim, u32 dims[ndim], f64 data[prod(dims)]
    u64 FNV-1a checksum of every preceding byte
"""

import struct

import numpy as np

from .kernels import fnv1a64
from .model import GROUPS, MissingGroupError, Network, config_from_arrays

MAGIC = b"RTFD1"


class BundleError(ValueError):
    pass


class ChecksumError(BundleError):
    pass


class ParameterBundle:
    """Named parameter groups as float64 arrays, plus a log of which groups were read."""

    def __init__(self, groups):
        self._groups = {g: {n: np.asarray(a, dtype=np.float64) for n, a in grp.items()} for g, grp in groups.items()}
        self.groups_read = []

    @property
    def names(self):
        return tuple(self._groups)

    def __contains__(self, group):
        return group in self._groups

    def __getitem__(self, group):
        if group not in self._groups:
            raise MissingGroupError(group)
        if group not in self.groups_read:
            self.groups_read.append(group)
        return self._groups[group]

    def get(self, group, default=None):
        return self[group] if group in self._groups else default

    def keys(self):
        return self._groups.keys()

    def subset(self, groups):
        return ParameterBundle({g: self._groups[g] for g in groups if g in self._groups})

    def as_dict(self):
        """Every group as plain dicts (counts as reading all of them)."""
        return {g: dict(self[g]) for g in self._groups}

    def equals(self, other):
        if set(self._groups) != set(other._groups):
            return False
        for g, grp in self._groups.items():
            og = other._groups[g]
            if set(grp) != set(og):
                return False
            for n, a in grp.items():
                if a.shape != og[n].shape or a.tobytes() != og[n].tobytes():
                    return False
        return True


def _name(s):
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def encode(bundle):
    parts = [MAGIC, struct.pack("<I", len(bundle.names))]
    for g in bundle.names:
        grp = bundle._groups[g]
        parts.append(_name(g))
        parts.append(struct.pack("<I", len(grp)))
        for n in sorted(grp):
            a = np.ascontiguousarray(grp[n], dtype="<f8")
            parts.append(_name(n))
            parts.append(struct.pack("<B", a.ndim))
            parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
            parts.append(a.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<Q", fnv1a64(body))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise BundleError(f"bundle truncated at byte {self.pos} (need {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def name(self):
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")


def decode(buf, groups=None):
    if len(buf) < len(MAGIC) + 8 or buf[:len(MAGIC)] != MAGIC:
        raise BundleError("not a parameter bundle (bad magic)")
    body, (stored,) = buf[:-8], struct.unpack("<Q", buf[-8:])
    if fnv1a64(body) != stored:
        raise ChecksumError("bundle checksum mismatch")
    if groups is not None:
        unknown = [g for g in groups if g not in GROUPS]
        if unknown:
            raise BundleError(f"unknown parameter group(s): {unknown}")
    r = _Reader(body)
    r.take(len(MAGIC))
    (n_groups,) = r.unpack("<I")
    out = {}
    for _ in range(n_groups):
        g = r.name()
        (count,) = r.unpack("<I")
        grp = {}
        for _ in range(count):
            n = r.name()
            (ndim,) = r.unpack("<B")
            shape = r.unpack(f"<{ndim}I")
            size = int(np.prod(shape)) if shape else 1
            grp[n] = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
        if groups is None or g in groups:
            out[g] = grp
    if groups is not None:
        for g in groups:
            if g not in out:
                raise MissingGroupError(g)
    return ParameterBundle(out)


def save_bundle(path, bundle):
    if not isinstance(bundle, ParameterBundle):
        bundle = ParameterBundle(bundle)
    with open(path, "wb") as fh:
        fh.write(encode(bundle))


def load_bundle(path, groups=None):
    """Read a bundle; ``groups`` restricts which groups are kept (checksum covers the file)."""
    with open(path, "rb") as fh:
        return decode(fh.read(), groups)


def bundle_of(network):
    return ParameterBundle(network.arrays())


def network_from_bundle(bundle, seed=0):
    """Rebuild a :class:`Network` holding only the groups present in ``bundle``."""
    arrays = bundle.as_dict()
    return Network(config_from_arrays(arrays, seed=seed), arrays)
