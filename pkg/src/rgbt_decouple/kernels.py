"""Hot-kernel dispatch.

The compiled ``_ckernels`` extension is used when it is importable; otherwise
the numpy fallback in ``_pykernels`` is selected. Setting the environment
variable ``RGBT_DECOUPLE_PURE=1`` forces the fallback.
"""

import os

import numpy as np

from . import _pykernels

python_backend = _pykernels
compiled_backend = None

if os.environ.get("RGBT_DECOUPLE_PURE") != "1":
    try:
        from . import _ckernels as compiled_backend
    except ImportError:  # pragma: no cover - depends on build
        compiled_backend = None

_active = compiled_backend if compiled_backend is not None else python_backend
BACKEND = "compiled" if _active is compiled_backend else "python"


def compiled_available():
    return compiled_backend is not None


def use_backend(name):
    """Switch the active backend ("compiled" or "python"); returns the previous name."""
    global _active, BACKEND
    prev = BACKEND
    if name == "compiled":
        if compiled_backend is None:
            raise RuntimeError("compiled kernels are not built; run `pip install -e .`")
        _active = compiled_backend
    elif name == "python":
        _active = python_backend
    else:
        raise ValueError(f"unknown backend {name!r}")
    BACKEND = name
    return prev


def im2col(x, stride):
    """Gather 3x3 zero-padded patches of ``x[N,C,H,W]`` into a K-major matrix ``[C*9, N*Ho*Wo]``.

    Column index is ``(n*Ho + i)*Wo + j``; row index is ``c*9 + kh*3 + kw``.
    """
    return _active.im2col(np.ascontiguousarray(x, dtype=np.float64), int(stride))


def col2im(cols_t, shape, stride):
    """Adjoint of :func:`im2col`: scatter-add a ``[C*9, N*Ho*Wo]`` patch matrix into ``[N,C,H,W]``."""
    n, c, h, w = shape
    return _active.col2im(np.ascontiguousarray(cols_t, dtype=np.float64), n, c, h, w, int(stride))


def confusion_matrix(label, pred, k):
    """Rows index the reference class, columns the predicted class."""
    label = np.ascontiguousarray(label, dtype=np.int64).ravel()
    pred = np.ascontiguousarray(pred, dtype=np.int64).ravel()
    if label.shape != pred.shape:
        raise ValueError(f"label/pred size mismatch: {label.shape} vs {pred.shape}")
    return _active.confusion_matrix(label, pred, int(k))


def fnv1a64(data):
    """64-bit FNV-1a hash of a bytes-like object."""
    return int(_active.fnv1a64(memoryview(bytes(data))))
