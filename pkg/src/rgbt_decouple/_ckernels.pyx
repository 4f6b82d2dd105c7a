# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops for 3x3 convolution gather/scatter and confusion tallies.

``col2im`` takes the transposed column layout ``[C*9, N*Ho*Wo]`` so every
pass reads contiguously. Each input pixel receives its contributions in
(kh, kw) order starting from 0.0, the same order in which the numpy fallback
adds its shifted slices, so the two backends agree bit for bit.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef inline void _col_range(Py_ssize_t kw, Py_ssize_t w, Py_ssize_t wo, int stride,
                            Py_ssize_t* j0, Py_ssize_t* j1):
    # output columns j whose tap j*stride + kw - 1 falls inside [0, w)
    j0[0] = 1 if kw == 0 else 0
    # cdivision truncates toward zero, so a negative numerator is handled apart
    j1[0] = (w - kw) // stride if w >= kw else -1
    if j1[0] > wo - 1:
        j1[0] = wo - 1


def im2col(const double[:, :, :, ::1] x, int stride):
    """Patch matrix in K-major layout ``[C*9, N*Ho*Wo]``."""
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h - 1) // stride + 1
    cdef Py_ssize_t wo = (w - 1) // stride + 1
    cdef Py_ssize_t rows = n * ho * wo
    cols_arr = np.empty((c * 9, rows), dtype=np.float64)
    if cols_arr.size == 0:
        return cols_arr
    cdef double[:, ::1] cols = cols_arr
    cdef double* base = &cols[0, 0]
    cdef const double* xp = &x[0, 0, 0, 0]
    cdef double* dst
    cdef const double* src
    cdef Py_ssize_t b, ch, i, j, kh, kw, hi, j0, j1
    for ch in range(c):
        for kh in range(3):
            for kw in range(3):
                _col_range(kw, w, wo, stride, &j0, &j1)
                for b in range(n):
                    for i in range(ho):
                        dst = base + (ch * 9 + kh * 3 + kw) * rows + (b * ho + i) * wo
                        hi = i * stride + kh - 1
                        if hi < 0 or hi >= h:
                            for j in range(wo):
                                dst[j] = 0.0
                            continue
                        src = xp + ((b * c + ch) * h + hi) * w + kw - 1
                        for j in range(j0):
                            dst[j] = 0.0
                        for j in range(j0, j1 + 1):
                            dst[j] = src[j * stride]
                        for j in range(j1 + 1, wo):
                            dst[j] = 0.0
    return cols_arr


def col2im(const double[:, ::1] cols_t, Py_ssize_t n, Py_ssize_t c, Py_ssize_t h,
           Py_ssize_t w, int stride):
    cdef Py_ssize_t ho = (h - 1) // stride + 1
    cdef Py_ssize_t wo = (w - 1) // stride + 1
    cdef Py_ssize_t rows = n * ho * wo
    out_arr = np.zeros((n, c, h, w), dtype=np.float64)
    if out_arr.size == 0:
        return out_arr
    cdef double[:, :, :, ::1] out = out_arr
    cdef double* op = &out[0, 0, 0, 0]
    cdef const double* base = &cols_t[0, 0]
    cdef const double* src
    cdef double* dst
    cdef Py_ssize_t b, ch, i, j, kh, kw, hi, j0, j1
    for ch in range(c):
        for kh in range(3):
            for kw in range(3):
                _col_range(kw, w, wo, stride, &j0, &j1)
                for b in range(n):
                    for i in range(ho):
                        hi = i * stride + kh - 1
                        if hi < 0 or hi >= h:
                            continue
                        src = base + (ch * 9 + kh * 3 + kw) * rows + (b * ho + i) * wo
                        dst = op + ((b * c + ch) * h + hi) * w + kw - 1
                        for j in range(j0, j1 + 1):
                            dst[j * stride] += src[j]
    return out_arr


def confusion_matrix(const cnp.int64_t[::1] label, const cnp.int64_t[::1] pred, Py_ssize_t k):
    out_arr = np.zeros((k, k), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] out = out_arr
    cdef Py_ssize_t i, m = label.shape[0]
    cdef cnp.int64_t a, b
    for i in range(m):
        a = label[i]
        b = pred[i]
        if a < 0 or a >= k or b < 0 or b >= k:
            raise ValueError(f"class index out of range at flat position {i}")
        out[a, b] += 1
    return out_arr


def fnv1a64(const unsigned char[::1] data):
    cdef unsigned long long h = 0xCBF29CE484222325ULL
    cdef Py_ssize_t i
    for i in range(data.shape[0]):
        h ^= data[i]
        h *= 0x100000001B3ULL
    return h
