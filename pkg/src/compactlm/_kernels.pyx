# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: counter-mode projection sampling and the fused Adam moment update.

Mirrors ``_fallback`` exactly.  Build with ``-ffp-contract=off`` so that no
fused multiply-add changes the rounding of the Adam arithmetic.
"""

import numpy as np

cimport cython
from cython cimport floating
from libc.math cimport cos, log, sin, sqrt
from libc.stdint cimport uint64_t

cdef uint64_t GOLDEN = 0x9E3779B97F4A7C15ULL
cdef uint64_t MIX1 = 0xBF58476D1CE4E5B9ULL
cdef uint64_t MIX2 = 0x94D049BB133111EBULL
cdef double INV_2_53 = 1.0 / 9007199254740992.0
cdef double TWO_PI = 6.283185307179586
cdef uint64_t JL_PLUS = 1501199875790165ULL
cdef uint64_t JL_MINUS = 3002399751580330ULL


cdef inline uint64_t _bits(uint64_t key, uint64_t i) nogil:
    cdef uint64_t z = key + (i + 1) * GOLDEN
    z = (z ^ (z >> 30)) * MIX1
    z = (z ^ (z >> 27)) * MIX2
    return z ^ (z >> 31)


def counter_bits(uint64_t key, Py_ssize_t start, Py_ssize_t count):
    out = np.empty(count, dtype=np.uint64)
    cdef uint64_t[::1] o = out
    cdef Py_ssize_t i
    with nogil:
        for i in range(count):
            o[i] = _bits(key, <uint64_t>(start + i))
    return out


def gaussian_fill(uint64_t key, Py_ssize_t n, Py_ssize_t r, double scale):
    cdef Py_ssize_t count = n * r
    out = np.empty(count, dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t p, i
    cdef Py_ssize_t pairs = (count + 1) // 2
    cdef double u1, u2, radius, theta
    with nogil:
        for p in range(pairs):
            u1 = <double>((_bits(key, 2 * p) >> 11) + 1) * INV_2_53
            u2 = <double>(_bits(key, 2 * p + 1) >> 11) * INV_2_53
            radius = sqrt(-2.0 * log(u1))
            theta = TWO_PI * u2
            i = 2 * p
            o[i] = (radius * cos(theta)) * scale
            if i + 1 < count:
                o[i + 1] = (radius * sin(theta)) * scale
    return out.reshape(n, r)


def sparse_jl_fill(uint64_t key, Py_ssize_t n, Py_ssize_t r, double a):
    cdef Py_ssize_t count = n * r
    out = np.empty(count, dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t i
    cdef uint64_t h
    with nogil:
        for i in range(count):
            h = _bits(key, i) >> 11
            if h < JL_PLUS:
                o[i] = a
            elif h < JL_MINUS:
                o[i] = -a
            else:
                o[i] = 0.0
    return out.reshape(n, r)


cdef void _adam_loop(floating[::1] m, floating[::1] v, const floating[::1] g,
                     floating b1, floating c1, floating b2, floating c2,
                     floating bc1, floating bc2, floating eps,
                     floating[::1] out) noexcept nogil:
    cdef Py_ssize_t i
    cdef floating gi, mi, vi, denom
    for i in range(m.shape[0]):
        gi = g[i]
        mi = m[i] * b1
        mi = mi + c1 * gi
        vi = v[i] * b2
        vi = vi + c2 * (gi * gi)
        m[i] = mi
        v[i] = vi
        # round the root to the working precision before adding eps, as numpy does
        denom = <floating>sqrt(vi / bc2)
        denom = denom + eps
        out[i] = (mi / bc1) / denom


def adam_direction(M, V, G, double beta1, double beta2, double bc1, double bc2, double eps):
    if not (M.flags.c_contiguous and V.flags.c_contiguous):
        raise ValueError("moment buffers must be C-contiguous")
    G = np.ascontiguousarray(G, dtype=M.dtype)
    out = np.empty_like(M)
    if M.dtype == np.float32:
        _adam_loop[float](M.reshape(-1), V.reshape(-1), G.reshape(-1),
                          <float>beta1, <float>(1.0 - beta1), <float>beta2, <float>(1.0 - beta2),
                          <float>bc1, <float>bc2, <float>eps, out.reshape(-1))
    elif M.dtype == np.float64:
        _adam_loop[double](M.reshape(-1), V.reshape(-1), G.reshape(-1),
                           beta1, 1.0 - beta1, beta2, 1.0 - beta2,
                           bc1, bc2, eps, out.reshape(-1))
    else:
        raise TypeError(f"unsupported dtype {M.dtype}")
    return out
