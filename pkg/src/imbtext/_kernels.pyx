# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: xoshiro256** bulk draws and row-wise masked softmax."""

from libc.stdint cimport uint64_t
from libc.math cimport exp

BACKEND = "cython"

cdef double TWO_M53 = 1.0 / 9007199254740992.0


cdef inline uint64_t _rotl(uint64_t x, int k) nogil:
    return (x << k) | (x >> (64 - k))


def fill_uniform(uint64_t[::1] state, double[::1] out):
    """Fill ``out`` with doubles in [0, 1) and advance ``state`` in place."""
    cdef uint64_t s0 = state[0], s1 = state[1], s2 = state[2], s3 = state[3]
    cdef uint64_t result, t
    cdef Py_ssize_t i, n = out.shape[0]
    with nogil:
        for i in range(n):
            result = _rotl(s1 * 5, 7) * 9
            t = s1 << 17
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            s3 = _rotl(s3, 45)
            out[i] = <double>(result >> 11) * TWO_M53
    state[0] = s0
    state[1] = s1
    state[2] = s2
    state[3] = s3


def fill_u64(uint64_t[::1] state, uint64_t[::1] out):
    cdef uint64_t s0 = state[0], s1 = state[1], s2 = state[2], s3 = state[3]
    cdef uint64_t t
    cdef Py_ssize_t i, n = out.shape[0]
    with nogil:
        for i in range(n):
            out[i] = _rotl(s1 * 5, 7) * 9
            t = s1 << 17
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            s3 = _rotl(s3, 45)
    state[0] = s0
    state[1] = s1
    state[2] = s2
    state[3] = s3


def masked_softmax(const double[:, ::1] scores, const unsigned char[:, ::1] mask, double[:, ::1] out):
    """Softmax of each row over positions where mask != 0.

    Masked positions get exactly 0. The normalizer is accumulated left to
    right, so trailing masked columns never change the unmasked outputs.
    Rows with no unmasked position are left as zeros; callers check first.
    """
    cdef Py_ssize_t r, j, rows = scores.shape[0], n = scores.shape[1]
    cdef double m, total, e
    cdef bint seen
    with nogil:
        for r in range(rows):
            seen = False
            m = 0.0
            for j in range(n):
                if mask[r, j]:
                    if not seen or scores[r, j] > m:
                        m = scores[r, j]
                        seen = True
            total = 0.0
            for j in range(n):
                if mask[r, j]:
                    e = exp(scores[r, j] - m)
                    out[r, j] = e
                    total = total + e
                else:
                    out[r, j] = 0.0
            if seen:
                for j in range(n):
                    out[r, j] = out[r, j] / total
