# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the counter RNG and the stable row argsort.

Integer arithmetic mirrors ``_kernels_py`` exactly; see that module for the
reference semantics.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, log1p, cos, sin, M_PI
from libc.stdint cimport uint64_t, int64_t
from libc.stdlib cimport malloc, free

cnp.import_array()

cdef uint64_t GOLDEN = 0x9E3779B97F4A7C15ULL
cdef double INV_2_53 = 1.0 / 9007199254740992.0


cdef inline uint64_t mix64(uint64_t z) nogil:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL
    return z ^ (z >> 31)


cdef inline double uniform_at(uint64_t key, uint64_t counter) nogil:
    return <double>(mix64(key + counter * GOLDEN) >> 11) * INV_2_53


def uniform_stream(key, Py_ssize_t n):
    cdef uint64_t k = <uint64_t>key
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(n, dtype=np.float64)
    cdef double[::1] view = out
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            view[i] = uniform_at(k, <uint64_t>(i + 1))
    return out


def gaussian_fill(key, Py_ssize_t n):
    cdef uint64_t k = <uint64_t>key
    cdef Py_ssize_t pairs = (n + 1) // 2
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(2 * pairs, dtype=np.float64)
    cdef double[::1] view = out
    cdef Py_ssize_t j
    cdef double u1, u2, r, theta
    with nogil:
        for j in range(pairs):
            u1 = uniform_at(k, <uint64_t>(2 * j + 1))
            u2 = uniform_at(k, <uint64_t>(2 * j + 2))
            r = sqrt(-2.0 * log1p(-u1))
            theta = 2.0 * M_PI * u2
            view[2 * j] = r * cos(theta)
            view[2 * j + 1] = r * sin(theta)
    return out[:n]


cdef void merge_sort(const double* v, int64_t* idx, int64_t* tmp, Py_ssize_t n) nogil:
    # bottom-up merge sort on indices; "<=" on the left run keeps it stable
    cdef Py_ssize_t width = 1
    cdef Py_ssize_t lo, mid, hi, i, j, k
    cdef int64_t* src = idx
    cdef int64_t* dst = tmp
    cdef int64_t* swap
    while width < n:
        lo = 0
        while lo < n:
            mid = lo + width
            if mid > n:
                mid = n
            hi = lo + 2 * width
            if hi > n:
                hi = n
            i = lo
            j = mid
            k = lo
            while i < mid and j < hi:
                if v[src[i]] <= v[src[j]]:
                    dst[k] = src[i]
                    i += 1
                else:
                    dst[k] = src[j]
                    j += 1
                k += 1
            while i < mid:
                dst[k] = src[i]
                i += 1
                k += 1
            while j < hi:
                dst[k] = src[j]
                j += 1
                k += 1
            lo = hi
        swap = src
        src = dst
        dst = swap
        width *= 2
    if src != idx:
        for i in range(n):
            idx[i] = src[i]


def stable_argsort_rows(values):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] v = np.ascontiguousarray(values, dtype=np.float64)
    cdef Py_ssize_t m = v.shape[0]
    cdef Py_ssize_t n = v.shape[1]
    cdef cnp.ndarray[cnp.int64_t, ndim=2] out = np.empty((m, n), dtype=np.int64)
    cdef double[:, ::1] vv = v
    cdef int64_t[:, ::1] ov = out
    cdef int64_t* tmp
    cdef Py_ssize_t r, i
    if n == 0:
        return out
    tmp = <int64_t*>malloc(n * sizeof(int64_t))
    if tmp == NULL:
        raise MemoryError()
    try:
        with nogil:
            for r in range(m):
                for i in range(n):
                    ov[r, i] = i
                merge_sort(&vv[r, 0], &ov[r, 0], tmp, n)
    finally:
        free(tmp)
    return out
