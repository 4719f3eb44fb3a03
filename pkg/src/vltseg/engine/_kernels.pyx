# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops for the tensor engine.

Summation order is fixed: each output element accumulates ``a[i, k] * b[k, j]``
for ascending ``k`` starting from ``0.0``. Built with ``-ffp-contract=off`` so
the compiler never fuses the multiply-add; results are bitwise identical to a
naive Python triple loop. Vectorisation runs across ``j`` only, which leaves
every element's accumulation order untouched.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef void _gemm(const double* a, const double* b, double* out,
                Py_ssize_t m, Py_ssize_t kk, Py_ssize_t p) noexcept nogil:
    cdef Py_ssize_t i, k, j
    cdef double aik
    cdef const double* brow
    cdef double* orow
    for i in range(m):
        orow = out + i * p
        for k in range(kk):
            aik = a[i * kk + k]
            brow = b + k * p
            for j in range(p):
                orow[j] = orow[j] + aik * brow[j]


def matmul3(const double[:, :, ::1] a, const double[:, :, ::1] b):
    """Batched product of (n, m, k) and (n, k, p) C-contiguous arrays."""
    cdef Py_ssize_t n = a.shape[0], m = a.shape[1], kk = a.shape[2]
    cdef Py_ssize_t p = b.shape[2]
    if b.shape[0] != n or b.shape[1] != kk:
        raise ValueError("matmul3: incompatible shapes")
    out_arr = np.zeros((n, m, p), dtype=np.float64)
    if n == 0 or m == 0 or p == 0 or kk == 0:
        return out_arr
    cdef Py_ssize_t t
    cdef double[:, :, ::1] out = out_arr
    with nogil:
        for t in range(n):
            _gemm(&a[t, 0, 0], &b[t, 0, 0], &out[t, 0, 0], m, kk, p)
    return out_arr
