# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled evaluation core: piecewise-cubic evaluation with derivatives.

Mirrors gellab._core_np.ppoly_eval; selected at import time by
gellab.kernels unless GELLAB_FORCE_FALLBACK=1.
"""
import numpy as np

cimport numpy as cnp

cnp.import_array()


cdef inline Py_ssize_t _bisect(const double[::1] t, double q, Py_ssize_t n) nogil:
    # rightmost interval j with t[j] <= q, clamped to [0, n-2]
    cdef Py_ssize_t lo = 0, hi = n - 1, mid
    if q <= t[0]:
        return 0
    if q >= t[n - 1]:
        return n - 2
    while hi - lo > 1:
        mid = (lo + hi) >> 1
        if t[mid] <= q:
            lo = mid
        else:
            hi = mid
    return lo


def ppoly_eval(const double[::1] t, const double[::1] c0, const double[::1] c1,
               const double[::1] c2, const double[::1] c3, q_in, int nd=0):
    q_arr = np.ascontiguousarray(q_in, dtype=np.float64)
    cdef const double[::1] q = q_arr.ravel()
    cdef Py_ssize_t m = q.shape[0]
    cdef Py_ssize_t n = t.shape[0]
    y_arr = np.empty(m, dtype=np.float64)
    cdef double[::1] y = y_arr
    cdef double[::1] dy
    cdef double[::1] d2y
    cdef Py_ssize_t i, j
    cdef double s, a2, a3

    if nd == 0:
        with nogil:
            for i in range(m):
                j = _bisect(t, q[i], n)
                s = q[i] - t[j]
                y[i] = c0[j] + s * (c1[j] + s * (c2[j] + s * c3[j]))
        return y_arr.reshape(q_arr.shape)

    dy_arr = np.empty(m, dtype=np.float64)
    dy = dy_arr
    if nd == 1:
        with nogil:
            for i in range(m):
                j = _bisect(t, q[i], n)
                s = q[i] - t[j]
                a2 = c2[j]
                a3 = c3[j]
                y[i] = c0[j] + s * (c1[j] + s * (a2 + s * a3))
                dy[i] = c1[j] + s * (2.0 * a2 + 3.0 * s * a3)
        return y_arr.reshape(q_arr.shape), dy_arr.reshape(q_arr.shape)

    d2y_arr = np.empty(m, dtype=np.float64)
    d2y = d2y_arr
    with nogil:
        for i in range(m):
            j = _bisect(t, q[i], n)
            s = q[i] - t[j]
            a2 = c2[j]
            a3 = c3[j]
            y[i] = c0[j] + s * (c1[j] + s * (a2 + s * a3))
            dy[i] = c1[j] + s * (2.0 * a2 + 3.0 * s * a3)
            d2y[i] = 2.0 * a2 + 6.0 * s * a3
    return (y_arr.reshape(q_arr.shape), dy_arr.reshape(q_arr.shape),
            d2y_arr.reshape(q_arr.shape))
