# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled convolution and pooling kernels.

Drop-in replacement for the NumPy fallback; same functions, same
semantics (first-maximum tie rule for pooling argmax).
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def conv2d_forward(double[:, :, ::1] x, double[:, :, :, ::1] w, double[::1] b):
    cdef Py_ssize_t kh = w.shape[0], kw = w.shape[1]
    cdef Py_ssize_t cin = w.shape[2], cout = w.shape[3]
    cdef Py_ssize_t oh = x.shape[0] - kh + 1, ow = x.shape[1] - kw + 1
    y_arr = np.empty((oh, ow, cout), dtype=np.float64)
    cdef double[:, :, ::1] y = y_arr
    cdef Py_ssize_t i, j, m, p, q, c
    cdef double acc
    with nogil:
        for i in range(oh):
            for j in range(ow):
                for m in range(cout):
                    acc = b[m]
                    for p in range(kh):
                        for q in range(kw):
                            for c in range(cin):
                                acc += x[i + p, j + q, c] * w[p, q, c, m]
                    y[i, j, m] = acc
    return y_arr


def conv2d_backward(double[:, :, ::1] x, double[:, :, :, ::1] w,
                    double[:, :, ::1] dy):
    cdef Py_ssize_t kh = w.shape[0], kw = w.shape[1]
    cdef Py_ssize_t cin = w.shape[2], cout = w.shape[3]
    cdef Py_ssize_t oh = dy.shape[0], ow = dy.shape[1]
    dx_arr = np.zeros((x.shape[0], x.shape[1], x.shape[2]), dtype=np.float64)
    dw_arr = np.zeros((kh, kw, cin, cout), dtype=np.float64)
    db_arr = np.zeros(cout, dtype=np.float64)
    cdef double[:, :, ::1] dx = dx_arr
    cdef double[:, :, :, ::1] dw = dw_arr
    cdef double[::1] db = db_arr
    cdef Py_ssize_t i, j, m, p, q, c
    cdef double g
    with nogil:
        for i in range(oh):
            for j in range(ow):
                for m in range(cout):
                    g = dy[i, j, m]
                    db[m] += g
                    for p in range(kh):
                        for q in range(kw):
                            for c in range(cin):
                                dw[p, q, c, m] += x[i + p, j + q, c] * g
                                dx[i + p, j + q, c] += w[p, q, c, m] * g
    return dx_arr, dw_arr, db_arr


def maxpool_forward(double[:, :, ::1] x, Py_ssize_t size):
    cdef Py_ssize_t h = x.shape[0], w = x.shape[1], c = x.shape[2]
    cdef Py_ssize_t oh = h // size, ow = w // size
    y_arr = np.empty((oh, ow, c), dtype=np.float64)
    arg_arr = np.empty((oh, ow, c), dtype=np.int64)
    cdef double[:, :, ::1] y = y_arr
    cdef long long[:, :, ::1] arg = arg_arr
    cdef Py_ssize_t i, j, k, p, q
    cdef double best, v
    cdef Py_ssize_t besti
    with nogil:
        for i in range(oh):
            for j in range(ow):
                for k in range(c):
                    best = x[i * size, j * size, k]
                    besti = 0
                    for p in range(size):
                        for q in range(size):
                            v = x[i * size + p, j * size + q, k]
                            if v > best:
                                best = v
                                besti = p * size + q
                    y[i, j, k] = best
                    arg[i, j, k] = besti
    return y_arr, arg_arr


def maxpool_backward(long long[:, :, ::1] arg, double[:, :, ::1] dy,
                     Py_ssize_t h, Py_ssize_t w, Py_ssize_t size):
    cdef Py_ssize_t oh = dy.shape[0], ow = dy.shape[1], c = dy.shape[2]
    dx_arr = np.zeros((h, w, c), dtype=np.float64)
    cdef double[:, :, ::1] dx = dx_arr
    cdef Py_ssize_t i, j, k
    cdef long long a
    with nogil:
        for i in range(oh):
            for j in range(ow):
                for k in range(c):
                    a = arg[i, j, k]
                    dx[i * size + a // size, j * size + a % size, k] += dy[i, j, k]
    return dx_arr
