# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled valid 3D convolution kernels (single sample, channels first).

Plain direct loops; the innermost axis is contiguous for input, output and
gradient arrays so the C compiler can vectorize it.  All loops run single
threaded: summation order is fixed, results are reproducible bit-for-bit.
"""

import numpy as np

cimport cython


ctypedef fused real:
    float
    double


def conv3d_forward(real[:, :, :, ::1] x, real[:, :, :, :, ::1] w, real[::1] b):
    cdef Py_ssize_t co = w.shape[0], ci = w.shape[1]
    cdef Py_ssize_t kx = w.shape[2], ky = w.shape[3], kz = w.shape[4]
    cdef Py_ssize_t ox = x.shape[1] - kx + 1
    cdef Py_ssize_t oy = x.shape[2] - ky + 1
    cdef Py_ssize_t oz = x.shape[3] - kz + 1

    if real is float:
        out_np = np.empty((co, ox, oy, oz), dtype=np.float32)
    else:
        out_np = np.empty((co, ox, oy, oz), dtype=np.float64)
    cdef real[:, :, :, ::1] out = out_np

    cdef Py_ssize_t o, c, i, j, k, xx, yy, zz
    cdef real wv, bv
    with nogil:
        for o in range(co):
            bv = b[o]
            for xx in range(ox):
                for yy in range(oy):
                    for zz in range(oz):
                        out[o, xx, yy, zz] = bv
            for c in range(ci):
                for i in range(kx):
                    for j in range(ky):
                        for k in range(kz):
                            wv = w[o, c, i, j, k]
                            for xx in range(ox):
                                for yy in range(oy):
                                    for zz in range(oz):
                                        out[o, xx, yy, zz] += wv * x[c, xx + i, yy + j, zz + k]
    return out_np


def conv3d_backward(real[:, :, :, ::1] x, real[:, :, :, :, ::1] w, real[:, :, :, ::1] gy):
    cdef Py_ssize_t co = w.shape[0], ci = w.shape[1]
    cdef Py_ssize_t kx = w.shape[2], ky = w.shape[3], kz = w.shape[4]
    cdef Py_ssize_t ox = gy.shape[1], oy = gy.shape[2], oz = gy.shape[3]

    if real is float:
        gx_np = np.zeros((x.shape[0], x.shape[1], x.shape[2], x.shape[3]), dtype=np.float32)
        gw_np = np.empty((co, ci, kx, ky, kz), dtype=np.float32)
        gb_np = np.zeros(co, dtype=np.float32)
    else:
        gx_np = np.zeros((x.shape[0], x.shape[1], x.shape[2], x.shape[3]), dtype=np.float64)
        gw_np = np.empty((co, ci, kx, ky, kz), dtype=np.float64)
        gb_np = np.zeros(co, dtype=np.float64)
    cdef real[:, :, :, ::1] gx = gx_np
    cdef real[:, :, :, :, ::1] gw = gw_np
    cdef real[::1] gb = gb_np

    cdef Py_ssize_t o, c, i, j, k, xx, yy, zz
    cdef real acc, wv, gv
    with nogil:
        for o in range(co):
            acc = 0
            for xx in range(ox):
                for yy in range(oy):
                    for zz in range(oz):
                        acc += gy[o, xx, yy, zz]
            gb[o] = acc
            for c in range(ci):
                for i in range(kx):
                    for j in range(ky):
                        for k in range(kz):
                            acc = 0
                            for xx in range(ox):
                                for yy in range(oy):
                                    for zz in range(oz):
                                        acc += gy[o, xx, yy, zz] * x[c, xx + i, yy + j, zz + k]
                            gw[o, c, i, j, k] = acc
        for o in range(co):
            for c in range(ci):
                for i in range(kx):
                    for j in range(ky):
                        for k in range(kz):
                            wv = w[o, c, i, j, k]
                            for xx in range(ox):
                                for yy in range(oy):
                                    for zz in range(oz):
                                        gx[c, xx + i, yy + j, zz + k] += wv * gy[o, xx, yy, zz]
    return gx_np, gw_np, gb_np
