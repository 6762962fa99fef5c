# cython: language_level=3, boundscheck=False, wraparound=False, initializedcheck=False, cdivision=True
"""Compiled linear-recurrence kernels; same contract as ``_scan_py``."""
import numpy as np

from cython cimport floating
from libc.math cimport exp, fabs


def scan_forward(const floating[:, :, :, ::1] a, const floating[:, :, :, ::1] b,
                 const floating[:, :, ::1] c, const floating[:, :, ::1] h0):
    cdef Py_ssize_t M = a.shape[0], L = a.shape[1], D = a.shape[2], N = a.shape[3]
    cdef Py_ssize_t m, t, d, n
    cdef floating h, acc
    dtype = np.float32 if floating is float else np.float64
    hs_arr = np.empty((M, L, D, N), dtype=dtype)
    y_arr = np.empty((M, L, D), dtype=dtype)
    cdef floating[:, :, :, ::1] hs = hs_arr
    cdef floating[:, :, ::1] y = y_arr
    with nogil:
        for m in range(M):
            for t in range(L):
                for d in range(D):
                    acc = 0
                    for n in range(N):
                        if t == 0:
                            h = a[m, t, d, n] * h0[m, d, n] + b[m, t, d, n]
                        else:
                            h = a[m, t, d, n] * hs[m, t - 1, d, n] + b[m, t, d, n]
                        hs[m, t, d, n] = h
                        acc = acc + c[m, t, n] * h
                    y[m, t, d] = acc
    return y_arr, hs_arr


def scan_backward(const floating[:, :, :, ::1] a, const floating[:, :, ::1] c,
                  const floating[:, :, :, ::1] hs, const floating[:, :, ::1] h0,
                  const floating[:, :, ::1] gy):
    cdef Py_ssize_t M = a.shape[0], L = a.shape[1], D = a.shape[2], N = a.shape[3]
    cdef Py_ssize_t m, t, d, n
    cdef floating g, prev, acc
    dtype = np.float32 if floating is float else np.float64
    ga_arr = np.empty((M, L, D, N), dtype=dtype)
    gb_arr = np.empty((M, L, D, N), dtype=dtype)
    gc_arr = np.empty((M, L, N), dtype=dtype)
    gh_arr = np.zeros((M, D, N), dtype=dtype)
    cdef floating[:, :, :, ::1] ga = ga_arr
    cdef floating[:, :, :, ::1] gb = gb_arr
    cdef floating[:, :, ::1] gc = gc_arr
    cdef floating[:, :, ::1] gh = gh_arr
    with nogil:
        for m in range(M):
            for t in range(L - 1, -1, -1):
                for d in range(D):
                    for n in range(N):
                        g = gh[m, d, n] + gy[m, t, d] * c[m, t, n]
                        gb[m, t, d, n] = g
                        if t == 0:
                            prev = h0[m, d, n]
                        else:
                            prev = hs[m, t - 1, d, n]
                        ga[m, t, d, n] = g * prev
                        gh[m, d, n] = g * a[m, t, d, n]
            for t in range(L):
                for n in range(N):
                    acc = 0
                    for d in range(D):
                        acc = acc + gy[m, t, d] * hs[m, t, d, n]
                    gc[m, t, n] = acc
    return ga_arr, gb_arr, gc_arr, gh_arr


cdef double TAYLOR_THRESHOLD = 1e-6


cdef inline double _dphi_da_scaled(double z, double ez) nogil:
    # (z e^z - (e^z - 1)) / z^2, by series near zero where it cancels
    if fabs(z) < 1e-2:
        return 0.5 + z / 3.0 + z * z / 8.0 + z * z * z / 30.0
    return (z * ez - (ez - 1.0)) / (z * z)


def selective_forward(const floating[:, :, ::1] x, const floating[:, :, ::1] delta,
                      const floating[:, :, ::1] A, const floating[:, :, ::1] B,
                      const floating[:, :, ::1] C):
    """Returns y (M, L, D) and the cache (hs, a_bar, phi), each (M, L, D, N)."""
    cdef Py_ssize_t M = x.shape[0], L = x.shape[1], D = x.shape[2], N = A.shape[2]
    cdef Py_ssize_t KA = A.shape[0]
    cdef Py_ssize_t m, k, t, d, n
    cdef double z, a, ez, dl, phi, xd, acc, prev
    cdef floating h
    dtype = np.float32 if floating is float else np.float64
    hs_arr = np.empty((M, L, D, N), dtype=dtype)
    abar_arr = np.empty((M, L, D, N), dtype=dtype)
    phi_arr = np.empty((M, L, D, N), dtype=dtype)
    y_arr = np.empty((M, L, D), dtype=dtype)
    cdef floating[:, :, :, ::1] hs = hs_arr
    cdef floating[:, :, :, ::1] abar = abar_arr
    cdef floating[:, :, :, ::1] phis = phi_arr
    cdef floating[:, :, ::1] y = y_arr
    with nogil:
        for m in range(M):
            k = m % KA
            for t in range(L):
                for d in range(D):
                    dl = delta[m, t, d]
                    xd = x[m, t, d]
                    acc = 0
                    for n in range(N):
                        a = A[k, d, n]
                        z = dl * a
                        ez = exp(z)
                        if fabs(z) < TAYLOR_THRESHOLD:
                            phi = dl
                        else:
                            phi = (ez - 1.0) / a
                        prev = hs[m, t - 1, d, n] if t > 0 else 0.0
                        h = <floating>(ez * prev + phi * B[m, t, n] * xd)
                        hs[m, t, d, n] = h
                        abar[m, t, d, n] = <floating>ez
                        phis[m, t, d, n] = <floating>phi
                        acc = acc + C[m, t, n] * h
                    y[m, t, d] = <floating>acc
    return y_arr, (hs_arr, abar_arr, phi_arr)


def selective_backward(const floating[:, :, ::1] x, const floating[:, :, ::1] delta,
                       const floating[:, :, ::1] A, const floating[:, :, ::1] B,
                       const floating[:, :, ::1] C, const floating[:, :, :, ::1] hs,
                       const floating[:, :, :, ::1] abar, const floating[:, :, :, ::1] phis,
                       const floating[:, :, ::1] gy):
    cdef Py_ssize_t M = x.shape[0], L = x.shape[1], D = x.shape[2], N = A.shape[2]
    cdef Py_ssize_t KA = A.shape[0]
    cdef Py_ssize_t m, k, t, d, n
    cdef double z, a, ab, dl, phi, dphi_ddl, dphi_da, xd, gyd, g, hprev, gz, gphi, bn
    cdef double acc_x, acc_dl, acc
    dtype = np.float32 if floating is float else np.float64
    gx_arr = np.empty((M, L, D), dtype=dtype)
    gdl_arr = np.empty((M, L, D), dtype=dtype)
    ga_arr = np.zeros((KA, D, N), dtype=dtype)
    gb_arr = np.zeros((M, L, N), dtype=dtype)
    gc_arr = np.empty((M, L, N), dtype=dtype)
    gh_arr = np.empty((D, N), dtype=dtype)
    cdef floating[:, :, ::1] gx = gx_arr
    cdef floating[:, :, ::1] gdl = gdl_arr
    cdef floating[:, :, ::1] ga = ga_arr
    cdef floating[:, :, ::1] gb = gb_arr
    cdef floating[:, :, ::1] gc = gc_arr
    cdef floating[:, ::1] gh = gh_arr
    with nogil:
        for m in range(M):
            k = m % KA
            gh[:, :] = 0
            for t in range(L - 1, -1, -1):
                for d in range(D):
                    dl = delta[m, t, d]
                    xd = x[m, t, d]
                    gyd = gy[m, t, d]
                    acc_x = 0
                    acc_dl = 0
                    for n in range(N):
                        a = A[k, d, n]
                        bn = B[m, t, n]
                        z = dl * a
                        ab = abar[m, t, d, n]
                        phi = phis[m, t, d, n]
                        if fabs(z) < TAYLOR_THRESHOLD:
                            dphi_ddl = 1
                            dphi_da = 0
                        else:
                            dphi_ddl = ab
                            dphi_da = dl * dl * _dphi_da_scaled(z, ab)
                        g = gh[d, n] + gyd * C[m, t, n]
                        hprev = hs[m, t - 1, d, n] if t > 0 else 0.0
                        gz = g * hprev * ab
                        gphi = g * bn * xd
                        acc_dl = acc_dl + gz * a + gphi * dphi_ddl
                        ga[k, d, n] += <floating>(gz * dl + gphi * dphi_da)
                        gb[m, t, n] += <floating>(g * phi * xd)
                        acc_x = acc_x + g * phi * bn
                        gh[d, n] = <floating>(g * ab)
                    gx[m, t, d] = <floating>acc_x
                    gdl[m, t, d] = <floating>acc_dl
            for t in range(L):
                for n in range(N):
                    acc = 0
                    for d in range(D):
                        acc = acc + gy[m, t, d] * hs[m, t, d, n]
                    gc[m, t, n] = <floating>acc
    return gx_arr, gdl_arr, ga_arr, gb_arr, gc_arr
