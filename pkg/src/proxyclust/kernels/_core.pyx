# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled mask-pipeline kernels (EM mixture fit, bilinear resize).

Algorithmic twin of _fallback.py; the wrapper in __init__.py selects
whichever backend is available at import.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, floor, log

cnp.import_array()

cdef double PI = 3.141592653589793238462643383279502884


def gmm2_fit(values, int max_iter, double tol, double var_floor):
    """EM fit of a two-component 1-D Gaussian mixture (see _fallback)."""
    cdef cnp.ndarray[cnp.float64_t, ndim=1] v = \
        np.ascontiguousarray(values, dtype=np.float64).ravel()
    cdef cnp.ndarray[cnp.float64_t, ndim=2] resp = np.empty((v.shape[0], 2))
    cdef Py_ssize_t n = v.shape[0]
    cdef Py_ssize_t i, k, it
    cdef double[2] mu
    cdef double[2] var
    cdef double[2] w
    cdef double[2] logw
    cdef double[2] lognorm
    cdef double[2] nk
    cdef double[2] sk
    cdef double lp0, lp1, m, lse, ll, prev, d0, d1, q25, q75, var0, tmp, acc

    q25 = np.quantile(v, 0.25)
    q75 = np.quantile(v, 0.75)
    if q25 == q75:
        q25 = v.min()
        q75 = v.max()
    mu[0] = q25
    mu[1] = q75
    var0 = np.var(v) / 4.0
    if var0 < var_floor:
        var0 = var_floor
    var[0] = var0
    var[1] = var0
    w[0] = 0.5
    w[1] = 0.5

    trace = []
    prev = -np.inf
    for it in range(max_iter):
        # E-step in log space
        for k in range(2):
            logw[k] = log(w[k]) if w[k] > 0.0 else -1e300
            lognorm[k] = -0.5 * log(2.0 * PI * var[k])
        ll = 0.0
        nk[0] = nk[1] = 0.0
        sk[0] = sk[1] = 0.0
        for i in range(n):
            d0 = v[i] - mu[0]
            d1 = v[i] - mu[1]
            lp0 = logw[0] + lognorm[0] - d0 * d0 / (2.0 * var[0])
            lp1 = logw[1] + lognorm[1] - d1 * d1 / (2.0 * var[1])
            m = lp0 if lp0 > lp1 else lp1
            lse = m + log(exp(lp0 - m) + exp(lp1 - m))
            ll += lse
            resp[i, 0] = exp(lp0 - lse)
            resp[i, 1] = exp(lp1 - lse)
            nk[0] += resp[i, 0]
            nk[1] += resp[i, 1]
            sk[0] += resp[i, 0] * v[i]
            sk[1] += resp[i, 1] * v[i]
        trace.append(ll)

        # M-step; variance uses the freshly updated mean
        for k in range(2):
            if nk[k] > 1e-12:
                w[k] = nk[k] / n
                mu[k] = sk[k] / nk[k]
                acc = 0.0
                for i in range(n):
                    d0 = v[i] - mu[k]
                    acc += resp[i, k] * d0 * d0
                var[k] = acc / nk[k]
                if var[k] < var_floor:
                    var[k] = var_floor
            else:
                w[k] = 0.0  # dead component keeps its parameters

        if ll - prev < tol:
            break
        prev = ll

    if mu[0] > mu[1]:
        tmp = mu[0]; mu[0] = mu[1]; mu[1] = tmp
        tmp = var[0]; var[0] = var[1]; var[1] = tmp
        tmp = w[0]; w[0] = w[1]; w[1] = tmp
    return (
        np.array([w[0], w[1]]),
        np.array([mu[0], mu[1]]),
        np.array([var[0], var[1]]),
        np.asarray(trace, dtype=np.float64),
    )


def resize_bilinear(src, int out_h, int out_w):
    """Bilinear resize of a 2-D map, align-corners-disabled semantics."""
    cdef cnp.ndarray[cnp.float64_t, ndim=2] s = \
        np.ascontiguousarray(src, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((out_h, out_w))
    cdef Py_ssize_t in_h = s.shape[0]
    cdef Py_ssize_t in_w = s.shape[1]
    cdef Py_ssize_t i, j, y0, y1, x0, x1
    cdef double x, y, fy, fx, top, bot, sy, sx

    sy = in_h / <double>out_h
    sx = in_w / <double>out_w
    for i in range(out_h):
        if in_h == 1:
            y0 = 0
            y1 = 0
            fy = 0.0
        else:
            y = (i + 0.5) * sy - 0.5
            if y < 0.0:
                y = 0.0
            elif y > in_h - 1.0:
                y = in_h - 1.0
            y0 = <Py_ssize_t>floor(y)
            if y0 > in_h - 2:
                y0 = in_h - 2
            y1 = y0 + 1
            fy = y - y0
        for j in range(out_w):
            if in_w == 1:
                x0 = 0
                x1 = 0
                fx = 0.0
            else:
                x = (j + 0.5) * sx - 0.5
                if x < 0.0:
                    x = 0.0
                elif x > in_w - 1.0:
                    x = in_w - 1.0
                x0 = <Py_ssize_t>floor(x)
                if x0 > in_w - 2:
                    x0 = in_w - 2
                x1 = x0 + 1
                fx = x - x0
            top = s[y0, x0] + (s[y0, x1] - s[y0, x0]) * fx
            bot = s[y1, x0] + (s[y1, x1] - s[y1, x0]) * fx
            out[i, j] = top + (bot - top) * fy
    return out
