"""NumPy reference implementations of the mask-pipeline kernels.

These mirror the compiled versions in _core.pyx; keep the algorithms in
lockstep (same initialization, same update order) so both backends agree
to floating-point reshuffling.
"""

import math

import numpy as np


def gmm2_fit(values, max_iter, tol, var_floor):
    """EM fit of a two-component 1-D Gaussian mixture.

    Deterministic initialization from the lower/upper quartiles. Returns
    (weights[2], means[2], variances[2], loglik_trace) with means ordered
    ascending. Callers validate the input (n >= 4, nonzero spread).
    """
    v = np.ascontiguousarray(values, dtype=np.float64).ravel()
    n = v.shape[0]

    mu = np.array([np.quantile(v, 0.25), np.quantile(v, 0.75)])
    if mu[0] == mu[1]:
        mu = np.array([v.min(), v.max()], dtype=np.float64)
    var0 = max(v.var() / 4.0, var_floor)
    var = np.array([var0, var0])
    w = np.array([0.5, 0.5])

    trace = []
    prev = -np.inf
    resp = np.empty((n, 2))
    for _ in range(max_iter):
        # E-step in log space
        logp = (
            np.log(w)[None, :]
            - 0.5 * np.log(2.0 * math.pi * var)[None, :]
            - (v[:, None] - mu[None, :]) ** 2 / (2.0 * var)[None, :]
        )
        m = logp.max(axis=1)
        lse = m + np.log(np.exp(logp - m[:, None]).sum(axis=1))
        ll = float(lse.sum())
        trace.append(ll)
        resp = np.exp(logp - lse[:, None])

        # M-step
        nk = resp.sum(axis=0)
        for k in range(2):
            if nk[k] > 1e-12:
                w[k] = nk[k] / n
                mu[k] = (resp[:, k] * v).sum() / nk[k]
                var[k] = max((resp[:, k] * (v - mu[k]) ** 2).sum() / nk[k], var_floor)
            else:
                w[k] = 0.0  # dead component keeps its parameters

        if ll - prev < tol:
            break
        prev = ll

    if mu[0] > mu[1]:
        mu = mu[::-1].copy()
        var = var[::-1].copy()
        w = w[::-1].copy()
    return w, mu, var, np.asarray(trace)


def resize_bilinear(src, out_h, out_w):
    """Bilinear resize of a 2-D map, align-corners-disabled semantics.

    Source coordinates are (i + 0.5) * in/out - 0.5, clamped to the edges
    (matches the common half-pixel-centers convention).
    """
    src = np.ascontiguousarray(src, dtype=np.float64)
    in_h, in_w = src.shape

    def grid(n_out, n_in):
        if n_in == 1:
            return np.zeros(n_out, dtype=np.int64), np.zeros(n_out)
        x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        x = np.clip(x, 0.0, n_in - 1.0)
        lo = np.minimum(np.floor(x).astype(np.int64), n_in - 2)
        frac = x - lo
        return lo, frac

    y0, fy = grid(out_h, in_h)
    x0, fx = grid(out_w, in_w)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)

    a = src[np.ix_(y0, x0)]
    b = src[np.ix_(y0, x1)]
    c = src[np.ix_(y1, x0)]
    d = src[np.ix_(y1, x1)]
    top = a + (b - a) * fx[None, :]
    bot = c + (d - c) * fx[None, :]
    return top + (bot - top) * fy[:, None]
