"""Fused loops for star+diagonal attention over (N, T, d) sequence blocks.

Row 0 is a softmax over all T keys.  Row i > 0 is a two-way softmax over
keys 0 and i, parameterised by the self-minus-target logit, so its
probabilities are ``(1 - pb, pb)`` and its two logit gradients are negatives
of each other.  Compiled with numba; every row is read and written once.
"""
import numpy as np
from numba import njit


@njit(cache=True)
def star_forward(q, k, v, sc):
    N, T, d = q.shape
    out = np.empty_like(q)
    p0 = np.empty((N, T), dtype=q.dtype)
    pb = np.empty((N, T - 1), dtype=q.dtype)
    for n in range(N):
        mx = -np.inf
        for j in range(T):
            s = 0.0
            for c in range(d):
                s += q[n, 0, c] * k[n, j, c]
            p0[n, j] = s * sc
            mx = max(mx, p0[n, j])
        z = 0.0
        for j in range(T):
            p0[n, j] = np.exp(p0[n, j] - mx)
            z += p0[n, j]
        for c in range(d):
            out[n, 0, c] = 0.0
        for j in range(T):
            p = p0[n, j] / z
            p0[n, j] = p
            for c in range(d):
                out[n, 0, c] += p * v[n, j, c]
        for i in range(1, T):
            s = 0.0
            for c in range(d):
                s += q[n, i, c] * (k[n, i, c] - k[n, 0, c])
            u = s * sc
            if u > 0.0:
                e = np.exp(-u)
                b = 1.0 / (1.0 + e)
            else:
                e = np.exp(u)
                b = e / (1.0 + e)
            pb[n, i - 1] = b
            for c in range(d):
                out[n, i, c] = v[n, 0, c] + b * (v[n, i, c] - v[n, 0, c])
    return out, p0, pb


@njit(cache=True)
def star_backward(q, k, v, g, p0, pb, sc):
    N, T, d = q.shape
    gq = np.empty_like(q)
    gk = np.empty_like(k)
    gv = np.empty_like(v)
    w = np.empty(T, dtype=q.dtype)
    for n in range(N):
        tot = 0.0
        for j in range(T):
            s = 0.0
            for c in range(d):
                s += g[n, 0, c] * v[n, j, c]
            w[j] = s
            tot += p0[n, j] * s
        for j in range(T):
            w[j] = p0[n, j] * (w[j] - tot) * sc  # row-0 logit gradients
        p = p0[n, 0]
        for c in range(d):
            gq[n, 0, c] = w[0] * k[n, 0, c]
            gk[n, 0, c] = w[0] * q[n, 0, c]
            gv[n, 0, c] = p * g[n, 0, c]
        for i in range(1, T):
            b = pb[n, i - 1]
            a = 1.0 - b
            s = 0.0
            for c in range(d):
                s += g[n, i, c] * (v[n, i, c] - v[n, 0, c])
            gu = a * b * s * sc  # self logit; the target logit gets -gu
            wi = w[i]
            p = p0[n, i]
            for c in range(d):
                gq[n, i, c] = gu * (k[n, i, c] - k[n, 0, c])
                gq[n, 0, c] += wi * k[n, i, c]
                gk[n, i, c] = wi * q[n, 0, c] + gu * q[n, i, c]
                gk[n, 0, c] -= gu * q[n, i, c]
                gv[n, i, c] = p * g[n, 0, c] + b * g[n, i, c]
                gv[n, 0, c] += a * g[n, i, c]
    return gq, gk, gv
