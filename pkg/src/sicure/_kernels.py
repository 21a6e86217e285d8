"""Compiled Epanechnikov kernel smoothers (sorted-window scans)."""
import math

import numpy as np
from numba import njit

SUPPORT = math.sqrt(5.0)
_NORM = 1.0 / (4.0 * math.sqrt(5.0))


@njit(cache=True, inline="always")
def epan(v):
    v2 = v * v
    if v2 > 5.0:
        return 0.0
    return (3.0 - 0.6 * v2) * _NORM


@njit(cache=True)
def _loo_sorted(u, y, h, fallback):
    # u sorted ascending, y aligned; each pair visited once
    n = u.shape[0]
    num = np.zeros(n)
    den = np.zeros(n)
    s = u / h
    for i in range(n):
        j = i + 1
        while j < n and s[j] - s[i] <= SUPPORT:
            w = epan(s[j] - s[i])
            num[i] += w * y[j]
            den[i] += w
            num[j] += w * y[i]
            den[j] += w
            j += 1
    out = np.empty(n)
    for i in range(n):
        out[i] = num[i] / den[i] if den[i] > 0.0 else fallback
    return out


def kernel_loo_fast(u, y, h):
    u = np.ascontiguousarray(u, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    order = np.argsort(u, kind="stable")
    res = _loo_sorted(u[order], y[order], float(h), float(y.mean()))
    out = np.empty_like(res)
    out[order] = res
    return out


@njit(cache=True)
def _nw_sorted(u, y, t, h, fallback):
    # u sorted; t arbitrary evaluation points
    n = u.shape[0]
    m = t.shape[0]
    out = np.empty(m)
    reach = SUPPORT * h
    for a in range(m):
        lo = np.searchsorted(u, t[a] - reach)
        num = 0.0
        den = 0.0
        j = lo
        while j < n and u[j] - t[a] <= reach:
            w = epan((t[a] - u[j]) / h)
            num += w * y[j]
            den += w
            j += 1
        out[a] = num / den if den > 0.0 else fallback
    return out


def nadaraya_watson_fast(u, y, t, h):
    u = np.asarray(u, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    order = np.argsort(u, kind="stable")
    t = np.ascontiguousarray(np.atleast_1d(t), dtype=np.float64)
    return _nw_sorted(np.ascontiguousarray(u[order]), np.ascontiguousarray(y[order]), t, float(h), float(y.mean()))


@njit(cache=True)
def _q1_loo(u, y, h, lo_clip):
    # sum of y log p + (1 - y) log(1 - p) at the clamped leave-one-out fit
    order = np.argsort(u, kind="mergesort")
    us = u[order]
    ys = y[order]
    fit = _loo_sorted(us, ys, h, ys.mean())
    total = 0.0
    for i in range(us.shape[0]):
        p = min(max(fit[i], lo_clip), 1.0 - lo_clip)
        total += ys[i] * math.log(p) + (1.0 - ys[i]) * math.log1p(-p)
    return total


def kernel_q1_fast(u, y, h, lo_clip):
    return _q1_loo(np.ascontiguousarray(u, dtype=np.float64), np.ascontiguousarray(y, dtype=np.float64),
                   float(h), float(lo_clip))
