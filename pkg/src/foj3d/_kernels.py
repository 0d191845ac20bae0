"""Compiled inner loops for the discrete split search."""

from __future__ import annotations

import numba
import numpy as np


@numba.njit(cache=True)
def _scan_sorted(v_sorted, p_sorted):
    """Best hard split of one sorted projection; returns ``(gain, threshold)``."""
    n = v_sorted.shape[0]
    total = 0.0
    for i in range(n):
        total += v_sorted[i]
    best = total * total / n
    thr = p_sorted[0] - 1.0
    run = 0.0
    for i in range(n - 1):
        run += v_sorted[i]
        if p_sorted[i + 1] - p_sorted[i] <= 1e-9:
            continue
        k = i + 1
        rest = total - run
        g = run * run / k + rest * rest / (n - k)
        if g > best:
            best = g
            thr = 0.5 * (p_sorted[i] + p_sorted[i + 1])
    return best, thr


@numba.njit(cache=True)
def split_shared(V, proj_sorted, order):
    """Best split per patch over shared candidates.

    ``V`` is ``(B, n)``; ``proj_sorted`` and ``order`` are ``(C, n)``.
    Returns candidate index, threshold and gain per patch; the first
    candidate wins ties.
    """
    B, n = V.shape
    C = order.shape[0]
    idx = np.zeros(B, np.int64)
    thr = np.zeros(B)
    gain = np.full(B, -np.inf)
    buf = np.empty(n)
    for b in range(B):
        for c in range(C):
            for i in range(n):
                buf[i] = V[b, order[c, i]]
            g, t = _scan_sorted(buf, proj_sorted[c])
            if g > gain[b]:
                gain[b] = g
                thr[b] = t
                idx[b] = c
    return idx, thr, gain


@numba.njit(cache=True)
def _soft_gain(v, p, thr, eta):
    """Gain of the two-region soft split ``u+ = H^2``, ``u- = (1 - H)^2`` at ``thr``."""
    s0a = s1a = s0b = s1b = 0.0
    for i in range(v.shape[0]):
        h = 0.5 + np.arctan((p[i] - thr) / eta) / np.pi
        ua, ub = h * h, (1.0 - h) * (1.0 - h)
        s0a += ua
        s1a += ua * v[i]
        s0b += ub
        s1b += ub * v[i]
    g = 0.0
    if s0a > 1e-12:
        g += s1a * s1a / s0a
    if s0b > 1e-12:
        g += s1b * s1b / s0b
    return g


@numba.njit(cache=True)
def split_local(V, proj, eta):
    """Best split per patch over per-patch candidates ``proj`` of shape ``(B, K, n)``.

    Each candidate's threshold is its best hard split; candidates are ranked
    by the soft gain at that threshold, which favours wide margins.  The
    candidates of a patch are close to each other, so each is sorted by
    insertion starting from the order of the first one.
    """
    B, K, n = proj.shape
    idx = np.zeros(B, np.int64)
    thr = np.zeros(B)
    gain = np.full(B, -np.inf)
    vs = np.empty(n)
    ps = np.empty(n)
    for b in range(B):
        base = np.argsort(proj[b, 0], kind="mergesort")
        for k in range(K):
            row = proj[b, k]
            for i in range(n):
                ps[i] = row[base[i]]
                vs[i] = V[b, base[i]]
            for i in range(1, n):
                p, v = ps[i], vs[i]
                j = i - 1
                while j >= 0 and ps[j] > p:
                    ps[j + 1] = ps[j]
                    vs[j + 1] = vs[j]
                    j -= 1
                ps[j + 1] = p
                vs[j + 1] = v
            _, t = _scan_sorted(vs, ps)
            g = _soft_gain(V[b], row, t, eta)
            if g > gain[b]:
                gain[b] = g
                thr[b] = t
                idx[b] = k
    return idx, thr, gain
