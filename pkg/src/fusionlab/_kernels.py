"""Hot inner loops, compiled with numba when available.

Set FUSIONLAB_NUMBA=0 to force the pure-numpy implementations (used by the
benchmark in benchmarks/bench_kernels.py and as a fallback when numba is
not importable). Both paths produce identical results; tests compare them.
"""

from __future__ import annotations

import os

import numpy as np

USE_NUMBA = os.environ.get("FUSIONLAB_NUMBA", "1") != "0"
if USE_NUMBA:
    try:
        from numba import njit
    except ImportError:            # pragma: no cover
        USE_NUMBA = False


# -- pure numpy paths -------------------------------------------------------

def _pairwise_extrema_np(a, labels):
    """(min same-cluster off-diagonal, max cross-cluster) entry of a."""
    same = labels[:, None] == labels[None, :]
    off_diag = ~np.eye(len(labels), dtype=bool)
    same_mask = same & off_diag
    cross_mask = ~same
    has_same = bool(same_mask.any())
    has_cross = bool(cross_mask.any())
    mn = float(a[same_mask].min()) if has_same else 0.0
    mx = float(a[cross_mask].max()) if has_cross else 0.0
    return mn, mx, has_same, has_cross


def _alignment_masses_np(a, labels):
    """Per row: (off-diagonal same-cluster mass, off-diagonal total mass)."""
    same = (labels[:, None] == labels[None, :]) & ~np.eye(len(labels), dtype=bool)
    off = ~np.eye(len(labels), dtype=bool)
    return (a * same).sum(axis=1), (a * off).sum(axis=1)


def _nn1_indices_np(e, exclude_self=True):
    """Index of the nearest row by Euclidean distance; ties -> lowest index."""
    sq = (e * e).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (e @ e.T)
    if exclude_self:
        np.fill_diagonal(d2, np.inf)
    return d2.argmin(axis=1)


def _maxmin_scan_np(s, cands):
    """max over candidate directions of min over sample rows of |s @ c|."""
    best = -1.0
    block = 8192
    for at in range(0, cands.shape[0], block):
        vals = np.abs(s @ cands[at:at + block].T).min(axis=0)
        m = vals.max()
        if m > best:
            best = float(m)
    return best


# -- numba paths ------------------------------------------------------------

if USE_NUMBA:

    @njit(cache=True)
    def _pairwise_extrema_nb(a, labels):
        n = a.shape[0]
        mn = np.inf
        mx = -np.inf
        has_same = False
        has_cross = False
        for i in range(n):
            for j in range(n):
                if i == j:
                    continue
                if labels[i] == labels[j]:
                    has_same = True
                    if a[i, j] < mn:
                        mn = a[i, j]
                else:
                    has_cross = True
                    if a[i, j] > mx:
                        mx = a[i, j]
        if not has_same:
            mn = 0.0
        if not has_cross:
            mx = 0.0
        return mn, mx, has_same, has_cross

    @njit(cache=True)
    def _alignment_masses_nb(a, labels):
        n = a.shape[0]
        same = np.zeros(n)
        total = np.zeros(n)
        for i in range(n):
            for j in range(n):
                if i == j:
                    continue
                total[i] += a[i, j]
                if labels[i] == labels[j]:
                    same[i] += a[i, j]
        return same, total

    @njit(cache=True)
    def _nn1_indices_nb(e, exclude_self=True):
        n, m = e.shape
        out = np.empty(n, dtype=np.int64)
        for i in range(n):
            best = np.inf
            arg = -1
            for j in range(n):
                if exclude_self and j == i:
                    continue
                d = 0.0
                for k in range(m):
                    diff = e[i, k] - e[j, k]
                    d += diff * diff
                if d < best:
                    best = d
                    arg = j
            out[i] = arg
        return out

    @njit(cache=True)
    def _maxmin_scan_nb(s, cands):
        best = -1.0
        for c in range(cands.shape[0]):
            worst = np.inf
            for i in range(s.shape[0]):
                dot = 0.0
                for k in range(s.shape[1]):
                    dot += s[i, k] * cands[c, k]
                v = abs(dot)
                if v < worst:
                    worst = v
            if worst > best:
                best = worst
        return best

    pairwise_extrema = _pairwise_extrema_nb
    alignment_masses = _alignment_masses_nb
    nn1_indices = _nn1_indices_nb
    maxmin_scan = _maxmin_scan_nb
else:
    pairwise_extrema = _pairwise_extrema_np
    alignment_masses = _alignment_masses_np
    nn1_indices = _nn1_indices_np
    maxmin_scan = _maxmin_scan_np
