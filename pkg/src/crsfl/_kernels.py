"""Hot inner loops of the priority samplers.

Every kernel exists twice: a numba ``@njit`` version and a pure-numpy
version. Both consume the same pre-drawn random numbers and produce
bit-identical output, so switching paths never changes an experiment.

Set ``CRSFL_NUMBA=0`` in the environment (before import) to force the numpy
path. The numba path is also skipped when numba is not installed.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ModuleNotFoundError:  # pragma: no cover - numba is an optional speedup
    numba = None

ESTIMATOR_CRS = 0
ESTIMATOR_CRS_FIXED = 1
ESTIMATOR_MINMAX = 2

NUMBA_SELECT_MAX_K = 128


def _numba_requested() -> bool:
    return os.environ.get("CRSFL_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


USE_NUMBA = numba is not None and _numba_requested()


# --------------------------------------------------------------------------
# numpy reference path
# --------------------------------------------------------------------------

def select_top_np(priorities, k):
    order = np.argsort(-priorities, axis=1, kind="stable")
    selected = np.sort(order[:, :k], axis=1)
    if k < priorities.shape[1]:
        tau = np.take_along_axis(priorities, order[:, k:k + 1], axis=1)[:, 0]
    else:
        tau = np.zeros(priorities.shape[0])
    return selected, np.ascontiguousarray(tau)


def estimate_np(g, selected, tau, p, kind):
    gs = g[selected]
    w = gs * gs
    tau2 = tau[:, None]
    positive = w > 0.0
    safe_w = np.where(positive, w, 1.0)
    if kind == ESTIMATOR_CRS:
        q = 1.0 - tau2 / (p * safe_w)
        q = np.minimum(1.0, np.maximum(0.0, q))
    elif kind == ESTIMATOR_CRS_FIXED:
        q = np.full(w.shape, p)
    else:
        safe_tau = np.where(tau2 > 0.0, tau2, 1.0)
        q = np.where(tau2 > 0.0, np.minimum(1.0, safe_w / safe_tau), 1.0)
    q = np.where(positive, q, 0.0)
    values = np.where(q > 0.0, gs / np.where(q > 0.0, q, 1.0), 0.0)
    bad = bool(np.any(positive & (q <= 0.0)))
    return values, bad


def accumulate_np(selected, values, d):
    dense = np.zeros((selected.shape[0], d))
    np.put_along_axis(dense, selected, values, axis=1)
    return dense.sum(axis=0), (dense * dense).sum(axis=0)


# --------------------------------------------------------------------------
# numba path
# --------------------------------------------------------------------------

if numba is not None:

    @numba.njit(cache=True)
    def select_top_nb(priorities, k):
        # Bounded insertion: keep the k+1 best (value desc, index asc) seen so
        # far. Indices arrive in ascending order, so an equal value never
        # displaces an earlier one. O(d k) per row; meant for small k.
        n, d = priorities.shape
        m = min(k + 1, d)
        selected = np.empty((n, k), dtype=np.int64)
        tau = np.zeros(n)
        vals = np.empty(m)
        idx = np.empty(m, dtype=np.int64)
        for i in range(n):
            filled = 0
            for j in range(d):
                v = priorities[i, j]
                if filled == m and not v > vals[m - 1]:
                    continue
                pos = filled if filled < m else m - 1
                while pos > 0 and v > vals[pos - 1]:
                    if pos < m:
                        vals[pos] = vals[pos - 1]
                        idx[pos] = idx[pos - 1]
                    pos -= 1
                vals[pos] = v
                idx[pos] = j
                if filled < m:
                    filled += 1
            top = np.sort(idx[:k])
            for j in range(k):
                selected[i, j] = top[j]
            if k < d:
                tau[i] = vals[k]
        return selected, tau

    @numba.njit(cache=True)
    def estimate_nb(g, selected, tau, p, kind):
        n, k = selected.shape
        values = np.zeros((n, k))
        bad = False
        for i in range(n):
            t = tau[i]
            for j in range(k):
                gj = g[selected[i, j]]
                w = gj * gj
                if w <= 0.0:
                    continue
                if kind == 0:
                    q = 1.0 - t / (p * w)
                    q = min(1.0, max(0.0, q))
                elif kind == 1:
                    q = p
                else:
                    q = min(1.0, w / t) if t > 0.0 else 1.0
                if q <= 0.0:
                    bad = True
                    continue
                values[i, j] = gj / q
        return values, bad

    @numba.njit(cache=True)
    def accumulate_nb(selected, values, d):
        n, k = selected.shape
        total = np.zeros(d)
        total_sq = np.zeros(d)
        for i in range(n):
            for j in range(k):
                v = values[i, j]
                total[selected[i, j]] += v
                total_sq[selected[i, j]] += v * v
        return total, total_sq


# --------------------------------------------------------------------------
# dispatch
# --------------------------------------------------------------------------

def select_top(priorities, k):
    """Top-``k`` of every row of ``priorities`` under (value desc, index asc).

    Returns the selected indices of each row in ascending index order and the
    ``(k+1)``-th largest priority of each row (0 when ``k`` equals the row
    length).
    """
    priorities = np.ascontiguousarray(priorities, dtype=np.float64)
    # insertion costs O(d k); past this size numpy's argsort wins
    if USE_NUMBA and k < NUMBA_SELECT_MAX_K:
        return select_top_nb(priorities, int(k))
    return select_top_np(priorities, int(k))


def estimate(g, selected, tau, p, kind):
    """Horvitz-Thompson values for selected coordinates.

    ``kind`` picks the inclusion probability: conditional CRS, fixed-``p``
    CRS, or MinMax priority sampling. The returned flag is set when a selected
    nonzero coordinate got inclusion probability 0.
    """
    g = np.ascontiguousarray(g, dtype=np.float64)
    tau = np.ascontiguousarray(tau, dtype=np.float64)
    if USE_NUMBA:
        return estimate_nb(g, selected, tau, float(p), int(kind))
    return estimate_np(g, selected, tau, float(p), int(kind))


def accumulate(selected, values, d):
    """Per-coordinate sum and sum of squares of densified rows."""
    if USE_NUMBA:
        return accumulate_nb(selected, np.ascontiguousarray(values), int(d))
    return accumulate_np(selected, values, int(d))
