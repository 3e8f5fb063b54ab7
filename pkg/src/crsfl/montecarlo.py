"""Batched Monte Carlo moments of the samplers.

Rows are drawn from the generator in the same order as repeated single
calls to the samplers, and go through the same kernels, so a batch of ``n``
rows is exactly ``n`` consecutive sampler invocations.
"""

from __future__ import annotations

import numpy as np

from . import _kernels
from .samplers import crs_marginal_inclusion, gspar_probabilities


def _draw_rows(name, g, rows, rng, K, p):
    d = g.size
    if name in ("crs", "crs_fixed"):
        alpha = p * rng.random((rows, d))
        kind = _kernels.ESTIMATOR_CRS if name == "crs" else _kernels.ESTIMATOR_CRS_FIXED
        sel, tau = _kernels.select_top(alpha * (g * g), K)
        vals, bad = _kernels.estimate(g, sel, tau, p, kind)
    elif name == "crs_unconditional":
        sel, _ = _kernels.select_top(p * rng.random((rows, d)) * (g * g), K)
        vals = g[sel] / np.maximum(crs_marginal_inclusion(g, K, p)[sel], 1e-300)
        vals[g[sel] == 0.0] = 0.0
        bad = False
    elif name == "minmax":
        u = 1.0 - rng.random((rows, d))
        sel, tau = _kernels.select_top((g * g) / u, K)
        vals, bad = _kernels.estimate(g, sel, tau, 1.0, _kernels.ESTIMATOR_MINMAX)
    elif name == "topk":
        sel, _ = _kernels.select_top(np.broadcast_to(np.abs(g), (rows, d)), K)
        vals, bad = g[sel], False
    else:
        probs = np.full(d, p) if name == "poisson" else gspar_probabilities(g, K)
        keep = (rng.random((rows, d)) < probs) & (g != 0.0)
        safe = np.where(probs > 0.0, probs, 1.0)
        dense = np.where(keep, g / safe, 0.0)
        return dense.sum(axis=0), (dense * dense).sum(axis=0)
    if bad:
        raise RuntimeError("selected coordinate with zero inclusion probability")
    return _kernels.accumulate(sel, vals, d)


def sampler_moments(name, g, n, rng, K=1, p=1.0, chunk=100_000):
    """Per-coordinate mean and standard error of ``n`` densified samples."""
    g = np.asarray(g, dtype=np.float64)
    total = np.zeros(g.size)
    total_sq = np.zeros(g.size)
    done = 0
    while done < n:
        rows = min(chunk, n - done)
        s, s2 = _draw_rows(name, g, rows, rng, K, p)
        total += s
        total_sq += s2
        done += rows
    mean = total / n
    var = np.maximum(total_sq / n - mean * mean, 0.0) * n / max(n - 1, 1)
    return mean, np.sqrt(var / n)


def z_scores(mean, se, target, floor=1e-12):
    """|mean - target| in standard errors; exact agreement counts as 0."""
    err = np.abs(mean - target)
    tol = floor * (1.0 + np.abs(target))
    return np.where(err <= tol, 0.0, err / np.maximum(se, 1e-300))
