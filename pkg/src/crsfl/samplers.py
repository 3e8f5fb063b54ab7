"""Gradient compressors.

Each sampler maps a dense update to a :class:`~crsfl.linalg.SparseUpdate`.
Randomness always comes from an explicit ``numpy.random.Generator``; the
``*_from_draws`` variants take the uniforms directly so that hand traces and
the Monte Carlo harness can inject them.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .linalg import Codec, SparseUpdate


class SamplerKind(str, enum.Enum):
    IDENTITY = "identity"
    CRS = "crs"
    MINMAX = "minmax"
    GSPAR = "gspar"
    TOPK = "topk"
    POISSON = "poisson"


CODECS = {
    SamplerKind.IDENTITY: Codec.IDENTITY,
    SamplerKind.CRS: Codec.CRS,
    SamplerKind.MINMAX: Codec.MINMAX,
    SamplerKind.GSPAR: Codec.GSPAR,
    SamplerKind.TOPK: Codec.TOPK,
    SamplerKind.POISSON: Codec.POISSON,
}


CRS_SCALINGS = ("conditional", "fixed", "unconditional")


class SamplerError(ValueError):
    pass


class ThresholdInconsistency(SamplerError):
    """A selected coordinate ended up with inclusion probability 0."""


@dataclass(frozen=True)
class SamplerConfig:
    kind: SamplerKind = SamplerKind.IDENTITY
    K: int = 1
    p: float = 1.0
    feedback: bool = False
    epsilon: float | None = None
    # "conditional": divide by the inclusion probability given the threshold;
    # "fixed": divide by p as in plain Poisson sampling; "unconditional":
    # divide by the marginal inclusion probability (see crs_marginal_inclusion).
    crs_scaling: str = "conditional"

    def __post_init__(self):
        object.__setattr__(self, "kind", SamplerKind(self.kind))
        if self.K < 1:
            raise SamplerError(f"K must be positive, got {self.K}")
        if not 0.0 < self.p <= 1.0:
            raise SamplerError(f"p must lie in (0, 1], got {self.p}")
        if self.kind is SamplerKind.CRS and self.epsilon is None:
            raise SamplerError("CRS needs epsilon")
        if self.crs_scaling not in CRS_SCALINGS:
            raise SamplerError(f"unknown crs_scaling {self.crs_scaling!r}")


@dataclass
class SamplerState:
    residual: np.ndarray

    @classmethod
    def zeros(cls, d):
        return cls(np.zeros(d))


def _check_finite(g):
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 1:
        raise SamplerError("expected a 1-D gradient")
    if not np.all(np.isfinite(g)):
        raise SamplerError("non-finite gradient entry")
    return g


def _check_k(k, d):
    if not 1 <= k < d:
        raise SamplerError(f"need 1 <= K < d for priority sampling, got K={k}, d={d}")


def inclusion_probability(g_j, tau, p):
    """Pr[alpha * g_j**2 > tau] for alpha uniform on [0, p)."""
    w = float(g_j) * float(g_j)
    if w == 0.0:
        return 0.0
    return min(1.0, max(0.0, 1.0 - tau / (p * w)))


def crs_marginal_inclusion(g, k, p):
    """Pr[coordinate j is among the top ``k`` CRS priorities], for every j.

    The conditional probability ``1 - tau/(p g_j**2)`` is clipped at 0: a
    coordinate whose largest possible priority ``p g_j**2`` lies below the
    other coordinates' k-th priority can never be drawn, so dividing by it
    leaves a bias of ``-g_j Pr[clip]``. Integrating over the threshold gives
    the marginal probability instead, and Horvitz-Thompson scaling with it is
    exactly unbiased.

    For ``t`` between consecutive values of ``b = p g**2`` the chance that
    fewer than ``k`` other priorities exceed ``t`` is a polynomial of degree
    below ``d``, so Gauss-Legendre with ``d//2 + 1`` nodes per piece
    integrates it exactly. Cost is O(d**3 k); meant for small ``d``.
    """
    g = _check_finite(g)
    d = g.size
    _check_k(k, d)
    b = p * g * g
    nodes, weights = np.polynomial.legendre.leggauss(d // 2 + 1)
    out = np.zeros(d)
    for i in np.flatnonzero(b > 0.0):
        others = np.delete(b, i)
        others = others[others > 0.0]
        if others.size < k:
            out[i] = 1.0
            continue
        cuts = np.unique(np.concatenate(([0.0, b[i]], others[others < b[i]])))
        lo, hi = cuts[:-1, None], cuts[1:, None]
        t = (0.5 * (hi - lo) * nodes + 0.5 * (hi + lo)).ravel()
        w = (0.5 * (hi - lo) * weights).ravel()
        # counts[:, c] = Pr[exactly c of the others exceed t], for c < k
        counts = np.zeros((t.size, k))
        counts[:, 0] = 1.0
        for bj in others:
            s_j = np.clip(1.0 - t / bj, 0.0, 1.0)[:, None]
            shifted = np.zeros_like(counts)
            shifted[:, 1:] = counts[:, :-1]
            counts = counts * (1.0 - s_j) + shifted * s_j
        out[i] = min(1.0, float(np.dot(w, counts.sum(axis=1))) / b[i])
    return out


def _priority_update(g, priorities, k, p, kind, codec):
    selected, tau = _kernels.select_top(priorities[None, :], k)
    values, bad = _kernels.estimate(g, selected, tau, p, kind)
    if bad:
        raise ThresholdInconsistency("selected coordinate has zero inclusion probability")
    idx = selected[0]
    val = values[0]
    keep = g[idx] != 0.0
    return SparseUpdate(g.size, idx[keep], val[keep], float(tau[0]), codec)


def crs_from_draws(g, alpha, k, p, scaling="conditional"):
    """CRS with the per-coordinate coefficients ``alpha`` (each in [0, p)) given."""
    g = _check_finite(g)
    _check_k(k, g.size)
    alpha = np.asarray(alpha, dtype=np.float64)
    if scaling == "unconditional":
        selected, tau = _kernels.select_top((alpha * (g * g))[None, :], k)
        idx = selected[0][g[selected[0]] != 0.0]
        pi = crs_marginal_inclusion(g, k, p)
        return SparseUpdate(g.size, idx, g[idx] / pi[idx], float(tau[0]), Codec.CRS)
    kind = _kernels.ESTIMATOR_CRS if scaling == "conditional" else _kernels.ESTIMATOR_CRS_FIXED
    return _priority_update(g, alpha * (g * g), k, p, kind, Codec.CRS)


def crs_sample(g, cfg: SamplerConfig, rng: np.random.Generator) -> SparseUpdate:
    """Conditional random sampling.

    Priority of coordinate ``j`` is ``alpha_j * g_j**2`` with ``alpha_j``
    uniform on ``[0, p)``. The ``K`` largest priorities are kept and each kept
    value is divided by its inclusion probability given the ``(K+1)``-th
    largest priority. That is unbiased only for coordinates that can always
    win a slot; see :func:`crs_marginal_inclusion` for the exception and the
    ``"unconditional"`` scaling that removes it.
    """
    g = _check_finite(g)
    alpha = cfg.p * rng.random(g.size)
    return crs_from_draws(g, alpha, cfg.K, cfg.p, cfg.crs_scaling)


def minmax_from_draws(g, u, k):
    """Priority sampling with priorities ``g_j**2 / u_j``, ``u`` in (0, 1]."""
    g = _check_finite(g)
    _check_k(k, g.size)
    u = np.asarray(u, dtype=np.float64)
    return _priority_update(g, (g * g) / u, k, 1.0, _kernels.ESTIMATOR_MINMAX, Codec.MINMAX)


def minmax_sample(g, k, rng: np.random.Generator) -> SparseUpdate:
    g = _check_finite(g)
    u = 1.0 - rng.random(g.size)  # (0, 1]
    return minmax_from_draws(g, u, k)


def poisson_from_draws(g, p, u, codec=Codec.POISSON):
    g = _check_finite(g)
    p = np.broadcast_to(np.asarray(p, dtype=np.float64), g.shape)
    keep = (np.asarray(u) < p) & (g != 0.0)
    idx = np.flatnonzero(keep)
    return SparseUpdate(g.size, idx, g[idx] / p[idx], 0.0, codec)


def poisson_sample(g, p, rng: np.random.Generator) -> SparseUpdate:
    """Keep each coordinate independently w.p. ``p`` and scale it by ``1/p``."""
    if not 0.0 < p <= 1.0:
        raise SamplerError(f"p must lie in (0, 1], got {p}")
    g = _check_finite(g)
    return poisson_from_draws(g, p, rng.random(g.size))


def gspar_probabilities(g, k):
    """Magnitude-proportional keep probabilities with expected count ``k``.

    ``p_j = min(1, c |g_j|)`` with ``c`` chosen so that ``sum(p) = k`` (or
    every nonzero is kept when there are at most ``k`` of them). Zero
    coordinates get probability 0.
    """
    a = np.abs(_check_finite(g))
    nnz = int(np.count_nonzero(a))
    probs = np.zeros_like(a)
    if nnz == 0:
        return probs
    if k >= nnz:
        probs[a > 0] = 1.0
        return probs
    # Saturate the largest coordinates one at a time, then scale the rest.
    order = np.argsort(-a, kind="stable")
    mags = a[order]
    tail = np.cumsum(mags[::-1])[::-1]  # tail[i] = sum(mags[i:])
    n_sat = 0
    while n_sat < k:
        c = (k - n_sat) / tail[n_sat]
        if c * mags[n_sat] <= 1.0:
            break
        n_sat += 1
    c = (k - n_sat) / tail[n_sat]
    sorted_probs = np.minimum(1.0, c * mags)
    sorted_probs[:n_sat] = 1.0
    probs[order] = sorted_probs
    return probs


def gspar_sample(g, p_vec=None, rng: np.random.Generator | None = None, k=None) -> SparseUpdate:
    """Unbiased random sparsification with per-coordinate probabilities.

    Pass ``p_vec`` explicitly, or ``k`` to use :func:`gspar_probabilities`.
    """
    g = _check_finite(g)
    if p_vec is None:
        if k is None:
            raise SamplerError("gspar needs p_vec or k")
        p_vec = gspar_probabilities(g, k)
    p_vec = np.asarray(p_vec, dtype=np.float64)
    if np.any((p_vec <= 0.0) & (g != 0.0)) or np.any(p_vec > 1.0):
        raise SamplerError("gspar probabilities must lie in (0, 1] on nonzero coordinates")
    safe = np.where(p_vec > 0.0, p_vec, 1.0)
    return poisson_from_draws(g, safe, rng.random(g.size), Codec.GSPAR)


def topk_sample(g, k, state: SamplerState | None = None, feedback=False) -> SparseUpdate:
    """Keep the ``k`` largest magnitudes, unscaled (biased).

    With ``feedback`` the residual in ``state`` is added first and the
    untransmitted remainder is stored back into it.
    """
    g = _check_finite(g)
    if not 1 <= k <= g.size:
        raise SamplerError(f"need 1 <= K <= d, got K={k}")
    h = g + state.residual if feedback else g
    selected, _ = _kernels.select_top(np.abs(h)[None, :], k)
    idx = selected[0]
    idx = idx[h[idx] != 0.0]
    update = SparseUpdate(g.size, idx, h[idx], 0.0, Codec.TOPK)
    if feedback:
        rest = h.copy()
        rest[idx] = 0.0
        state.residual = rest
    return update


def identity_sample(g) -> SparseUpdate:
    return SparseUpdate.from_dense(_check_finite(g), Codec.IDENTITY)


@dataclass
class Sampler:
    """A configured compressor bound to its per-client state."""

    cfg: SamplerConfig
    d: int
    state: SamplerState = field(init=False)

    def __post_init__(self):
        self.state = SamplerState.zeros(self.d)
        kind = self.cfg.kind
        if kind in (SamplerKind.CRS, SamplerKind.MINMAX):
            _check_k(self.cfg.K, self.d)
        elif kind in (SamplerKind.TOPK, SamplerKind.GSPAR) and self.cfg.K > self.d:
            raise SamplerError(f"K={self.cfg.K} exceeds d={self.d}")

    def __call__(self, g, rng: np.random.Generator) -> SparseUpdate:
        cfg = self.cfg
        kind = cfg.kind
        if kind is SamplerKind.CRS:
            return crs_sample(g, cfg, rng)
        if kind is SamplerKind.MINMAX:
            return minmax_sample(g, cfg.K, rng)
        if kind is SamplerKind.POISSON:
            return poisson_sample(g, cfg.p, rng)
        if kind is SamplerKind.GSPAR:
            return gspar_sample(g, rng=rng, k=cfg.K)
        if kind is SamplerKind.TOPK:
            return topk_sample(g, cfg.K, self.state, cfg.feedback)
        return identity_sample(g)


def resolve_k(d, K=None, ratio=None):
    """Absolute sampling size from ``K`` or ``ratio = K/d`` (rounded up)."""
    if K is not None:
        return int(K)
    if ratio is None:
        raise SamplerError("need K or sampling_ratio")
    return max(1, math.ceil(ratio * d - 1e-9))
