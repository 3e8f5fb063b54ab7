"""The CRS-FL round loop.

Round ``r`` of a run, with ``G_g`` the global gradient both sides reconstruct
by summing aggregated deltas:

1. the server broadcasts ``w_g^0`` (r = 0) or the aggregate ``dG_g^r``;
2. each client moves to ``w^r = w^{r-1} - eta (dG_g^r + G_g^{r-1})``,
   computes its gradient ``G_i^{r+1}`` and uploads ``S(G_i^{r+1} - H_i)``,
   where ``H_i`` is the sum of everything the client has uploaded so far plus
   any error-feedback residual its sampler still holds;
3. the server averages the densified uploads into ``dG_g^{r+1}``.

With the identity sampler and one client this is plain gradient descent.
``update_mode = "plain"`` instead uploads ``S(G_i)`` and applies the mean.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import data as data_mod
from .config import ExperimentConfig
from .linalg import SparseUpdate, densify, dense_broadcast_bytes, payload_bytes
from .metrics import RoundMetrics, evaluate
from .models import DivergenceError, ModelSpec, loss_and_grad
from .privacy import PrivacyCertificate, issue_certificate, laplace_perturb, max_sampling_probability
from .samplers import Sampler, SamplerConfig, SamplerKind, resolve_k

DIVERGENCE_FACTOR = 10.0

_TAG_INIT = 0x1417
_TAG_CLIENT = 0xC11E


class CertificateRefused(RuntimeError):
    def __init__(self, certificate: PrivacyCertificate):
        super().__init__(certificate.reason)
        self.certificate = certificate


def client_rng(seed, client_id, rnd) -> np.random.Generator:
    """Independent stream per (experiment seed, client, round)."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_TAG_CLIENT, client_id, rnd)))


def thread_count() -> int:
    raw = os.environ.get("CRSFL_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


@dataclass
class ClientState:
    client_id: int
    indices: np.ndarray
    weights: np.ndarray
    prev_update: np.ndarray
    prev_grad: np.ndarray
    sampler: Sampler
    last_loss: float = math.nan


@dataclass
class ServerState:
    weights: np.ndarray
    global_update: np.ndarray
    prev_global_grad: np.ndarray
    round: int = 0


def fedavg_aggregate(updates, m=None) -> np.ndarray:
    """Coordinate-wise mean of densified updates, summed in list order."""
    if not updates:
        raise ValueError("no updates to aggregate")
    m = len(updates) if m is None else m
    if m != len(updates):
        raise ValueError(f"m={m} but {len(updates)} updates")
    dim = updates[0].dim
    total = np.zeros(dim)
    for u in updates:
        if u.dim != dim:
            raise ValueError(f"dimension mismatch: {u.dim} != {dim}")
        total += densify(u)
    return total / m


def learning_rate(cfg: ExperimentConfig, rnd: int) -> float:
    return cfg.lr / (1.0 + cfg.lr_decay * rnd)


@dataclass
class Experiment:
    """Everything a run needs, built deterministically from the config."""

    cfg: ExperimentConfig
    spec: ModelSpec = field(init=False)
    train: data_mod.Dataset = field(init=False)
    test: data_mod.Dataset = field(init=False)
    parts: list = field(init=False)
    sampler_cfg: SamplerConfig = field(init=False)
    certificate: PrivacyCertificate | None = field(init=False, default=None)

    def __post_init__(self):
        cfg = self.cfg
        if cfg.dataset == "synthetic":
            full = data_mod.synth_classification(cfg.n_samples, cfg.n_features, cfg.n_classes,
                                                 cfg.class_sep, cfg.seed)
        else:
            full = data_mod.load_idx(cfg.idx_images, cfg.idx_labels)
        if cfg.test_fraction > 0:
            self.train, self.test = data_mod.train_test_split(full, cfg.test_fraction, cfg.seed)
        else:
            self.train, self.test = full, full
        self.spec = ModelSpec(cfg.model, full.f, full.n_classes, cfg.hidden)
        if cfg.partition == "shards":
            self.parts = data_mod.partition_shards(self.train, cfg.clients, cfg.shards_per_client,
                                                   cfg.seed, cfg.min_samples)
        elif cfg.partition == "dirichlet":
            self.parts = data_mod.partition_dirichlet(self.train, cfg.clients, cfg.dirichlet_beta,
                                                      cfg.seed, cfg.min_samples)
        else:
            rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0x11D,)))
            self.parts = [np.sort(a) for a in np.array_split(rng.permutation(self.train.n), cfg.clients)]
        self.sampler_cfg = self._sampler_config()

    @property
    def d(self) -> int:
        return self.spec.dim

    def _sampler_config(self) -> SamplerConfig:
        cfg = self.cfg
        kind = SamplerKind(cfg.sampler)
        K = 1
        if cfg.K is not None or cfg.sampling_ratio is not None:
            K = resolve_k(self.d, cfg.K, cfg.sampling_ratio)
        p = 1.0 if cfg.p is None else cfg.p
        if kind is SamplerKind.CRS:
            if cfg.p is None:
                p = max_sampling_probability(cfg.epsilon)
            self.certificate = issue_certificate(cfg.epsilon, p, K, self.d)
            if not self.certificate.issued:
                raise CertificateRefused(self.certificate)
        return SamplerConfig(kind, K, p, cfg.feedback, cfg.epsilon, cfg.crs_scaling)


def local_gradient(exp: Experiment, state: ClientState, rng: np.random.Generator):
    cfg = exp.cfg
    x = exp.train.features[state.indices]
    y = exp.train.labels[state.indices]
    if cfg.local_steps == 0:
        return loss_and_grad(exp.spec, state.weights, x, y)
    order = rng.permutation(y.size)
    losses, grads = [], []
    pos = 0
    for _ in range(cfg.local_steps):
        if pos >= y.size:
            order = rng.permutation(y.size)
            pos = 0
        b = order[pos:pos + cfg.local_batch]
        pos += cfg.local_batch
        loss, g = loss_and_grad(exp.spec, state.weights, x[b], y[b])
        losses.append(loss)
        grads.append(g)
    return float(np.mean(losses)), np.mean(grads, axis=0)


def client_round(exp: Experiment, state: ClientState, rnd: int, broadcast, lr: float) -> SparseUpdate:
    """One device-side step; ``broadcast`` is ``(dG_g^r, G_g^{r-1})`` or None at r = 0."""
    cfg = exp.cfg
    rng = client_rng(cfg.seed, state.client_id, rnd)
    if broadcast is not None:
        global_update, prev_global_grad = broadcast
        if global_update.shape != state.weights.shape:
            raise ValueError("dimension mismatch between broadcast and local model")
        state.weights = state.weights - lr * (global_update + prev_global_grad)
    loss, grad = local_gradient(exp, state, rng)
    if not np.all(np.isfinite(grad)):
        raise DivergenceError(f"round {rnd}: client {state.client_id} produced a non-finite gradient")
    state.last_loss = loss
    delta = grad - state.prev_grad if cfg.update_mode == "delta" else grad
    if cfg.laplace_scale > 0:
        delta = laplace_perturb(delta, cfg.laplace_scale, rng)
    owed_before = state.sampler.state.residual
    update = state.sampler(delta, rng)
    state.prev_update = densify(update)
    if cfg.update_mode == "delta":
        # Reference = what the server has received + what the sampler still owes it.
        # Diffing against the raw previous gradient instead would let every
        # round's compression error pile up in the server's running sum.
        owed_change = state.sampler.state.residual - owed_before
        state.prev_grad = state.prev_grad + state.prev_update + owed_change
    return update


def _init_clients(exp: Experiment, w0):
    return [
        ClientState(i, part, w0.copy(), np.zeros(exp.d), np.zeros(exp.d),
                    Sampler(exp.sampler_cfg, exp.d))
        for i, part in enumerate(exp.parts)
    ]


def run_experiment(cfg: ExperimentConfig, threads: int | None = None, experiment: Experiment | None = None,
                   on_round=None):
    """Run all rounds and return one :class:`RoundMetrics` per round.

    The result depends only on ``cfg``; ``threads`` (default
    ``$CRSFL_THREADS``) changes wall time, never output. ``on_round(server)``
    is called after each aggregation, for inspection only.
    """
    exp = experiment or Experiment(cfg)
    if cfg.rounds == 0:
        return []
    threads = thread_count() if threads is None else threads
    d, m = exp.d, cfg.clients
    init_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(_TAG_INIT,)))
    w0 = exp.spec.init_weights(init_rng)
    server = ServerState(w0.copy(), np.zeros(d), np.zeros(d))
    clients = _init_clients(exp, w0)
    sizes = np.array([c.indices.size for c in clients], dtype=np.float64)
    history = []
    initial_loss = None
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for rnd in range(cfg.rounds):
            download = m * dense_broadcast_bytes(d)
            if rnd == 0:
                broadcast = None
                lr_prev = 0.0
            else:
                broadcast = (server.global_update, server.prev_global_grad)
                lr_prev = learning_rate(cfg, rnd - 1)
            if pool is None:
                updates = [client_round(exp, c, rnd, broadcast, lr_prev) for c in clients]
            else:
                updates = list(pool.map(lambda c: client_round(exp, c, rnd, broadcast, lr_prev), clients))
            if cfg.update_mode == "delta" and rnd > 0:
                server.prev_global_grad = server.prev_global_grad + server.global_update
            upload = sum(payload_bytes(u) for u in updates)
            server.global_update = fedavg_aggregate(updates, m)
            server.round = rnd + 1
            # server-side copy of the model the clients will hold next round
            lr = learning_rate(cfg, rnd)
            step = server.global_update
            if cfg.update_mode == "delta":
                step = step + server.prev_global_grad
            server.weights = server.weights - lr * step

            train_loss = float(np.dot(sizes, [c.last_loss for c in clients]) / sizes.sum())
            if initial_loss is None:
                initial_loss = train_loss
            if not math.isfinite(train_loss) or train_loss > DIVERGENCE_FACTOR * initial_loss:
                raise DivergenceError(
                    f"round {rnd}: training loss {train_loss:.6g} exceeds "
                    f"{DIVERGENCE_FACTOR:g}x the initial {initial_loss:.6g}")
            acc = ce = None
            if (rnd + 1) % cfg.eval_every == 0 or rnd == cfg.rounds - 1:
                if not np.all(np.isfinite(server.weights)):
                    raise DivergenceError(f"round {rnd}: non-finite model weights")
                acc, ce = evaluate(exp.spec, server.weights, exp.test)
            history.append(RoundMetrics(rnd, train_loss, acc, ce, download, upload, m))
            if on_round is not None:
                on_round(server)
    finally:
        if pool is not None:
            pool.shutdown()
    return history
