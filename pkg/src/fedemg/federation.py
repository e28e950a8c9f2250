"""Local, FedAvg, first-order Per-FedAvg and sequential Per-FedAvg training."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .decoder import (CostParams, Decoder, DivergenceGuard, SmoothBatchRate, as_weights,
                      pooled_stats, quad_cost_grad, smooth_batch, solve_stats, update_stats)
from .errors import ConfigError, InsufficientDataError
from .seeding import make_rng
from .signal import StreamedUpdate, SubjectSession

ALGORITHMS = ("Local", "FedAvg", "PerFedAvg", "SequentialPerFedAvg", "Static")
FL_ALGORITHMS = ("FedAvg", "PerFedAvg")


@dataclass(frozen=True)
class FedConfig:
    """Training schedule shared by the open- and closed-loop drivers.

    ``participations_per_update`` is how many local training blocks a client
    completes before moving to its next streamed update (1: every block of
    ``local_steps`` gradient steps advances the cursor).
    """

    algorithm: str = "FedAvg"
    rounds: int = 500
    client_fraction: float = 0.35
    local_steps: int = 25
    sgd_step_size: float = 0.1
    maml_inner_rate: float = 0.1
    maml_outer_rate: float = 0.1
    smoothbatch: float = 0.75
    merge_rate: float = 0.75
    aggregation_weights: str = "uniform"
    seed: int = 0
    batches_per_update: int = 6
    participations_per_update: int = 1
    seq_rounds_per_update: int = 40
    seq_updates_per_subject: int = 15
    merge_cadence: str = "update"
    resync_local: bool = True
    personalize_steps: int = 1
    personalize_step_size: Optional[float] = None
    keep_snapshots: int = 6

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}; choose from {ALGORITHMS}")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if not 0 < self.client_fraction <= 1:
            raise ConfigError("client_fraction must lie in (0, 1]")
        if self.local_steps < 1 or self.batches_per_update < 1 or self.participations_per_update < 1:
            raise ConfigError("local_steps, batches_per_update and participations_per_update must be >= 1")
        for name in ("sgd_step_size", "maml_outer_rate"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.maml_inner_rate < 0:
            raise ConfigError("maml_inner_rate must be nonnegative")
        if not (0 <= self.smoothbatch <= 1 and 0 <= self.merge_rate <= 1):
            raise ConfigError("smoothbatch and merge_rate must lie in [0, 1]")
        if self.aggregation_weights not in ("uniform", "data_size"):
            raise ConfigError("aggregation_weights must be 'uniform' or 'data_size'")
        if self.merge_cadence not in ("update", "subject"):
            raise ConfigError("merge_cadence must be 'update' or 'subject'")

    @property
    def personal_rate(self) -> float:
        return self.maml_inner_rate if self.personalize_step_size is None else self.personalize_step_size


@dataclass
class ClientState:
    id: int
    local: np.ndarray
    update_cursor: int = 0
    participation_count: int = 0

    def advanced(self, n_updates: int, every: int = 1) -> "ClientState":
        count = self.participation_count + 1
        cursor = self.update_cursor
        if count % every == 0:
            cursor = min(cursor + 1, n_updates - 1)
        return replace(self, update_cursor=cursor, participation_count=count)


@dataclass
class ServerState:
    global_: np.ndarray
    round: int = 0
    history: list = field(default_factory=list)


@dataclass
class RunArtifacts:
    """Everything a run leaves behind for evaluation, privacy and analysis."""

    algorithm: str
    config: dict
    seed: int
    client_ids: list
    global_history: list = field(default_factory=list)
    client_snapshots: dict = field(default_factory=dict)
    snapshot_updates: dict = field(default_factory=dict)
    personalized: dict = field(default_factory=dict)
    metrics: list = field(default_factory=list)
    merges: list = field(default_factory=list)
    subject_inits: dict = field(default_factory=dict)

    METRIC_COLUMNS = ("round", "client_id", "update_idx", "cost", "vel_err_weighted",
                      "vel_err_rms", "dist_to_final")

    @property
    def final_global(self) -> Optional[np.ndarray]:
        return self.global_history[-1] if self.global_history else None

    def final_decoder(self, client_id: int, kind: str = "default") -> np.ndarray:
        """Decoder a client ends with.

        ``kind``: "local" (own last model), "global" (shared copy),
        "personalized", or "default" (local for Local/Sequential, global for FL).
        """
        if kind == "default":
            kind = "global" if self.algorithm in FL_ALGORITHMS else "local"
        if kind == "global":
            if self.final_global is None:
                raise InsufficientDataError(f"{self.algorithm} run has no global model")
            return self.final_global
        if kind == "personalized":
            return self.personalized[client_id][-1]
        return self.client_snapshots[client_id][-1]


# ---------------------------------------------------------------------------
# client operations


def client_local_fit(c: ClientState, u: StreamedUpdate, p: CostParams, rate, n_updates: Optional[int] = None) -> ClientState:
    """Fully minimize the cost on ``u`` and SmoothBatch it into the client's decoder."""
    w_opt = solve_stats(update_stats(u, p)[0], p)
    new = smooth_batch(as_weights(c.local), w_opt, rate)
    n = c.update_cursor + 2 if n_updates is None else n_updates
    return replace(c.advanced(n), local=new)


def _sgd(w, stats, p, steps, lr, rng):
    guard = DivergenceGuard()
    nb = len(stats)
    for _ in range(steps):
        b = int(rng.integers(nb)) if nb > 1 else 0
        cost, g = quad_cost_grad(w, stats[b], p)
        guard(cost)
        w = w - lr * g
    return w


def _inner_batch(b_outer, nb, rng_inner):
    return (b_outer + 1 + int(rng_inner.integers(nb - 1))) % nb


def _fo_maml_step(w, st_inner, st_outer, p, inner, outer, guard):
    cost, g_in = quad_cost_grad(w, st_inner, p)
    guard(cost)
    w_tmp = w - inner * g_in
    _, g_out = quad_cost_grad(w_tmp, st_outer, p)
    return w - outer * g_out


def _perfedavg(w, stats, p, steps, inner, outer, rng, rng_inner):
    nb = len(stats)
    if nb < 2:
        raise InsufficientDataError("Per-FedAvg needs at least two mini-batches per update")
    guard = DivergenceGuard()
    for _ in range(steps):
        b2 = int(rng.integers(nb))
        b1 = _inner_batch(b2, nb, rng_inner)
        w = _fo_maml_step(w, stats[b1], stats[b2], p, inner, outer, guard)
    return w


def client_sgd_steps(c: ClientState, global_, u: StreamedUpdate, p: CostParams, steps: int,
                     step_size: float, n_batches: int, rng: np.random.Generator) -> Decoder:
    """``steps`` mini-batch gradient steps on ``u`` starting from the global model.

    Each step uses one contiguous slice of the update chosen uniformly by ``rng``.
    """
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    stats = update_stats(u, p, n_batches)
    return Decoder(_sgd(as_weights(global_).copy(), stats, p, steps, step_size, rng))


def perfedavg_client_step(c: ClientState, global_, u: StreamedUpdate, p: CostParams, inner_rate: float,
                          outer_rate: float, rng: np.random.Generator, n_batches: int = 6,
                          rng_inner: Optional[np.random.Generator] = None) -> Decoder:
    """One first-order Per-FedAvg step: adapt on one batch, then step with the gradient at the adapted point on another."""
    stats = update_stats(u, p, n_batches)
    return Decoder(_perfedavg(as_weights(global_).copy(), stats, p, 1, inner_rate, outer_rate, rng,
                              rng if rng_inner is None else rng_inner))


def aggregate(models: Sequence, weights: Optional[Sequence[float]] = None,
              ids: Optional[Sequence[int]] = None) -> np.ndarray:
    """Weighted entrywise mean, reduced in ascending client-id order."""
    if len(models) == 0:
        raise ConfigError("nothing to aggregate")
    if weights is None:
        weights = [1.0] * len(models)
    if len(weights) != len(models):
        raise ConfigError("one weight per model required")
    if any(wt < 0 for wt in weights):
        raise ConfigError("aggregation weights must be nonnegative")
    order = range(len(models)) if ids is None else sorted(range(len(models)), key=lambda k: ids[k])
    total = 0.0
    for k in order:
        total += float(weights[k])
    if not total > 0:
        raise ConfigError("aggregation weights sum to zero")
    out = np.zeros_like(as_weights(models[0]), dtype=float)
    for k in order:
        out = out + (float(weights[k]) / total) * as_weights(models[k])
    return out


def personalize(global_, session, p: CostParams, steps: int, step_size: float) -> Decoder:
    """Full-batch gradient steps from the global model on a client's training updates.

    ``session`` is a SubjectSession or a list of StreamedUpdates; the cost is the
    mean of the per-update costs.
    """
    updates = session.updates if isinstance(session, SubjectSession) else list(session)
    st = pooled_stats([update_stats(u, p)[0] for u in updates])
    w = as_weights(global_).copy()
    guard = DivergenceGuard()
    for _ in range(steps):
        cost, g = quad_cost_grad(w, st, p)
        guard(cost)
        w = w - step_size * g
    return Decoder(w)


# ---------------------------------------------------------------------------
# drivers


def _client_updates(sessions, train_updates):
    out = {}
    for s in sessions:
        idx = list(range(len(s.updates))) if train_updates is None else list(train_updates[s.subject_id])
        if not idx:
            raise InsufficientDataError(f"subject {s.subject_id} has no training updates")
        out[s.subject_id] = [s.updates[i] for i in idx], idx
    return out


def _metric_terms(w, st_full, p):
    cost, _ = quad_cost_grad(w, st_full, p)
    wG = w @ st_full.G
    sse = max(float(np.sum(wG * w) - 2.0 * np.sum(w * st_full.B) + st_full.c), 0.0)
    return cost, p.lambda_e * sse, math.sqrt(sse / st_full.n)


def run_open_loop(cfg: FedConfig, sessions: Sequence[SubjectSession], p: CostParams,
                  train_updates: Optional[dict] = None, init=None) -> RunArtifacts:
    """Stream each client's updates through Local, FedAvg or Per-FedAvg training.

    ``train_updates`` maps subject id to the update indices it may train on
    (default: all). ``init`` is the starting decoder (default: zeros).
    """
    sessions = sorted(sessions, key=lambda s: s.subject_id)
    data = _client_updates(sessions, train_updates)
    ids = [s.subject_id for s in sessions]
    C = sessions[0].n_channels
    w0 = np.zeros((2, C)) if init is None else as_weights(init).astype(float).copy()
    art = RunArtifacts(cfg.algorithm, asdict(cfg), cfg.seed, ids)

    if cfg.algorithm == "Local":
        for cid in ids:
            ups, idx = data[cid]
            c = ClientState(cid, w0.copy())
            snaps, rows = [], []
            for k, u in enumerate(ups):
                c = client_local_fit(c, u, p, cfg.smoothbatch, len(ups))
                snaps.append(c.local)
                rows.append((k, cid, idx[k], *_metric_terms(c.local, update_stats(u, p)[0], p)))
            art.client_snapshots[cid] = snaps
            art.snapshot_updates[cid] = list(idx)
            final = snaps[-1]
            art.metrics += [(*r, float(np.linalg.norm(s - final))) for r, s in zip(rows, snaps)]
        return art

    if cfg.algorithm not in FL_ALGORITHMS:
        raise ConfigError(f"run_open_loop does not run {cfg.algorithm}; see run_sequential / closedloop")
    if len(sessions) < 2:
        raise InsufficientDataError("federated runs need at least two clients")

    K = len(ids)
    m = max(1, math.ceil(cfg.client_fraction * K - 1e-9))
    clients = {cid: ClientState(cid, w0.copy()) for cid in ids}
    stats = {cid: [update_stats(u, p, cfg.batches_per_update) for u in data[cid][0]] for cid in ids}
    full = {cid: [update_stats(u, p)[0] for u in data[cid][0]] for cid in ids}
    server = ServerState(w0.copy(), 0, [w0.copy()])
    sampler = make_rng(cfg.seed, "sample")
    rows = []
    for cid in ids:
        art.client_snapshots[cid] = []
        art.snapshot_updates[cid] = []

    for r in range(1, cfg.rounds + 1):
        chosen = sorted(ids[k] for k in sampler.choice(K, size=m, replace=False))
        uploads, weights = [], []
        for cid in chosen:
            c = clients[cid]
            n_up = len(stats[cid])
            st = stats[cid][c.update_cursor]
            rng = make_rng(cfg.seed, "client", cid, r, "outer")
            if cfg.algorithm == "FedAvg":
                w = _sgd(server.global_.copy(), st, p, cfg.local_steps, cfg.sgd_step_size, rng)
            else:
                rng_in = make_rng(cfg.seed, "client", cid, r, "inner")
                w = _perfedavg(server.global_.copy(), st, p, cfg.local_steps, cfg.maml_inner_rate,
                               cfg.maml_outer_rate, rng, rng_in)
            upd = data[cid][1][c.update_cursor]
            rows.append((r, cid, upd, *_metric_terms(w, full[cid][c.update_cursor], p)))
            art.client_snapshots[cid].append(w)
            art.snapshot_updates[cid].append(upd)
            clients[cid] = replace(c.advanced(n_up, cfg.participations_per_update), local=w)
            uploads.append(w)
            weights.append(1.0 if cfg.aggregation_weights == "uniform" else float(st[0].n * len(st)))
        server = ServerState(aggregate(uploads, weights, chosen), r, server.history)
        server.history.append(server.global_)

    art.global_history = server.history
    final = server.global_
    art.metrics = [(*row, float(np.linalg.norm(art.global_history[row[0]] - final))) for row in rows]
    tail = art.global_history[-cfg.keep_snapshots:]
    for cid in ids:
        art.personalized[cid] = [
            as_weights(personalize(g, data[cid][0], p, cfg.personalize_steps, cfg.personal_rate)) for g in tail
        ]
    return art


def sequential_train_update(local, u: StreamedUpdate, p: CostParams, cfg: FedConfig) -> np.ndarray:
    """First-order Per-FedAvg on one update: ``seq_rounds_per_update`` passes over its contiguous batches.

    Within a pass, batch b is the adaptation batch and batch b+1 (cyclic) the
    meta-gradient batch.
    """
    stats = update_stats(u, p, cfg.batches_per_update)
    nb = len(stats)
    if nb < 2:
        raise InsufficientDataError("sequential Per-FedAvg needs at least two batches per update")
    w = as_weights(local).copy()
    guard = DivergenceGuard()
    for _ in range(cfg.seq_rounds_per_update):
        for b in range(nb):
            w = _fo_maml_step(w, stats[b], stats[(b + 1) % nb], p, cfg.maml_inner_rate,
                              cfg.maml_outer_rate, guard)
    return w


def sequential_merge(global_, local, merge_rate: float) -> np.ndarray:
    """Server step when a single subject uploads: SmoothBatch the global toward the local decoder."""
    return smooth_batch(as_weights(global_), as_weights(local), SmoothBatchRate(merge_rate))


def run_sequential(cfg: FedConfig, sessions_in_order: Sequence[SubjectSession], p: CostParams,
                   init=None) -> RunArtifacts:
    """Sequential Per-FedAvg over recorded sessions, one subject at a time, each once."""
    if cfg.algorithm != "SequentialPerFedAvg":
        raise ConfigError("run_sequential requires algorithm='SequentialPerFedAvg'")
    if not sessions_in_order:
        raise InsufficientDataError("empty subject order")
    C = sessions_in_order[0].n_channels
    g = np.zeros((2, C)) if init is None else as_weights(init).astype(float).copy()
    ids = [s.subject_id for s in sessions_in_order]
    art = RunArtifacts(cfg.algorithm, asdict(cfg), cfg.seed, ids, global_history=[g])
    for s in sessions_in_order:
        cid = s.subject_id
        art.subject_inits[cid] = g
        local = g.copy()
        snaps, upd_idx = [], []
        for k, u in enumerate(s.updates[:cfg.seq_updates_per_subject]):
            local = sequential_train_update(local, u, p, cfg)
            art.metrics.append((len(art.global_history), cid, k,
                                *_metric_terms(local, update_stats(u, p)[0], p)))
            if cfg.merge_cadence == "update":
                g, local = _merge(art, cid, k, g, local, cfg)
            snaps.append(local)
            upd_idx.append(k)
        if cfg.merge_cadence == "subject":
            g, local = _merge(art, cid, upd_idx[-1], g, local, cfg)
            snaps[-1] = local
        art.client_snapshots[cid] = snaps
        art.snapshot_updates[cid] = upd_idx
    final = art.global_history[-1]
    art.metrics = [(*row, float(np.linalg.norm(art.global_history[min(row[0], len(art.global_history) - 1)] - final)))
                   for row in art.metrics]
    return art


def _merge(art, cid, k, g, local, cfg):
    new = sequential_merge(g, local, cfg.merge_rate)
    art.merges.append((cid, k, g, local, new))
    art.global_history.append(new)
    return new, (new.copy() if cfg.resync_local else local)
