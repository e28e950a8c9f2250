"""Simulated co-adaptive user and the closed-loop trial loop.

A synthetic user turns the gap between reference and cursor into an intent,
and an intent into a nonnegative muscle envelope through a per-subject
encoder.  The same machinery records the open-loop "data collection" sessions
(see :func:`record_session`) and runs the in-trial decoder training.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .decoder import (CostParams, Decoder, as_weights, random01_decoder, smooth_batch,
                      solve_stats, update_stats, velocity_error)
from .errors import ConfigError, NumericError, TrialAborted
from .seeding import derive_seed, make_rng
from .signal import RATE_HZ, UPDATE_SECONDS, ReferenceSpec, StreamedUpdate, SubjectSession, generate_reference

MODES = ("replay", "static-encoder")
INITIALIZATIONS = ("Random01", "OpenLoopGlobal", "PretrainedLocal")
TRIAL_ALGORITHMS = ("Local", "SequentialPerFedAvg", "Static")


@dataclass(frozen=True)
class UserModelParams:
    """Population model for synthetic subjects.

    Every subject shares a base encoder (``|N(0,1)| * encoder_scale``) and a
    base tone (``U(0.5, 1.5) * baseline_scale``).  A subject's own encoder
    rotates the base intent axes by a random angle (std ``rotation_deg``),
    scales each entry by ``|1 + heterogeneity * N(0,1)|`` and silences a
    random ``mask_fraction`` of channels.  ``update_jitter`` re-perturbs the
    encoder multiplicatively for every 20 s update (fatigue, electrode shift).

    ``mode`` selects how sessions are recorded: ``replay`` runs the user
    against a Local-adapting decoder started from the shared Random01 draw,
    ``static-encoder`` lets the cursor follow the reference with a first-order
    lag and no decoder in the loop.

    ``intent_limit`` caps the norm of the intent vector (maximum effort), so a
    cursor stuck far from the target does not drive the envelope without bound.
    """

    population_seed: int = 0
    channels: int = 64
    encoder_scale: float = 2.0
    baseline_scale: float = 5.0
    heterogeneity: float = 0.2
    baseline_heterogeneity: float = 0.05
    rotation_deg: float = 5.0
    mask_fraction: float = 0.0
    update_jitter: float = 0.3
    noise_scale: float = 0.5
    gain: float = 3.0
    intent_limit: float = 1.5
    adapt_rate: float = 0.0
    mode: str = "replay"
    screen_limit: float = 1.0
    replay_smoothbatch: float = 0.75

    def __post_init__(self):
        if self.channels < 1:
            raise ConfigError("channels must be >= 1")
        for name in ("encoder_scale", "baseline_scale", "heterogeneity", "baseline_heterogeneity",
                     "rotation_deg", "update_jitter", "noise_scale", "adapt_rate"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ConfigError(f"{name} must be finite and nonnegative")
        if not 0 <= self.mask_fraction < 1:
            raise ConfigError("mask_fraction must lie in [0, 1)")
        if not self.gain > 0:
            raise ConfigError("gain must be positive")
        if not self.intent_limit > 0:
            raise ConfigError("intent_limit must be positive (inf disables it)")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if not self.screen_limit > 0:
            raise ConfigError("screen_limit must be positive")


@dataclass(frozen=True)
class SimulatedUser:
    encoder: np.ndarray   # (C, 2), intent -> muscle
    baseline: np.ndarray  # (C,)
    noise_scale: float = 0.5
    gain: float = 3.0
    adapt_rate: float = 0.0
    seed: int = 0
    jitter: float = 0.0
    subject_id: int = 0
    intent_limit: float = float("inf")

    def __post_init__(self):
        E = np.asarray(self.encoder, dtype=float)
        b = np.asarray(self.baseline, dtype=float)
        if E.ndim != 2 or E.shape[1] != 2 or b.shape != (E.shape[0],):
            raise ConfigError("encoder must be (C, 2) and baseline (C,)")
        if not (np.all(np.isfinite(E)) and np.all(np.isfinite(b))):
            raise ConfigError("encoder and baseline must be finite")
        if np.any(E < 0) or np.any(b < 0):
            raise ConfigError("encoder and baseline must be nonnegative")
        if (self.noise_scale < 0 or self.adapt_rate < 0 or self.jitter < 0 or not self.gain > 0
                or not self.intent_limit > 0):
            raise ConfigError("invalid user scalars")
        object.__setattr__(self, "encoder", E)
        object.__setattr__(self, "baseline", b)

    @property
    def n_channels(self) -> int:
        return self.encoder.shape[0]


def _population(params: UserModelParams):
    rng = make_rng(params.population_seed, "population")
    C = params.channels
    E = np.abs(rng.standard_normal((C, 2))) * params.encoder_scale
    b = rng.uniform(0.5, 1.5, size=C) * params.baseline_scale
    return E, b


def make_user(subject_id: int, params: UserModelParams) -> SimulatedUser:
    """Deterministic synthetic subject: same (params, subject_id), same user."""
    E0, b0 = _population(params)
    rng = make_rng(params.population_seed, "subject", subject_id)
    C = params.channels
    theta = np.deg2rad(params.rotation_deg) * rng.standard_normal()
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    scale = np.abs(1.0 + params.heterogeneity * rng.standard_normal((C, 2)))
    keep = rng.uniform(size=C) >= params.mask_fraction
    E = np.clip(E0 @ rot, 0.0, None) * scale * keep[:, None]
    b = np.clip(b0 * (1.0 + params.baseline_heterogeneity * rng.standard_normal(C)), 0.0, None)
    return SimulatedUser(E, b, params.noise_scale, params.gain, params.adapt_rate,
                         derive_seed(params.population_seed, "user", subject_id), params.update_jitter,
                         subject_id, params.intent_limit)


def _saturate(i, limit):
    n = math.hypot(i[0], i[1])
    return i * (limit / n) if n > limit else i


def user_intent(u: SimulatedUser, r_t, y_t) -> np.ndarray:
    """``gain (r - y)``, shrunk to norm ``intent_limit`` when it exceeds it."""
    return _saturate(u.gain * (np.asarray(r_t, dtype=float) - np.asarray(y_t, dtype=float)), u.intent_limit)


def user_emit(u: SimulatedUser, r_t, y_t, rng: Optional[np.random.Generator] = None,
              encoder: Optional[np.ndarray] = None) -> np.ndarray:
    """One envelope sample: ``max(0, E i + b + noise)`` with ``i`` from :func:`user_intent`.

    ``encoder`` overrides the user's encoder (used for per-update jitter).
    """
    E = u.encoder if encoder is None else encoder
    s = E @ user_intent(u, r_t, y_t) + u.baseline
    if u.noise_scale > 0:
        if rng is None:
            raise ConfigError("rng required when noise_scale > 0")
        s = s + u.noise_scale * rng.standard_normal(u.n_channels)
    return np.maximum(s, 0.0)


def adaptation_objective(encoder, baseline, w, intents) -> float:
    """Mean over the window of ``||w (E i + b) - i||^2``; intents are (T, 2)."""
    I = np.asarray(intents, dtype=float)
    R = (as_weights(w) @ (np.asarray(encoder) @ I.T + np.asarray(baseline)[:, None])) - I.T
    return float(np.sum(R * R) / I.shape[0])


def adaptation_gradient(encoder, baseline, w, intents) -> np.ndarray:
    """Gradient of :func:`adaptation_objective` with respect to the encoder."""
    I = np.asarray(intents, dtype=float)
    W = as_weights(w)
    R = W @ (np.asarray(encoder) @ I.T + np.asarray(baseline)[:, None]) - I.T
    return 2.0 * W.T @ R @ I / I.shape[0]


def adaptation_lipschitz(w, intents) -> float:
    """Lipschitz constant of the adaptation gradient in the encoder."""
    I = np.asarray(intents, dtype=float)
    sw = np.linalg.norm(as_weights(w), 2)
    si = np.linalg.norm(I, 2)
    return 2.0 * sw * sw * si * si / I.shape[0]


def user_adapt(u: SimulatedUser, recent) -> SimulatedUser:
    """One projected gradient step of the user's encoder toward what the decoder expects.

    ``recent`` = (decoder, intents (T, 2), emissions); emissions are accepted for
    interface symmetry but the step only needs the intents.  The step size is
    ``adapt_rate / L`` with L from :func:`adaptation_lipschitz`, so rates in
    (0, 1] never overshoot whatever the decoder's scale.
    """
    if u.adapt_rate == 0:
        return u
    w, intents = recent[0], recent[1]
    L = adaptation_lipschitz(w, intents)
    if not L > 0:
        return u
    g = adaptation_gradient(u.encoder, u.baseline, w, intents)
    E = np.clip(u.encoder - (u.adapt_rate / L) * g, 0.0, None)
    if not np.all(np.isfinite(E)):
        raise NumericError("user adaptation produced non-finite encoder")
    return replace(u, encoder=E)


def _jittered(u: SimulatedUser, rng) -> np.ndarray:
    if u.jitter == 0:
        return u.encoder
    return np.abs(u.encoder * (1.0 + u.jitter * rng.standard_normal(u.encoder.shape)))


def _simulate_update(u: SimulatedUser, w, ref, y0, dt, limit, rng, follow_gain=None):
    """Run one update tick by tick. Returns (S (C,T), cursor (T,2), intents (T,2), y_end).

    The cursor sample at tick t is the position *before* the tick's velocity is
    applied. ``w=None`` lets the cursor follow the reference with first-order
    lag ``follow_gain`` instead of a decoder.
    """
    T = ref.shape[0]
    E = _jittered(u, rng)
    noise = u.noise_scale * rng.standard_normal((T, u.n_channels)) if u.noise_scale > 0 else None
    S = np.empty((T, u.n_channels))
    Y = np.empty((T, 2))
    I = np.empty((T, 2))
    y = np.array(y0, dtype=float)
    W = None if w is None else as_weights(w)
    b = u.baseline
    for t in range(T):
        i = _saturate(u.gain * (ref[t] - y), u.intent_limit)
        s = E @ i + b
        if noise is not None:
            s = s + noise[t]
        np.maximum(s, 0.0, out=s)
        S[t], Y[t], I[t] = s, y, i
        v = (W @ s) if W is not None else follow_gain * (ref[t] - y)
        y = np.clip(y + dt * v, -limit, limit)
    if not (np.all(np.isfinite(S)) and np.all(np.isfinite(Y))):
        raise NumericError("simulation produced non-finite values")
    return S.T.copy(), Y, I, y


def shared_random01(channels: int, seed: int) -> Decoder:
    """The single Random01 decoder every subject starts from."""
    return random01_decoder(channels, make_rng(seed, "random01"))


def record_session(subject_id: int, params: UserModelParams, reference_spec: ReferenceSpec,
                   n_updates: int, rng: np.random.Generator, exclude_first: int = 0,
                   seed: int = 0, cost: Optional[CostParams] = None) -> SubjectSession:
    """Record ``n_updates`` updates from a synthetic subject and drop the first ``exclude_first``."""
    if n_updates <= exclude_first:
        raise ConfigError("n_updates must exceed exclude_first")
    cost = cost or CostParams()
    user = make_user(subject_id, params)
    rate = reference_spec.rate
    T = int(round(UPDATE_SECONDS * rate))
    spec = replace(reference_spec, duration_s=n_updates * T / rate)
    ref = generate_reference(spec, rng).samples
    dt = 1.0 / rate
    y = np.zeros(2)
    if params.mode == "replay":
        w = as_weights(shared_random01(params.channels, params.population_seed))
    else:
        w = None
    updates = []
    for k in range(n_updates):
        R = ref[k * T:(k + 1) * T]
        S, Y, I, y = _simulate_update(user, w, R, y, dt, params.screen_limit, rng, follow_gain=user.gain)
        upd = StreamedUpdate(S, R.copy(), Y, dt)
        updates.append(upd)
        if w is not None:
            w = smooth_batch(w, solve_stats(update_stats(upd, cost)[0], cost), params.replay_smoothbatch)
            user = user_adapt(user, (w, I, S))
    return SubjectSession(subject_id, updates[exclude_first:], seed=seed, generator_tag=f"synthetic-{params.mode}-v1")


# ---------------------------------------------------------------------------
# trials


@dataclass(frozen=True)
class TrialConfig:
    n_updates: int = 15
    update_seconds: float = UPDATE_SECONDS
    rate: float = RATE_HZ
    batches_per_update: int = 6
    rounds_per_update: int = 40
    algorithm: str = "Local"
    initialization: str = "Random01"
    smoothbatch: float = 0.75
    merge_rate: float = 0.75
    cost: CostParams = field(default_factory=CostParams)
    maml_inner_rate: float = 0.1
    maml_outer_rate: float = 0.1
    seed: int = 0
    screen_limit: float = 1.0
    reference: ReferenceSpec = field(default_factory=ReferenceSpec)
    stream: str = "trial"

    def __post_init__(self):
        if self.n_updates < 1 or self.batches_per_update < 1 or self.rounds_per_update < 1:
            raise ConfigError("trial counts must be positive")
        if not (self.update_seconds > 0 and self.rate > 0):
            raise ConfigError("update_seconds and rate must be positive")
        if self.algorithm not in TRIAL_ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {TRIAL_ALGORITHMS}")
        if self.initialization not in INITIALIZATIONS:
            raise ConfigError(f"initialization must be one of {INITIALIZATIONS}")
        if not (0 <= self.smoothbatch <= 1 and 0 <= self.merge_rate <= 1):
            raise ConfigError("smoothbatch and merge_rate must lie in [0, 1]")

    @property
    def samples_per_update(self) -> int:
        return int(round(self.update_seconds * self.rate))


@dataclass
class TrialTrace:
    subject_id: int
    algorithm: str
    initialization: str
    seed: int
    config: dict
    decoders: list                      # initial + one per update
    encoders: list                      # user encoder at the start of each update
    reference: list                     # (T, 2) per update
    cursor: list                        # (T, 2) per update
    metrics: list                       # (update, vel_err_weighted, vel_err_rms, tracking_rms)
    merges: list = field(default_factory=list)
    final_global: Optional[np.ndarray] = None
    updates: list = field(default_factory=list)  # full StreamedUpdates when kept

    METRIC_COLUMNS = ("update", "vel_err_weighted", "vel_err_rms", "tracking_rms")

    @property
    def final_decoder(self) -> np.ndarray:
        return self.decoders[-1]

    @property
    def displacement(self) -> float:
        return float(np.linalg.norm(self.decoders[-1] - self.decoders[0]))

    def final_velocity_error(self) -> float:
        return self.metrics[-1][2]

    def as_session(self) -> SubjectSession:
        if not self.updates:
            raise ConfigError("trial was run without keep_updates=True")
        return SubjectSession(self.subject_id, list(self.updates), seed=self.seed,
                              generator_tag=f"trial-{self.algorithm}-{self.initialization}")


def _seq_fed_config(cfg: TrialConfig):
    from .federation import FedConfig

    return FedConfig(algorithm="SequentialPerFedAvg", batches_per_update=cfg.batches_per_update,
                     seq_rounds_per_update=cfg.rounds_per_update, maml_inner_rate=cfg.maml_inner_rate,
                     maml_outer_rate=cfg.maml_outer_rate, merge_rate=cfg.merge_rate, seed=cfg.seed)


def run_trial(user: SimulatedUser, cfg: TrialConfig, initial, global_=None,
              keep_updates: bool = False) -> TrialTrace:
    """Simulate one closed-loop trial of ``cfg.n_updates`` updates.

    Decoder training happens only between updates, so the decoder in use during
    update k depends only on updates 0..k-1.  For SequentialPerFedAvg the
    global decoder (``global_``, default ``initial``) is merged with the local
    decoder after each update and the local decoder restarts from the merge.
    Envelopes are only kept in the trace when ``keep_updates`` is set.
    """
    from .federation import sequential_merge, sequential_train_update

    w = as_weights(initial).astype(float).copy()
    if w.shape != (2, user.n_channels):
        raise ConfigError(f"initial decoder must be (2, {user.n_channels}), got {w.shape}")
    p = cfg.cost
    rng = make_rng(cfg.seed, cfg.stream, user.seed)
    T = cfg.samples_per_update
    spec = replace(cfg.reference, duration_s=cfg.n_updates * T / cfg.rate, rate=cfg.rate)
    ref = generate_reference(spec, rng).samples
    dt = 1.0 / cfg.rate
    g = None
    fed = None
    if cfg.algorithm == "SequentialPerFedAvg":
        g = w.copy() if global_ is None else as_weights(global_).astype(float).copy()
        fed = _seq_fed_config(cfg)
    trace = TrialTrace(user.subject_id, cfg.algorithm, cfg.initialization, cfg.seed, _echo(cfg),
                       [w.copy()], [], [], [], [])
    y = np.zeros(2)
    for k in range(cfg.n_updates):
        trace.encoders.append(user.encoder.copy())
        R = ref[k * T:(k + 1) * T]
        try:
            S, Y, I, y = _simulate_update(user, w, R, y, dt, cfg.screen_limit, rng)
            upd = StreamedUpdate(S, R.copy(), Y, dt)
            we, wr = velocity_error(w, upd, p)
            track = float(np.sqrt(np.mean(np.sum((R - Y) ** 2, axis=1))))
            trace.reference.append(upd.reference)
            trace.cursor.append(upd.cursor)
            if keep_updates:
                trace.updates.append(upd)
            trace.metrics.append((k, we, wr, track))
            if cfg.algorithm == "Local":
                w = smooth_batch(w, solve_stats(update_stats(upd, p)[0], p), cfg.smoothbatch)
            elif cfg.algorithm == "SequentialPerFedAvg":
                local = sequential_train_update(w, upd, p, fed)
                new = sequential_merge(g, local, cfg.merge_rate)
                trace.merges.append((user.subject_id, k, g, local, new))
                g = new
                w = new.copy()
            if not np.all(np.isfinite(w)):
                raise NumericError("decoder weights became non-finite")
            user = user_adapt(user, (w, I, S))
        except NumericError as exc:
            raise TrialAborted(f"subject {user.subject_id}, {cfg.algorithm}/{cfg.initialization}, "
                               f"update {k}: {exc}") from exc
        trace.decoders.append(w.copy())
    trace.final_global = g
    return trace


def _echo(cfg: TrialConfig) -> dict:
    d = asdict(cfg)
    d["cost"] = asdict(cfg.cost)
    d["reference"] = asdict(cfg.reference)
    return d
