"""Linear EMG-to-velocity decoder: prediction, ridge cost, solvers, SmoothBatch."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .errors import (ConfigError, DimensionError, FormatError, NumericError,
                     SingularSystemError, StepSizeError)
from .signal import CM_PER_UNIT, StreamedUpdate, Trajectory

TARGETS = ("gap", "derivative")


@dataclass(frozen=True)
class Decoder:
    """2 x C weight matrix mapping one envelope sample to a planar velocity."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        if w.ndim != 2 or w.shape[0] != 2:
            raise DimensionError(f"decoder weights must be 2 x C, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise NumericError("decoder weights must be finite")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def n_channels(self) -> int:
        return self.weights.shape[1]

    def flat(self) -> np.ndarray:
        return self.weights.reshape(-1)

    def __eq__(self, other):
        return isinstance(other, Decoder) and np.array_equal(self.weights, other.weights)

    __hash__ = None


@dataclass(frozen=True)
class CostParams:
    """Weights of the ridge decoder cost.

    ``target`` picks the regression target: ``"gap"`` is the gap-closing
    velocity ``gap_gain * (r - y)``; ``"derivative"`` is the forward
    difference of ``r - y``.
    """

    lambda_e: float = 1e-6
    lambda_w: float = 1e-4
    target: str = "gap"
    gap_gain: float = 1.0

    def __post_init__(self):
        if self.lambda_e < 0 or self.lambda_w < 0:
            raise ConfigError("cost weights must be nonnegative")
        if self.lambda_e == 0 and self.lambda_w == 0:
            raise ConfigError("lambda_e and lambda_w cannot both be zero")
        if self.target not in TARGETS:
            raise ConfigError(f"target must be one of {TARGETS}")


@dataclass(frozen=True)
class SmoothBatchRate:
    alpha: float = 0.75

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("SmoothBatch rate must lie in [0, 1]")


DecoderLike = Union[Decoder, np.ndarray]


def as_weights(d: DecoderLike) -> np.ndarray:
    return d.weights if isinstance(d, Decoder) else np.asarray(d, dtype=float)


def random01_decoder(n_channels: int, rng: np.random.Generator) -> Decoder:
    return Decoder(rng.uniform(0.0, 1.0, size=(2, n_channels)))


# ---------------------------------------------------------------------------
# kinematics


def predict_velocity(d: DecoderLike, s) -> np.ndarray:
    w = as_weights(d)
    s = np.asarray(s, dtype=float)
    if s.shape[0] != w.shape[1]:
        raise DimensionError(f"envelope has {s.shape[0]} channels, decoder expects {w.shape[1]}")
    return w @ s


def integrate_cursor(v_seq, dt: float, y0=(0.0, 0.0)) -> Trajectory:
    """Explicit Euler: ``y[t+1] = y[t] + dt * v[t]``; returns len(v_seq) + 1 samples."""
    v = np.asarray(v_seq, dtype=float).reshape(-1, 2)
    y = np.empty((v.shape[0] + 1, 2))
    y[0] = y0
    acc = np.asarray(y0, dtype=float).copy()
    for t in range(v.shape[0]):
        acc = acc + dt * v[t]
        y[t + 1] = acc
    return Trajectory(y, rate=1.0 / dt)


def _samples(x) -> np.ndarray:
    return x.samples if isinstance(x, Trajectory) else np.asarray(x, dtype=float)


def target_velocity(reference, cursor, dt: float) -> np.ndarray:
    """Forward difference of the gap ``r - y``; the last sample repeats the previous one."""
    gap = _samples(reference) - _samples(cursor)
    if gap.shape[0] < 2:
        raise DimensionError("need at least 2 samples to differentiate")
    v = np.empty_like(gap)
    v[:-1] = (gap[1:] - gap[:-1]) / dt
    v[-1] = v[-2]
    return v


def gap_velocity(reference, cursor, gain: float = 1.0) -> np.ndarray:
    """Velocity that would close the current gap in ``1 / gain`` seconds."""
    return gain * (_samples(reference) - _samples(cursor))


def update_targets(u: StreamedUpdate, p: CostParams) -> np.ndarray:
    """Regression targets V* for one update, shape (2, T)."""
    key = ("targets", p.target, p.gap_gain)
    if key not in u._cache:
        if p.target == "gap":
            v = gap_velocity(u.reference, u.cursor, p.gap_gain)
        else:
            v = target_velocity(u.reference, u.cursor, u.dt)
        u._cache[key] = np.ascontiguousarray(v.T)
    return u._cache[key]


# ---------------------------------------------------------------------------
# cost


@dataclass(frozen=True)
class BatchStats:
    """Sufficient statistics of one contiguous slice of an update.

    ``scale`` = T_update / T_batch makes the batch cost an unbiased estimate of
    the full-update cost.
    """

    G: np.ndarray  # S S^T, (C, C)
    B: np.ndarray  # V* S^T, (2, C)
    c: float       # ||V*||^2
    n: int
    scale: float


def batch_bounds(T: int, n_batches: int):
    edges = np.linspace(0, T, n_batches + 1).round().astype(int)
    return [(int(edges[i]), int(edges[i + 1])) for i in range(n_batches)]


def update_stats(u: StreamedUpdate, p: CostParams, n_batches: int = 1):
    key = ("stats", p.target, p.gap_gain, n_batches)
    if key not in u._cache:
        S = u.envelope
        V = update_targets(u, p)
        T = S.shape[1]
        if n_batches < 1 or n_batches > T:
            raise ConfigError(f"cannot split {T} samples into {n_batches} batches")
        out = []
        for lo, hi in batch_bounds(T, n_batches):
            Sb, Vb = S[:, lo:hi], V[:, lo:hi]
            out.append(BatchStats(Sb @ Sb.T, Vb @ Sb.T, float(np.sum(Vb * Vb)), hi - lo, T / (hi - lo)))
        u._cache[key] = out
    return u._cache[key]


def pooled_stats(stats: Sequence[BatchStats]) -> BatchStats:
    """Average of per-update full-batch statistics (mean of per-update costs)."""
    k = len(stats)
    G = sum(s.G * s.scale for s in stats) / k
    B = sum(s.B * s.scale for s in stats) / k
    c = sum(s.c * s.scale for s in stats) / k
    return BatchStats(G, B, c, sum(s.n for s in stats), 1.0)


def quad_cost_grad(w: np.ndarray, st: BatchStats, p: CostParams):
    """Cost and gradient of the (scaled) ridge objective from sufficient statistics."""
    a = p.lambda_e * st.scale
    wG = w @ st.G
    grad = 2.0 * a * (wG - st.B) + 2.0 * p.lambda_w * w
    cost = a * (np.sum(wG * w) - 2.0 * np.sum(w * st.B) + st.c) + p.lambda_w * np.sum(w * w)
    return float(cost), grad


def cost_and_gradient(d: DecoderLike, u: StreamedUpdate, p: CostParams, label=None):
    """``lambda_e ||w S - V*||_F^2 + lambda_w ||w||_F^2`` and its gradient over a whole update."""
    w = as_weights(d)
    S = u.envelope
    if w.shape[1] != S.shape[0]:
        raise DimensionError(f"decoder has {w.shape[1]} channels, update has {S.shape[0]}")
    R = w @ S - update_targets(u, p)
    cost = p.lambda_e * np.sum(R * R) + p.lambda_w * np.sum(w * w)
    grad = 2.0 * p.lambda_e * (R @ S.T) + 2.0 * p.lambda_w * w
    if not (np.isfinite(cost) and np.all(np.isfinite(grad))):
        raise NumericError(f"non-finite cost on update {label if label is not None else '<unnamed>'}")
    return float(cost), grad


def lipschitz_constant(st: BatchStats, p: CostParams) -> float:
    return 2.0 * (p.lambda_e * st.scale * float(np.linalg.eigvalsh(st.G)[-1]) + p.lambda_w)


# ---------------------------------------------------------------------------
# solvers


def solve_stats(st: BatchStats, p: CostParams) -> np.ndarray:
    C = st.G.shape[0]
    A = p.lambda_e * st.scale * st.G + p.lambda_w * np.eye(C)
    rhs = p.lambda_e * st.scale * st.B.T
    if p.lambda_w == 0:
        if np.linalg.matrix_rank(A) < C:
            raise SingularSystemError("normal equations are singular; use lambda_w > 0")
    try:
        return np.linalg.solve(A, rhs).T
    except np.linalg.LinAlgError:
        raise SingularSystemError("normal equations are singular; use lambda_w > 0") from None


def solve_optimal(u: StreamedUpdate, p: CostParams) -> Decoder:
    """Exact minimizer ``w* = lambda_e V* S^T (lambda_e S S^T + lambda_w I)^-1``."""
    return Decoder(solve_stats(update_stats(u, p)[0], p))


class DivergenceGuard:
    """Raises StepSizeError when the cost grows 10x over 10 consecutive increasing steps."""

    def __init__(self, window: int = 10, factor: float = 10.0):
        self.window = window
        self.factor = factor
        self.history = []
        self.rising = 0

    def __call__(self, cost: float):
        if not np.isfinite(cost):
            raise StepSizeError("cost became non-finite; reduce the step size")
        h = self.history
        if h and cost > h[-1]:
            self.rising += 1
        else:
            self.rising = 0
        h.append(cost)
        if len(h) > self.window + 1:
            del h[0]
        if self.rising >= self.window and cost >= self.factor * h[0]:
            raise StepSizeError(f"cost grew {cost / h[0]:.3g}x over {self.window} steps; reduce the step size")


def gradient_descent_solve(u: StreamedUpdate, p: CostParams, steps: int, step_size: float,
                           w0: Optional[DecoderLike] = None, n_batches: int = 1,
                           schedule: Optional[Sequence[int]] = None, tol: float = 0.0) -> Decoder:
    """Plain gradient descent on the update's cost.

    With ``n_batches > 1`` each step uses one contiguous mini-batch, in the
    order given by ``schedule`` (cycled) or 0, 1, ..., n_batches-1 by default.
    Stops early once the gradient norm falls below ``tol``.
    """
    if not step_size > 0:
        raise ConfigError("step_size must be positive")
    stats = update_stats(u, p, n_batches)
    w = np.zeros((2, u.n_channels)) if w0 is None else as_weights(w0).copy()
    order = list(schedule) if schedule is not None else list(range(n_batches))
    guard = DivergenceGuard()
    for k in range(steps):
        cost, grad = quad_cost_grad(w, stats[order[k % len(order)]], p)
        guard(cost)
        if tol and np.sqrt(np.sum(grad * grad)) <= tol:
            break
        w = w - step_size * grad
    return Decoder(w)


def smooth_batch(w_old: DecoderLike, w_opt: DecoderLike, rate) -> DecoderLike:
    """``(1 - alpha) * w_old + alpha * w_opt``."""
    alpha = rate.alpha if isinstance(rate, SmoothBatchRate) else float(rate)
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError("SmoothBatch rate must lie in [0, 1]")
    a, b = as_weights(w_old), as_weights(w_opt)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    out = (1.0 - alpha) * a + alpha * b
    return Decoder(out) if isinstance(w_old, Decoder) else out


def velocity_error(d: DecoderLike, u: StreamedUpdate, p: CostParams):
    """(``lambda_e ||w S - V*||^2``, RMS of ``w S - V*`` in screen units/s)."""
    w = as_weights(d)
    R = w @ u.envelope - update_targets(u, p)
    sse = float(np.sum(R * R))
    return p.lambda_e * sse, float(np.sqrt(sse / u.n_samples))


def to_cm(x: float, cm_per_unit: float = CM_PER_UNIT) -> float:
    return x * cm_per_unit


# ---------------------------------------------------------------------------
# snapshot files

SNAPSHOT_HEADER = "subject_id,algorithm,update_index,round"


def save_decoder(path, d: DecoderLike, subject_id: int, algorithm: str, update_index: int,
                 round: int = -1) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    w = as_weights(d)
    lines = [SNAPSHOT_HEADER, f"{int(subject_id)},{algorithm},{int(update_index)},{int(round)}"]
    lines += [",".join(map(repr, row)) for row in w.tolist()]
    path.write_text("\n".join(lines) + "\n")
    return path


def load_decoder(path):
    path = Path(path)
    lines = path.read_text().splitlines()
    if len(lines) != 4:
        raise FormatError(f"expected 4 lines, found {len(lines)}", path=path)
    if lines[0].strip() != SNAPSHOT_HEADER:
        raise FormatError("bad snapshot header", path=path, line=1)
    parts = lines[1].split(",")
    if len(parts) != 4:
        raise FormatError("bad manifest line", path=path, line=2)
    try:
        meta = dict(subject_id=int(parts[0]), algorithm=parts[1],
                    update_index=int(parts[2]), round=int(parts[3]))
    except ValueError:
        raise FormatError("bad manifest values", path=path, line=2) from None
    rows = []
    for i in (2, 3):
        try:
            rows.append([float(x) for x in lines[i].split(",")])
        except ValueError:
            raise FormatError("not a number", path=path, line=i + 1) from None
    if len(rows[0]) != len(rows[1]):
        raise FormatError("rows differ in length", path=path, line=4)
    w = np.asarray(rows)
    if not np.all(np.isfinite(w)):
        raise FormatError("non-finite weight", path=path)
    return Decoder(w), meta
