"""Reference trajectories, EMG envelope sessions and their on-disk format."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, FormatError, InputTooShortError, SegmentationError

RATE_HZ = 60.0
RAW_RATE_HZ = 2048.0
UPDATE_SECONDS = 20.0
CM_PER_UNIT = 10.0  # display only; screen units are normalized to [-1, 1]


@dataclass(frozen=True)
class Trajectory:
    """Planar positions sampled at ``rate`` Hz, shape (T, 2)."""

    samples: np.ndarray
    rate: float = RATE_HZ

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if s.ndim != 2 or s.shape[1] != 2:
            raise ConfigError(f"trajectory samples must have shape (T, 2), got {s.shape}")
        if s.shape[0] < 2:
            raise ConfigError("trajectory needs at least 2 samples")
        if not np.all(np.isfinite(s)):
            raise ConfigError("trajectory contains non-finite values")
        if not self.rate > 0:
            raise ConfigError("trajectory rate must be positive")
        object.__setattr__(self, "samples", s)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def dt(self) -> float:
        return 1.0 / self.rate


@dataclass(frozen=True)
class ReferenceSpec:
    """Sum-of-two-sinusoids target, per axis.

    ``phases`` are (x1, x2, y1, y2) in radians; ``None`` means draw them
    uniformly from the rng given to :func:`generate_reference`.
    """

    freqs_x: tuple = (0.10, 0.25)
    freqs_y: tuple = (0.15, 0.35)
    amplitude: float = 0.4
    phases: Optional[tuple] = None
    duration_s: float = 18 * UPDATE_SECONDS
    rate: float = RATE_HZ

    def validate(self):
        if len(self.freqs_x) != 2 or len(self.freqs_y) != 2:
            raise ConfigError("need exactly two frequencies per axis")
        if min(*self.freqs_x, *self.freqs_y) <= 0:
            raise ConfigError("reference frequencies must be positive")
        if not self.duration_s > 0:
            raise ConfigError("duration_s must be positive")
        if not self.rate > 0:
            raise ConfigError("rate must be positive")
        if self.phases is not None and len(self.phases) != 4:
            raise ConfigError("phases must hold four values")
        if not math.isfinite(self.amplitude):
            raise ConfigError("amplitude must be finite")

    @property
    def n_samples(self) -> int:
        return int(round(self.duration_s * self.rate))


def generate_reference(spec: ReferenceSpec, rng: Optional[np.random.Generator] = None) -> Trajectory:
    spec.validate()
    if spec.phases is None:
        if rng is None:
            raise ConfigError("rng required when phases are not fixed")
        phases = rng.uniform(0.0, 2.0 * np.pi, size=4)
    else:
        phases = np.asarray(spec.phases, dtype=float)
    t = np.arange(spec.n_samples) / spec.rate
    fx, fy = spec.freqs_x, spec.freqs_y
    rx = np.sin(2 * np.pi * fx[0] * t + phases[0]) + np.sin(2 * np.pi * fx[1] * t + phases[1])
    ry = np.sin(2 * np.pi * fy[0] * t + phases[2]) + np.sin(2 * np.pi * fy[1] * t + phases[3])
    return Trajectory(spec.amplitude * np.stack([rx, ry], axis=1), rate=spec.rate)


@dataclass(eq=False)
class StreamedUpdate:
    """One training window: envelope (C, T) plus reference/cursor (T, 2)."""

    envelope: np.ndarray
    reference: np.ndarray
    cursor: np.ndarray
    dt: float = 1.0 / RATE_HZ
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.envelope = np.asarray(self.envelope, dtype=float)
        self.reference = np.asarray(self.reference, dtype=float)
        self.cursor = np.asarray(self.cursor, dtype=float)
        if self.envelope.ndim != 2:
            raise ConfigError("envelope must be a (C, T) matrix")
        T = self.envelope.shape[1]
        if self.reference.shape != (T, 2) or self.cursor.shape != (T, 2):
            raise ConfigError(
                f"reference/cursor must be ({T}, 2); got {self.reference.shape} and {self.cursor.shape}"
            )
        if not self.dt > 0:
            raise ConfigError("dt must be positive")

    @property
    def n_channels(self) -> int:
        return self.envelope.shape[0]

    @property
    def n_samples(self) -> int:
        return self.envelope.shape[1]

    def check(self):
        env_ok = np.all(np.isfinite(self.envelope)) and np.all(self.envelope >= 0)
        if not env_ok:
            raise ConfigError("envelope entries must be finite and nonnegative")
        if not (np.all(np.isfinite(self.reference)) and np.all(np.isfinite(self.cursor))):
            raise ConfigError("trajectories must be finite")

    def __eq__(self, other):
        if not isinstance(other, StreamedUpdate):
            return NotImplemented
        return (
            self.dt == other.dt
            and np.array_equal(self.envelope, other.envelope)
            and np.array_equal(self.reference, other.reference)
            and np.array_equal(self.cursor, other.cursor)
        )


@dataclass(eq=False)
class SubjectSession:
    subject_id: int
    updates: list
    seed: int = 0
    generator_tag: str = "ingested"

    def __post_init__(self):
        if not self.updates:
            raise ConfigError("a session needs at least one update")
        C, dt = self.updates[0].n_channels, self.updates[0].dt
        for u in self.updates:
            if u.n_channels != C or u.dt != dt:
                raise ConfigError("all updates in a session must share channel count and dt")

    @property
    def n_channels(self) -> int:
        return self.updates[0].n_channels

    @property
    def dt(self) -> float:
        return self.updates[0].dt

    @property
    def n_samples(self) -> int:
        return sum(u.n_samples for u in self.updates)

    def __len__(self):
        return len(self.updates)

    def __eq__(self, other):
        if not isinstance(other, SubjectSession):
            return NotImplemented
        return (
            self.subject_id == other.subject_id
            and self.seed == other.seed
            and self.generator_tag == other.generator_tag
            and len(self.updates) == len(other.updates)
            and all(a == b for a, b in zip(self.updates, other.updates))
        )


def envelope_downsample(raw, fs: float = RAW_RATE_HZ, window_ms: float = 250.0, out_rate: float = RATE_HZ):
    """Rolling-mean downsampling of a rectified (C, N) signal.

    Window is ``round(window_ms * fs / 1000)`` samples (512 at 2048 Hz) and the
    hop is ``round(fs / out_rate)`` samples (34), so the nominal output rate is
    2048 / 34 = 60.24 Hz and the window overlap is 1 - 34/512 = 93.4 %.
    Frame m averages ``raw[:, m*hop : m*hop + window]``.
    """
    raw = np.atleast_2d(np.asarray(raw, dtype=float))
    window = int(round(window_ms * fs / 1000.0))
    hop = max(1, int(round(fs / out_rate)))
    if raw.shape[1] < window:
        raise InputTooShortError(f"need at least {window} samples, got {raw.shape[1]}")
    if np.any(raw < 0):
        raise ConfigError("raw input must be rectified (nonnegative)")
    frames = np.lib.stride_tricks.sliding_window_view(raw, window, axis=1)[:, ::hop, :]
    return frames.mean(axis=-1)


def segment_updates(envelope, reference, cursor, rate: float = RATE_HZ,
                    update_seconds: float = UPDATE_SECONDS, exclude_first: int = 2):
    """Cut a continuous recording into consecutive non-overlapping updates.

    The first ``exclude_first`` updates and any trailing partial update are dropped.
    """
    envelope = np.asarray(envelope, dtype=float)
    reference = np.asarray(reference, dtype=float)
    cursor = np.asarray(cursor, dtype=float)
    L = int(round(update_seconds * rate))
    N = envelope.shape[1]
    if reference.shape[0] != N or cursor.shape[0] != N:
        raise SegmentationError("envelope and trajectories must have equal length")
    n_full = N // L
    if L <= 0 or n_full < exclude_first + 1:
        raise SegmentationError(
            f"recording of {N} samples is too short: need at least {(exclude_first + 1) * L} "
            f"samples ({exclude_first + 1} updates of {L})"
        )
    dt = 1.0 / rate
    return [
        StreamedUpdate(envelope[:, k * L:(k + 1) * L].copy(), reference[k * L:(k + 1) * L].copy(),
                       cursor[k * L:(k + 1) * L].copy(), dt)
        for k in range(exclude_first, n_full)
    ]


def synthesize_session(subject_id: int, user_model_params, reference_spec: ReferenceSpec,
                       n_updates: int, rng: np.random.Generator, exclude_first: int = 0,
                       seed: int = 0) -> SubjectSession:
    """Replay the data-collection experiment for one synthetic subject.

    The subject's encoder comes from ``user_model_params`` and ``subject_id``;
    ``rng`` drives the reference phases, emission noise and per-update jitter.
    ``seed`` is only recorded in the session for provenance.
    """
    from .closedloop import record_session

    if n_updates < 1:
        raise ConfigError("n_updates must be >= 1")
    return record_session(subject_id, user_model_params, reference_spec, n_updates, rng,
                          exclude_first=exclude_first, seed=seed)


# ---------------------------------------------------------------------------
# session files

MANIFEST = "manifest.txt"
PAYLOAD = "data.csv"
_MANIFEST_KEYS = ("subject_id", "seed", "channels", "rate_hz", "dt", "n_updates", "generator_tag")


def save_session(session: SubjectSession, path) -> Path:
    """Write ``manifest.txt`` and ``data.csv`` into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    C = session.n_channels
    rate = 1.0 / session.dt
    lines = [
        f"subject_id: {session.subject_id}",
        f"seed: {session.seed}",
        f"channels: {C}",
        f"rate_hz: {rate!r}",
        f"dt: {session.dt!r}",
        f"n_updates: {len(session.updates)}",
        f"generator_tag: {session.generator_tag}",
    ]
    (path / MANIFEST).write_text("\n".join(lines) + "\n")
    header = ",".join(["t", *(f"e{c}" for c in range(C)), "rx", "ry", "yx", "yy"])
    with open(path / PAYLOAD, "w") as fh:
        fh.write(header + "\n")
        n = 0
        for u in session.updates:
            block = np.column_stack([u.envelope.T, u.reference, u.cursor])
            for row in block.tolist():
                fh.write(repr(n * session.dt) + "," + ",".join(map(repr, row)) + "\n")
                n += 1
    return path


def _read_manifest(path: Path) -> dict:
    mpath = path / MANIFEST
    if not mpath.exists():
        raise FormatError("missing manifest", path=mpath)
    text = mpath.read_text()
    if not text.strip():
        raise FormatError("empty manifest", path=mpath, line=1)
    meta = {}
    for i, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if ":" not in line:
            raise FormatError("expected 'key: value'", path=mpath, line=i)
        key, value = (s.strip() for s in line.split(":", 1))
        if key not in _MANIFEST_KEYS:
            raise FormatError("unknown manifest key", path=mpath, line=i, field=key)
        meta[key] = (value, i)
    for key in _MANIFEST_KEYS:
        if key not in meta:
            raise FormatError("missing manifest key", path=mpath, field=key)
    out = {}
    for key, conv in (("subject_id", int), ("seed", int), ("channels", int), ("rate_hz", float),
                      ("dt", float), ("n_updates", int), ("generator_tag", str)):
        value, line = meta[key]
        try:
            out[key] = conv(value)
        except ValueError:
            raise FormatError(f"cannot parse {value!r}", path=mpath, line=line, field=key) from None
    if out["channels"] < 1 or out["n_updates"] < 1 or not out["dt"] > 0:
        raise FormatError("channels, n_updates and dt must be positive", path=mpath)
    return out


def load_session(path) -> SubjectSession:
    path = Path(path)
    meta = _read_manifest(path)
    ppath = path / PAYLOAD
    if not ppath.exists():
        raise FormatError("missing payload", path=ppath)
    C = meta["channels"]
    with open(ppath) as fh:
        header = fh.readline()
        if not header.strip():
            raise FormatError("empty payload", path=ppath, line=1)
        cols = header.strip().split(",")
        expected = ["t", *(f"e{c}" for c in range(C)), "rx", "ry", "yx", "yy"]
        if cols != expected:
            n_env = sum(1 for c in cols if c.startswith("e"))
            if n_env != C:
                raise FormatError(f"header has {n_env} channel columns, manifest declares {C}",
                                  path=ppath, line=1, field="channels")
            raise FormatError("malformed header", path=ppath, line=1)
        start = fh.tell()
        try:
            data = np.loadtxt(fh, delimiter=",", ndmin=2)
        except ValueError:
            fh.seek(start)
            _locate_bad_row(fh, expected, ppath)
            raise FormatError("unreadable payload", path=ppath) from None
    if data.size == 0:
        raise FormatError("payload has no samples", path=ppath, line=2)
    if data.shape[1] != len(expected):
        raise FormatError(f"expected {len(expected)} fields, got {data.shape[1]}", path=ppath, line=2)
    bad = np.argwhere(~np.isfinite(data))
    if bad.size:
        r, c = bad[0]
        raise FormatError("non-finite value", path=ppath, line=int(r) + 2, field=expected[c])
    env = data[:, 1:1 + C]
    neg = np.argwhere(env < 0)
    if neg.size:
        r, c = neg[0]
        raise FormatError("negative envelope value", path=ppath, line=int(r) + 2, field=expected[1 + c])
    n_up = meta["n_updates"]
    if data.shape[0] % n_up:
        raise FormatError(f"{data.shape[0]} samples do not split into {n_up} equal updates", path=ppath)
    L = data.shape[0] // n_up
    updates = []
    for k in range(n_up):
        blk = data[k * L:(k + 1) * L]
        updates.append(StreamedUpdate(blk[:, 1:1 + C].T.copy(), blk[:, 1 + C:3 + C].copy(),
                                      blk[:, 3 + C:5 + C].copy(), meta["dt"]))
    return SubjectSession(meta["subject_id"], updates, meta["seed"], meta["generator_tag"])


def _locate_bad_row(fh, expected, ppath):
    for lineno, line in enumerate(fh, start=2):
        parts = line.rstrip("\n").split(",")
        if len(parts) != len(expected):
            raise FormatError(f"expected {len(expected)} fields, got {len(parts)}", path=ppath, line=lineno)
        for j, p in enumerate(parts):
            if not _is_float(p):
                raise FormatError("not a number", path=ppath, line=lineno, field=expected[j])


def _is_float(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def concat_updates(updates: Sequence[StreamedUpdate]):
    """Stack updates back into (C, N) envelope and (N, 2) trajectories."""
    env = np.concatenate([u.envelope for u in updates], axis=1)
    ref = np.concatenate([u.reference for u in updates], axis=0)
    cur = np.concatenate([u.cursor for u in updates], axis=0)
    return env, ref, cur
