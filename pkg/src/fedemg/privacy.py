"""Decoder linkage attack: identify subjects from flattened decoder snapshots.

The adversary is a one-vs-rest linear hinge-loss classifier trained by
deterministic full-batch subgradient descent on standardized features, and
the risk score is its leave-one-out identification accuracy.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .decoder import as_weights, load_decoder
from .errors import ConfigError, InsufficientDataError

SOURCES = ("local", "personalized", "global_copy")
TIE_RTOL = 1e-9


@dataclass(frozen=True)
class SnapshotDataset:
    features: np.ndarray  # (N, 2C)
    labels: np.ndarray    # (N,)
    count: int = 6

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        y = np.asarray(self.labels)
        if X.ndim != 2 or y.shape != (X.shape[0],):
            raise ConfigError("features must be (N, D) with one label per row")
        ids, counts = np.unique(y, return_counts=True)
        if len(ids) and np.any(counts != self.count):
            raise ConfigError(f"every subject needs exactly {self.count} snapshots")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    @property
    def subjects(self) -> list:
        return sorted(int(s) for s in np.unique(self.labels))

    def canonical(self) -> "SnapshotDataset":
        """Rows sorted by label, then lexicographically by feature values."""
        keys = [self.features[:, j] for j in range(self.features.shape[1] - 1, -1, -1)] + [self.labels]
        order = np.lexsort(keys)
        return SnapshotDataset(self.features[order], self.labels[order], self.count)


def _tail(seq, n, who):
    if len(seq) < n:
        raise InsufficientDataError(f"subject {who} has {len(seq)} snapshots, need {n}")
    return [np.asarray(as_weights(w), dtype=float).reshape(-1) for w in seq[-n:]]


def collect_snapshots(artifacts, n: int = 6, source: str = "local") -> SnapshotDataset:
    """Last ``n`` decoders per subject, flattened row-major.

    ``artifacts`` is a RunArtifacts, a list of TrialTraces, or a mapping
    subject id -> list of decoders.  ``global_copy`` gives every subject the
    last ``n`` global models of a federated run.
    """
    if source not in SOURCES:
        raise ConfigError(f"source must be one of {SOURCES}")
    if isinstance(artifacts, dict):
        per = artifacts
    elif isinstance(artifacts, (list, tuple)):
        per = {}
        for tr in artifacts:
            if source == "global_copy":
                seq = [m[4] for m in tr.merges] if tr.merges else tr.decoders
            else:
                seq = tr.decoders
            per[tr.subject_id] = seq
    else:
        if source == "global_copy":
            if not artifacts.global_history:
                raise InsufficientDataError(f"{artifacts.algorithm} run has no global model")
            per = {cid: artifacts.global_history for cid in artifacts.client_ids}
        elif source == "personalized":
            per = artifacts.personalized
        else:
            per = artifacts.client_snapshots
    rows, labels = [], []
    for sid in sorted(per):
        rows += _tail(per[sid], n, sid)
        labels += [sid] * n
    if not rows:
        raise InsufficientDataError("no snapshots to collect")
    return SnapshotDataset(np.vstack(rows), np.array(labels), n)


def load_snapshot_dir(path, n: int = 6) -> SnapshotDataset:
    """Read every decoder snapshot file in ``path`` and keep the last ``n`` per subject.

    Snapshots are ordered by (update_index, round) from their headers.
    """
    path = Path(path)
    files = sorted(path.glob("*.csv"))
    if not files:
        raise InsufficientDataError(f"no snapshot files in {path}")
    per = {}
    for f in files:
        d, meta = load_decoder(f)
        per.setdefault(meta["subject_id"], []).append(((meta["update_index"], meta["round"]), d.weights))
    seqs = {sid: [w for _, w in sorted(v, key=lambda t: t[0])] for sid, v in per.items()}
    return collect_snapshots(seqs, n)


@dataclass(frozen=True)
class LinearClassifier:
    classes: np.ndarray  # (K,) ascending
    W: np.ndarray        # (K, D)
    b: np.ndarray        # (K,)
    mean: np.ndarray
    scale: np.ndarray

    def scores(self, X) -> np.ndarray:
        Z = (np.atleast_2d(np.asarray(X, dtype=float)) - self.mean) / self.scale
        return Z @ self.W.T + self.b

    def predict(self, X) -> np.ndarray:
        """Highest score wins; near-ties go to the lowest class id."""
        sc = self.scores(X)
        top = sc.max(axis=1, keepdims=True)
        tied = sc >= top - TIE_RTOL * np.maximum(1.0, np.abs(top))
        return self.classes[np.argmax(tied, axis=1)]


def _standardize(X):
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd = np.where(sd > 1e-12 * np.maximum(1.0, np.abs(mu)), sd, 1.0)
    return mu, sd


def train_classifier(train: SnapshotDataset, reg: float = 1e-2, epochs: int = 2000, seed: int = 0,
                     init: Optional[tuple] = None) -> LinearClassifier:
    """One-vs-rest linear SVMs by full-batch subgradient descent.

    Each class k minimizes ``reg/2 ||w||^2 + sum_i c_i max(0, 1 - y_i (w.x_i + b))``
    with step ``1 / (reg t)``.  The sample weights ``c_i = N / (K n_{class(i)})``
    balance the classes, so the subject held out by leave-one-out is not
    penalized for having one row fewer than the others.  Full-batch steps make the result independent of
    ``seed``; it is kept for interface symmetry with stochastic trainers.
    ``init`` = (W0, b0) starts from a given point instead of zero.
    """
    if not reg > 0:
        raise ConfigError("reg must be positive")
    classes = np.array(sorted(np.unique(train.labels)))
    if len(classes) < 2:
        raise InsufficientDataError("need at least two classes to train")
    mu, sd = _standardize(train.features)
    Z = (train.features - mu) / sd
    Y = np.where(train.labels[None, :] == classes[:, None], 1.0, -1.0)  # (K, N)
    K, D = len(classes), Z.shape[1]
    idx = np.searchsorted(classes, train.labels)
    c = len(idx) / (K * np.bincount(idx, minlength=K)[idx])
    if init is None:
        W, b = np.zeros((K, D)), np.zeros(K)
    else:
        W, b = np.array(init[0], dtype=float).copy(), np.array(init[1], dtype=float).copy()
    for t in range(1, epochs + 1):
        margin = Y * (W @ Z.T + b[:, None])
        A = np.where(margin < 1.0, Y, 0.0) * c
        eta = 1.0 / (reg * t)
        W = W - eta * (reg * W - A @ Z)
        b = b + eta * A.sum(axis=1)
    return LinearClassifier(classes, W, b, mu, sd)


@dataclass
class PrivacyReport:
    per_subject_accuracy: dict
    n_correct: dict
    n_total: dict
    condition: str = ""

    @property
    def mean_accuracy(self) -> float:
        vals = list(self.per_subject_accuracy.values())
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def standard_error(self) -> float:
        vals = np.array(list(self.per_subject_accuracy.values()))
        return float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else float("nan")

    def to_csv(self) -> str:
        lines = ["subject_id,n_correct,n_total,accuracy"]
        for sid in sorted(self.per_subject_accuracy):
            lines.append(f"{sid},{self.n_correct[sid]},{self.n_total[sid]},{self.per_subject_accuracy[sid]!r}")
        lines.append(f"# condition={self.condition} mean_accuracy={self.mean_accuracy!r}")
        return "\n".join(lines) + "\n"


def loocv_attack(ds: SnapshotDataset, reg: float = 1e-2, epochs: int = 2000, seed: int = 0,
                 condition: str = "") -> PrivacyReport:
    """Leave-one-out subject identification accuracy, per subject."""
    if len(ds.subjects) < 2:
        raise InsufficientDataError("need at least two subjects")
    ds = ds.canonical()
    N = len(ds.labels)
    correct = {s: 0 for s in ds.subjects}
    total = {s: 0 for s in ds.subjects}
    for i in range(N):
        keep = np.arange(N) != i
        clf = train_classifier(_drop_row(ds, keep), reg, epochs, seed)
        sid = int(ds.labels[i])
        total[sid] += 1
        correct[sid] += int(clf.predict(ds.features[i])[0] == sid)
    acc = {s: correct[s] / total[s] for s in ds.subjects}
    return PrivacyReport(acc, correct, total, condition)


def _drop_row(ds, keep):
    # the held-out subject has one row fewer, so bypass the equal-count check
    out = object.__new__(SnapshotDataset)
    object.__setattr__(out, "features", ds.features[keep])
    object.__setattr__(out, "labels", ds.labels[keep])
    object.__setattr__(out, "count", ds.count)
    return out


def permute_labels(ds: SnapshotDataset, rng: np.random.Generator) -> SnapshotDataset:
    """Shuffled-label control: same rows, labels randomly reassigned (counts preserved)."""
    return SnapshotDataset(ds.features, ds.labels[rng.permutation(len(ds.labels))], ds.count)


def chance_band(n_subjects: int, n_rows: int, n_se: float = 3.0):
    """Chance accuracy 1/K and the half-width of its ``n_se`` binomial standard-error band."""
    p0 = 1.0 / n_subjects
    return p0, n_se * math.sqrt(p0 * (1 - p0) / n_rows)
