"""Fold plans, final-decoder evaluation, distance-to-final and PCA projections."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .decoder import CostParams, as_weights, velocity_error
from .errors import ConfigError, FormatError, InsufficientDataError
from .seeding import make_rng

SCENARIOS = ("IntraSubject", "CrossSubject")


@dataclass(frozen=True)
class FoldPlan:
    """k-fold split.

    Intra-subject: ``folds[f]`` holds update indices (a contiguous block,
    shared by all subjects).  Cross-subject: ``folds[f]`` holds subject ids.
    """

    scenario: str
    k: int
    folds: tuple
    seed: int = 0
    universe: tuple = ()

    def test(self, f: int) -> list:
        return list(self.folds[f])

    def train(self, f: int) -> list:
        held = set(self.folds[f])
        return [x for x in self.universe if x not in held]


def make_folds(sessions, scenario: str, k: int = 7, seed: int = 0) -> FoldPlan:
    if scenario not in SCENARIOS:
        raise ConfigError(f"scenario must be one of {SCENARIOS}")
    if k < 2:
        raise ConfigError("k must be >= 2")
    if scenario == "IntraSubject":
        counts = {len(s.updates) for s in sessions}
        if len(counts) != 1:
            raise InsufficientDataError("intra-subject folds need equal update counts across subjects")
        n = counts.pop()
        if n < k:
            raise InsufficientDataError(f"{n} updates per subject cannot fill {k} folds")
        blocks = np.array_split(np.arange(n), k)
        return FoldPlan(scenario, k, tuple(tuple(int(i) for i in b) for b in blocks), seed, tuple(range(n)))
    ids = sorted(s.subject_id for s in sessions)
    if len(ids) < k:
        raise InsufficientDataError(f"{len(ids)} subjects cannot fill {k} folds")
    perm = make_rng(seed, "cross-folds").permutation(len(ids))
    groups = np.array_split(perm, k)
    folds = tuple(tuple(sorted(ids[i] for i in g)) for g in groups)
    return FoldPlan(scenario, k, folds, seed, tuple(ids))


def distance_to_final(snapshots: Sequence) -> np.ndarray:
    if len(snapshots) == 0:
        raise InsufficientDataError("need at least one snapshot")
    final = as_weights(snapshots[-1]).reshape(-1)
    return np.array([float(np.linalg.norm(as_weights(w).reshape(-1) - final)) for w in snapshots])


def mean_pairwise_distance(decoders: Sequence) -> float:
    X = np.vstack([as_weights(w).reshape(-1) for w in decoders])
    n = len(X)
    if n < 2:
        return 0.0
    d = [np.linalg.norm(X[i] - X[j]) for i in range(n) for j in range(i + 1, n)]
    return float(np.mean(d))


@dataclass(frozen=True)
class PCAResult:
    projections: np.ndarray        # (N, dims)
    explained_variance: np.ndarray  # (dims,)
    components: np.ndarray         # (dims, D)
    mean: np.ndarray
    rank_deficient: bool


def _sign_fix(v, tol):
    nz = np.flatnonzero(np.abs(v) > tol)
    return -v if nz.size and v[nz[0]] < 0 else v


def pca_project(decoders: Sequence, dims: int = 2, seed: int = 0, power_iters: int = 3) -> PCAResult:
    """Project mean-subtracted flattened decoders on the top ``dims`` principal axes.

    Block subspace iteration on the sample covariance: the starting block is
    ``X^T Omega`` with ``Omega`` a seeded Gaussian (N x N), so it spans the
    data's whole row space; a few orthonormalized power sweeps and a
    Rayleigh-Ritz step then give the eigenpairs.  Axis signs are fixed so the
    first clearly nonzero entry of each component is positive.  Components
    beyond the data's rank are zero and ``rank_deficient`` is set.
    """
    X = np.vstack([as_weights(w).reshape(-1) for w in decoders]).astype(float)
    N, D = X.shape
    if N < 3:
        raise InsufficientDataError("PCA needs at least three decoders")
    mean = X.mean(axis=0)
    Xc = X - mean
    scale = max(float(np.abs(Xc).max()), 0.0)
    comps = np.zeros((dims, D))
    var = np.zeros(dims)
    if scale > 0:
        Xs = Xc / scale
        m = min(N, D)
        omega = make_rng(seed, "pca").standard_normal((N, m))
        Q, _ = np.linalg.qr(Xs.T @ omega)
        for _ in range(power_iters):
            Q, _ = np.linalg.qr(Xs.T @ (Xs @ Q))
        H = (Xs @ Q).T @ (Xs @ Q) / (N - 1)
        evals, evecs = np.linalg.eigh(H)
        order = np.argsort(evals)[::-1]
        evals, V = evals[order], Q @ evecs[:, order]
        tol = 1e-12 * max(evals[0], 1e-300)
        for j in range(min(dims, len(evals))):
            if evals[j] > tol:
                comps[j] = _sign_fix(V[:, j], 1e-8 * np.abs(V[:, j]).max())
                var[j] = evals[j] * scale * scale
    rank = int(np.sum(var > 0))
    return PCAResult(Xc @ comps.T, var, comps, mean, rank < dims)


# ---------------------------------------------------------------------------
# final-decoder evaluation

METRIC_COLUMNS = ("algorithm", "scenario", "fold", "subject", "vel_err_weighted", "vel_err_rms")


def evaluate(w, updates, p: CostParams):
    """Mean over updates of both velocity-error variants."""
    errs = [velocity_error(w, u, p) for u in updates]
    return float(np.mean([e[0] for e in errs])), float(np.mean([e[1] for e in errs]))


def summarize(runs: dict, plan: FoldPlan, sessions, p: CostParams) -> list:
    """Per (algorithm, scenario, fold, subject) velocity errors of final decoders on test data.

    ``runs`` maps (algorithm, fold) -> RunArtifacts trained on that fold's
    training portion.  Intra-subject: each subject's final decoder is scored
    on its own held-out block.  Cross-subject: each held-out subject is
    scored with the global decoder (FL) or, for Local, with the mean error of
    the training subjects' final decoders.  Per-FedAvg is reported both as
    its global model ("PerFedAvg") and, intra-subject, after personalization
    ("PerFedAvg-personalized").
    """
    by_id = {s.subject_id: s for s in sessions}
    rows = []
    for (alg, f), art in sorted(runs.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        if plan.scenario == "IntraSubject":
            test = plan.test(f)
            for sid in art.client_ids:
                ups = [by_id[sid].updates[i] for i in test]
                rows.append((alg, plan.scenario, f, sid, *evaluate(art.final_decoder(sid), ups, p)))
                if alg == "PerFedAvg":
                    rows.append(("PerFedAvg-personalized", plan.scenario, f, sid,
                                 *evaluate(art.final_decoder(sid, "personalized"), ups, p)))
        else:
            for sid in plan.test(f):
                if sid in art.client_ids:
                    raise ConfigError(f"subject {sid} is in both training and test sets")
                ups = by_id[sid].updates
                if alg == "Local":
                    errs = [evaluate(art.final_decoder(c), ups, p) for c in art.client_ids]
                    vals = (float(np.mean([e[0] for e in errs])), float(np.mean([e[1] for e in errs])))
                else:
                    vals = evaluate(art.final_decoder(sid, "global"), ups, p)
                rows.append((alg, plan.scenario, f, sid, *vals))
    rows.sort(key=lambda r: (r[0], r[1], r[2], r[3]))
    return rows


def median_by_algorithm(rows, scenario: str, column: str = "vel_err_rms") -> dict:
    j = METRIC_COLUMNS.index(column)
    out = {}
    for r in rows:
        if r[1] == scenario:
            out.setdefault(r[0], []).append(r[j])
    return {k: float(np.median(v)) for k, v in out.items()}


# ---------------------------------------------------------------------------
# CSV helpers

def fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def write_csv(path, header: Sequence[str], rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(fmt(x) for x in r) + "\n")
    return path


def read_csv(path) -> tuple:
    path = Path(path)
    if not path.exists():
        raise FormatError("missing file", path=path)
    lines = path.read_text().splitlines()
    if not lines:
        raise FormatError("empty file", path=path, line=1)
    header = lines[0].split(",")
    rows = [ln.split(",") for ln in lines[1:] if ln and not ln.startswith("#")]
    return header, rows


def convergence_rows(condition: str, sequences: dict) -> list:
    """``condition,subject,index,dist`` rows from subject -> decoder sequence."""
    rows = []
    for sid in sorted(sequences):
        for i, d in enumerate(distance_to_final(sequences[sid])):
            rows.append((condition, sid, i, d))
    return rows


def pca_rows(condition: str, sequences: dict, seed: int = 0):
    """Project every decoder of a condition into that condition's own PC plane."""
    keys = [(sid, i) for sid in sorted(sequences) for i in range(len(sequences[sid]))]
    decs = [sequences[sid][i] for sid, i in keys]
    if len(decs) < 3:
        return [], None
    res = pca_project(decs, 2, seed)
    return [(condition, sid, i, res.projections[n, 0], res.projections[n, 1])
            for n, (sid, i) in enumerate(keys)], res


def save_sequence(path, decoders) -> Path:
    """One decoder per row: ``index,w0..w{2C-1}`` (row-major flattening)."""
    X = [as_weights(w).reshape(-1) for w in decoders]
    D = len(X[0])
    return write_csv(path, ["index", *(f"w{j}" for j in range(D))], [(i, *x) for i, x in enumerate(X)])


def load_sequence(path) -> list:
    header, rows = read_csv(path)
    D = len(header) - 1
    if D % 2:
        raise FormatError("odd number of weight columns", path=path, line=1)
    out = []
    for n, r in enumerate(rows, start=2):
        if len(r) != D + 1:
            raise FormatError(f"expected {D + 1} fields, got {len(r)}", path=path, line=n)
        try:
            out.append(np.array([float(v) for v in r[1:]]).reshape(2, D // 2))
        except ValueError as exc:
            raise FormatError(str(exc), path=path, line=n) from exc
    return out
