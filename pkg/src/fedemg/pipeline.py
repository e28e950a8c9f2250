"""Experiment stages: synth, open-loop, closed-loop, attack and analyze.

Each stage reads what earlier stages wrote under ``cfg.out`` and writes its
own files; re-running a stage with the same config overwrites identically.
Parallel workers only change where jobs run, never their inputs or the order
in which results are written.
"""
from __future__ import annotations

import logging
import multiprocessing as mp
import shutil
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import analysis
from .closedloop import make_user, run_trial, shared_random01
from .config import ExperimentConfig, dump_config
from .decoder import load_decoder, save_decoder
from .errors import InsufficientDataError
from .federation import run_open_loop
from .privacy import chance_band, load_snapshot_dir, loocv_attack, permute_labels
from .seeding import derive_seed, make_rng
from .signal import load_session, save_session, synthesize_session

log = logging.getLogger(__name__)

_SHARED = {}


def _run_jobs(fn, jobs, workers: int, shared=None):
    """Map ``fn`` over ``jobs`` in order.  ``shared`` is handed to forked workers without pickling."""
    _SHARED.clear()
    if shared:
        _SHARED.update(shared)
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    ctx = mp.get_context("fork")
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs)), mp_context=ctx) as ex:
        return list(ex.map(fn, jobs))


def _fresh_dir(path: Path) -> Path:
    if path.exists():
        shutil.rmtree(path)
    path.mkdir(parents=True)
    return path


def _sessions_dir(cfg):
    return Path(cfg.out) / "sessions"


# ---------------------------------------------------------------------------
# synth


def _synth_one(args):
    cfg, sid = args
    return synthesize_session(sid, cfg.user_params(), cfg.reference(), cfg.n_updates,
                              make_rng(cfg.seed, "session", sid), exclude_first=cfg.exclude_first,
                              seed=cfg.seed)


def stage_synth(cfg: ExperimentConfig, write: bool = True) -> list:
    jobs = [(cfg, sid) for sid in range(cfg.n_subjects)]
    sessions = _run_jobs(_synth_one, jobs, cfg.workers)
    if write:
        root = _fresh_dir(_sessions_dir(cfg))
        for s in sessions:
            save_session(s, root / f"subject_{s.subject_id:03d}")
        (Path(cfg.out) / "config.txt").write_text(dump_config(cfg))
    return sessions


def load_sessions(cfg: ExperimentConfig) -> list:
    root = _sessions_dir(cfg)
    dirs = sorted(p for p in root.glob("subject_*") if p.is_dir()) if root.exists() else []
    if not dirs:
        raise InsufficientDataError(f"no sessions under {root}; run 'synth' first")
    return [load_session(d) for d in dirs]


# ---------------------------------------------------------------------------
# open loop


def _ol_job(job):
    cfg, alg, scenario, fold, train, own = job
    sessions = _SHARED["sessions"]
    p = cfg.cost()
    fseed = derive_seed(cfg.seed, "open-loop", alg, scenario, fold)
    fed = cfg.fed_config(alg, fseed)
    if scenario == "IntraSubject":
        every = list(range(len(sessions[0].updates)))
        keep = {s.subject_id: (train if own is None or s.subject_id == own else every) for s in sessions}
        return run_open_loop(fed, sessions, p, train_updates=keep)
    if scenario == "CrossSubject":
        return run_open_loop(fed, [s for s in sessions if s.subject_id in set(train)], p)
    return run_open_loop(fed, sessions, p)


def open_loop_runs(cfg: ExperimentConfig, sessions):
    """Fold runs for every (algorithm, scenario) plus one full-data run per algorithm.

    With ``intra_fl_exclusion = own`` each intra-subject FL fold is trained
    once per subject, dropping only that subject's held-out block; Local is
    unaffected because a local decoder never sees other subjects' data.

    Returns (metric rows, {algorithm: full RunArtifacts}).
    """
    plans = {sc: analysis.make_folds(sessions, sc, cfg.folds, derive_seed(cfg.seed, "folds"))
             for sc in cfg.scenario_list}
    ids = [s.subject_id for s in sessions]
    jobs = []
    for alg in cfg.algorithm_list:
        for sc, plan in plans.items():
            per_subject = sc == "IntraSubject" and cfg.intra_fl_exclusion == "own" and alg != "Local"
            for f in range(plan.k):
                for own in (ids if per_subject else [None]):
                    jobs.append((cfg, alg, sc, f, plan.train(f), own))
        jobs.append((cfg, alg, "Full", 0, None, None))
    arts = _run_jobs(_ol_job, jobs, cfg.workers, {"sessions": sessions})
    p = cfg.cost()
    rows, full = [], {}
    for sc, plan in plans.items():
        runs = {(j[1], j[3]): a for j, a in zip(jobs, arts) if j[2] == sc and j[5] is None}
        rows += analysis.summarize(runs, plan, sessions, p)
        for j, a in zip(jobs, arts):
            if j[2] == sc and j[5] is not None:
                rows += [r for r in analysis.summarize({(j[1], j[3]): a}, plan, sessions, p) if r[3] == j[5]]
    for j, a in zip(jobs, arts):
        if j[2] == "Full":
            full[j[1]] = a
    rows.sort(key=lambda r: (r[0], r[1], r[2], r[3]))
    return rows, full


def _write_snapshots(root: Path, per_subject: dict, algorithm: str, n: int):
    root.mkdir(parents=True, exist_ok=True)
    for sid in sorted(per_subject):
        seq = per_subject[sid][-n:]
        for k, w in enumerate(seq):
            save_decoder(root / f"subject_{sid:04d}_{k:02d}.csv", w, sid, algorithm, k, len(per_subject[sid]) - len(seq) + k)


def stage_open_loop(cfg: ExperimentConfig, sessions=None):
    sessions = load_sessions(cfg) if sessions is None else sessions
    rows, full = open_loop_runs(cfg, sessions)
    out = _fresh_dir(Path(cfg.out) / "open_loop")
    analysis.write_csv(out / "metrics.csv", analysis.METRIC_COLUMNS, rows)
    n = cfg.snapshots
    for alg, art in sorted(full.items()):
        analysis.write_csv(out / f"training_{alg}.csv", art.METRIC_COLUMNS, art.metrics)
        seq_dir = out / "sequences" / f"OL-{alg}"
        for sid in art.client_ids:
            analysis.save_sequence(seq_dir / f"subject_{sid:04d}.csv", art.client_snapshots[sid])
        if art.global_history:
            analysis.save_sequence(seq_dir / "global.csv", art.global_history)
            save_decoder(out / f"global_{alg}.csv", art.final_global, -1, alg, 0, len(art.global_history) - 1)
            g = {sid: art.global_history for sid in art.client_ids}
            _write_snapshots(out / "snapshots" / f"OL-{alg}-global", g, alg, n)
        if alg == "Local":
            _write_snapshots(out / "snapshots" / "OL-Local", art.client_snapshots, alg, n)
        if alg == "PerFedAvg":
            _write_snapshots(out / "snapshots" / "OL-PerFedAvg-personalized", art.personalized, alg, n)
    return rows, full


# ---------------------------------------------------------------------------
# closed loop


def _cl_job(job):
    kind = job[0]
    cfg = job[1]
    inits = _SHARED["inits"]
    up = cfg.user_params(adapt_rate=cfg.cl_adapt_rate)
    if kind == "pretrain":
        sid = job[2]
        return [run_trial(make_user(sid, up), cfg.trial_config("Local", "Random01", "pretrain"), inits["Random01"])]
    if kind == "seq":
        _, _, init, order = job
        g = inits[init]
        traces = []
        for sid in order:
            tr = run_trial(make_user(sid, up), cfg.trial_config("SequentialPerFedAvg", init), g, g)
            g = tr.final_global
            traces.append(tr)
        return traces
    _, _, alg, init, sid = job
    w0 = inits[init] if init != "PretrainedLocal" else _SHARED["pretrained"][sid]
    return [run_trial(make_user(sid, up), cfg.trial_config(alg, init), w0)]


def closed_loop_traces(cfg: ExperimentConfig, open_loop_global=None) -> dict:
    """Run every configured condition over the closed-loop cohort.

    Returns {(algorithm, initialization): [TrialTrace ordered by subject id]}.
    """
    ids = [cfg.cl_subject_offset + i for i in range(cfg.cl_subjects)]
    conds = cfg.condition_list
    inits = {"Random01": shared_random01(cfg.channels, derive_seed(cfg.seed, "random01")).weights}
    if any(init == "OpenLoopGlobal" for _, init in conds):
        if open_loop_global is None:
            raise InsufficientDataError("OpenLoopGlobal initialization needs an open-loop global decoder")
        inits["OpenLoopGlobal"] = np.asarray(open_loop_global, dtype=float)
    shared = {"inits": inits}
    if any(init == "PretrainedLocal" for _, init in conds):
        pre = _run_jobs(_cl_job, [("pretrain", cfg, sid) for sid in ids], cfg.workers, shared)
        shared["pretrained"] = {sid: tr[0].final_decoder for sid, tr in zip(ids, pre)}
    order = [ids[i] for i in make_rng(cfg.seed, "closed-loop-order").permutation(len(ids))]
    jobs = []
    for alg, init in conds:
        if alg == "SequentialPerFedAvg":
            jobs.append(("seq", cfg, init, order))
        else:
            jobs += [("trial", cfg, alg, init, sid) for sid in ids]
    results = _run_jobs(_cl_job, jobs, cfg.workers, shared)
    out = {}
    for job, traces in zip(jobs, results):
        key = (job[2], job[3]) if job[0] == "trial" else ("SequentialPerFedAvg", job[2])
        out.setdefault(key, []).extend(traces)
    return {k: sorted(v, key=lambda t: t.subject_id) for k, v in out.items()}


def cl_name(alg, init):
    return f"CL-{alg}-{init}"


def stage_closed_loop(cfg: ExperimentConfig, open_loop_global=None):
    if open_loop_global is None and any(i == "OpenLoopGlobal" for _, i in cfg.condition_list):
        path = Path(cfg.out) / "open_loop" / f"global_{cfg.cl_global_source}.csv"
        if not path.exists():
            raise InsufficientDataError(f"{path} not found; run 'open-loop' with {cfg.cl_global_source} first")
        open_loop_global = load_decoder(path)[0].weights
    traces = closed_loop_traces(cfg, open_loop_global)
    out = _fresh_dir(Path(cfg.out) / "closed_loop")
    rows, summary = [], []
    for (alg, init), trs in sorted(traces.items()):
        name = cl_name(alg, init)
        for tr in trs:
            rows += [(name, tr.subject_id, *m) for m in tr.metrics]
            summary.append((name, tr.subject_id, tr.final_velocity_error(), tr.displacement))
            analysis.save_sequence(out / "sequences" / name / f"subject_{tr.subject_id:04d}.csv", tr.decoders)
        _write_snapshots(out / "snapshots" / name, {t.subject_id: t.decoders for t in trs}, alg, cfg.snapshots)
    analysis.write_csv(out / "metrics.csv", ("condition", "subject", "update", "vel_err_weighted",
                                             "vel_err_rms", "tracking_rms"), rows)
    analysis.write_csv(out / "summary.csv", ("condition", "subject", "final_vel_err_rms", "displacement"), summary)
    return traces


# ---------------------------------------------------------------------------
# attack


def _attack_job(job):
    cfg, name, path = job
    ds = load_snapshot_dir(path, cfg.snapshots)
    rep = loocv_attack(ds, cfg.attack_reg, cfg.attack_epochs, cfg.seed, name)
    ctrl = loocv_attack(permute_labels(ds, make_rng(cfg.seed, "shuffle", name)), cfg.attack_reg,
                        cfg.attack_epochs, cfg.seed, name + "-shuffled")
    return rep, ctrl


def snapshot_dirs(cfg: ExperimentConfig) -> list:
    found = []
    for stage in ("open_loop", "closed_loop"):
        root = Path(cfg.out) / stage / "snapshots"
        if root.exists():
            found += sorted((p.name, p) for p in root.iterdir() if p.is_dir())
    return found


def stage_attack(cfg: ExperimentConfig):
    dirs = snapshot_dirs(cfg)
    if not dirs:
        raise InsufficientDataError("no decoder snapshots found; run 'open-loop' or 'closed-loop' first")
    results = _run_jobs(_attack_job, [(cfg, name, path) for name, path in dirs], cfg.workers)
    out = _fresh_dir(Path(cfg.out) / "privacy")
    summary = []
    for (name, _), (rep, ctrl) in zip(dirs, results):
        (out / f"{name}.csv").write_text(rep.to_csv())
        (out / f"{name}-shuffled.csv").write_text(ctrl.to_csv())
        k = len(rep.per_subject_accuracy)
        p0, band = chance_band(k, sum(rep.n_total.values()))
        summary.append((name, k, rep.mean_accuracy, ctrl.mean_accuracy, p0, band))
    analysis.write_csv(out / "summary.csv", ("condition", "n_subjects", "mean_accuracy", "shuffled_accuracy",
                                             "chance", "chance_3se"), summary)
    return summary


# ---------------------------------------------------------------------------
# analyze


def sequence_sets(cfg: ExperimentConfig) -> dict:
    """{condition: {subject: [decoders]}} from every stage's sequence directory.

    Federated open-loop runs contribute two conditions: the shared global
    trajectory (subject -1) and the clients' own uploads.
    """
    sets = {}
    for stage in ("open_loop", "closed_loop"):
        root = Path(cfg.out) / stage / "sequences"
        if not root.exists():
            continue
        for cdir in sorted(p for p in root.iterdir() if p.is_dir()):
            subj = {}
            for f in sorted(cdir.glob("subject_*.csv")):
                subj[int(f.stem.split("_")[1])] = analysis.load_sequence(f)
            if subj:
                sets[cdir.name] = subj
            g = cdir / "global.csv"
            if g.exists():
                sets[cdir.name + "-global"] = {-1: analysis.load_sequence(g)}
    return sets


def convergence_ratio(dist, early=(5, 15), tail_fraction=0.1) -> float:
    """Mean distance-to-final over the last ``tail_fraction`` of steps over the mean at steps ``early``."""
    d = np.asarray(dist)
    n_tail = max(1, int(round(tail_fraction * (len(d) - 1))))
    tail = d[-n_tail:]
    head = d[early[0]:early[1] + 1]
    return float(tail.mean() / head.mean()) if head.mean() > 0 else 0.0


def stage_analyze(cfg: ExperimentConfig):
    sets = sequence_sets(cfg)
    if not sets:
        raise InsufficientDataError("no decoder sequences found; run 'open-loop' or 'closed-loop' first")
    conv, pca, diag = [], [], []
    for name in sorted(sets):
        seqs = sets[name]
        conv += analysis.convergence_rows(name, seqs)
        prow, res = analysis.pca_rows(name, seqs, derive_seed(cfg.seed, "pca"))
        pca += prow
        finals = [seqs[s][-1] for s in sorted(seqs)]
        ratio = convergence_ratio(analysis.distance_to_final(seqs[-1])) if -1 in seqs else float("nan")
        ev = res.explained_variance if res is not None else (float("nan"), float("nan"))
        diag.append((name, len(seqs), analysis.mean_pairwise_distance(finals), ratio, ev[0], ev[1]))
    out = _fresh_dir(Path(cfg.out) / "analysis")
    analysis.write_csv(out / "convergence.csv", ("condition", "subject", "index", "dist"), conv)
    analysis.write_csv(out / "pca.csv", ("condition", "subject", "index", "pc1", "pc2"), pca)
    analysis.write_csv(out / "diagnostics.csv", ("condition", "n_subjects", "final_pairwise_spread",
                                                 "convergence_ratio", "explained_var_1", "explained_var_2"), diag)
    return diag


def run_all(cfg: ExperimentConfig):
    sessions = stage_synth(cfg)
    _, full = stage_open_loop(cfg, sessions)
    g = full.get(cfg.cl_global_source)
    stage_closed_loop(cfg, g.final_global if g is not None and g.global_history else None)
    stage_attack(cfg)
    stage_analyze(cfg)
