import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedemg.analysis import (FoldPlan, distance_to_final, load_sequence, make_folds, mean_pairwise_distance,
                             median_by_algorithm, pca_project, save_sequence, summarize)
from fedemg.decoder import CostParams
from fedemg.errors import FormatError, InsufficientDataError
from fedemg.federation import RunArtifacts
from fedemg.signal import StreamedUpdate, SubjectSession


def _sessions(n_subjects, n_updates, C=3, T=30, seed=0):
    r = np.random.default_rng(seed)
    out = []
    for s in range(n_subjects):
        ups = [StreamedUpdate(r.uniform(0, 1, (C, T)), r.uniform(-1, 1, (T, 2)), np.zeros((T, 2)))
               for _ in range(n_updates)]
        out.append(SubjectSession(s, ups))
    return out


def _assert_partition(plan: FoldPlan):
    flat = [x for f in plan.folds for x in f]
    assert sorted(flat) == sorted(plan.universe) and len(flat) == len(set(flat))
    for f in range(plan.k):
        assert not set(plan.train(f)) & set(plan.test(f))
        assert sorted(plan.train(f) + plan.test(f)) == sorted(plan.universe)


def test_cross_fourteen_subjects_seven_groups_of_two():
    plan = make_folds(_sessions(14, 2, T=5), "CrossSubject", 7, seed=3)
    assert len(plan.folds) == 7 and all(len(g) == 2 for g in plan.folds)
    _assert_partition(plan)
    assert plan == make_folds(_sessions(14, 2, T=5), "CrossSubject", 7, seed=3)


def test_intra_k_equal_to_update_count_gives_single_update_folds():
    plan = make_folds(_sessions(2, 7, T=5), "IntraSubject", 7)
    assert plan.folds == tuple((i,) for i in range(7))


def test_intra_folds_are_contiguous_blocks():
    plan = make_folds(_sessions(2, 16, T=5), "IntraSubject", 7)
    _assert_partition(plan)
    for f in plan.folds:
        assert list(f) == list(range(f[0], f[-1] + 1))


def test_insufficient_data_for_k():
    with pytest.raises(InsufficientDataError):
        make_folds(_sessions(3, 2, T=5), "CrossSubject", 7)
    with pytest.raises(InsufficientDataError):
        make_folds(_sessions(2, 4, T=5), "IntraSubject", 7)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(2, 30), k=st.integers(2, 10), seed=st.integers(0, 1000))
def test_folds_partition_property(n, k, seed):
    if n < k:
        return
    _assert_partition(make_folds(_sessions(n, 1, C=1, T=2), "CrossSubject", k, seed))
    _assert_partition(make_folds(_sessions(1, n, C=1, T=2), "IntraSubject", k, seed))


def test_distance_to_final_single_entry_example():
    a = np.zeros((2, 3))
    b = a.copy()
    b[1, 2] = 1.0
    assert distance_to_final([b, a]).tolist() == [1.0, 0.0]
    assert distance_to_final([a, a, a]).tolist() == [0.0, 0.0, 0.0]
    with pytest.raises(InsufficientDataError):
        distance_to_final([])


def test_distance_to_final_naive_oracle(rng):
    seq = [rng.normal(size=(2, 5)) for _ in range(9)]
    naive = []
    for w in seq:
        acc = 0.0
        for i in range(2):
            for j in range(5):
                acc += (w[i, j] - seq[-1][i, j]) ** 2
        naive.append(acc ** 0.5)
    assert np.allclose(distance_to_final(seq), naive, rtol=0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), shift=st.floats(-100, 100))
def test_distance_to_final_translation_invariant(seed, shift):
    r = np.random.default_rng(seed)
    seq = [r.normal(size=(2, 4)) for _ in range(5)]
    c = shift * r.normal(size=(2, 4))
    assert np.allclose(distance_to_final(seq), distance_to_final([w + c for w in seq]), atol=1e-9)


def test_mean_pairwise_distance():
    a, b, c = np.zeros((2, 1)), np.array([[3.0], [4.0]]), np.array([[0.0], [0.0]])
    assert mean_pairwise_distance([a, b, c]) == pytest.approx((5 + 0 + 5) / 3)
    assert mean_pairwise_distance([a]) == 0.0


def _eigh_top2(X):
    Xc = X - X.mean(axis=0)
    evals, evecs = np.linalg.eigh(Xc.T @ Xc / (len(X) - 1))
    order = np.argsort(evals)[::-1][:2]
    return evals[order], evecs[:, order]


def _max_principal_angle(A, B):
    qa, _ = np.linalg.qr(A)
    qb, _ = np.linalg.qr(B)
    s = np.linalg.svd(qa.T @ qb, compute_uv=False)
    return float(np.max(np.arccos(np.clip(s, -1.0, 1.0))))


def test_pca_matches_dense_eigensolver_on_twenty_sets():
    r = np.random.default_rng(11)
    for i in range(20):
        N, C = int(r.integers(4, 13)), int(r.integers(2, 9))
        decs = [r.normal(size=(2, C)) * r.uniform(0.1, 3.0) for _ in range(N)]
        res = pca_project(decs, seed=i)
        X = np.vstack([d.reshape(-1) for d in decs])
        ev, V = _eigh_top2(X)
        assert _max_principal_angle(res.components.T, V) <= 1e-6
        assert np.allclose(res.explained_variance, ev, rtol=1e-8)


def test_pca_identical_decoders_project_to_origin():
    w = np.arange(6.0).reshape(2, 3)
    res = pca_project([w] * 5)
    assert np.all(res.projections == 0) and res.rank_deficient


def test_pca_points_on_a_line_have_zero_second_variance(rng):
    base, direction = rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
    res = pca_project([base + t * direction for t in rng.normal(size=8)])
    assert res.explained_variance[1] <= 1e-10
    assert res.explained_variance[0] > 0


def test_pca_sign_convention_and_order(rng):
    res = pca_project([rng.normal(size=(2, 5)) for _ in range(7)])
    assert res.explained_variance[0] >= res.explained_variance[1]
    for comp in res.components:
        nz = comp[np.abs(comp) > 1e-8 * np.abs(comp).max()]
        assert nz[0] > 0


def test_pca_needs_three_decoders():
    with pytest.raises(InsufficientDataError):
        pca_project([np.zeros((2, 2))] * 2)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), shift=st.floats(-50, 50))
def test_pca_translation_invariant_up_to_sign(seed, shift):
    r = np.random.default_rng(seed)
    decs = [r.normal(size=(2, 3)) for _ in range(6)]
    c = shift * r.normal(size=(2, 3))
    a = pca_project(decs).projections
    b = pca_project([d + c for d in decs]).projections
    for j in range(2):
        assert np.allclose(np.abs(a[:, j]), np.abs(b[:, j]), atol=1e-6 * max(1.0, abs(shift)))


def _perfect_sessions(w, n_subjects=3, n_updates=4, T=40, seed=0):
    r = np.random.default_rng(seed)
    out = []
    for s in range(n_subjects):
        ups = []
        for _ in range(n_updates):
            S = r.uniform(0, 1, (w.shape[1], T))
            ups.append(StreamedUpdate(S, (w @ S).T, np.zeros((T, 2))))
        out.append(SubjectSession(s, ups))
    return out


def test_summarize_perfect_decoder_gives_zero_errors():
    w = np.random.default_rng(1).normal(size=(2, 3))
    sessions = _perfect_sessions(w)
    p = CostParams(target="gap", gap_gain=1.0)
    ids = [s.subject_id for s in sessions]
    intra = make_folds(sessions, "IntraSubject", 2)
    runs = {("Local", f): RunArtifacts("Local", {}, 0, ids, client_snapshots={i: [w] for i in ids})
            for f in range(2)}
    rows = summarize(runs, intra, sessions, p)
    assert len(rows) == 2 * len(ids)
    assert all(abs(r[4]) < 1e-20 and abs(r[5]) < 1e-10 for r in rows)


def test_summarize_fedavg_uses_one_global_object_everywhere():
    w = np.random.default_rng(2).normal(size=(2, 3))
    sessions = _perfect_sessions(w, n_subjects=4)
    p = CostParams(target="gap")
    cross = make_folds(sessions, "CrossSubject", 2, seed=0)
    runs = {}
    for f in range(2):
        train = cross.train(f)
        runs[("FedAvg", f)] = RunArtifacts("FedAvg", {}, 0, train, global_history=[w],
                                           client_snapshots={i: [w + 1] for i in train})
        assert all(runs[("FedAvg", f)].final_decoder(i) is w for i in train)
    rows = summarize(runs, cross, sessions, p)
    assert sorted(r[3] for r in rows) == [0, 1, 2, 3]
    assert max(r[5] for r in rows) < 1e-10
    assert median_by_algorithm(rows, "CrossSubject")["FedAvg"] < 1e-10


def test_sequence_round_trip_and_errors(tmp_path, rng):
    seq = [rng.normal(size=(2, 3)) for _ in range(4)]
    path = save_sequence(tmp_path / "s.csv", seq)
    back = load_sequence(path)
    assert all(np.array_equal(a, b) for a, b in zip(seq, back))
    (tmp_path / "bad.csv").write_text("index,w0,w1\n0,1.0\n")
    with pytest.raises(FormatError):
        load_sequence(tmp_path / "bad.csv")
