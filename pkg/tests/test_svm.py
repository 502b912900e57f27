import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aesnet import svm as S

ANALYTIC_X = np.array([[0.0, 0.0], [0.0, 1.0], [2.0, 0.0], [2.0, 1.0]])
ANALYTIC_Y = np.array([-1, -1, 1, 1])


def brute_force_dual(K, y, Cvec):
    """Minimum of the SVM dual by enumerating the status (0, C, free) of every multiplier."""
    n = y.size
    Q = K * np.outer(y, y)
    best = np.inf
    for status in itertools.product((0, 1, 2), repeat=n):
        status = np.array(status)
        a = np.where(status == 1, Cvec, 0.0)
        F = np.flatnonzero(status == 2)
        if F.size:
            B = np.flatnonzero(status != 2)
            # [Q_FF  y_F] [a_F]   [1 - Q_FB a_B]
            # [y_F^T  0 ] [ b ] = [  - y_B a_B ]
            m = F.size
            A = np.zeros((m + 1, m + 1))
            A[:m, :m] = Q[np.ix_(F, F)]
            A[:m, m] = y[F]
            A[m, :m] = y[F]
            rhs = np.concatenate([1.0 - Q[np.ix_(F, B)] @ a[B], [-(y[B] @ a[B])]])
            sol, *_ = np.linalg.lstsq(A, rhs, rcond=None)
            if np.max(np.abs(A @ sol - rhs)) > 1e-8:
                continue
            a[F] = sol[:m]
            if np.any(a[F] < -1e-9) or np.any(a[F] > Cvec[F] + 1e-9):
                continue
        if abs(y @ a) > 1e-8:
            continue
        best = min(best, 0.5 * a @ Q @ a - a.sum())
    return best


def random_problem(rng):
    n = int(rng.integers(2, 9))
    y = np.where(rng.uniform(size=n) < 0.5, -1, 1)
    y[0], y[1] = -1, 1
    X = rng.normal(size=(n, int(rng.integers(1, 4))))
    X[y > 0] += rng.uniform(0, 2)
    kernel = "linear" if rng.uniform() < 0.5 else "rbf"
    C = S.C_GRID[int(rng.integers(0, 32))]
    return X, y, kernel, C


def test_smo_matches_brute_force_qp():
    rng = np.random.default_rng(2024)
    for _ in range(200):
        X, y, kernel, C = random_problem(rng)
        model = S.smo_train(X, y, kernel, C, gamma=3.0, standardize=False)
        K = S.kernel_matrix(X, X, kernel, 3.0)
        Cvec = np.where(y > 0, model.class_C[1], model.class_C[-1])
        want = brute_force_dual(K, y.astype(float), Cvec)
        got = S.dual_objective(model.alpha, y, K)
        assert abs(got - want) <= 1e-4 * max(abs(want), 1e-12), (kernel, C, got, want)


def test_analytic_max_margin():
    model = S.smo_train(ANALYTIC_X, ANALYTIC_Y, "linear", 1000.0, class_weights=None, standardize=False)
    w = model.dual_coef @ model.support_vectors
    np.testing.assert_allclose(w, [1.0, 0.0], atol=1e-3)
    assert model.bias == pytest.approx(-1.0, abs=1e-3)
    labels, d = S.predict(model, ANALYTIC_X)
    assert np.array_equal(labels, ANALYTIC_Y)
    np.testing.assert_allclose(d * ANALYTIC_Y, 1.0, atol=1e-3)
    label, d = S.predict(model, [[0.0, 0.5]])
    assert label[0] == -1 and d[0] == pytest.approx(-1.0, abs=1e-3)
    assert abs(S.predict(model, [[1.0, 0.3]])[1][0]) < 1e-3


def test_zero_decision_maps_to_positive():
    model = S.SvmModel("linear", 3.0, 1.0, {-1: 1.0, 1: 1.0}, np.zeros((1, 2)), np.zeros(1), 0.0)
    labels, d = S.predict(model, [[0.3, -0.2]])
    assert d[0] == 0.0 and labels[0] == 1
    with pytest.raises(ValueError, match="dimension"):
        S.predict(model, [[1.0, 2.0, 3.0]])


def test_two_point_problem_support_vectors():
    X = np.array([[0.0, 0.0], [0.0, 0.0], [3.0, 4.0], [3.0, 4.0]])
    y = np.array([-1, -1, 1, 1])
    model = S.smo_train(X, y, "linear", 10.0, standardize=False)
    # the copies may share alpha arbitrarily; the per-class total is 2 / d^2
    assert model.alpha[y < 0].sum() == pytest.approx(2 / 25, rel=1e-6)
    assert model.alpha[y > 0].sum() == pytest.approx(2 / 25, rel=1e-6)
    sv = {tuple(v) for v in model.support_vectors}
    assert sv == {(0.0, 0.0), (3.0, 4.0)}


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), kernel=st.sampled_from(["linear", "rbf"]))
def test_kkt_and_feasibility(seed, kernel):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(6, 40))
    y = np.where(rng.uniform(size=n) < 0.35, 1, -1)
    y[:2] = [-1, 1]
    X = rng.normal(size=(n, 3)) + 0.8 * y[:, None]
    C = float(rng.choice(S.C_GRID[:20]))
    model = S.smo_train(X, y, kernel, C, standardize=True)
    Cvec = np.where(y > 0, model.class_C[1], model.class_C[-1])
    assert np.all(model.alpha >= 0) and np.all(model.alpha <= Cvec + 1e-12)
    assert abs(model.alpha @ y) < 1e-6
    f = S.predict(model, X)[1]
    zero = model.alpha == 0
    assert np.all(y[zero] * f[zero] >= 1 - 1e-3)
    bound = model.alpha >= Cvec
    assert np.all(y[bound] * f[bound] <= 1 + 1e-3)


def test_duplication_matches_reweighting():
    rng = np.random.default_rng(5)
    X = np.vstack([rng.normal(0, 1, (12, 2)), rng.normal(1.2, 1, (4, 2))])
    y = np.array([-1] * 12 + [1] * 4)
    k = 3
    Xd = np.vstack([X[:12]] + [X[12:]] * k)
    yd = np.array([-1] * 12 + [1] * 4 * k)
    C = 2.0
    dup = S.smo_train(Xd, yd, "rbf", C, standardize=False, tol=1e-6)
    # balanced weights on the duplicated set equal the original balanced problem at C * N'/N
    orig = S.smo_train(X, y, "rbf", C * len(yd) / len(y), standardize=False, tol=1e-6)
    q = rng.normal(0.5, 1.5, (200, 2))
    d1, d2 = S.predict(dup, q)[1], S.predict(orig, q)[1]
    np.testing.assert_allclose(d1, d2, atol=1e-4)
    assert np.array_equal(S.predict(dup, q)[0], S.predict(orig, q)[0])


def test_rbf_kernel_properties():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(40, 4))
    K = S.kernel_matrix(X, X, "rbf", 3.0)
    np.testing.assert_array_equal(np.diag(K), 1.0)
    np.testing.assert_allclose(K, K.T, atol=1e-15)
    assert np.linalg.eigvalsh((K + K.T) / 2).min() > -1e-10
    with pytest.raises(ValueError):
        S.kernel_matrix(X, X, "poly", 1.0)


def test_input_validation():
    with pytest.raises(ValueError, match="no samples"):
        S.smo_train(np.zeros((3, 2)), [1, 1, 1])
    with pytest.raises(ValueError, match="finite"):
        S.smo_train(np.array([[np.nan, 0], [1, 1]]), [-1, 1])
    with pytest.raises(ValueError, match="-1 or \\+1"):
        S.smo_train(np.zeros((2, 2)), [0, 1])


def test_non_convergence_is_reported():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(60, 2))
    y = np.where(rng.uniform(size=60) < 0.5, -1, 1)
    with pytest.raises(S.ConvergenceError, match="passes"):
        S.smo_solve(S.kernel_matrix(X, X, "linear", 3.0), y, np.full(60, 1e4), tol=1e-3, max_passes=0)


def test_grid_is_32_powers():
    assert len(S.C_GRID) == 32
    assert S.C_GRID[0] == pytest.approx(0.8) and S.C_GRID[1] == 1.0
    assert S.C_GRID[-1] == pytest.approx(1.25 ** 30)
    np.testing.assert_allclose(np.diff(np.log(S.C_GRID)), np.log(1.25))


def test_cv_separable_ties_go_to_smallest_c():
    rng = np.random.default_rng(3)
    X = np.vstack([rng.normal(-5, 0.3, (15, 2)), rng.normal(5, 0.3, (10, 2))])
    y = np.array([-1] * 15 + [1] * 10)
    out = S.cv_select(X, y, "linear", S.CvSpec(seed=1))
    assert out["evaluated"] == 32 and len(out["scores"]) == 32
    assert all(s == 1.0 for s in out["scores"])
    assert out["best_C"] == S.C_GRID[0]
    again = S.cv_select(X, y, "linear", S.CvSpec(seed=1))
    assert np.array_equal(again["folds"], out["folds"]) and again["best_C"] == out["best_C"]


def test_cv_picks_max_mean_score():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(40, 2))
    y = np.where(X[:, 0] + 0.7 * rng.normal(size=40) > 0.3, 1, -1)
    out = S.cv_select(X, y, "rbf", S.CvSpec(grid=S.C_GRID[:8], seed=2))
    best = max(out["scores"])
    first = next(c for c, s in zip(out["grid"], out["scores"]) if s == best)
    assert out["best_C"] == first


def test_folds_are_stratified_and_single_class_rejected():
    y = np.array([-1] * 20 + [1] * 10)
    assign = S.fold_assignment(y, 5, 0)
    for f in range(5):
        assert np.sum((assign == f) & (y > 0)) == 2 and np.sum((assign == f) & (y < 0)) == 4
    with pytest.raises(ValueError, match="single class"):
        S.cv_select(np.zeros((7, 2)), np.array([-1] * 6 + [1]), "linear")
    with pytest.raises(ValueError):
        S.CvSpec(folds=1)


def test_io_round_trips(tmp_path):
    rng = np.random.default_rng(6)
    X = rng.normal(size=(12, 7))
    y = np.where(np.arange(12) % 3 == 0, 1, -1)
    S.write_feature_csv(tmp_path / "f.csv", [f"s{i}" for i in range(12)], X, y)
    ids, X2, y2 = S.read_feature_csv(tmp_path / "f.csv")
    assert ids[0] == "s0" and np.array_equal(X2, X) and np.array_equal(y2, y)
    assert (tmp_path / "f.csv").read_text().splitlines()[0] == "id,f1,f2,f3,f4,f5,f6,f7,label"
    for standardize in (True, False):
        model = S.smo_train(X, y, "rbf", 3.0, standardize=standardize)
        S.save_model(model, tmp_path / "m.txt")
        back = S.load_model(tmp_path / "m.txt")
        q = rng.normal(size=(30, 7))
        assert np.array_equal(S.predict(back, q)[1], S.predict(model, q)[1])
        assert back.class_C == model.class_C
    (tmp_path / "bad.txt").write_text("something 1\n")
    with pytest.raises(ValueError):
        S.load_model(tmp_path / "bad.txt")
