import numpy as np
import pytest

from ris_ofdm.convex_kernel import (
    ConcaveQuadratic,
    LogDetConstraint,
    LogDetProblem,
    QcqpProblem,
    QuadraticConstraint,
    complex_to_real,
    real_to_complex,
    solve_logdet_program,
    solve_maxmin_concave_quadratics,
    solve_qcqp,
    pd_cholesky,
    check_hermitian,
)
from ris_ofdm.exceptions import Infeasible

cp = pytest.importorskip("cvxpy")


def test_interleaving_roundtrip():
    z = np.array([1 + 2j, -3.5 + 0.25j])
    x = complex_to_real(z)
    np.testing.assert_array_equal(x, [1, 2, -3.5, 0.25])
    np.testing.assert_array_equal(real_to_complex(x), z)


def test_hermitian_checks():
    a = np.array([[2, 1j], [-1j, 2]])
    pd_cholesky(a)
    with pytest.raises(ValueError):
        check_hermitian(np.array([[1, 1], [0, 1]]))
    with pytest.raises(ValueError):
        pd_cholesky(np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_active_single_constraint():
    # min x^2  s.t.  x >= 2
    prob = QcqpProblem(1, [[1.0]], [0.0], 0.0,
                       [QuadraticConstraint(np.zeros((1, 1)), [1.0], -2.0, ">=")])
    x, kkt = solve_qcqp(prob, 1e-9)
    assert x[0] == pytest.approx(2.0, abs=1e-7)
    assert prob.objective(x) == pytest.approx(4.0, abs=1e-6)
    # stationarity bottoms out near 1e-8 from rounding in g(x) at the boundary
    assert kkt <= 1e-6


def test_complex_scalar_constraint():
    # min |w|^2 s.t. 2Re{conj(y) g w} - |y|^2 b >= c, y = g = b = c = 1
    prob = QcqpProblem(2, np.eye(2), np.zeros(2), 0.0,
                       [QuadraticConstraint(np.zeros((2, 2)), [2.0, 0.0], -2.0, ">=")])
    x, _ = solve_qcqp(prob, 1e-10)
    w = real_to_complex(x)[0]
    # oracle: 1-D grid over Re w (Im w = 0 is optimal by symmetry)
    grid = np.linspace(-3, 3, 600001)
    feas = grid[2 * grid - 1 >= 1]
    best = feas[np.argmin(feas ** 2)]
    assert abs(w - best) < 1e-5
    assert abs(w) ** 2 == pytest.approx(1.0, abs=1e-6)


def test_halfspace_projection():
    a = np.array([1, 1]) / np.sqrt(2) + 0j
    ar = complex_to_real(a)
    # Re{a^H w} = ar . x
    prob = QcqpProblem(4, np.eye(4), np.zeros(4), 0.0,
                       [QuadraticConstraint(np.zeros((4, 4)), ar, -1.0, ">=")])
    x, _ = solve_qcqp(prob, 1e-10)
    expected = a / np.vdot(a, a).real
    np.testing.assert_allclose(real_to_complex(x), expected, atol=1e-6)
    assert prob.objective(x) == pytest.approx(1.0, abs=1e-6)


def test_infeasible_detected():
    # x <= -1 and x >= 1
    cons = [QuadraticConstraint(np.zeros((1, 1)), [1.0], 1.0, "<="),
            QuadraticConstraint(np.zeros((1, 1)), [1.0], -1.0, ">=")]
    with pytest.raises(Infeasible):
        solve_qcqp(QcqpProblem(1, [[1.0]], [0.0], 0.0, cons), 1e-8)


def test_rejects_non_psd():
    with pytest.raises(ValueError):
        QcqpProblem(1, [[-1.0]], [0.0])


def _random_qcqp(rng, n=5, m=4):
    P0 = rng.normal(size=(n, n))
    P0 = P0 @ P0.T + 0.1 * np.eye(n)
    q0 = rng.normal(size=n)
    cons = []
    for _ in range(m):
        A = rng.normal(size=(n, n)) * 0.3
        A = A @ A.T
        q = rng.normal(size=n)
        cons.append(QuadraticConstraint(A, q, -1.0 - rng.random(), "<="))
    return QcqpProblem(n, P0, q0, 0.0, cons)


@pytest.mark.parametrize("seed", range(5))
def test_qcqp_matches_cvxpy(seed):
    rng = np.random.default_rng(seed)
    prob = _random_qcqp(rng)
    x, kkt = solve_qcqp(prob, 1e-9)
    z = cp.Variable(prob.n)
    cons = [cp.quad_form(z, c.P) + c.q @ z + c.r <= 0 for c in prob.constraints]
    ref = cp.Problem(cp.Minimize(cp.quad_form(z, prob.P0) + prob.q0 @ z), cons)
    ref.solve(solver="CLARABEL")
    assert prob.objective(x) == pytest.approx(ref.value, abs=1e-6)
    assert np.all(prob.slacks(x) >= -1e-9)
    assert kkt < 1e-6


def test_barrier_objective_non_increasing():
    rng = np.random.default_rng(11)
    prob = _random_qcqp(rng, n=6, m=5)
    hist = []
    solve_qcqp(prob, 1e-9, history=hist)
    assert np.all(np.diff(hist) <= 1e-9 * (1 + np.abs(hist[:-1])))


def test_local_optimality_probe():
    rng = np.random.default_rng(3)
    prob = _random_qcqp(rng)
    x, _ = solve_qcqp(prob, 1e-10)
    f = prob.objective(x)
    for i in range(prob.n):
        for d in (1e-4, -1e-4):
            y = x.copy()
            y[i] += d
            # repair feasibility by shrinking toward the phase-I interior point
            if np.any(prob.slacks(y) < 0):
                y0, _ = solve_qcqp(QcqpProblem(prob.n, np.eye(prob.n), np.zeros(prob.n), 0.0,
                                               prob.constraints), 1e-6)
                lo, hi = 0.0, 1.0
                for _ in range(60):
                    mid = 0.5 * (lo + hi)
                    z = (1 - mid) * y + mid * y0
                    if np.all(prob.slacks(z) >= 0):
                        hi = mid
                    else:
                        lo = mid
                y = (1 - hi) * y + hi * y0
            assert prob.objective(y) >= f - 1e-6


def test_maxmin_single_piece():
    x = solve_maxmin_concave_quadratics([ConcaveQuadratic([[-1.0]], [2.0], -1.0)], [5.0])
    assert x[0] == pytest.approx(1.0, abs=1e-6)


def test_maxmin_two_pieces_symmetric():
    pieces = [ConcaveQuadratic([[-1.0]], [2.0], -1.0),   # -(x-1)^2
              ConcaveQuadratic([[-1.0]], [-2.0], -1.0)]  # -(x+1)^2
    x = solve_maxmin_concave_quadratics(pieces, [0.3], tol=1e-10)
    grid = np.linspace(-2, 2, 400001)
    vals = np.minimum(-(grid - 1) ** 2, -(grid + 1) ** 2)
    assert x[0] == pytest.approx(grid[np.argmax(vals)], abs=1e-5)
    assert min(p(x) for p in pieces) == pytest.approx(-1.0, abs=1e-7)


def test_maxmin_dominated_piece():
    pieces = [ConcaveQuadratic([[-1.0]], [0.0], 1.0), ConcaveQuadratic([[-1.0]], [0.0], 0.0)]
    x = solve_maxmin_concave_quadratics(pieces, [0.7])
    assert x[0] == pytest.approx(0.0, abs=1e-6)
    assert min(p(x) for p in pieces) == pytest.approx(0.0, abs=1e-8)


def _scalar_rate_constraint(idx, n, gains, rate):
    # rate <= log2(1 + sum_i x_i g_i)  (1x1 blocks)
    mats = np.array([[[g]] for g in gains], dtype=complex)[None]
    return LogDetConstraint(np.ones((1, 1, 1)), np.array([idx]), mats, rate)


@pytest.mark.parametrize("rate,expected", [(1.0, 1.0), (2.0, 3.0)])
def test_logdet_single_user_inversion(rate, expected):
    cons = [_scalar_rate_constraint([0], 1, [1.0], rate)]
    prob = LogDetProblem(1, np.zeros((1, 1)), [1.0], 0.0, cons,
                         [QuadraticConstraint(np.zeros((1, 1)), [-1.0], 0.0)])
    x = solve_logdet_program(prob, 1e-10, x0=[10.0])
    assert x[0] == pytest.approx(expected, abs=1e-6)


def test_logdet_two_user_mac():
    cons = [_scalar_rate_constraint([0], 2, [1.0], 0.5),
            _scalar_rate_constraint([1], 2, [1.0], 0.5),
            _scalar_rate_constraint([0, 1], 2, [1.0, 1.0], 1.0)]
    pos = [QuadraticConstraint(np.zeros((2, 2)), -np.eye(2)[i], 0.0) for i in range(2)]
    prob = LogDetProblem(2, np.zeros((2, 2)), [1.0, 1.0], 0.0, cons, pos)
    x = solve_logdet_program(prob, 1e-10, x0=[5.0, 5.0])
    # oracle: grid over (p1, p2)
    g = np.linspace(0, 1.5, 1501)
    p1, p2 = np.meshgrid(g, g, indexing="ij")
    ok = (np.log2(1 + p1) >= 0.5) & (np.log2(1 + p2) >= 0.5) & (np.log2(1 + p1 + p2) >= 1 - 1e-12)
    best = (p1 + p2)[ok].min()
    assert x.sum() == pytest.approx(best, abs=2e-3)
    np.testing.assert_allclose(x, [0.5, 0.5], atol=1e-4)
    assert np.log2(1 + x.sum()) == pytest.approx(1.0, abs=1e-6)


def test_logdet_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    n, d, B = 4, 3, 2
    base = np.array([np.eye(d)] * B, dtype=complex)
    idx = np.array([[0, 1, 2], [1, 2, 3]])
    mats = []
    for b in range(B):
        row = []
        for i in range(3):
            v = rng.normal(size=d) + 1j * rng.normal(size=d)
            row.append(np.outer(v, v.conj()))
        mats.append(row)
    con = LogDetConstraint(base, idx, np.array(mats), 1.0, linear=rng.normal(size=n))
    worst = 0.0
    for _ in range(100):
        x = rng.random(n) * 2
        s, grad, hess = con.derivatives(x, n)
        fd = np.empty(n)
        h = 1e-5
        for i in range(n):
            e = np.zeros(n)
            e[i] = h
            fd[i] = (con.slack(x + e) - con.slack(x - e)) / (2 * h)
        worst = max(worst, np.abs(fd - grad).max() / np.abs(grad).max())
        assert np.all(np.linalg.eigvalsh(hess) <= 1e-12)
    assert worst < 1e-6


def test_maxmin_active_set_matches_full_family():
    rng = np.random.default_rng(7)
    n = 3
    pieces = []
    for _ in range(120):
        B = rng.normal(size=(n, n))
        pieces.append(ConcaveQuadratic(-(B @ B.T + 0.1 * np.eye(n)), rng.normal(size=n), rng.normal()))
    full = solve_maxmin_concave_quadratics(pieces, np.zeros(n), tol=1e-10, working=1000)
    small = solve_maxmin_concave_quadratics(pieces, np.zeros(n), tol=1e-10, working=4)
    level = lambda x: min(p(x) for p in pieces)
    assert level(small) == pytest.approx(level(full), abs=1e-7)


def test_qcqp_active_set_matches_full():
    rng = np.random.default_rng(8)
    n = 4
    cons = []
    for _ in range(60):
        A = np.diag(rng.random(n))
        cons.append(QuadraticConstraint(A, rng.normal(size=n), -1.0 - rng.random()))
    prob = QcqpProblem(n, np.eye(n), rng.normal(size=n), 0.0, cons)
    x_full, _ = solve_qcqp(prob, 1e-10)
    x_small, kkt = solve_qcqp(prob, 1e-10, working=3)
    assert prob.objective(x_small) == pytest.approx(prob.objective(x_full), abs=1e-8)
    assert np.all(prob.slacks(x_small) > 0)
    assert kkt < 1e-6
