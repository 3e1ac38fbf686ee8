import csv
import itertools

import numpy as np
import pytest

from conftest import desk_channel, random_phases
from ris_ofdm.exceptions import Infeasible
from ris_ofdm.sic_optimizer import (
    Grouping,
    ScaWorkingSet,
    constraint_sinr,
    diagonal_constraints,
    fp_precode,
    group_users,
    optimize,
    sca_beamform,
    sic_constraints,
    sum_rate,
)
from ris_ofdm.state_evolution import phi, phi_prime_all, user_columns

RHO = 1.46


def exhaustive_best(G, noise_power, T):
    """Best sum rate over every assignment of users to ``T`` ordered groups."""
    K = G.shape[1]
    W = np.ones((K, G.shape[0]), complex)
    best = -np.inf
    for labels in itertools.product(range(T), repeat=K):
        groups = tuple(tuple(k for k in range(K) if labels[k] == t) for t in range(T))
        best = max(best, sum_rate(Grouping(groups), G, W, noise_power))
    return best


@pytest.fixture(scope="module")
def small():
    # odd sizes so that mixed-up axes cannot broadcast silently
    return desk_channel(K=3, M=2, N=5, J_prime=4, seed=11)


def test_constraint_sinr_matches_state_evolution(small):
    G = small.compose(random_phases(5, 0))
    W = np.random.default_rng(0).normal(size=(3, 4)) + 0j
    g = Grouping(([2], [0, 1]))
    _, ph = constraint_sinr(sic_constraints(g, RHO), G, W, 1.0)
    users = [c.user for c in sic_constraints(g, RHO)]
    np.testing.assert_allclose(ph, phi_prime_all(g, G, W, 1.0)[users], rtol=1e-12)
    cons = diagonal_constraints(3, [0.7], [1.0])
    _, ph = constraint_sinr(cons, G, W, 1.0)
    np.testing.assert_allclose(ph, phi(np.full(3, 0.7), G, W, 1.0), rtol=1e-12)


# -- grouping ---------------------------------------------------------------

def test_symmetric_users_keep_initial_grouping():
    # equal-gain orthogonal users: every grouping has the same sum rate
    G = np.zeros((2, 4, 4), complex)
    G[:, np.arange(4), np.arange(4)] = 1.5
    hist = []
    g = group_users(G, 1.0, 2, history=hist)
    assert g.groups == ((0, 1), (2, 3))
    assert len(hist) == 1


def test_identical_users_reach_exhaustive_best():
    # identical rank-one channels: group sizes matter, so moves do happen
    G = np.ones((2, 4, 2), complex)
    hist = []
    g = group_users(G, 1.0, 2, history=hist)
    assert len(hist) > 1
    assert sum_rate(g, G, np.ones((4, 2)), 1.0) == pytest.approx(exhaustive_best(G, 1.0, 2), rel=1e-12)


def test_orthogonal_channels_match_exhaustive():
    gains = np.sqrt([4.0, 3.0, 2.0, 1.0])
    G = np.zeros((1, 4, 4), complex)
    G[0, np.arange(4), np.arange(4)] = gains
    g = group_users(G, 1.0, 2)
    assert sum_rate(g, G, np.ones((4, 1)), 1.0) == pytest.approx(exhaustive_best(G, 1.0, 2), rel=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_sum_rate_history_increases(seed):
    ch = desk_channel(K=4, M=2, N=4, J_prime=2, seed=seed)
    hist = []
    G = ch.compose(random_phases(4, seed))
    # small fixed power keeps the rates in the interference-limited regime
    W = np.full((4, 2), 1e-3, complex)
    g = group_users(G, 1.0, 2, W, history=hist)
    assert np.all(np.diff(hist) > 0)
    assert sum_rate(g, G, W, 1.0) == pytest.approx(hist[-1])


def test_remainder_goes_to_earlier_groups():
    G = np.zeros((1, 5, 5), complex)
    G[0, np.arange(5), np.arange(5)] = 1.0
    g = group_users(G, 1.0, 2)
    assert [len(x) for x in g.groups] == [3, 2]


# -- precoding ----------------------------------------------------------------

def test_fp_scalar_closed_form():
    g, s2 = 0.7 + 0.2j, 0.3
    res = fp_precode(sic_constraints(Grouping.single(1), RHO), np.array([[[g]]]), s2, tol=1e-12)
    assert res.precoders.total_power() == pytest.approx(RHO * s2 / abs(g) ** 2, rel=1e-8)


def test_fp_two_user_successive_closed_form():
    g = np.array([1.3, 0.6 - 0.4j])
    s2 = 0.5
    grouping = Grouping(([0], [1]))
    res = fp_precode(sic_constraints(grouping, RHO), g.reshape(1, 2, 1), s2, tol=1e-12)
    p = np.abs(res.precoders.W[:, 0]) ** 2
    p2 = RHO * s2 / abs(g[1]) ** 2
    p1 = RHO * (abs(g[1]) ** 2 * p2 + s2) / abs(g[0]) ** 2
    np.testing.assert_allclose(p, [p1, p2], rtol=1e-7)


def test_fp_output_meets_targets_and_is_tight(small):
    grouping = Grouping(([1], [0, 2]))
    G = small.compose(random_phases(5, 3))
    res = fp_precode(sic_constraints(grouping, RHO), G, 1.0)
    assert res.fp_gap <= 1e-10
    A = user_columns(G, res.precoders.W)
    for t, g in enumerate(grouping.groups):
        rest = grouping.remaining(t)
        B = np.einsum("jkm,jkn->jmn", A[:, rest], A[:, rest].conj()) + np.eye(2)
        for k in g:
            q = sum((A[j, k].conj() @ np.linalg.solve(B[j], A[j, k])).real for j in range(4))
            assert q >= 4 * RHO / (1 + RHO) - 1e-6
    assert np.all(np.diff(res.power_trace) <= 0)


def test_fp_infeasible_names_user():
    G = np.zeros((2, 2, 1), complex)
    G[:, 0, 0] = 1.0
    with pytest.raises(Infeasible) as err:
        fp_precode(sic_constraints(Grouping.single(2), RHO), G, 1.0)
    assert err.value.binding == 1


def test_fp_interference_limited_is_infeasible():
    # two users on one antenna and one subcarrier decoded jointly cannot both exceed SINR 1
    G = np.ones((1, 2, 1), complex)
    with pytest.raises(Infeasible):
        fp_precode(sic_constraints(Grouping.single(2), RHO), G, 1.0)


# -- phases ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def working(small):
    grouping = Grouping(([1], [0, 2]))
    cons = sic_constraints(grouping, RHO)
    W = fp_precode(cons, small.compose(random_phases(5, 4)), 1.0).precoders.W
    return cons, W


def test_touching_and_factorisation(small, working):
    cons, W = working
    rng = np.random.default_rng(0)
    for _ in range(20):
        b = rng.uniform(-np.pi, np.pi, 5)
        ws = ScaWorkingSet.build(cons, small, W, 1.0, b)
        _, ph = constraint_sinr(cons, small.compose(np.exp(1j * b)), W, 1.0)
        np.testing.assert_allclose(ws.surrogate(b), ph - RHO, rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(ws.l2(b), ws.tau_bar, rtol=1e-10)
        other = rng.uniform(-np.pi, np.pi, 5)
        np.testing.assert_allclose(ws.l2(other), ws.l2_direct(other, small, W, 1.0), rtol=1e-10, atol=1e-12)


def test_minorisation(small, working):
    cons, W = working
    rng = np.random.default_rng(1)
    for _ in range(100):
        bb = rng.uniform(-np.pi, np.pi, 5)
        ws = ScaWorkingSet.build(cons, small, W, 1.0, bb)
        b = bb + rng.normal(scale=rng.choice([0.01, 0.3, 2.0]), size=5)
        _, ph = constraint_sinr(cons, small.compose(np.exp(1j * b)), W, 1.0)
        assert np.all(ws.surrogate(b) <= ph - RHO + 1e-12)
        # the FP bound itself lies below tau
        tau, _ = constraint_sinr(cons, small.compose(np.exp(1j * b)), W, 1.0)
        assert np.all(ws.l2(b) <= tau + 1e-12)


def test_gradient_matches_finite_differences(small, working):
    cons, W = working
    ws = ScaWorkingSet.build(cons, small, W, 1.0, np.linspace(0, 3, 5))
    b0 = np.random.default_rng(2).uniform(-np.pi, np.pi, 5)
    h = 1e-6
    fd = np.array([(ws.l2(b0 + h * e) - ws.l2(b0 - h * e)) / (2 * h) for e in np.eye(5)]).T
    np.testing.assert_allclose(ws.l2_grad(b0), fd, rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(ws.grad, ws.l2_grad(ws.beta_bar), rtol=1e-12)


def test_sca_ascends(small, working):
    cons, W = working
    hist = []
    theta = sca_beamform(cons, small, W, 1.0, np.angle(random_phases(5, 4)), history=hist)
    assert np.all(np.diff(hist) > 0)
    np.testing.assert_allclose(np.abs(theta), 1.0)


# -- alternating optimisation ----------------------------------------------------

def test_no_ris_reduces_to_fp():
    ch = desk_channel(K=2, M=2, N=4, J_prime=4, seed=2).without_ris()
    res = optimize(ch, 1, RHO)
    ref = fp_precode(sic_constraints(Grouping.single(2), RHO), ch.compose(np.zeros(0)), 1.0)
    np.testing.assert_allclose(res.precoders.W, ref.precoders.W)
    assert res.rounds == 0


def test_ao_power_trace_and_csv(tmp_path):
    ch = desk_channel(K=3, M=2, N=6, J_prime=2, seed=5)
    res = optimize(ch, 2, RHO, seed=1)
    assert np.all(np.diff(res.power_trace) <= 0)
    assert res.margin_trace[-1] >= -1e-9 * RHO
    res.to_csv(tmp_path / "ao.csv")
    rows = list(csv.reader(open(tmp_path / "ao.csv")))
    assert rows[0] == ["round", "power", "min_sinr_gap"] and len(rows) == len(res.power_trace) + 1


def test_ao_deterministic():
    ch = desk_channel(K=2, M=2, N=4, J_prime=2, seed=6)
    a, b = optimize(ch, 1, RHO, seed=3), optimize(ch, 1, RHO, seed=3)
    np.testing.assert_array_equal(a.precoders.W, b.precoders.W)
    np.testing.assert_array_equal(a.theta, b.theta)


def test_regroup_flag_runs():
    ch = desk_channel(K=4, M=2, N=4, J_prime=2, seed=7)
    res = optimize(ch, 2, RHO, seed=0, regroup=True)
    assert res.grouping.K == 4


def test_beats_random_phases_mostly():
    wins = 0
    for seed in range(10):
        ch = desk_channel(K=2, M=2, N=8, J_prime=4, seed=100 + seed)
        res = optimize(ch, 1, RHO, seed=seed)
        rnd = fp_precode(res.constraints, ch.compose(random_phases(8, 1000 + seed)), 1.0)
        wins += res.precoders.power() <= rnd.precoders.power()
    assert wins >= 9


def _lipschitz_ratio(ch, cons, W, N, pairs, seed):
    """Largest ``|grad(b1) - grad(b2)| / (kappa |b1 - b2|)`` over random pairs."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(pairs):
        ws = ScaWorkingSet.build(cons, ch, W, 1.0, rng.uniform(-np.pi, np.pi, N))
        b1 = rng.uniform(-np.pi, np.pi, N)
        b2 = b1 + rng.normal(scale=rng.choice([1e-3, 0.1, 1.0, 3.0]), size=N)
        r = np.linalg.norm(ws.l2_grad(b1) - ws.l2_grad(b2), axis=1) / np.linalg.norm(b1 - b2)
        worst = max(worst, float(np.max(r / ws.kappa)))
    return worst


def test_lipschitz_with_frobenius_kappa_at_desk_size():
    ch = desk_channel(K=4, M=4, N=16, J_prime=4, seed=0)
    cons = sic_constraints(Grouping(([0, 1], [2, 3])), RHO)
    W = fp_precode(cons, ch.compose(random_phases(16, 4)), 1.0).precoders.W
    assert _lipschitz_ratio(ch, cons, W, 16, 300, 0) <= 1.0


def test_lipschitz_needs_factor_two_for_tiny_surfaces():
    # entrywise the phase Hessian is bounded by 2 Gamma; with two elements the factor is needed
    ch = desk_channel(K=2, M=2, N=2, J_prime=2, seed=3)
    cons = sic_constraints(Grouping.single(2), RHO)
    W = fp_precode(cons, ch.compose(random_phases(2, 4)), 1.0).precoders.W
    ratio = _lipschitz_ratio(ch, cons, W, 2, 300, 1)
    assert 1.0 < ratio <= 2.0
