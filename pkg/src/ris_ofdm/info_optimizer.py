"""Power minimisation under the multiple-access capacity region.

Every nonempty user subset ``u`` contributes one constraint

    floor(u) <= sum_j log2 det(I + (1/s2) sum_{k in u} |w_kj|^2 g_kj g_kj^H)

where ``floor(u) = (J'/J) (J + L_cp) Q sum_{k in u} R_k`` counts the same
``J'`` subcarriers as the log-det side. Precoders and phases are optimised
alternately; each phase is solved on its own with the unit-modulus
constraint relaxed to the unit disk.
"""
import csv
import itertools
from dataclasses import dataclass, field
from typing import List, NamedTuple

import numpy as np

from .convex_kernel import LogDetConstraint, LogDetProblem, QuadraticConstraint, solve_logdet_program
from .exceptions import DimensionMismatch, Infeasible
from .transceiver import PrecoderSet

MAX_USERS = 6
SLACK_TOL = 1e-6
AO_TOL = 1e-3
AO_ROUNDS = 30
SOLVER_TOL = 1e-9


@dataclass(frozen=True)
class RateSpec:
    """Per-user rates and the frame bookkeeping that sets the rate floors.

    Parameters
    ----------
    Q : int
        Bits per modulation symbol.
    R : tuple of float
        Code rate of every user.
    L_cp : int
        Cyclic-prefix length.
    J : int
        Subcarriers per OFDM symbol.
    J_prime : int, optional
        Subcarriers the log-det side is summed over (defaults to ``J``).
    """

    Q: int
    R: tuple
    L_cp: int
    J: int
    J_prime: int = None

    def __post_init__(self):
        object.__setattr__(self, "R", tuple(float(r) for r in np.atleast_1d(self.R)))
        if self.J_prime is None:
            object.__setattr__(self, "J_prime", self.J)
        if self.Q < 1 or any(r <= 0 for r in self.R):
            raise ValueError("rates must be positive")
        if self.J < 1 or self.L_cp < 0 or self.J_prime < 1:
            raise ValueError("bad frame sizes")

    @classmethod
    def uniform(cls, K, Q, R, L_cp, J, J_prime=None):
        return cls(Q, (R,) * K, L_cp, J, J_prime)

    K = property(lambda self: len(self.R))

    @property
    def unit_floor(self):
        """Floor per unit of summed code rate."""
        return self.J_prime / self.J * (self.J + self.L_cp) * self.Q

    def subsets(self):
        """Every nonempty user subset, smallest first."""
        users = range(self.K)
        return [s for r in range(1, self.K + 1) for s in itertools.combinations(users, r)]

    def floor(self, subset):
        return self.unit_floor * sum(self.R[k] for k in subset)


def _check_k(K):
    if K > MAX_USERS:
        raise ValueError(f"{K} users give {2 ** K - 1} constraints; at most {MAX_USERS} users are supported")


def _outer(G):
    """``g g^H`` per subcarrier and user, shape ``(J, K, M, M)``."""
    return np.einsum("jkm,jkn->jkmn", G, G.conj())


def _capacity(G, P, subset, noise_power):
    """``sum_j log2 det(I + (1/s2) sum_{k in u} p_kj g_kj g_kj^H)`` for powers ``P`` ``(K, J)``."""
    subset = list(subset)
    S = np.einsum("kj,jkmn->jmn", P[subset], _outer(G[:, subset])) / noise_power
    _, logdet = np.linalg.slogdet(np.eye(G.shape[2]) + S)
    return float(logdet.sum() / np.log(2.0))


def capacity_slack(G, precoders, subset, rate_spec: RateSpec, noise_power):
    """Log-det capacity of ``subset`` minus its rate floor.

    Parameters
    ----------
    G : complex array ``(J', K, M)``
        Composed channel.
    precoders : PrecoderSet or array ``(K, J')``
    subset : sequence of int
        Nonempty user subset.
    rate_spec : RateSpec
    noise_power : float
    """
    W = precoders.W if isinstance(precoders, PrecoderSet) else np.asarray(precoders, dtype=complex)
    G = np.asarray(G, dtype=complex)
    if W.shape != (G.shape[1], G.shape[0]):
        raise DimensionMismatch(f"channel {G.shape} and precoders {W.shape} disagree")
    if not len(subset):
        raise ValueError("subset must be nonempty")
    return _capacity(G, np.abs(W) ** 2, subset, noise_power) - rate_spec.floor(subset)


def all_slacks(G, precoders, rate_spec: RateSpec, noise_power):
    return np.array([capacity_slack(G, precoders, u, rate_spec, noise_power) for u in rate_spec.subsets()])


def solve_w_info(G, rate_spec: RateSpec, noise_power, tol=SOLVER_TOL):
    """Minimum-power precoders for a fixed composed channel.

    The log-det terms depend only on ``|w_kj|^2``, so the program is solved
    over the powers and the precoders are returned real and non-negative.

    Parameters
    ----------
    G : complex array ``(J', K, M)``
    rate_spec : RateSpec
    noise_power : float

    Returns
    -------
    PrecoderSet

    Raises
    ------
    Infeasible
        When some subset has an all-zero channel.
    """
    G = np.asarray(G, dtype=complex)
    J, K, M = G.shape
    _check_k(K)
    if rate_spec.K != K or rate_spec.J_prime != J:
        raise DimensionMismatch(f"rate spec is for {rate_spec.K} users on {rate_spec.J_prime} subcarriers")
    norms = np.sum(np.abs(G) ** 2, axis=-1)                      # (J, K)
    dead = np.flatnonzero(norms.sum(axis=0) == 0)
    if dead.size:
        raise Infeasible(f"user {dead[0]} has no channel", binding=int(dead[0]))
    # unit average gain keeps the variables O(1)
    gain = float(norms.mean()) / noise_power
    mats = _outer(G) / (noise_power * gain)                      # (J, K, M, M)
    n = K * J
    index = np.arange(n).reshape(K, J)
    constraints = []
    for u in rate_spec.subsets():
        u = list(u)
        constraints.append(LogDetConstraint(
            np.broadcast_to(np.eye(M), (J, M, M)), index[u].T, mats[:, u], rate=rate_spec.floor(u)))
    nonneg = [QuadraticConstraint(np.zeros((n, n)), -np.eye(n)[i]) for i in range(n)]
    y0 = _feasible_powers(constraints, n)
    prob = LogDetProblem(n, np.zeros((n, n)), np.ones(n), 0.0, constraints, nonneg)
    y = solve_logdet_program(prob, tol=tol, x0=y0)
    P = np.maximum(y, 0.0).reshape(K, J) / gain
    return PrecoderSet(np.sqrt(P).astype(complex))


def _feasible_powers(constraints, n):
    y = np.ones(n)
    for _ in range(200):
        if all(c.slack(y) > 0 for c in constraints):
            return y
        y *= 2.0
    raise Infeasible("no power level satisfies the capacity constraints")


def _theta_constraints(channel, theta, W, rate_spec: RateSpec, n):
    """Log-det constraints in ``x = [Re theta_n, Im theta_n, dR]`` with ``|theta_n|^2`` set to one."""
    theta = np.asarray(theta, dtype=complex).copy()
    theta[n] = 0.0
    c = channel.compose(theta)                                   # (J, K, M) without element n
    d = channel.cascade[:, :, n]                                 # (J, K, M)
    P = (np.abs(W) ** 2).T / channel.noise_power                 # (J, K)
    cc = np.einsum("jkm,jkn->jkmn", c, c.conj()) + np.einsum("jkm,jkn->jkmn", d, d.conj())
    dc = np.einsum("jkm,jkn->jkmn", d, c.conj())
    re = dc + np.swapaxes(dc, -1, -2).conj()
    im = 1j * (dc - np.swapaxes(dc, -1, -2).conj())
    J, _, M = c.shape
    out = []
    for u in rate_spec.subsets():
        u = list(u)
        base = np.eye(M) + np.einsum("jk,jkmn->jmn", P[:, u], cc[:, u])
        A_re = np.einsum("jk,jkmn->jmn", P[:, u], re[:, u])
        A_im = np.einsum("jk,jkmn->jmn", P[:, u], im[:, u])
        mats = np.stack([A_re, A_im], axis=1)
        index = np.tile([0, 1], (J, 1))
        coef = rate_spec.unit_floor * len(u)
        out.append(LogDetConstraint(base, index, mats, rate=rate_spec.floor(u),
                                    linear=np.array([0.0, 0.0, coef])))
    return out


def _best_dr(constraints, x):
    return min((c.logdet(x) - c.rate) / c.linear[2] for c in constraints)


class ThetaUpdate(NamedTuple):
    value: complex       # phase after projection onto the unit circle (or kept relaxed)
    relaxed: complex     # optimum of the unit-disk relaxation
    margin: float        # optimal common rate margin dR of the relaxation


def solve_theta_info(channel, theta, precoders, rate_spec: RateSpec, n, guarded=False, tol=SOLVER_TOL):
    """Re-optimise phase ``n`` with everything else fixed.

    Maximises the common rate margin ``dR`` over the unit disk, then
    projects the phase onto the unit circle.

    Parameters
    ----------
    channel : EffectiveChannel
    theta : complex array ``(N,)``
    precoders : PrecoderSet
    rate_spec : RateSpec
    n : int
        Element index.
    guarded : bool
        Project only when the projected phases keep every capacity slack
        non-negative; otherwise keep the relaxed value.

    Returns
    -------
    ThetaUpdate
    """
    W = precoders.W if isinstance(precoders, PrecoderSet) else np.asarray(precoders, dtype=complex)
    theta = np.asarray(theta, dtype=complex)
    cons = _theta_constraints(channel, theta, W, rate_spec, n)
    if not np.any(channel.cascade[:, :, n]):
        # the element reflects nothing: every phase is optimal
        dr = _best_dr(cons, np.array([theta[n].real, theta[n].imag, 0.0]))
        return ThetaUpdate(theta[n], theta[n], dr)
    start = 0.99 * theta[n] / max(1.0, abs(theta[n]))
    x0 = np.array([start.real, start.imag, 0.0])
    x0[2] = _best_dr(cons, x0) - 1.0
    disk = QuadraticConstraint(np.diag([1.0, 1.0, 0.0]), np.zeros(3), -1.0)
    prob = LogDetProblem(3, np.zeros((3, 3)), np.array([0.0, 0.0, -1.0]), 0.0, cons, [disk])
    x = solve_logdet_program(prob, tol=tol, x0=x0)
    t = complex(x[0], x[1])
    dr = _best_dr(cons, x)
    if abs(t) == 0.0:
        return ThetaUpdate(theta[n], t, dr)
    unit = t / abs(t)
    if guarded and abs(t) < 1.0:
        trial = theta.copy()
        trial[n] = unit
        if all_slacks(channel.compose(trial), W, rate_spec, channel.noise_power).min() < -SLACK_TOL:
            return ThetaUpdate(t, t, dr)
    return ThetaUpdate(unit, t, dr)


@dataclass
class InfoResult:
    precoders: PrecoderSet
    theta: np.ndarray
    power_trace: List[float] = field(default_factory=list)
    increased: bool = False      # the loop stopped on a power increase
    rounds: int = 0

    def to_csv(self, path):
        """One row per round; ``non_monotone`` marks a step that raised the power."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["round", "power", "non_monotone"])
            for i, p in enumerate(self.power_trace):
                w.writerow([i, f"{p:.10g}", int(i > 0 and p > self.power_trace[i - 1])])


def optimize_info(channel, rate_spec: RateSpec, seed=0, theta0=None, guarded=False,
                  ao_tol=AO_TOL, ao_rounds=AO_ROUNDS):
    """Alternate precoder solves and element-wise phase sweeps.

    Starts from random phases drawn from ``seed``. The loop stops at a
    relative power change below ``ao_tol``, after ``ao_rounds`` rounds, or
    at the first power increase; the increasing step is recorded in the
    trace but the previous design is returned. Every returned design
    meets all capacity constraints.
    """
    _check_k(channel.K)
    rng = np.random.default_rng(seed)
    if theta0 is None:
        theta = np.exp(2j * np.pi * rng.random(channel.N))
    else:
        theta = np.asarray(theta0, dtype=complex).copy()
    s2 = channel.noise_power
    best = solve_w_info(channel.compose(theta), rate_spec, s2)
    best_theta = theta.copy()
    trace = [best.total_power()]
    result = InfoResult(best, best_theta, trace)
    if channel.N == 0:
        return result
    W = best
    for r in range(ao_rounds):
        for n in range(channel.N):
            theta[n] = solve_theta_info(channel, theta, W, rate_spec, n, guarded=guarded).value
        W = solve_w_info(channel.compose(theta), rate_spec, s2)
        p = W.total_power()
        trace.append(p)
        result.rounds = r + 1
        if p > trace[-2]:
            result.increased = True
            break
        best, best_theta = W, theta.copy()
        if trace[-2] - p < ao_tol * trace[-2]:
            break
    result.precoders, result.theta = best, best_theta
    return result
