"""Groupwise SIC power minimisation: user grouping, FP precoding and SCA phases.

Every SINR requirement is expressed as a :class:`SinrConstraint`: user
``k`` must reach ``tau / (1 - v_k tau) >= rho_req`` where ``tau`` is the
per-subcarrier LMMSE quantity computed with interference weights ``v``.
Groupwise SIC uses weight 1 on the user's own and later groups and 0 on
cancelled groups; the diagonal-path baseline uses ``v = s * 1`` for a grid of
``s``. Both the precoder step and the phase step work on the same list.

Channels are ``EffectiveChannel`` objects on the optimisation grid (``J'``
subcarriers); precoders are ``(K, J')`` arrays.
"""
import csv
from dataclasses import dataclass, field
from typing import List

import numpy as np

from .convex_kernel import (
    ConcaveQuadratic,
    QcqpProblem,
    QuadraticConstraint,
    solve_maxmin_concave_quadratics,
    solve_qcqp,
)
from .exceptions import Infeasible, SolverError
from .state_evolution import Grouping, user_columns
from .transceiver import PrecoderSet

__all__ = [
    "Grouping", "SinrConstraint", "sic_constraints", "diagonal_constraints", "constraint_sinr",
    "group_rates", "sum_rate", "group_users", "FpResult", "fp_precode", "feasible_start",
    "ScaWorkingSet", "sca_beamform", "OptimizeResult", "optimize",
]

FP_TOL = 1e-4
AO_TOL = 1e-3
AO_ROUNDS = 30
SCA_TOL = 1e-5
SCA_ITERS = 100
EXTRAPOLATE_MAX = 64.0
QCQP_TOL = 1e-9
FP_WORKING_SET = 48


# ---------------------------------------------------------------------------
# constraints


@dataclass
class SinrConstraint:
    """``tau / (1 - weights[user] tau) >= rho_req`` with interference weights ``weights``."""

    user: int
    weights: np.ndarray
    rho_req: float

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights[self.user] < 0 or self.rho_req < 0:
            raise ValueError("weights and requirements must be non-negative")

    def tau_target(self):
        """Requirement on ``tau``: ``rho / (1 + v_k rho)``."""
        return self.rho_req / (1.0 + self.weights[self.user] * self.rho_req)


def sic_constraints(grouping: Grouping, rho_tar):
    """One constraint per user: own and later groups interfere with unit variance."""
    rho_tar = np.broadcast_to(np.asarray(rho_tar, dtype=float), (grouping.K,))
    out = []
    for t, g in enumerate(grouping.groups):
        w = np.zeros(grouping.K)
        w[grouping.remaining(t)] = 1.0
        out.extend(SinrConstraint(k, w, rho_tar[k]) for k in g)
    return out


def diagonal_constraints(K, v_grid, rho_req):
    """``phi_k(s * 1) >= rho_req(s)`` for every grid value ``s`` and user ``k``."""
    return [SinrConstraint(k, np.full(K, s), r) for s, r in zip(v_grid, rho_req) for k in range(K)]


def _stack(constraints):
    users = np.array([c.user for c in constraints])
    weights = np.array([c.weights for c in constraints])
    return users, weights


def _lmmse_vectors(A, users, weights, noise_power):
    """``y_c(j) = V_c(j)^-1 a_{k_c}(j)`` for all constraints, shape ``(C, J, M)``."""
    M = A.shape[2]
    outer = np.einsum("jkm,jkn->jkmn", A, A.conj())
    V = np.einsum("ck,jkmn->cjmn", weights, outer) + noise_power * np.eye(M)
    return np.linalg.solve(V, A[:, users].transpose(1, 0, 2)[..., None])[..., 0]


def constraint_sinr(constraints, G, W, noise_power):
    """``(tau, phi)`` of every constraint for composed channel ``G`` and precoders ``W``."""
    A = user_columns(G, W)
    users, weights = _stack(constraints)
    y = _lmmse_vectors(A, users, weights, noise_power)
    tau = np.einsum("jcm,cjm->c", A[:, users].conj(), y).real / A.shape[0]
    vk = weights[np.arange(len(users)), users]
    with np.errstate(divide="ignore"):
        phi = np.where(1 - vk * tau > 1e-14, tau / np.maximum(1 - vk * tau, 1e-14), 1e14)
    return tau, phi


def _gaps(constraints, G, W, noise_power):
    _, phi = constraint_sinr(constraints, G, W, noise_power)
    return phi - np.array([c.rho_req for c in constraints])


def _binding_user(constraints, gaps):
    return int(constraints[int(np.argmin(gaps))].user)


# ---------------------------------------------------------------------------
# user grouping


def _logdet(A, users, noise_power):
    """``sum_j log2 det(I + (1/s2) sum_{k in users} a_k a_k^H)``."""
    M = A.shape[2]
    if len(users) == 0:
        return 0.0
    S = np.einsum("jkm,jkn->jmn", A[:, users], A[:, users].conj()) / noise_power + np.eye(M)
    return float(np.linalg.slogdet(S)[1].sum() / np.log(2.0))


def group_rates(A, remaining, noise_power):
    """Rates of every user in ``remaining`` with the others in ``remaining`` as interference."""
    full = _logdet(A, remaining, noise_power)
    return {k: full - _logdet(A, [u for u in remaining if u != k], noise_power) for k in remaining}


def sum_rate(grouping: Grouping, G, W, noise_power):
    """Sum over groups of the group members' rates with earlier groups cancelled."""
    A = user_columns(G, W)
    total = 0.0
    for t, g in enumerate(grouping.groups):
        rates = group_rates(A, grouping.remaining(t), noise_power)
        total += sum(rates[k] for k in g)
    return total


def _group_sizes(K, T):
    # earlier groups take the remainder
    return [K // T + (1 if t < K % T else 0) for t in range(T)]


def group_users(G, noise_power, T_max, W=None, history=None):
    """Greedy grouping by achievable rate, refined by single-user moves.

    Parameters
    ----------
    G : complex array ``(J, K, M)``
        Composed channel at the current phases.
    noise_power : float
    T_max : int
    W : complex array ``(K, J)``, optional
        Fixed precoders; unit power on every subcarrier by default.
    history : list, optional
        Receives the sum rate after the initial fill and after every accepted move.
    """
    J, K, _ = np.shape(G)
    W = np.ones((K, J), complex) if W is None else np.asarray(W, dtype=complex)
    A = user_columns(G, W)
    left = list(range(K))
    groups = []
    for size in _group_sizes(K, T_max):
        rates = group_rates(A, left, noise_power)
        # strongest first; ties keep the lower index
        chosen = sorted(left, key=lambda k: (-rates[k], k))[:size]
        groups.append(chosen)
        left = [k for k in left if k not in chosen]
    grouping = Grouping(tuple(groups))
    best = sum_rate(grouping, G, W, noise_power)
    if history is not None:
        history.append(best)

    def moved(gr, k, shift):
        lists = gr.as_lists()
        t = gr.group_of[k]
        lists[t].remove(k)
        lists[t + shift].append(k)
        return Grouping(tuple(lists))

    improved = True
    while improved:
        improved = False
        for k in range(K):
            t = grouping.group_of[k]
            pre_g = moved(grouping, k, -1) if t > 0 else grouping
            sub_g = moved(grouping, k, +1) if t < T_max - 1 else grouping
            pre = sum_rate(pre_g, G, W, noise_power) if t > 0 else best
            sub = sum_rate(sub_g, G, W, noise_power) if t < T_max - 1 else best
            tol = 1e-12 * max(1.0, abs(best))
            if pre > best + tol and pre >= sub:
                grouping, best, improved = pre_g, pre, True
            elif sub > best + tol and sub > pre:
                grouping, best, improved = sub_g, sub, True
            else:
                continue
            if history is not None:
                history.append(best)
    return grouping


# ---------------------------------------------------------------------------
# precoder step: fractional programming


@dataclass
class FpResult:
    precoders: PrecoderSet
    power_trace: List[float]
    fp_gap: float            # worst |FP constraint at y - quadratic form| over inner iterations
    min_gap: float           # min over constraints of phi - rho_req at the output


def feasible_start(constraints, G, noise_power, W0=None, margin=1.05, max_iter=500):
    """Scale each user's precoder until every constraint holds (fixed-point power control).

    Raises
    ------
    Infeasible
        When the powers diverge without meeting the targets; ``binding``
        names the user furthest from its requirement.
    """
    J, K, _ = G.shape
    W = np.ones((K, J), complex) if W0 is None else np.array(W0, dtype=complex)
    users = np.array([c.user for c in constraints])
    req = np.array([c.rho_req for c in constraints])
    start = np.sum(np.abs(W) ** 2)
    for _ in range(max_iter):
        _, phi = constraint_sinr(constraints, G, W, noise_power)
        # rounding-level shortfalls are left to the solver's phase I
        if np.all(phi >= req * (1 - 1e-9)):
            return W
        ratio = np.ones(K)
        with np.errstate(divide="ignore"):
            need = np.where(phi > 0, req / np.maximum(phi, 1e-300), np.inf)
        np.maximum.at(ratio, users, need)
        if not np.all(np.isfinite(ratio)):
            k = int(users[np.argmax(~np.isfinite(need))])
            raise Infeasible(f"user {k} has no signal at these phases", binding=k)
        W = W * np.sqrt(np.where(ratio > 1, ratio * margin, 1.0))[:, None]
        if np.sum(np.abs(W) ** 2) > 1e15 * max(start, 1e-300):
            break
    gaps = phi - req
    k = _binding_user(constraints, gaps)
    raise Infeasible(f"targets unreachable by power scaling; user {k} binds", binding=k)


def _fp_problem(constraints, A, G, y, noise_power):
    """QCQP in ``x = [Re w_kj, Im w_kj]`` (user-major) for fixed auxiliaries ``y``."""
    J, K, _ = G.shape
    n = 2 * K * J
    cons = []
    # |y_c(j)^H g_{k'}(j)|^2 for all constraints, subcarriers and users
    yg = np.einsum("cjm,jkm->cjk", y.conj(), G)
    for c, con in enumerate(constraints):
        k = con.user
        h = yg[c, :, k]                          # coefficient of w_kj in y^H a_k
        q = np.zeros(n)
        base = 2 * (k * J + np.arange(J))
        q[base] = 2 * h.real
        q[base + 1] = -2 * h.imag
        d = (con.weights[None, :] * np.abs(yg[c]) ** 2).T.reshape(-1)    # (K*J,) user-major
        P = np.diag(np.repeat(d, 2))
        r = -noise_power * np.sum(np.abs(y[c]) ** 2) - J * con.tau_target()
        cons.append(QuadraticConstraint(P, q, r, ">="))
    return QcqpProblem(n, np.eye(n), np.zeros(n), 0.0, cons, check=False)


def _to_real(W):
    return np.stack([W.real, W.imag], axis=-1).reshape(-1)


def _to_complex(x, K, J):
    z = x.reshape(K, J, 2)
    return z[..., 0] + 1j * z[..., 1]


def fp_precode(constraints, G, noise_power, W0=None, tol=FP_TOL, max_iter=50):
    """Minimise total power under SINR constraints by alternating ``y`` and ``W`` updates.

    Parameters
    ----------
    constraints : list of SinrConstraint
    G : complex array ``(J', K, M)``
        Composed channel at fixed phases.
    noise_power : float
    W0 : complex array ``(K, J')``, optional
        Starting precoders; made feasible by power scaling when needed.

    Returns
    -------
    FpResult
        The output satisfies every constraint; the power never increases
        across inner iterations.
    """
    G = np.asarray(G, dtype=complex)
    J, K, _ = G.shape
    # work with unit average channel gain so powers are O(rho)
    gain = np.sqrt(np.mean(np.sum(np.abs(G) ** 2, axis=-1)))
    if gain == 0:
        raise Infeasible("all channels are zero", binding=int(constraints[0].user))
    Gs = G / gain
    W = feasible_start(constraints, Gs, noise_power, None if W0 is None else np.asarray(W0) * gain)
    users, weights = _stack(constraints)
    trace = [float(np.sum(np.abs(W) ** 2))]
    fp_gap = 0.0
    for _ in range(max_iter):
        A = user_columns(Gs, W)
        y = _lmmse_vectors(A, users, weights, noise_power)
        prob = _fp_problem(constraints, A, Gs, y, noise_power)
        # at y = V^-1 a the FP constraint equals the quadratic form a^H V^-1 a
        x_cur = _to_real(W)
        quad = np.einsum("jcm,cjm->c", A[:, users].conj(), y).real
        fp_val = prob.slacks(x_cur) + J * np.array([c.tau_target() for c in constraints])
        fp_gap = max(fp_gap, float(np.max(np.abs(fp_val - quad) / np.maximum(1.0, np.abs(quad)))))
        # scaling all precoders up makes the FP constraints strictly feasible
        x, _ = solve_qcqp(prob, QCQP_TOL, x0=x_cur * (1 + 1e-6), working=FP_WORKING_SET)
        W_new = _to_complex(x, K, J)
        p_new = float(np.sum(np.abs(W_new) ** 2))
        if p_new >= trace[-1]:
            break
        W = W_new
        trace.append(p_new)
        if trace[-2] - p_new < tol * trace[-2]:
            break
    gaps = _gaps(constraints, Gs, W, noise_power)
    return FpResult(PrecoderSet(W / gain), [p / gain ** 2 for p in trace], fp_gap, float(gaps.min()))


# ---------------------------------------------------------------------------
# phase step: successive convex approximation


@dataclass
class ScaWorkingSet:
    """Quadratic minorants of every constraint's SINR around phases ``beta_bar``.

    For constraint ``c`` the FP bound on ``tau`` is an exact quadratic in
    ``theta = exp(i beta)``:
    ``l2(beta) = 2 Re(u^H theta) - theta^H U theta + C1``. The surrogate is
    ``alpha * (grad' d - kappa/2 |d|^2) + phi_bar - rho_req`` with
    ``d = beta - beta_bar``.
    """

    beta_bar: np.ndarray
    u: np.ndarray            # (C, N)
    U: np.ndarray            # (C, N, N)
    C1: np.ndarray           # (C,)
    tau_bar: np.ndarray
    phi_bar: np.ndarray
    alpha: np.ndarray
    kappa: np.ndarray
    grad: np.ndarray         # (C, N)
    rho_req: np.ndarray
    y: np.ndarray            # (C, J, M)
    users: np.ndarray
    weights: np.ndarray

    @classmethod
    def build(cls, constraints, channel, W, noise_power, beta_bar):
        beta_bar = np.asarray(beta_bar, dtype=float)
        theta = np.exp(1j * beta_bar)
        users, weights = _stack(constraints)
        W = np.asarray(W, dtype=complex)
        J, K = channel.J, channel.K
        D = channel.direct * W.T[:, :, None]                     # (J, K, M)
        Cn = channel.cascade * W.T[:, :, None, None]             # (J, K, N, M)
        A = D + np.einsum("n,jknm->jkm", theta, Cn)
        y = _lmmse_vectors(A, users, weights, noise_power)       # (C, J, M)
        C, N = len(users), channel.N
        yc = y.conj()
        e = np.matmul(D[None], yc[:, :, :, None])[..., 0]        # (C, J, K): y^H d_k'
        # batched over subcarriers: (J, C, M) @ (J, M, K N)
        f = np.matmul(yc.transpose(1, 0, 2), Cn.reshape(J, K * N, -1).transpose(0, 2, 1))
        f = np.ascontiguousarray(f.reshape(J, C, K, N).transpose(1, 0, 2, 3))          # (C, J, K, N): y^H c_k'n
        idx = np.arange(C)
        fc = f.conj()
        e_own = e[idx, :, users]
        we = (weights[:, None, :] * e).reshape(C, 1, J * K)
        fc = fc.reshape(C, J * K, N)
        u = (fc.reshape(C, J, K, N)[idx, :, users].sum(1) - np.matmul(we, fc)[:, 0]) / J
        sw = np.sqrt(np.repeat(weights[:, None, :], J, 1).reshape(C, J * K, 1))
        U = np.matmul(np.swapaxes(fc * sw, 1, 2), f.reshape(C, J * K, N) * sw) / J
        C1 = (2 * e_own.sum(1).real - np.einsum("ck,cjk->c", weights, np.abs(e) ** 2)
              - noise_power * np.sum(np.abs(y) ** 2, axis=(1, 2))) / J
        tau = np.einsum("jcm,cjm->c", A[:, users].conj(), y).real / J
        vk = weights[idx, users]
        den = np.maximum(1 - vk * tau, 1e-14)
        phi = tau / den
        alpha = 1.0 / den ** 2
        absU = np.abs(U)
        off = absU.sum(-1) - np.abs(np.diagonal(U, axis1=1, axis2=2))
        Gamma = absU.copy()
        n = np.arange(U.shape[1])
        Gamma[:, n, n] = np.abs(u) + off
        kappa = np.linalg.norm(Gamma, axis=(1, 2))
        grad = 2 * np.real(1j * theta.conj() * (np.einsum("cnm,m->cn", U, theta) - u))
        rho_req = np.array([c.rho_req for c in constraints])
        return cls(beta_bar, u, U, C1, tau, phi, alpha, kappa, grad, rho_req, y, users, weights)

    def l2(self, beta):
        """FP lower bound on ``tau`` from the quadratic factorisation, shape ``(C,)``."""
        th = np.exp(1j * np.asarray(beta, dtype=float))
        return (2 * np.real(self.u.conj() @ th)
                - np.real(np.einsum("n,cnm,m->c", th.conj(), self.U, th)) + self.C1)

    def l2_direct(self, beta, channel, W, noise_power):
        """The same bound assembled from the channel: ``(2 Re y^H a - y^H V y) / J``."""
        A = user_columns(channel.compose(np.exp(1j * np.asarray(beta, dtype=float))), W)
        lin = np.einsum("cjm,jcm->c", self.y.conj(), A[:, self.users]).real
        ya = np.einsum("cjm,jkm->cjk", self.y.conj(), A)
        quad = np.einsum("ck,cjk->c", self.weights, np.abs(ya) ** 2)
        quad = quad + noise_power * np.sum(np.abs(self.y) ** 2, axis=(1, 2))
        return (2 * lin - quad) / A.shape[0]

    def l2_grad(self, beta):
        th = np.exp(1j * np.asarray(beta, dtype=float))
        return 2 * np.real(1j * th.conj() * (np.einsum("cnm,m->cn", self.U, th) - self.u))

    def surrogate(self, beta):
        """``l_c(beta)`` for every constraint."""
        d = np.asarray(beta, dtype=float) - self.beta_bar
        return (self.alpha * (self.grad @ d - 0.5 * self.kappa * (d @ d))
                + self.phi_bar - self.rho_req)

    def pieces(self):
        """Surrogates as concave quadratics in the step ``d = beta - beta_bar``."""
        N = self.beta_bar.size
        return [ConcaveQuadratic(-0.5 * a * k * np.eye(N), a * g, p - r)
                for a, k, g, p, r in zip(self.alpha, self.kappa, self.grad, self.phi_bar, self.rho_req)]


def sca_beamform(constraints, channel, W, noise_power, beta0, tol=SCA_TOL, max_iter=SCA_ITERS,
                 history=None):
    """Raise the smallest SINR margin over the phases by successive minorisation.

    Parameters
    ----------
    constraints : list of SinrConstraint
    channel : EffectiveChannel
        On the same ``J'`` grid as ``W``.
    W : complex array ``(K, J')``
    noise_power : float
    beta0 : array ``(N,)``
        Starting phases.
    history : list, optional
        Receives the true smallest margin after every accepted step.

    Returns
    -------
    theta : complex array ``(N,)``, unit modulus.
    """
    beta = np.asarray(beta0, dtype=float).copy()
    if beta.size == 0:
        return np.zeros(0, complex)
    W = np.asarray(W, dtype=complex)

    def margin(b):
        return float(_gaps(constraints, channel.compose(np.exp(1j * b)), W, noise_power).min())

    cur = margin(beta)
    if history is not None:
        history.append(cur)
    for _ in range(max_iter):
        ws = ScaWorkingSet.build(constraints, channel, W, noise_power, beta)
        try:
            step = solve_maxmin_concave_quadratics(ws.pieces(), np.zeros_like(beta), tol=1e-9)
        except SolverError:
            break
        cand = beta + step
        new = margin(cand)
        # minorisation guarantees ascent; keep the guard for rounding and loose kappa
        if not new > cur:
            break
        # the curvature bound is conservative: stretch the step while the true margin rises
        scale = 1.0
        while scale < EXTRAPOLATE_MAX:
            trial = margin(beta + 2.0 * scale * step)
            if not trial > new:
                break
            scale, new = 2.0 * scale, trial
        cand = beta + scale * step
        improvement = new - cur
        beta, cur = cand, new
        if history is not None:
            history.append(cur)
        if improvement < tol * max(1.0, abs(cur)):
            break
    return np.exp(1j * beta)


# ---------------------------------------------------------------------------
# alternating optimisation


@dataclass
class OptimizeResult:
    precoders: PrecoderSet
    theta: np.ndarray
    grouping: Grouping
    power_trace: List[float]              # average per-symbol power after each round
    margin_trace: List[float]
    rounds: int
    constraints: list = field(default_factory=list, repr=False)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["round", "power", "min_sinr_gap"])
            for r, (p, g) in enumerate(zip(self.power_trace, self.margin_trace)):
                w.writerow([r, f"{p:.10g}", f"{g:.10g}"])


def optimize(channel, T_max, rho_tar, seed=0, grouping=None, constraints=None, theta0=None,
             regroup=False, grouping_power=1.0, ao_tol=AO_TOL, ao_rounds=AO_ROUNDS):
    """Alternate FP precoding and SCA phases from a random phase start.

    Parameters
    ----------
    channel : EffectiveChannel
        Already on the optimisation grid (``J'`` subcarriers).
    T_max : int
        Number of decoding groups (receiver iterations).
    rho_tar : float or array ``(K,)``
    seed : int
        Seeds the random initial phases.
    grouping : Grouping, optional
        Skip the grouping step.
    constraints : list of SinrConstraint, optional
        Replace the groupwise constraints (used by the diagonal-path baseline).
    theta0 : array ``(N,)``, optional
        Initial phases instead of random ones.
    regroup : bool
        Re-run the grouping after each phase update (not part of the
        reference procedure, which groups once).
    grouping_power : float
        Per-subcarrier power of the fixed precoders used for grouping.

    Returns
    -------
    OptimizeResult
    """
    K, N, J = channel.K, channel.N, channel.J
    rng = np.random.default_rng(seed)
    theta = np.exp(2j * np.pi * rng.random(N)) if theta0 is None else np.asarray(theta0, dtype=complex)
    W_group = np.full((K, J), np.sqrt(grouping_power), complex)
    if constraints is None:
        if grouping is None:
            grouping = group_users(channel.compose(theta), channel.noise_power, T_max, W_group)
        cons = sic_constraints(grouping, rho_tar)
    else:
        grouping = grouping or Grouping.single(K)
        cons = constraints
    s2 = channel.noise_power
    fp = fp_precode(cons, channel.compose(theta), s2)
    W = fp.precoders.W
    powers = [fp.precoders.power()]
    margins = [fp.min_gap]
    rounds = 0
    while N and rounds < ao_rounds:
        rounds += 1
        theta_new = sca_beamform(cons, channel, W, s2, np.angle(theta))
        if regroup and constraints is None:
            grouping = group_users(channel.compose(theta_new), s2, T_max, W_group)
            cons = sic_constraints(grouping, rho_tar)
        try:
            fp = fp_precode(cons, channel.compose(theta_new), s2, W0=W)
        except Infeasible:
            break
        p = fp.precoders.power()
        if p > powers[-1]:
            # the previous precoders stay feasible at the new phases; keep them
            break
        theta, W = theta_new, fp.precoders.W
        powers.append(p)
        margins.append(fp.min_gap)
        if powers[-2] - p < ao_tol * powers[-2]:
            break
    return OptimizeResult(PrecoderSet(W), theta, grouping, powers, margins, rounds, cons)
