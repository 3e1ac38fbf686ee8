"""State evolution of the iterative receiver and the path condition.

The ESE transfer map turns the per-user prior variances ``v`` into
extrinsic SINRs ``rho = phi(v)``; the decoder table maps them back with
``v = psi(rho)``. Both sides are evaluated per subcarrier with ``M x M``
solves. Channels are passed already composed, ``G`` of shape ``(J, K, M)``
with precoders ``W`` of shape ``(K, J)`` on the same subcarrier grid.
"""
import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .exceptions import DimensionMismatch, SingularV

RHO_CAP = 1e14
DEGENERATE_TOL = 1e-14
PATH_POINTS = 64
PATH_MARGIN = 1e-9


@dataclass(frozen=True)
class Grouping:
    """Ordered partition of the users; group ``t`` is decoded at iteration ``t``."""

    groups: tuple

    def __post_init__(self):
        groups = tuple(tuple(sorted(int(k) for k in g)) for g in self.groups)
        object.__setattr__(self, "groups", groups)
        users = [k for g in groups for k in g]
        if sorted(users) != list(range(len(users))):
            raise ValueError(f"groups {groups} are not a disjoint cover of 0..K-1")

    @classmethod
    def single(cls, K):
        return cls((tuple(range(K)),))

    T = property(lambda self: len(self.groups))
    K = property(lambda self: sum(len(g) for g in self.groups))

    @property
    def group_of(self):
        out = np.empty(self.K, dtype=int)
        for t, g in enumerate(self.groups):
            out[list(g)] = t
        return out

    def remaining(self, t):
        """Users in groups ``t, t+1, ...``: not yet cancelled when group ``t`` is decoded."""
        return [k for g in self.groups[t:] for k in g]

    def as_lists(self):
        return [list(g) for g in self.groups]


def user_columns(G, W):
    """``a_k(j) = G_k(j) w_k(j)``, shape ``(J, K, M)``."""
    G = np.asarray(G, dtype=complex)
    W = np.asarray(W, dtype=complex)
    if G.ndim != 3 or W.shape != (G.shape[1], G.shape[0]):
        raise DimensionMismatch(f"channel {G.shape} and precoders {W.shape} disagree")
    return G * W.T[:, :, None]


def _tau(A, v, noise_power):
    """``tau[..., k] = mean_j a_k^H V^-1 a_k`` for variance rows ``v`` of shape ``(..., K)``."""
    J, K, M = A.shape
    outer = np.einsum("jkm,jkn->jkmn", A, A.conj())
    V = np.einsum("...k,jkmn->...jmn", v, outer) + noise_power * np.eye(M)
    try:
        X = np.linalg.solve(V, np.broadcast_to(np.swapaxes(A, 1, 2), V.shape[:-1] + (K,)))
    except np.linalg.LinAlgError as exc:
        raise SingularV("interference-plus-noise covariance is singular") from exc
    return np.einsum("jkm,...jmk->...k", A.conj(), X).real / J


def _rho(tau, v):
    den = 1.0 - v * tau
    with np.errstate(divide="ignore", invalid="ignore"):
        rho = np.where(den > DEGENERATE_TOL, tau / np.maximum(den, DEGENERATE_TOL), RHO_CAP)
    return np.minimum(rho, RHO_CAP)


def phi(v, G, W, noise_power):
    """Extrinsic SINR of every user for prior variances ``v``.

    Parameters
    ----------
    v : array ``(K,)`` or ``(P, K)``
        Prior variances in ``[0, 1]``; ``0`` marks a cancelled user.
    G : complex array ``(J, K, M)``
    W : complex array ``(K, J)``
    noise_power : float

    Returns
    -------
    rho : array with the shape of ``v``
        ``tau / (1 - v tau)`` capped at ``1e14`` when ``1 - v tau`` vanishes.
    """
    A = user_columns(G, W)
    v = np.asarray(v, dtype=float)
    if v.shape[-1] != A.shape[1]:
        raise DimensionMismatch(f"{v.shape[-1]} variances for {A.shape[1]} users")
    if np.any(v < 0) or np.any(v > 1):
        raise ValueError("variances must lie in [0, 1]")
    return _rho(_tau(A, v, noise_power), v)


def cancellation_variances(grouping: Grouping, t):
    """Variance vector seen while group ``t`` is decoded: earlier groups cancelled."""
    v = np.zeros(grouping.K)
    v[grouping.remaining(t)] = 1.0
    return v


def tau_prime(grouping: Grouping, G, W, noise_power):
    """``tau'_k`` of every user: interference only from its own and later groups."""
    A = user_columns(G, W)
    out = np.empty(A.shape[1])
    for t, g in enumerate(grouping.groups):
        v = cancellation_variances(grouping, t)
        out[list(g)] = _tau(A, v, noise_power)[list(g)]
    return out


def phi_prime_all(grouping: Grouping, G, W, noise_power):
    """``phi'_k = tau'_k / (1 - tau'_k)`` for all users."""
    return _rho(tau_prime(grouping, G, W, noise_power), 1.0)


def phi_prime(k, grouping: Grouping, G, W, noise_power):
    """Groupwise SINR of user ``k`` with earlier groups perfectly cancelled."""
    t = grouping.group_of[k]
    A = user_columns(G, W)
    rest = grouping.remaining(t)
    B = np.einsum("jkm,jkn->jmn", A[:, rest], A[:, rest].conj()) + noise_power * np.eye(A.shape[2])
    tau = np.einsum("jm,jm->", A[:, k].conj(), np.linalg.solve(B, A[:, k][..., None])[..., 0]).real
    return float(_rho(np.array(tau / A.shape[0]), 1.0))


@dataclass
class SETrace:
    """``v[t]`` is the prior variance entering iteration ``t``; ``rho[t] = phi(v[t])``."""

    v: np.ndarray      # (T + 1, K)
    rho: np.ndarray    # (T, K)

    def to_csv(self, path):
        K = self.v.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"v{k + 1}" for k in range(K)] + [f"rho{k + 1}" for k in range(K)])
            for t in range(self.rho.shape[0]):
                w.writerow([t] + [f"{x:.10g}" for x in self.v[t]] + [f"{x:.10g}" for x in self.rho[t]])

    @property
    def final_v(self):
        return self.v[-1]


def se_run(T_max, table, G, W, noise_power, v0=None, v_tar=None, strict=False):
    """Iterate ``rho = phi(v)``, ``v = psi(rho)`` for ``T_max`` rounds.

    Parameters
    ----------
    T_max : int
    table : TransferFunctionTable
    G, W, noise_power
        Composed channel, precoders and noise power.
    v0 : array ``(K,)``, optional
        Starting variances, all ones by default.
    v_tar : array ``(K,)``, optional
        Enables cancellation: a user whose variance reaches its target is
        treated as perfectly cancelled (``v = 0``) from then on.
    strict : bool
        Raise :class:`TableOutOfRange` when an SINR leaves the table grid
        instead of holding the end values.
    """
    A = user_columns(G, W)
    K = A.shape[1]
    v = np.ones(K) if v0 is None else np.asarray(v0, dtype=float).copy()
    vs, rhos = [v.copy()], []
    done = np.zeros(K, dtype=bool)
    for _ in range(T_max):
        rho = _rho(_tau(A, v, noise_power), v)
        rhos.append(rho)
        # cancelled users stay at zero; only live SINRs are looked up
        v = np.asarray(table.psi(np.where(done, table.rho[-1], rho), strict=strict), dtype=float).copy()
        if v_tar is not None:
            done |= v <= np.asarray(v_tar)
            v[done] = 0.0
        vs.append(v.copy())
    return SETrace(np.array(vs), np.array(rhos).reshape(-1, K))


@dataclass
class PathCheck:
    feasible: bool
    point: Optional[int] = None     # first violating path index
    user: Optional[int] = None
    reason: str = ""

    def __bool__(self):
        return self.feasible


def diagonal_path(v_tar, points=PATH_POINTS):
    """Equal variances from 1 down to ``min(v_tar)``, shape ``(points, K)``."""
    v_tar = np.atleast_1d(np.asarray(v_tar, dtype=float))
    s = np.linspace(1.0, v_tar.min(), points)
    return np.repeat(s[:, None], v_tar.size, axis=1)


def staircase_path(grouping: Grouping, v_tar, points=PATH_POINTS):
    """One group at a time: group ``t`` moves from 1 to its targets, earlier groups sit at target."""
    v_tar = np.broadcast_to(np.asarray(v_tar, dtype=float), (grouping.K,))
    out = []
    cur = np.ones(grouping.K)
    for g in grouping.groups:
        g = list(g)
        for s in np.linspace(0.0, 1.0, points):
            p = cur.copy()
            p[g] = (1.0 - s) + s * v_tar[g]
            out.append(p)
        cur[g] = v_tar[g]
    return np.array(out)


def path_feasible(path, table, G, W, noise_power, v_tar, margin=PATH_MARGIN):
    """Check that ``phi_k(v) > psi^-1(v_k) + margin`` along ``path`` and the endpoint meets ``v_tar``.

    Returns
    -------
    PathCheck
        Falsy with the first violating point and user otherwise.
    """
    path = np.atleast_2d(np.asarray(path, dtype=float))
    v_tar = np.broadcast_to(np.asarray(v_tar, dtype=float), (path.shape[1],))
    if np.any(np.diff(path, axis=0) > 1e-15):
        raise ValueError("path must be coordinatewise non-increasing")
    rho = phi(path, G, W, noise_power)
    need = np.vectorize(table.psi_inv)(path)
    bad = ~(rho > need + margin)
    if bad.any():
        p, k = np.argwhere(bad)[0]
        return PathCheck(False, int(p), int(k),
                         f"user {k} at point {p}: phi={rho[p, k]:.4g} <= psi^-1={need[p, k]:.4g}")
    miss = np.flatnonzero(path[-1] > v_tar)
    if miss.size:
        return PathCheck(False, path.shape[0] - 1, int(miss[0]), "endpoint above target variance")
    return PathCheck(True)

