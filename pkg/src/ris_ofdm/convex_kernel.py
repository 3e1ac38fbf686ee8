"""Dense log-barrier interior-point solvers for small convex programs.

Three entry points are provided:

* :func:`solve_qcqp` -- convex quadratically constrained quadratic programs,
* :func:`solve_maxmin_concave_quadratics` -- ``max_x min_k f_k(x)`` for concave
  quadratics ``f_k``, via an epigraph variable,
* :func:`solve_logdet_program` -- quadratic objectives under constraints of
  the form ``c + d'x <= sum_b log2 det(M_b(x))`` with ``M_b`` affine in ``x``.

Everything here is real-valued. Complex decision vectors are expanded by the
caller with :func:`complex_to_real`, which interleaves real and imaginary
parts: ``z = [z0, z1, ...]`` becomes ``x = [Re z0, Im z0, Re z1, Im z1, ...]``.
"""
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.optimize import nnls

from .exceptions import Infeasible, MaxIterations, NonPsdIterate

LN2 = np.log(2.0)

# Barrier parameters
T0 = 1.0
MU = 10.0
ALPHA = 0.3
BETA = 0.5
MAX_OUTER = 200
MAX_INNER = 50
ACTIVE_SET_SIZE = 32


def complex_to_real(z):
    """Interleave real and imaginary parts of a complex vector."""
    z = np.asarray(z, dtype=complex).ravel()
    x = np.empty(2 * z.size)
    x[0::2] = z.real
    x[1::2] = z.imag
    return x


def real_to_complex(x):
    """Inverse of :func:`complex_to_real`."""
    x = np.asarray(x, dtype=float)
    return x[0::2] + 1j * x[1::2]


def check_hermitian(a, rtol=1e-12):
    """Raise ``ValueError`` unless ``a`` (or a stack of matrices) is Hermitian."""
    a = np.asarray(a)
    scale = np.abs(a).max() if a.size else 0.0
    dev = np.abs(a - np.conj(np.swapaxes(a, -1, -2))).max() if a.size else 0.0
    if dev > rtol * max(scale, np.finfo(float).tiny):
        raise ValueError(f"matrix is not Hermitian (deviation {dev:.3e})")
    return a


def pd_cholesky(a):
    """Cholesky factor of a Hermitian positive-definite matrix; fails loudly."""
    check_hermitian(a)
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError as err:
        raise ValueError("matrix is not positive definite") from err


def is_psd(p, tol=1e-10):
    p = np.asarray(p, dtype=float)
    if p.size == 0:
        return True
    if np.abs(p - p.T).max() > 1e-12 * max(np.abs(p).max(), 1.0):
        return False
    shift = tol * (1.0 + np.abs(p).max())
    d = np.diagonal(p)
    if np.count_nonzero(p) == np.count_nonzero(d):
        return bool(np.all(d >= -shift))
    try:
        np.linalg.cholesky(p + shift * np.eye(p.shape[0]))
    except np.linalg.LinAlgError:
        return False
    return True


# ---------------------------------------------------------------------------
# problem containers


@dataclass
class QuadraticConstraint:
    """Convex quadratic constraint with a PSD matrix ``P``.

    ``sense="<="`` means ``x'Px + q'x + r <= 0``;
    ``sense=">="`` means ``q'x + r - x'Px >= 0``.
    """

    P: np.ndarray
    q: np.ndarray
    r: float = 0.0
    sense: str = "<="

    def __post_init__(self):
        self.P = np.atleast_2d(np.asarray(self.P, dtype=float))
        self.q = np.asarray(self.q, dtype=float).ravel()
        self.r = float(self.r)
        if self.sense not in ("<=", ">="):
            raise ValueError(f"unknown sense {self.sense!r}")

    def convex_form(self):
        """``(P, q, r)`` such that the constraint reads ``x'Px + q'x + r <= 0``."""
        if self.sense == "<=":
            return self.P, self.q, self.r
        return self.P, -self.q, -self.r

    def value(self, x):
        """Signed slack; non-negative when satisfied."""
        P, q, r = self.convex_form()
        return -(x @ P @ x + q @ x + r)


@dataclass
class QcqpProblem:
    """``min x'P0x + q0'x + r0`` subject to convex quadratic constraints."""

    n: int
    P0: np.ndarray
    q0: np.ndarray
    r0: float = 0.0
    constraints: List[QuadraticConstraint] = field(default_factory=list)
    check: bool = True

    def __post_init__(self):
        self.P0 = np.atleast_2d(np.asarray(self.P0, dtype=float))
        self.q0 = np.asarray(self.q0, dtype=float).ravel()
        if self.P0.shape != (self.n, self.n) or self.q0.shape != (self.n,):
            raise ValueError("objective dimensions do not match n")
        if self.check:
            if not is_psd(self.P0):
                raise ValueError("objective matrix is not PSD")
            for i, c in enumerate(self.constraints):
                if c.P.shape != (self.n, self.n) or c.q.shape != (self.n,):
                    raise ValueError(f"constraint {i} has wrong dimensions")
                if not is_psd(c.P):
                    raise ValueError(f"constraint {i} matrix is not PSD")

    def objective(self, x):
        return float(x @ self.P0 @ x + self.q0 @ x + self.r0)

    def slacks(self, x):
        return np.array([c.value(x) for c in self.constraints])


@dataclass
class LogDetConstraint:
    """``rate + linear'x <= sum_b log2 det(base_b + sum_i x[index[b, i]] mats[b, i])``.

    ``base`` has shape ``(B, d, d)``, ``index`` ``(B, nb)`` and ``mats``
    ``(B, nb, d, d)``; all matrices Hermitian.
    """

    base: np.ndarray
    index: np.ndarray
    mats: np.ndarray
    rate: float = 0.0
    linear: Optional[np.ndarray] = None

    def __post_init__(self):
        self.base = np.asarray(self.base, dtype=complex)
        self.mats = np.asarray(self.mats, dtype=complex)
        self.index = np.asarray(self.index, dtype=int)
        if self.base.ndim == 2:
            self.base = self.base[None]
            self.mats = self.mats[None]
            self.index = self.index[None]
        check_hermitian(self.base)
        check_hermitian(self.mats)

    def matrices(self, x):
        x = np.asarray(x, dtype=float)
        return self.base + np.einsum("bi,bijk->bjk", x[self.index], self.mats)

    def logdet(self, x):
        """Sum of log2 determinants, ``-inf`` outside the PD domain."""
        try:
            L = np.linalg.cholesky(self.matrices(x))
        except np.linalg.LinAlgError:
            return -np.inf
        return 2.0 * np.log(np.abs(np.diagonal(L, axis1=-2, axis2=-1))).sum() / LN2

    def _lin(self, x):
        return 0.0 if self.linear is None else float(self.linear @ x)

    def slack(self, x):
        return self.logdet(x) - self.rate - self._lin(x)

    def derivatives(self, x, n):
        """Slack value, gradient and Hessian (Hessian is NSD)."""
        M = self.matrices(x)
        try:
            L = np.linalg.cholesky(M)
        except np.linalg.LinAlgError:
            return -np.inf, None, None
        val = 2.0 * np.log(np.abs(np.diagonal(L, axis1=-2, axis2=-1))).sum() / LN2
        Minv = np.linalg.inv(M)
        T = np.einsum("bjk,bikl->bijl", Minv, self.mats)
        tr = np.einsum("bijj->bi", T).real / LN2
        grad = np.zeros(n)
        np.add.at(grad, self.index, tr)
        h = np.einsum("ziab,zjba->zij", T, T).real / LN2
        hess = np.zeros((n, n))
        np.add.at(hess, (self.index[:, :, None], self.index[:, None, :]), -h)
        if self.linear is not None:
            grad = grad - self.linear
        return val - self.rate - self._lin(x), grad, hess


@dataclass
class LogDetProblem:
    """``min x'P0x + q0'x + r0`` under log-det and convex quadratic constraints."""

    n: int
    P0: np.ndarray
    q0: np.ndarray
    r0: float = 0.0
    logdet_constraints: List[LogDetConstraint] = field(default_factory=list)
    quad_constraints: List[QuadraticConstraint] = field(default_factory=list)

    def __post_init__(self):
        self.P0 = np.atleast_2d(np.asarray(self.P0, dtype=float))
        self.q0 = np.asarray(self.q0, dtype=float).ravel()
        if not is_psd(self.P0):
            raise ValueError("objective matrix is not PSD")
        for c in self.quad_constraints:
            if not is_psd(c.P):
                raise ValueError("quadratic constraint matrix is not PSD")

    def objective(self, x):
        return float(x @ self.P0 @ x + self.q0 @ x + self.r0)

    def slacks(self, x):
        return np.array([c.slack(x) for c in self.logdet_constraints]
                        + [c.value(x) for c in self.quad_constraints])


# ---------------------------------------------------------------------------
# barrier machinery; every block represents constraints g_i(x) <= 0, g convex


class _QuadBlock:
    def __init__(self, constraints, n):
        forms = [c.convex_form() for c in constraints]
        self.m = len(forms)
        self.P = np.array([f[0] for f in forms]).reshape(self.m, n, n)
        self.q = np.array([f[1] for f in forms]).reshape(self.m, n)
        self.r = np.array([f[2] for f in forms], dtype=float)
        # diagonal matrices (the common case here) take an O(mn) path
        d = np.einsum("ijj->ij", self.P)
        self.diag = d.copy() if np.array_equal(self.P, d[:, :, None] * np.eye(n)) else None

    def _px(self, x):
        return self.diag * x if self.diag is not None else self.P @ x

    def value(self, x):
        return self._px(x) @ x + self.q @ x + self.r

    def eval(self, x):
        Px = self._px(x)
        g = Px @ x + self.q @ x + self.r
        return g, 2.0 * Px + self.q

    def hess(self, x, w):
        if self.diag is not None:
            return np.diag(2.0 * (w @ self.diag))
        return 2.0 * np.tensordot(w, self.P, axes=1)


class _LogDetBlock:
    def __init__(self, constraints, n):
        self.cons = list(constraints)
        self.m = len(self.cons)
        self.n = n
        self._cache = None

    def value(self, x):
        return np.array([-c.slack(x) for c in self.cons])

    def eval(self, x):
        g = np.empty(self.m)
        G = np.empty((self.m, self.n))
        Hs = []
        for i, c in enumerate(self.cons):
            s, grad, hess = c.derivatives(x, self.n)
            if grad is None:
                raise NonPsdIterate("log-det argument left the PD cone")
            g[i], G[i] = -s, -grad
            Hs.append(-hess)
        self._cache = (x.copy(), np.array(Hs))
        return g, G

    def hess(self, x, w):
        return np.tensordot(w, self._cache[1], axes=1)


class _ShiftedBlock:
    """Phase-I wrapper: ``g_i(x) - s <= 0`` over ``z = (x, s)``."""

    def __init__(self, block):
        self.b = block
        self.m = block.m

    def value(self, z):
        return self.b.value(z[:-1]) - z[-1]

    def eval(self, z):
        g, G = self.b.eval(z[:-1])
        return g - z[-1], np.hstack([G, -np.ones((self.m, 1))])

    def hess(self, z, w):
        H = self.b.hess(z[:-1], w)
        n = H.shape[0]
        out = np.zeros((n + 1, n + 1))
        out[:n, :n] = H
        return out


class _Objective:
    def __init__(self, P, q, r=0.0):
        self.P, self.q, self.r = P, q, r

    def value(self, x):
        return x @ self.P @ x + self.q @ x + self.r

    def grad(self, x):
        return 2.0 * self.P @ x + self.q

    def hess(self):
        return 2.0 * self.P


def _all_values(blocks, x):
    vals = [b.value(x) for b in blocks if b.m]
    return np.concatenate(vals) if vals else np.zeros(0)


def _barrier_value(obj, blocks, x, t):
    g = _all_values(blocks, x)
    if g.size and (not np.all(np.isfinite(g)) or np.any(g >= 0)):
        return np.inf
    return t * obj.value(x) - np.sum(np.log(-g))


def _center(obj, blocks, x, t, max_inner):
    n = x.size
    stalled = 0
    for _ in range(max_inner):
        grad = t * obj.grad(x)
        H = t * obj.hess()
        for b in blocks:
            if not b.m:
                continue
            g, G = b.eval(x)
            w = -1.0 / g
            grad = grad + G.T @ w
            H = H + (G.T * w ** 2) @ G + b.hess(x, w)
        try:
            dx = np.linalg.solve(H, -grad)
        except np.linalg.LinAlgError:
            dx = np.linalg.lstsq(H + 1e-12 * np.eye(n), -grad, rcond=None)[0]
        slope = grad @ dx
        # the decrement divided by t bounds the objective error; stop once it is below float resolution
        if -slope / 2.0 <= max(1e-10, 1e-16 * t * max(1.0, abs(obj.value(x)))):
            return x
        f0 = _barrier_value(obj, blocks, x, t)
        s = 1.0
        while True:
            f1 = _barrier_value(obj, blocks, x + s * dx, t)
            if f1 <= f0 + ALPHA * s * slope:
                break
            s *= BETA
            if s < 1e-14:
                break
        if s < 1e-14:
            if not np.isfinite(f1):
                if any(isinstance(b, _LogDetBlock) or isinstance(getattr(b, "b", None), _LogDetBlock)
                       for b in blocks):
                    raise NonPsdIterate("step size collapsed at the PD boundary")
            # no further progress at machine precision
            return x
        x = x + s * dx
        # decreases at rounding level of the barrier value: precision floor reached
        if f0 - f1 <= 64 * np.finfo(float).eps * max(abs(f0), 1.0):
            stalled += 1
            if stalled >= 3:
                return x
        else:
            stalled = 0
    raise MaxIterations(f"centering did not converge in {max_inner} Newton steps")


def _barrier(obj, blocks, x0, tol, stop=None, history=None):
    m = sum(b.m for b in blocks)
    x = np.array(x0, dtype=float)
    t = T0
    for _ in range(MAX_OUTER):
        x = _center(obj, blocks, x, t, MAX_INNER)
        if history is not None:
            history.append(float(obj.value(x)))
        if stop is not None and stop(x):
            return x, t
        if m == 0 or m / t < tol:
            return x, t
        t *= MU
    raise MaxIterations(f"barrier method did not converge in {MAX_OUTER} outer steps")


def _kkt_terms(grad, g, G, lam):
    # stationarity relative to the size of the terms it balances
    stat = grad + G.T @ lam
    scale = np.abs(grad) + np.abs(G.T) @ lam
    return max(np.abs(stat).max() / max(1.0, scale.max()), max(g.max(), 0.0), np.max(np.abs(lam * g)))


def _kkt_residual(obj, blocks, x, t):
    """KKT residual with the better of two multiplier estimates.

    The barrier estimate ``-1/(t g)`` divides by constraint values that carry
    cancellation error next to the boundary; multipliers fitted by
    non-negative least squares on the near-active set avoid that. Any
    non-negative multipliers with small residuals certify optimality.
    """
    grad = obj.grad(x)
    parts = [b.eval(x) for b in blocks if b.m]
    if not parts:
        return float(np.abs(grad).max() / max(1.0, np.abs(grad).max()))
    g = np.concatenate([p[0] for p in parts])
    G = np.vstack([p[1] for p in parts])
    lam = -1.0 / (t * g)
    best = _kkt_terms(grad, g, G, lam)
    active = lam > 1e-3 * lam.max()
    if active.any():
        fit = np.zeros_like(lam)
        fit[active] = nnls(G[active].T, -grad)[0]
        best = min(best, _kkt_terms(grad, g, G, fit))
    return best


def _find_interior(blocks, x0, tol):
    """Phase I: minimise ``s`` subject to ``g_i(x) <= s``; stop once ``s < 0``."""
    x0 = np.asarray(x0, dtype=float)
    g0 = _all_values(blocks, x0)
    if not np.all(np.isfinite(g0)):
        raise Infeasible("phase-I start is outside the constraint domain")
    if np.all(g0 < 0):
        return x0
    n = x0.size
    radius2 = (1e3 * (1.0 + np.linalg.norm(x0))) ** 2
    ball = QuadraticConstraint(np.eye(n), -2.0 * x0, x0 @ x0 - radius2)
    shifted = [_ShiftedBlock(b) for b in blocks if b.m]
    ball_block = _QuadBlock([_pad(ball)], n + 1)
    z0 = np.append(x0, g0.max() + 1.0)
    q = np.zeros(n + 1)
    q[-1] = 1.0
    obj = _Objective(np.zeros((n + 1, n + 1)), q)
    z, _ = _barrier(obj, shifted + [ball_block], z0, tol, stop=lambda z: z[-1] < 0)
    if z[-1] >= 0:
        raise Infeasible(f"phase I found no strictly feasible point (min max-violation {z[-1]:.3e})")
    return z[:-1]


def _pad(c):
    P, q, r = c.convex_form()
    n = P.shape[0]
    Pp = np.zeros((n + 1, n + 1))
    Pp[:n, :n] = P
    return QuadraticConstraint(Pp, np.append(q, 0.0), r)


# ---------------------------------------------------------------------------
# public solvers


def solve_qcqp(problem: QcqpProblem, tol: float = 1e-8, x0=None, history=None, working=None):
    """Solve a convex QCQP by a log-barrier interior-point method.

    Parameters
    ----------
    problem : QcqpProblem
    tol : float
        Target duality gap ``m / t`` and KKT residual.
    x0 : array, optional
        Starting point. If not strictly feasible, a phase-I problem is solved
        first.
    history : list, optional
        Receives the objective value after each centering step.
    working : int, optional
        Solve with an active set of this size: the constraints tightest at
        ``x0`` first, adding every violated one until the subset solution
        satisfies them all. The subset problem is a relaxation, so its
        solution is then optimal for the full problem.

    Returns
    -------
    x : ndarray
    kkt_residual : float
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    n = problem.n
    x0 = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float)
    obj = _Objective(problem.P0, problem.q0, problem.r0)
    cons = problem.constraints
    full = [_QuadBlock(cons, n)] if cons else []
    if working is None or len(cons) <= working:
        x = _find_interior(full, x0, tol) if full else x0
        x, t = _barrier(obj, full, x, tol, history=history)
        return x, _kkt_residual(obj, full, x, t)
    order = np.argsort(full[0].value(x0))[::-1]          # g closest to zero first
    active = set(order[:working].tolist())
    while True:
        blocks = [_QuadBlock([cons[i] for i in sorted(active)], n)]
        x = _find_interior(blocks, x0, tol)
        x, t = _barrier(obj, blocks, x, tol, history=history)
        g = full[0].value(x)
        bad = np.flatnonzero(g >= 0)
        bad = [i for i in bad[np.argsort(-g[bad])] if i not in active]
        if not bad:
            return x, _kkt_residual(obj, full, x, t)
        active.update(bad[:working])


@dataclass
class ConcaveQuadratic:
    """``f(x) = x'Ax + b'x + c`` with ``A`` negative semidefinite."""

    A: np.ndarray
    b: np.ndarray
    c: float = 0.0

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return float(x @ self.A @ x + self.b @ x + self.c)


def _maxmin_subset(pieces, start, tol):
    n = start.size
    cons = []
    for p in pieces:
        A = np.atleast_2d(np.asarray(p.A, dtype=float))
        P = np.zeros((n + 1, n + 1))
        P[:n, :n] = -A
        # t - f(x) <= 0
        cons.append(QuadraticConstraint(P, np.append(-np.asarray(p.b, dtype=float), 1.0), -p.c))
    q0 = np.zeros(n + 1)
    q0[-1] = -1.0
    prob = QcqpProblem(n + 1, np.zeros((n + 1, n + 1)), q0, 0.0, cons)
    t0 = min(p(start) for p in pieces) - 1.0
    z, _ = solve_qcqp(prob, tol, x0=np.append(start, t0))
    return z[:n]


def solve_maxmin_concave_quadratics(pieces: Sequence[ConcaveQuadratic], start, tol=1e-8,
                                    working=ACTIVE_SET_SIZE):
    """Maximise ``min_k pieces[k](x)`` through an epigraph QCQP.

    Large families are solved by an active-set loop: the pieces lowest at
    ``start`` are solved first, and every piece that the candidate leaves
    below the achieved level is added before re-solving. The subset
    problem is a relaxation, so a candidate that satisfies every piece is
    optimal for the full family.
    """
    start = np.asarray(start, dtype=float).ravel()
    if not np.all(np.isfinite(start)):
        raise ValueError("start must be finite")
    pieces = list(pieces)
    if len(pieces) <= working:
        return _maxmin_subset(pieces, start, tol)
    order = np.argsort([p(start) for p in pieces])
    active = set(order[:working].tolist())
    while True:
        x = _maxmin_subset([pieces[i] for i in sorted(active)], start, tol)
        vals = np.array([p(x) for p in pieces])
        level = min(vals[i] for i in active)
        short = np.flatnonzero(vals < level - tol * (1.0 + abs(level)))
        short = [i for i in short[np.argsort(vals[short])] if i not in active]
        if not short:
            return x
        active.update(short[:working])


def solve_logdet_program(problem: LogDetProblem, tol: float = 1e-8, x0=None, history=None):
    """Minimise a convex quadratic under log-det (and quadratic) constraints.

    The log-det terms enter the barrier with their analytic gradient
    ``tr(M^-1 dM)`` and Hessian ``-tr(M^-1 dM_i M^-1 dM_j)``.
    """
    n = problem.n
    x0 = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float)
    blocks = []
    if problem.logdet_constraints:
        blocks.append(_LogDetBlock(problem.logdet_constraints, n))
    if problem.quad_constraints:
        blocks.append(_QuadBlock(problem.quad_constraints, n))
    x = _find_interior(blocks, x0, tol) if blocks else x0
    obj = _Objective(problem.P0, problem.q0, problem.r0)
    x, _ = _barrier(obj, blocks, x, tol, history=history)
    return x
