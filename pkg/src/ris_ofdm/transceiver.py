"""Precoded OFDM uplink and the iterative LMMSE receiver.

Everything runs per subcarrier. The frequency-domain received vector at
subcarrier ``j`` is ``r(j) = sum_k G_k(j) W_k(j) X_k(j) + noise`` with
``X_k = F x_k`` (unitary DFT), so the dense ``JM x J`` matrices of the
time-domain model never need to be built. :func:`dense_lmmse` keeps the
dense formulas around as a reference implementation.

Array conventions: ``G`` is ``(J, K, M)``, full-rate precoders are
``(K, J)``, symbols are ``(F, K, J)`` for ``F`` frames, and received
vectors ``(F, J, M)``.
"""
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .coding import CodeSpec, VAR_MIN, app_decode, modulate
from .exceptions import DimensionMismatch, NonDivisor, SingularV

V_EXT_MAX = 1e12


@dataclass
class PrecoderSet:
    """Per-user precoder values on ``J'`` subcarrier blocks, shape ``(K, J')``."""

    W: np.ndarray

    def __post_init__(self):
        self.W = np.atleast_2d(np.asarray(self.W, dtype=complex))
        if not np.all(np.isfinite(self.W)):
            raise ValueError("precoders must be finite")

    K = property(lambda self: self.W.shape[0])
    J_prime = property(lambda self: self.W.shape[1])

    @classmethod
    def uniform(cls, K, J_prime, power=1.0):
        return cls(np.full((K, J_prime), np.sqrt(power), dtype=complex))

    def expand(self, J):
        """Repeat each block value over its ``J / J'`` subcarriers."""
        if J % self.J_prime:
            raise NonDivisor(f"J'={self.J_prime} does not divide J={J}")
        return np.repeat(self.W, J // self.J_prime, axis=1)

    def power(self):
        """Average per-symbol transmit power ``mean |W|^2`` over users and subcarriers."""
        return float(np.mean(np.abs(self.W) ** 2))

    def total_power(self):
        return float(np.sum(np.abs(self.W) ** 2))

    def scaled(self, c):
        return PrecoderSet(self.W * c)


def to_freq(x):
    return np.fft.fft(x, axis=-1, norm="ortho")


def to_time(X):
    return np.fft.ifft(X, axis=-1, norm="ortho")


def _check(G, W):
    G = np.asarray(G)
    W = np.asarray(W)
    if G.ndim != 3 or W.shape != G.shape[:2][::-1]:
        raise DimensionMismatch(f"channel {G.shape} and precoders {W.shape} disagree")
    return G, W


def transmit_symbols(x, G, W, noise_power, rng=None):
    """Frequency-domain received vectors for time-domain symbols ``x``.

    Parameters
    ----------
    x : complex array ``(F, K, J)`` or ``(K, J)``
    G : complex array ``(J, K, M)``, composed channel
    W : complex array ``(K, J)``, full-rate precoders
    noise_power : float
    rng : numpy Generator, optional
        Source of the noise; no noise is added when ``None``.
    """
    G, W = _check(G, W)
    x = np.asarray(x, dtype=complex)
    single = x.ndim == 2
    x = np.atleast_3d(x) if not single else x[None]
    if x.shape[1:] != W.shape:
        raise DimensionMismatch(f"symbols {x.shape[1:]} do not match precoders {W.shape}")
    X = to_freq(x)
    r = np.einsum("jkm,kj,fkj->fjm", G, W, X)
    if rng is not None and noise_power > 0:
        r = r + np.sqrt(noise_power / 2) * (rng.standard_normal(r.shape) + 1j * rng.standard_normal(r.shape))
    return r[0] if single else r


def transmit(msgs, specs: List[CodeSpec], precoders: PrecoderSet, channel, theta, noise_seed):
    """Encode, modulate, precode and pass one frame per user through the channel.

    Returns ``(r, x)`` where ``x`` are the transmitted symbols ``(K, J)``.
    """
    msgs = np.atleast_2d(msgs)
    if len(specs) != msgs.shape[0]:
        raise DimensionMismatch("one code spec per user is required")
    x = np.array([modulate(s.code.encode(m), s.Q, s.perm) for s, m in zip(specs, msgs)])
    G = channel.compose(theta)
    W = precoders.expand(channel.J)
    r = transmit_symbols(x, G, W, channel.noise_power, np.random.default_rng(noise_seed))
    return r, x


@dataclass
class EseOutput:
    x_ext: np.ndarray    # (F, K, J)
    v_ext: np.ndarray    # (F, K)
    rho: np.ndarray      # (F, K) extrinsic SINR, 1 / v_ext
    tau: np.ndarray      # (F, K)
    x_post: np.ndarray   # (F, K, J)
    v_post: np.ndarray   # (F, K)


def lmmse_ese(r, G, W, x_pri, v, noise_power):
    """One LMMSE estimation pass with Gaussian priors ``CN(x_pri, v I)``.

    Shapes follow the module conventions; a missing frame axis is added and
    kept in the output. The per-user average posterior variance is
    ``v - v^2 tau`` with ``tau = mean_j |w|^2 g^H V(j)^-1 g``, so the
    extrinsic SINR is ``tau / (1 - v tau)`` and the extrinsic mean is
    ``x_pri + F^H(conj(w) g^H V^-1 residual) / tau``.
    """
    G, W = _check(G, W)
    r = np.asarray(r, dtype=complex)
    if r.ndim == 2:
        r = r[None]
    x_pri = np.asarray(x_pri, dtype=complex).reshape((r.shape[0],) + W.shape)
    v = np.broadcast_to(np.asarray(v, dtype=float), x_pri.shape[:2])
    if np.any(v <= 0) or np.any(v > 1):
        raise ValueError("prior variances must lie in (0, 1]")
    J, K, M = G.shape
    a = G * W.T[:, :, None]                      # (J, K, M): g_kj w_kj
    V = np.einsum("fk,jkm,jkn->fjmn", v, a, a.conj())
    V = V + noise_power * np.eye(M)
    if noise_power <= 0 and np.any(np.linalg.matrix_rank(V) < M):
        raise SingularV("noise-free channel with rank-deficient covariance")
    res = r - np.einsum("jkm,fkj->fjm", a, to_freq(x_pri))
    rhs = np.concatenate([np.broadcast_to(a.transpose(0, 2, 1), (r.shape[0], J, M, K)),
                          res[..., None]], axis=-1)
    try:
        sol = np.linalg.solve(V, rhs)
    except np.linalg.LinAlgError as err:
        raise SingularV("covariance matrix is singular") from err
    Vinv_a, Vinv_res = sol[..., :K], sol[..., K]
    quad = np.einsum("jmk,fjmk->fkj", a.conj().transpose(0, 2, 1), Vinv_a).real    # |w|^2 g^H V^-1 g
    tau = quad.mean(axis=-1)
    e = np.einsum("jkm,fjm->fkj", a.conj(), Vinv_res)
    u = to_time(e)
    v_post = v - v ** 2 * tau
    x_post = x_pri + v[..., None] * u
    denom = 1.0 - v * tau
    with np.errstate(divide="ignore", invalid="ignore"):
        rho = np.where(denom > 1e-14, tau / np.maximum(denom, 1e-300), 1e14)
        v_ext = np.where(rho > 1.0 / V_EXT_MAX, 1.0 / rho, V_EXT_MAX)
        x_ext = np.where((tau > 0)[..., None], x_pri + u / np.where(tau > 0, tau, 1.0)[..., None], x_pri)
    return EseOutput(x_ext, v_ext, rho, tau, x_post, v_post)


def dense_lmmse(r, G, W, x_pri, v, noise_power):
    """Reference ESE built from the dense ``JM x J`` matrices (single frame).

    Returns ``(x_ext, v_ext, x_post, V_post)`` with ``V_post`` the list of
    full posterior covariances.
    """
    J, K, M = G.shape
    F = np.fft.fft(np.eye(J), norm="ortho")
    A = []
    for k in range(K):
        blocks = np.zeros((J * M, J), complex)
        for j in range(J):
            blocks[j * M:(j + 1) * M, j] = G[j, k] * W[k, j]
        A.append(blocks @ F)
    V = sum(v[k] * A[k] @ A[k].conj().T for k in range(K)) + noise_power * np.eye(J * M)
    Vinv = np.linalg.inv(V)
    res = r.reshape(J * M) - sum(A[k] @ x_pri[k] for k in range(K))
    x_ext = np.zeros((K, J), complex)
    v_ext = np.zeros(K)
    x_post = np.zeros((K, J), complex)
    V_post = []
    for k in range(K):
        Vp = v[k] * np.eye(J) - v[k] ** 2 * A[k].conj().T @ Vinv @ A[k]
        xp = x_pri[k] + v[k] * A[k].conj().T @ Vinv @ res
        vp = np.trace(Vp).real / J
        v_ext[k] = 1.0 / (1.0 / vp - 1.0 / v[k])
        x_ext[k] = v_ext[k] * (xp / vp - x_pri[k] / v[k])
        x_post[k] = xp
        V_post.append(Vp)
    return x_ext, v_ext, x_post, V_post


def prior_update(mean, v_dec, x_ext, v_ext):
    """Gaussian division of the DEC posterior by the ESE message.

    ``v = 1 / (1/v_dec - 1/v_ext)`` clipped to ``[1e-8, 1]``; when the
    difference is at most one the DEC added nothing beyond the unit prior,
    and the prior resets to ``CN(0, 1)``.
    """
    v_dec = np.maximum(np.asarray(v_dec, dtype=float), 1e-300)
    rho = 1.0 / np.asarray(v_ext, dtype=float)
    diff = 1.0 / v_dec - rho
    informative = diff > 1.0
    v = np.where(informative, 1.0 / np.where(informative, diff, 1.0), 1.0)
    v = np.clip(v, VAR_MIN, 1.0)
    # (mean / v_dec - x_ext / v_ext) / diff, written to stay finite as v_dec -> 0
    scale = np.where(informative, 1.0 / (1.0 - rho * v_dec), 0.0)[..., None]
    x_pri = scale * (mean - (rho * v_dec)[..., None] * x_ext)
    return x_pri, v


@dataclass
class ReceiverResult:
    ber: np.ndarray          # (K,) bit error rate over all frames
    errors: np.ndarray       # (K,) bit errors
    bits: int                # message bits per user
    v_trace: np.ndarray      # (T, F, K) prior variance fed to the next ESE
    rho_trace: np.ndarray    # (T, F, K) ESE extrinsic SINR
    ext_mse: np.ndarray      # (T, K) empirical mean |x_ext - x|^2 (if x given)
    info: np.ndarray         # (F, K, k) decided message bits


def run_receiver(r, G, W, specs: List[CodeSpec], T_max, noise_power, msgs=None, x=None,
                 bp_iters=30):
    """Iterate ESE and DEC for ``T_max`` rounds and report per-user BER.

    ``msgs`` (``(F, K, k)``) enables BER counting; ``x`` (``(F, K, J)``)
    enables the empirical extrinsic-error trace.
    """
    if T_max < 1:
        raise ValueError("T_max must be at least 1")
    G, W = _check(G, W)
    r = np.asarray(r, dtype=complex)
    if r.ndim == 2:
        r = r[None]
    F = r.shape[0]
    K, J = W.shape
    x_pri = np.zeros((F, K, J), complex)
    v = np.ones((F, K))
    v_trace = np.zeros((T_max, F, K))
    rho_trace = np.zeros((T_max, F, K))
    ext_mse = np.full((T_max, K), np.nan)
    info = None
    for t in range(T_max):
        ese = lmmse_ese(r, G, W, x_pri, v, noise_power)
        rho_trace[t] = ese.rho
        if x is not None:
            ext_mse[t] = np.mean(np.abs(ese.x_ext - x) ** 2, axis=(0, 2))
        info = []
        for k, spec in enumerate(specs):
            dec = app_decode(spec, ese.x_ext[:, k], ese.v_ext[:, k], bp_iters)
            x_pri[:, k], v[:, k] = prior_update(dec.mean, dec.var, ese.x_ext[:, k], ese.v_ext[:, k])
            info.append(dec.info)
        v_trace[t] = v
    info = np.stack(info, axis=1)
    if msgs is not None:
        errors = np.count_nonzero(info != np.asarray(msgs), axis=(0, 2))
        bits = info.shape[0] * info.shape[2]
    else:
        errors = np.zeros(K, int)
        bits = 0
    ber = errors / bits if bits else np.full(K, np.nan)
    return ReceiverResult(ber, errors, bits, v_trace, rho_trace, ext_mse, info)


def simulate(channel, theta, precoders: PrecoderSet, specs: List[CodeSpec], T_max, frames, seed,
             bp_iters=30, batch=25):
    """Monte Carlo BER of the whole chain for a fixed channel and design.

    Returns a :class:`ReceiverResult` aggregated over ``frames`` frames.
    """
    rng = np.random.default_rng(seed)
    G = channel.compose(theta)
    W = precoders.expand(channel.J)
    K = channel.K
    results = []
    done = 0
    while done < frames:
        b = min(batch, frames - done)
        msgs = np.stack([rng.integers(0, 2, (b, s.code.k), dtype=np.uint8) for s in specs], axis=1)
        x = np.stack([modulate(s.code.encode(msgs[:, k]), s.Q, s.perm) for k, s in enumerate(specs)], axis=1)
        r = transmit_symbols(x, G, W, channel.noise_power, rng)
        results.append(run_receiver(r, G, W, specs, T_max, channel.noise_power, msgs, x, bp_iters))
        done += b
    errors = np.sum([res.errors for res in results], axis=0)
    bits = sum(res.bits for res in results)
    weights = np.array([res.v_trace.shape[1] for res in results], float)
    ext_mse = np.average(np.stack([res.ext_mse for res in results]), axis=0, weights=weights)
    return ReceiverResult(errors / bits, errors, bits,
                          np.concatenate([res.v_trace for res in results], axis=1),
                          np.concatenate([res.rho_trace for res in results], axis=1),
                          ext_mse, np.concatenate([res.info for res in results], axis=0))
