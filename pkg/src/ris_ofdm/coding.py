"""LDPC coding, Gray-mapped modulation, soft decoding and transfer tables.

The decoder side follows the usual turbo convention: the equaliser hands
over symbol observations modelled as ``y = x + n`` with ``n ~ CN(0, s2)``;
the decoder returns posterior bit LLRs plus the posterior symbol mean and
its average variance.

Transfer tables tabulate, against the observation SNR ``rho = 1 / s2``,

* ``psi(rho)``: the extrinsic (Gaussian-divided) variance handed back to the
  equaliser, ``1 / (1 / v_post - rho)`` clipped to ``[1e-8, 1]``;
* ``ber(rho)``: the information bit error rate.

``xi`` maps that variance to BER, so ``xi(psi(rho)) = ber(rho)``.
"""
import itertools
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.optimize import isotonic_regression

from .exceptions import InsufficientSamples, LengthMismatch, OutOfRange, TableOutOfRange

VAR_MIN = 1e-8
VAR_MAX = 1.0
BP_ITERS = 30
EXACT_MAX_K = 12
DEFAULT_CODE = "ldpc_1024_r05"


def clip_variance(v):
    return np.clip(v, VAR_MIN, VAR_MAX)


# ---------------------------------------------------------------------------
# parity-check matrices


def read_alist(path):
    """Parse an ALIST file into a dense ``uint8`` parity-check matrix."""
    tokens = Path(path).read_text().split()
    nums = [int(t) for t in tokens]
    n, m = nums[0], nums[1]
    max_col, max_row = nums[2], nums[3]
    pos = 4
    col_w = nums[pos:pos + n]
    pos += n
    row_w = nums[pos:pos + m]
    pos += m
    H = np.zeros((m, n), dtype=np.uint8)
    for j in range(n):
        rows = [r for r in nums[pos:pos + max_col] if r > 0]
        if len(rows) != col_w[j]:
            raise ValueError(f"column {j} lists {len(rows)} entries, weight says {col_w[j]}")
        H[np.array(rows) - 1, j] = 1
        pos += max_col
    # the row section is redundant; check it when present
    if len(nums) >= pos + m * max_row:
        for i in range(m):
            cols = [c for c in nums[pos:pos + max_row] if c > 0]
            if sorted(cols) != list(np.flatnonzero(H[i]) + 1) or len(cols) != row_w[i]:
                raise ValueError(f"row {i} disagrees with the column section")
            pos += max_row
    return H


def write_alist(H, path):
    H = np.asarray(H, dtype=np.uint8)
    m, n = H.shape
    col_w, row_w = H.sum(0), H.sum(1)
    mc, mr = int(col_w.max()), int(row_w.max())
    lines = [f"{n} {m}", f"{mc} {mr}", " ".join(map(str, col_w)), " ".join(map(str, row_w))]
    for j in range(n):
        idx = list(np.flatnonzero(H[:, j]) + 1)
        lines.append(" ".join(map(str, idx + [0] * (mc - len(idx)))))
    for i in range(m):
        idx = list(np.flatnonzero(H[i]) + 1)
        lines.append(" ".join(map(str, idx + [0] * (mr - len(idx)))))
    Path(path).write_text("\n".join(lines) + "\n")


def peg_ldpc(n, dv, dc, seed=0):
    """Regular ``(dv, dc)`` parity-check matrix by progressive edge growth.

    Each new edge of a variable node goes to a check node as far as possible
    from it in the current graph (lowest degree first), which avoids short
    cycles; check degrees are capped at ``dc``.
    """
    if (n * dv) % dc:
        raise ValueError("n * dv must be divisible by dc")
    m = n * dv // dc
    rng = np.random.default_rng(seed)
    var_adj = [[] for _ in range(n)]
    chk_adj = [[] for _ in range(m)]
    deg = np.zeros(m, dtype=int)
    for v in range(n):
        for e in range(dv):
            open_ = deg < dc
            open_[var_adj[v]] = False
            if e == 0:
                cand = np.flatnonzero(open_)
            else:
                reached = np.zeros(m, bool)
                reached[var_adj[v]] = True
                frontier = list(var_adj[v])
                seen_v = {v}
                while True:
                    nxt = []
                    for c in frontier:
                        for u in chk_adj[c]:
                            if u in seen_v:
                                continue
                            seen_v.add(u)
                            for c2 in var_adj[u]:
                                if not reached[c2]:
                                    reached[c2] = True
                                    nxt.append(c2)
                    if not nxt or np.all(reached | ~open_):
                        # keep the previous level's complement if the new one is empty
                        far = open_ & ~reached
                        if not far.any():
                            for c in nxt:
                                reached[c] = False
                            far = open_ & ~reached
                        cand = np.flatnonzero(far)
                        break
                    frontier = nxt
                if cand.size == 0:
                    cand = np.flatnonzero(open_)
            low = cand[deg[cand] == deg[cand].min()]
            c = int(rng.choice(low))
            var_adj[v].append(c)
            chk_adj[c].append(v)
            deg[c] += 1
    H = np.zeros((m, n), dtype=np.uint8)
    for v, cs in enumerate(var_adj):
        H[cs, v] = 1
    return H


def has_four_cycles(H):
    H = np.asarray(H, dtype=np.int64)
    overlap = H.T @ H
    np.fill_diagonal(overlap, 0)
    return bool((overlap >= 2).any())


def gf2_rref(H):
    """Reduced row-echelon form over GF(2); returns (R, pivot_columns)."""
    R = np.array(H, dtype=np.uint8) % 2
    m, n = R.shape
    pivots = []
    row = 0
    for col in range(n):
        if row == m:
            break
        hits = np.flatnonzero(R[row:, col]) + row
        if hits.size == 0:
            continue
        p = hits[0]
        if p != row:
            R[[row, p]] = R[[p, row]]
        others = np.flatnonzero(R[:, col])
        others = others[others != row]
        R[others] ^= R[row]
        pivots.append(col)
        row += 1
    return R[:row], np.array(pivots, dtype=int)


class LdpcCode:
    """Binary linear code defined by a sparse parity-check matrix.

    Dependent rows are dropped for encoding, so ``k = n - rank(H)``. The
    message occupies the non-pivot columns of the reduced form.
    """

    def __init__(self, H, name="ldpc"):
        self.H = np.asarray(H, dtype=np.uint8)
        self.m, self.n = self.H.shape
        self.name = name
        R, piv = gf2_rref(self.H)
        self.rank = len(piv)
        self.k = self.n - self.rank
        self.parity_pos = piv
        self.info_pos = np.setdiff1d(np.arange(self.n), piv)
        self._A = R[:, self.info_pos]           # parity = A @ info (mod 2)
        chk, var = np.nonzero(self.H)            # row-major: sorted by check
        self.edge_chk, self.edge_var = chk, var
        self.E = chk.size
        self.chk_start = np.flatnonzero(np.r_[True, chk[1:] != chk[:-1]])
        if self.chk_start.size != self.m:
            raise ValueError("parity-check matrix has an empty row")
        self._var_sum = sp.csr_matrix((np.ones(self.E), (var, np.arange(self.E))), shape=(self.n, self.E))
        self._codebook = None
        deg = np.diff(np.r_[self.chk_start, self.E])
        self._dc = int(deg[0]) if np.all(deg == deg[0]) else None

    @classmethod
    def from_alist(cls, path, name=None):
        return cls(read_alist(path), name or Path(path).stem)

    @property
    def rate(self):
        return self.k / self.n

    def encode(self, msg):
        """Systematic encoding; ``msg`` has shape ``(..., k)``."""
        msg = np.asarray(msg, dtype=np.uint8)
        if msg.shape[-1] != self.k:
            raise LengthMismatch(f"message length {msg.shape[-1]} != k = {self.k}")
        cw = np.zeros(msg.shape[:-1] + (self.n,), dtype=np.uint8)
        cw[..., self.info_pos] = msg
        cw[..., self.parity_pos] = (msg.astype(np.int64) @ self._A.T.astype(np.int64)) % 2
        return cw

    def syndrome(self, cw):
        cw = np.asarray(cw, dtype=np.uint8)
        return np.bitwise_xor.reduceat(cw[..., self.edge_var], self.chk_start, axis=-1)

    def message(self, cw):
        return np.asarray(cw)[..., self.info_pos]

    def codebook(self):
        if self._codebook is None:
            if self.k > EXACT_MAX_K:
                raise ValueError("codebook enumeration only for tiny codes")
            msgs = np.array(list(itertools.product([0, 1], repeat=self.k)), dtype=np.uint8)
            self._codebook = self.encode(msgs)
        return self._codebook

    # -- decoding -------------------------------------------------------
    def bp(self, llr, iters=BP_ITERS, early_stop=True):
        """Sum-product decoding; ``llr`` has shape ``(B, n)``, returns posteriors.

        With ``early_stop`` a frame is frozen once its hard decision satisfies
        all parity checks and every |LLR| is at least 20, at which point its
        posterior symbol variance is already below the 1e-8 floor.
        """
        llr = np.atleast_2d(np.asarray(llr, dtype=float))
        out = llr.copy()
        active = np.arange(llr.shape[0])
        c2v = np.zeros((llr.shape[0], self.E))
        tiny = 1e-300
        for it in range(iters + 1):
            total = llr[active] + (self._var_sum @ c2v.T).T
            if early_stop:
                done = (np.abs(total).min(axis=1) >= 20.0) & ~self.syndrome(total < 0).any(axis=1)
                out[active[done]] = total[done]
                keep = ~done
                active, total, c2v = active[keep], total[keep], c2v[keep]
                if active.size == 0:
                    break
            if it == iters:
                out[active] = total
                break
            t = np.tanh(0.5 * (total[:, self.edge_var] - c2v))
            prod = self._others_product(t, tiny)
            c2v = 2.0 * np.arctanh(np.clip(prod, -1.0 + 1e-15, 1.0 - 1e-15))
        return out

    def _others_product(self, t, tiny):
        """For every edge, the product of ``t`` over the other edges of its check."""
        B = t.shape[0]
        if self._dc is not None:
            # regular checks: prefix/suffix products, no division
            r = t.reshape(B, self.m, self._dc)
            pre = np.ones_like(r)
            suf = np.ones_like(r)
            pre[..., 1:] = np.cumprod(r[..., :-1], axis=-1)
            suf[..., :-1] = np.cumprod(r[..., :0:-1], axis=-1)[..., ::-1]
            return (pre * suf).reshape(B, self.E)
        logmag = np.log(np.maximum(np.abs(t), tiny))
        neg = (t < 0).astype(np.int64)
        chk_log = np.add.reduceat(logmag, self.chk_start, axis=1)[:, self.edge_chk]
        chk_neg = np.add.reduceat(neg, self.chk_start, axis=1)[:, self.edge_chk]
        sign = 1.0 - 2.0 * ((chk_neg - neg) % 2)
        return sign * np.exp(chk_log - logmag)

    def exact_app(self, llr):
        """Bitwise APP by enumerating every codeword (tiny codes only)."""
        llr = np.atleast_2d(np.asarray(llr, dtype=float))
        cb = self.codebook().astype(float)
        # log-weight of each codeword: sum_i (1 - 2c_i) llr_i / 2
        lw = 0.5 * llr @ (1.0 - 2.0 * cb).T
        lw -= lw.max(axis=1, keepdims=True)
        w = np.exp(lw)
        p1 = w @ cb / w.sum(axis=1, keepdims=True)
        p1 = np.clip(p1, 1e-300, 1.0 - 1e-16)
        return np.log1p(-p1) - np.log(p1)


_code_cache = {}


def default_code_path(name=DEFAULT_CODE):
    return resources.files("ris_ofdm") / "data" / f"{name}.alist"


def load_code(name=DEFAULT_CODE):
    """Load a code shipped with the package (``data/<name>.alist``)."""
    if name not in _code_cache:
        with resources.as_file(default_code_path(name)) as path:
            _code_cache[name] = LdpcCode.from_alist(path, name)
    return _code_cache[name]


# ---------------------------------------------------------------------------
# modulation


def constellation(Q):
    """Gray-labelled unit-power constellation; row ``i`` is label ``i`` (MSB first)."""
    if Q == 1:
        return np.array([1.0, -1.0], dtype=complex)
    if Q == 2:
        b = np.array([[0, 0], [0, 1], [1, 0], [1, 1]])
        return ((1 - 2 * b[:, 0]) + 1j * (1 - 2 * b[:, 1])) / np.sqrt(2)
    raise ValueError(f"only BPSK (Q=1) and QPSK (Q=2) are supported, got Q={Q}")


def interleaver(n, seed):
    return np.random.default_rng(seed).permutation(n)


@dataclass
class CodeSpec:
    """A code, a modulation order and an optional bit interleaver."""

    code: LdpcCode
    Q: int = 2
    perm: Optional[np.ndarray] = None

    def __post_init__(self):
        constellation(self.Q)
        if self.code.n % self.Q:
            raise ValueError("code length must be a multiple of Q")
        if self.perm is not None:
            self.perm = np.asarray(self.perm)
            if sorted(self.perm.tolist()) != list(range(self.code.n)):
                raise ValueError("perm is not a permutation of the code bits")

    @property
    def rate(self):
        return self.code.rate

    @property
    def n_symbols(self):
        return self.code.n // self.Q

    def with_interleaver(self, seed):
        return CodeSpec(self.code, self.Q, interleaver(self.code.n, seed))

    def _to_channel_order(self, a):
        return a if self.perm is None else a[..., self.perm]

    def _to_code_order(self, a):
        if self.perm is None:
            return a
        out = np.empty_like(a)
        out[..., self.perm] = a
        return out


def encode(spec: CodeSpec, bits):
    return spec.code.encode(bits)


def modulate(codeword, Q, perm=None):
    """Map (optionally interleaved) code bits to symbols; trailing axis = bits."""
    cw = np.asarray(codeword, dtype=np.uint8)
    if perm is not None:
        cw = cw[..., perm]
    if cw.shape[-1] % Q:
        raise LengthMismatch("bit count is not a multiple of Q")
    if Q == 1:
        return (1.0 - 2.0 * cw).astype(complex)
    b = cw.reshape(cw.shape[:-1] + (-1, 2)).astype(float)
    return ((1 - 2 * b[..., 0]) + 1j * (1 - 2 * b[..., 1])) / np.sqrt(2)


def demodulate(y, noise_var, Q):
    """Bit LLRs ``log P(b=0)/P(b=1)`` for ``y = x + CN(0, noise_var)``."""
    y = np.asarray(y, dtype=complex)
    s2 = np.asarray(noise_var, dtype=float)
    if s2.ndim:
        s2 = s2.reshape(s2.shape + (1,) * (y.ndim - s2.ndim))
    if Q == 1:
        return 4.0 * y.real / s2
    scale = 2.0 * np.sqrt(2.0) / s2
    llr = np.stack([scale * y.real, scale * y.imag], axis=-1)
    return llr.reshape(y.shape[:-1] + (-1,))


def symbol_moments(llr, Q):
    """Posterior mean and variance of each symbol from independent bit LLRs."""
    t = np.tanh(0.5 * np.asarray(llr, dtype=float))
    if Q == 1:
        mean = t.astype(complex)
    else:
        t = t.reshape(t.shape[:-1] + (-1, 2))
        mean = (t[..., 0] + 1j * t[..., 1]) / np.sqrt(2)
    return mean, 1.0 - np.abs(mean) ** 2


@dataclass
class DecodeResult:
    llr: np.ndarray        # posterior code-bit LLRs, code order, (B, n)
    mean: np.ndarray       # posterior symbol means, channel order, (B, n/Q)
    var: np.ndarray        # average posterior variance per frame, (B,)
    bits: np.ndarray       # hard code bits, (B, n)
    info: np.ndarray       # hard message bits, (B, k)


def app_decode(spec: CodeSpec, observations, noise_var, bp_iters=BP_ITERS, exact=None):
    """Soft-in soft-out decoding of AWGN symbol observations.

    Parameters
    ----------
    spec : CodeSpec
    observations : complex array, shape ``(n_symbols,)`` or ``(B, n_symbols)``
        Channel-order symbol observations ``x + noise``.
    noise_var : float or array of shape ``(B,)``
    bp_iters : int
    exact : bool, optional
        Enumerate all codewords instead of belief propagation. Defaults to
        True for codes with at most ``EXACT_MAX_K`` message bits.
    """
    obs = np.atleast_2d(np.asarray(observations, dtype=complex))
    if obs.shape[-1] != spec.n_symbols:
        raise LengthMismatch(f"expected {spec.n_symbols} symbols, got {obs.shape[-1]}")
    if np.any(np.asarray(noise_var) <= 0):
        raise ValueError("noise variance must be positive")
    ch_llr = spec._to_code_order(demodulate(obs, noise_var, spec.Q))
    if exact is None:
        exact = spec.code.k <= EXACT_MAX_K
    post = spec.code.exact_app(ch_llr) if exact else spec.code.bp(ch_llr, bp_iters)
    mean, var = symbol_moments(spec._to_channel_order(post), spec.Q)
    bits = (post < 0).astype(np.uint8)
    return DecodeResult(post, mean, var.mean(axis=-1), bits, spec.code.message(bits))


# ---------------------------------------------------------------------------
# transfer tables


def extrinsic_variance(v_post, rho):
    """Gaussian division ``1 / (1/v_post - rho)``, clipped to ``[1e-8, 1]``.

    When the difference is at most one (no information beyond the prior),
    the variance is one.
    """
    v_post = np.maximum(np.asarray(v_post, dtype=float), 1e-300)
    diff = 1.0 / v_post - np.asarray(rho, dtype=float)
    out = np.ones_like(diff)
    ok = diff > 1.0
    out[ok] = 1.0 / diff[ok]
    return clip_variance(out)


@dataclass
class TransferFunctionTable:
    """Monotone tabulation of ``psi(rho)`` and ``ber(rho)`` on a dB grid."""

    rho: np.ndarray
    psi_values: np.ndarray
    ber_values: np.ndarray
    v_post: Optional[np.ndarray] = None
    frames: Optional[np.ndarray] = None
    bits: Optional[np.ndarray] = None
    errors: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.rho = np.asarray(self.rho, dtype=float)
        self.psi_values = np.asarray(self.psi_values, dtype=float)
        self.ber_values = np.asarray(self.ber_values, dtype=float)
        if np.any(np.diff(self.rho) <= 0):
            raise ValueError("rho grid must be strictly increasing")
        if np.any(np.diff(self.psi_values) > 0) or np.any(np.diff(self.ber_values) > 0):
            raise ValueError("table columns must be non-increasing in rho")
        self._x = 10.0 * np.log10(self.rho)

    def _check(self, rho, strict):
        if strict and (np.any(rho < self.rho[0]) or np.any(rho > self.rho[-1])):
            raise TableOutOfRange("rho outside the tabulated range")

    def _lookup(self, rho, ys, at_zero, log):
        x = 10.0 * np.log10(np.maximum(rho, 1e-300))
        inside = np.interp(x, self._x, np.log(ys) if log else ys)
        inside = np.exp(inside) if log else inside
        # below the grid, fall linearly to the no-information value at rho = 0
        f = np.clip(rho / self.rho[0], 0.0, 1.0)
        return np.where(rho < self.rho[0], at_zero + f * (ys[0] - at_zero), inside)

    def psi(self, rho, strict=False):
        """DEC output (extrinsic) variance at observation SNR ``rho``.

        Above the grid the last value is held; below it the curve runs
        linearly to ``psi(0) = 1``.
        """
        rho = np.asarray(rho, dtype=float)
        self._check(rho, strict)
        return self._lookup(rho, self.psi_values, 1.0, log=True)

    def ber(self, rho, strict=False):
        """Bit error rate at SNR ``rho``; ``ber(0) = 0.5``."""
        rho = np.asarray(rho, dtype=float)
        self._check(rho, strict)
        return self._lookup(rho, self.ber_values, 0.5, log=False)

    @staticmethod
    def _first_below(xs, ys, target, log):
        """Smallest x (piecewise-linear in dB) with y(x) <= target, y non-increasing."""
        idx = np.flatnonzero(ys <= target)
        if idx.size == 0:
            return None
        i = idx[0]
        if i == 0:
            return xs[0]
        y0, y1 = ys[i - 1], ys[i]
        if y1 == target or y1 <= 0:
            # a point with no observed events gives no slope to interpolate on
            return xs[i]
        if log:
            f = (np.log(y0) - np.log(target)) / (np.log(y0) - np.log(y1))
        else:
            f = (y0 - target) / (y0 - y1)
        return xs[i - 1] + f * (xs[i] - xs[i - 1])

    def psi_inv(self, v):
        """Smallest ``rho`` with ``psi(rho) <= v`` (the SNR needed to reach ``v``)."""
        v = float(v)
        if v >= 1.0:
            return 0.0
        if v >= self.psi_values[0]:
            return float(self.rho[0] * (1.0 - v) / (1.0 - self.psi_values[0]))
        x = self._first_below(self._x, self.psi_values, v, log=True)
        if x is None:
            raise OutOfRange(f"variance {v:.3e} is below the table's reach")
        return float(10.0 ** (x / 10.0))

    def ber_inv(self, p):
        x = self._first_below(self._x, self.ber_values, p, log=True)
        if x is None:
            raise OutOfRange(f"BER {p:.3e} is below the smallest tabulated BER")
        return float(10.0 ** (x / 10.0))

    def xi(self, v):
        """BER reached when the DEC output variance is ``v``."""
        return float(self.ber(self.psi_inv(v)))

    def xi_inv(self, p):
        return float(self.psi(self.ber_inv(p)))

    # -- cache file ------------------------------------------------------
    def save(self, path):
        cols = [self.rho, self.psi_values, self.ber_values]
        names = ["rho", "psi", "ber"]
        for name in ("v_post", "frames", "bits", "errors"):
            val = getattr(self, name)
            if val is not None:
                cols.append(np.asarray(val, dtype=float))
                names.append(name)
        header = " ".join(f"{k}={v}" for k, v in sorted(self.meta.items()))
        np.savetxt(path, np.column_stack(cols), header=f"{header}\n" + " ".join(names), fmt="%.10e")

    @classmethod
    def load(cls, path):
        lines = Path(path).read_text().splitlines()
        head = [ln[1:].strip() for ln in lines if ln.startswith("#")]
        names = head[-1].split()
        meta = dict(tok.split("=", 1) for tok in " ".join(head[:-1]).split() if "=" in tok)
        data = np.atleast_2d(np.loadtxt(path))
        cols = {name: data[:, i] for i, name in enumerate(names)}
        return cls(cols["rho"], cols["psi"], cols["ber"], cols.get("v_post"), cols.get("frames"),
                   cols.get("bits"), cols.get("errors"), meta)


def estimate_transfer(spec: CodeSpec, rho_grid, frames_per_point, bp_iters=BP_ITERS, seed=0,
                      target=None, batch=64, min_errors=0, max_frames=None):
    """Monte Carlo tabulation of ``psi`` and ``ber`` over ``rho_grid``.

    Parameters
    ----------
    spec : CodeSpec
    rho_grid : array
        Strictly increasing observation SNRs (linear scale).
    frames_per_point : int
        At least 100.
    target : float, optional
        If given, raise :class:`InsufficientSamples` when every grid point
        whose BER is at or below ``target`` saw no bit errors at all.
    min_errors, max_frames : int, optional
        Keep adding frames at a grid point until ``min_errors`` bit errors
        were seen or ``max_frames`` frames were run.
    """
    rho_grid = np.asarray(rho_grid, dtype=float)
    if np.any(np.diff(rho_grid) <= 0):
        raise ValueError("rho grid must be strictly increasing")
    if frames_per_point < 100:
        raise ValueError("frames_per_point must be at least 100")
    rng = np.random.default_rng(seed)
    code = spec.code
    cap = frames_per_point if max_frames is None else max(max_frames, frames_per_point)
    v_post, errors, nbits, frames = [], [], [], []
    for rho in rho_grid:
        vsum, err, done = 0.0, 0, 0
        while done < frames_per_point or (err < min_errors and done < cap):
            b = batch if done >= frames_per_point else min(batch, frames_per_point - done)
            msg = rng.integers(0, 2, (b, code.k), dtype=np.uint8)
            x = modulate(code.encode(msg), spec.Q, spec.perm)
            noise = np.sqrt(0.5 / rho) * (rng.standard_normal(x.shape) + 1j * rng.standard_normal(x.shape))
            res = app_decode(spec, x + noise, 1.0 / rho, bp_iters)
            vsum += res.var.sum()
            err += int(np.count_nonzero(res.info != msg))
            done += b
        v_post.append(vsum / done)
        errors.append(err)
        nbits.append(done * code.k)
        frames.append(done)
    v_post = np.array(v_post)
    errors = np.array(errors)
    nbits = np.array(nbits)
    frames = np.array(frames)
    psi_raw = extrinsic_variance(v_post, rho_grid)
    psi = isotonic_regression(psi_raw, weights=frames.astype(float), increasing=False).x
    ber = isotonic_regression(errors / nbits, weights=nbits.astype(float), increasing=False).x
    psi = clip_variance(psi)
    if target is not None:
        below = ber <= target
        if not below.any() or errors[below].sum() == 0:
            raise InsufficientSamples(
                f"no grid point resolves BER {target:g} with observed errors; extend the grid or add frames")
    meta = {"code": code.name, "Q": spec.Q, "bp_iters": bp_iters, "seed": seed}
    return TransferFunctionTable(rho_grid, psi, ber, v_post, frames, nbits, errors, meta)


def target_to_sinr(table: TransferFunctionTable, P_tar):
    """``(v_tar, rho_tar)``: the SNR where BER first reaches ``P_tar`` and ``psi`` there."""
    rho_tar = table.ber_inv(P_tar)
    return float(table.psi(rho_tar)), rho_tar


def default_table_path(name=DEFAULT_CODE):
    return resources.files("ris_ofdm") / "data" / f"transfer_{name}.txt"


def load_default_table(name=DEFAULT_CODE):
    with resources.as_file(default_table_path(name)) as path:
        return TransferFunctionTable.load(path)


def default_rho_grid():
    """Coarse below 0 dB, 0.1 dB steps through the waterfall."""
    db = np.r_[np.arange(-12.0, 0.0, 0.5), np.arange(0.0, 4.0001, 0.1)]
    return 10.0 ** (db / 10.0)


def build_table(name=DEFAULT_CODE, frames=500, seed=2024, Q=2, bp_iters=BP_ITERS, rho_grid=None,
                min_errors=500, max_frames=20000):
    """Tabulate the transfer functions of a shipped code with a fixed interleaver."""
    spec = CodeSpec(load_code(name), Q).with_interleaver(seed)
    grid = default_rho_grid() if rho_grid is None else rho_grid
    return estimate_transfer(spec, grid, frames, bp_iters, seed=seed,
                             min_errors=min_errors, max_frames=max_frames)
