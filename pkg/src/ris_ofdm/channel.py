"""Frequency-selective channels for the RIS-aided uplink.

Three links are drawn in the time domain:

* user -> BS, ``h_ub`` with shape ``(K, L_ub, M)``, Rayleigh;
* user -> RIS, ``h_ur`` with shape ``(K, N, L_ur)``, Rician;
* RIS -> BS, ``h_rb`` with shape ``(N, L_rb, M)``, Rician.

The line-of-sight part of a Rician link sits on the first tap, and the
scattered part is spread evenly over all taps. Per-subcarrier responses use
the unnormalised DFT of the taps, which is exactly the diagonal of
``F H F^H`` for a circulant ``H`` and a unitary DFT ``F``.
"""
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .exceptions import ConfigError, InvalidGeometry, NonDivisor


@dataclass
class Geometry:
    """Node positions (metres).

    The BS carries a uniform linear array along x, and the RIS a uniform
    planar array in the x-z plane. Both use half-wavelength spacing.
    ``users`` is ``None`` until :meth:`place_users` draws positions.
    """

    bs: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 10.0]))
    ris: np.ndarray = field(default_factory=lambda: np.array([50.0, 50.0, 10.0]))
    area_lo: np.ndarray = field(default_factory=lambda: np.array([60.0, 0.0, 1.5]))
    area_hi: np.ndarray = field(default_factory=lambda: np.array([110.0, 50.0, 1.5]))
    users: Optional[np.ndarray] = None
    wavelength: float = 0.1

    def place_users(self, K, rng):
        """Return a copy with ``K`` users uniform over the rectangle."""
        lo, hi = np.asarray(self.area_lo, float), np.asarray(self.area_hi, float)
        pos = lo + rng.random((K, 3)) * (hi - lo)
        return replace(self, users=pos)

    def distances(self):
        """``(d_ub (K,), d_ur (K,), d_rb)``; raises on coincident nodes."""
        users = np.atleast_2d(np.asarray(self.users, float))
        d_ub = np.linalg.norm(users - self.bs, axis=1)
        d_ur = np.linalg.norm(users - self.ris, axis=1)
        d_rb = float(np.linalg.norm(np.asarray(self.ris) - self.bs))
        if np.any(d_ub <= 0) or np.any(d_ur <= 0) or d_rb <= 0:
            raise InvalidGeometry("two nodes share a position")
        return d_ub, d_ur, d_rb

    def bs_offsets(self, M):
        d = self.wavelength / 2
        return np.stack([np.arange(M) * d, np.zeros(M), np.zeros(M)], axis=1)

    def ris_offsets(self, N):
        nx, nz = ris_shape(N)
        d = self.wavelength / 2
        ix, iz = np.meshgrid(np.arange(nx), np.arange(nz), indexing="ij")
        return np.stack([ix.ravel() * d, np.zeros(N), iz.ravel() * d], axis=1)


def ris_shape(N):
    """Factor ``N`` as ``nx * nz`` with ``nx >= nz`` as square as possible."""
    if N == 0:
        return 0, 0
    nz = int(np.floor(np.sqrt(N)))
    while N % nz:
        nz -= 1
    return N // nz, nz


def steering(offsets, direction, wavelength):
    """Far-field array response for a plane wave along unit ``direction``."""
    u = np.asarray(direction, float)
    u = u / np.linalg.norm(u)
    return np.exp(2j * np.pi / wavelength * (offsets @ u))


@dataclass
class ChannelSet:
    """Time-domain taps of all links plus noise power and CP length."""

    h_ub: np.ndarray
    h_ur: np.ndarray
    h_rb: np.ndarray
    noise_power: float
    L_cp: int
    J: int
    geometry: Optional[Geometry] = None

    def __post_init__(self):
        if self.h_ur.shape[1] != self.h_rb.shape[0]:
            raise ConfigError("RIS element count differs between links")
        if self.L_cp < max(self.L_ub, self.L_ur + self.L_rb):
            raise ConfigError("cyclic prefix shorter than the channel memory")
        if max(self.L_ub, self.L_ur + self.L_rb - 1) > self.J:
            raise ConfigError("more taps than subcarriers")

    K = property(lambda self: self.h_ub.shape[0])
    M = property(lambda self: self.h_ub.shape[2])
    N = property(lambda self: self.h_rb.shape[0])
    L_ub = property(lambda self: self.h_ub.shape[1])
    L_ur = property(lambda self: self.h_ur.shape[2])
    L_rb = property(lambda self: self.h_rb.shape[1])


def _cn(rng, shape, var):
    return np.sqrt(var / 2) * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def generate_channels(geometry, config, seed):
    """Draw a :class:`ChannelSet` for the scenario in ``config``.

    Parameters
    ----------
    geometry : Geometry
        If ``geometry.users`` is None, user positions are drawn from ``seed``
        first, so one seed fixes the whole realization.
    config : ScenarioConfig
        Supplies K, M, N, J, tap counts, L_cp, pathloss and Rician settings.
    seed : int
    """
    rng = np.random.default_rng(seed)
    K, M, N = config.K, config.M, config.N
    if geometry.users is None:
        geometry = geometry.place_users(K, rng)
    users = np.atleast_2d(geometry.users)
    if users.shape[0] != K:
        raise ConfigError(f"geometry has {users.shape[0]} users, config wants {K}")
    d_ub, d_ur, d_rb = geometry.distances()
    lam = geometry.wavelength
    ref = config.pathloss_ref

    # user -> BS: Rayleigh, power split evenly over taps
    beta_ub = ref * d_ub ** -config.exp_ub
    h_ub = _cn(rng, (K, config.L_ub, M), 1.0) * np.sqrt(beta_ub / config.L_ub)[:, None, None]

    ris_off = geometry.ris_offsets(N)
    bs_off = geometry.bs_offsets(M)

    # user -> RIS
    kf = config.rician_ur
    beta_ur = ref * d_ur ** -config.exp_ur
    h_ur = _cn(rng, (K, N, config.L_ur), 1.0) * np.sqrt(beta_ur / ((kf + 1) * config.L_ur))[:, None, None]
    for k in range(K):
        los = steering(ris_off, users[k] - geometry.ris, lam) * np.exp(-2j * np.pi * d_ur[k] / lam)
        h_ur[k, :, 0] += np.sqrt(beta_ur[k] * kf / (kf + 1)) * los

    # RIS -> BS
    kf = config.rician_rb
    beta_rb = ref * d_rb ** -config.exp_rb
    h_rb = _cn(rng, (N, config.L_rb, M), beta_rb / ((kf + 1) * config.L_rb))
    a_bs = steering(bs_off, np.asarray(geometry.ris) - geometry.bs, lam)
    a_ris = steering(ris_off, np.asarray(geometry.bs) - geometry.ris, lam)
    h_rb[:, 0, :] += (np.sqrt(beta_rb * kf / (kf + 1)) * np.exp(-2j * np.pi * d_rb / lam)
                      * np.outer(a_ris, a_bs))

    return ChannelSet(h_ub, h_ur, h_rb, config.noise_power, config.L_cp, config.J, geometry)


def taps_to_frequency(taps, J, axis=0):
    """Per-subcarrier responses ``sum_l h(l) exp(-i 2 pi j l / J)``.

    ``taps`` may carry any number of extra axes; ``axis`` indexes the taps.
    """
    taps = np.asarray(taps)
    if taps.shape[axis] > J:
        raise ValueError("more taps than subcarriers")
    return np.fft.fft(taps, n=J, axis=axis)


@dataclass
class EffectiveChannel:
    """Frequency-domain channel, affine in the RIS phases.

    ``direct`` has shape ``(J, K, M)`` and ``cascade`` ``(J, K, N, M)`` so
    that ``G_k(theta)(j) = direct[j, k] + sum_n theta_n cascade[j, k, n]``.
    ``J_full`` remembers the subcarrier count before downsampling.
    """

    direct: np.ndarray
    cascade: np.ndarray
    noise_power: float
    J_full: Optional[int] = None

    def __post_init__(self):
        if self.J_full is None:
            self.J_full = self.direct.shape[0]

    J = property(lambda self: self.direct.shape[0])
    K = property(lambda self: self.direct.shape[1])
    M = property(lambda self: self.direct.shape[2])
    N = property(lambda self: self.cascade.shape[2])

    def compose(self, theta):
        """``G`` of shape ``(J, K, M)`` for the phase vector ``theta``."""
        theta = np.asarray(theta, dtype=complex).ravel()
        if theta.size != self.N:
            raise ValueError(f"theta has {theta.size} entries, channel has N={self.N}")
        if self.N == 0:
            return self.direct.copy()
        return self.direct + np.einsum("jknm,n->jkm", self.cascade, theta)

    def downsample(self, J_prime):
        """Keep every ``(J / J_prime)``-th subcarrier, starting at the first."""
        if J_prime < 1 or self.J % J_prime:
            raise NonDivisor(f"J_prime={J_prime} does not divide J={self.J}")
        step = self.J // J_prime
        return EffectiveChannel(self.direct[::step].copy(), self.cascade[::step].copy(),
                                self.noise_power, self.J_full)

    def without_ris(self):
        J, K, M = self.direct.shape
        return EffectiveChannel(self.direct, np.zeros((J, K, 0, M), complex), self.noise_power, self.J_full)

    def subset(self, users):
        users = list(users)
        return EffectiveChannel(self.direct[:, users], self.cascade[:, users], self.noise_power, self.J_full)

    def normalized(self):
        """Channel rescaled so the noise power is one (powers are unchanged)."""
        s = 1.0 / np.sqrt(self.noise_power)
        return EffectiveChannel(self.direct * s, self.cascade * s, 1.0, self.J_full)


def assemble_effective(channels: ChannelSet, J_prime=None):
    """Build the frequency-domain channel, optionally downsampled to ``J_prime``."""
    J = channels.J
    direct = taps_to_frequency(channels.h_ub, J, axis=1).transpose(1, 0, 2)
    f_ur = taps_to_frequency(channels.h_ur, J, axis=2)          # (K, N, J)
    f_rb = taps_to_frequency(channels.h_rb, J, axis=1)          # (N, J, M)
    cascade = np.einsum("njm,knj->jknm", f_rb, f_ur)
    eff = EffectiveChannel(direct, cascade, channels.noise_power, J)
    if J_prime is not None and J_prime != J:
        eff = eff.downsample(J_prime)
    return eff


# -- channel dump --------------------------------------------------------


def write_channel_dump(channels: ChannelSet, path):
    """Plain-text dump, one line per (link, user, element, tap, antenna).

    Header lines start with ``#``. Columns: ``link k n tap m re im`` where
    unused indices are written as ``-1``.
    """
    with open(path, "w") as fh:
        fh.write("# ris-ofdm channel dump v1\n")
        fh.write(f"# K={channels.K} M={channels.M} N={channels.N} J={channels.J} "
                 f"L_cp={channels.L_cp} noise_power={float(channels.noise_power)!r}\n")
        fh.write("# link k n tap m re im\n")
        for k, l, m in np.ndindex(channels.h_ub.shape):
            z = channels.h_ub[k, l, m]
            fh.write(f"ub {k} -1 {l} {m} {float(z.real)!r} {float(z.imag)!r}\n")
        for k, n, l in np.ndindex(channels.h_ur.shape):
            z = channels.h_ur[k, n, l]
            fh.write(f"ur {k} {n} {l} -1 {float(z.real)!r} {float(z.imag)!r}\n")
        for n, l, m in np.ndindex(channels.h_rb.shape):
            z = channels.h_rb[n, l, m]
            fh.write(f"rb -1 {n} {l} {m} {float(z.real)!r} {float(z.imag)!r}\n")


def read_channel_dump(path):
    meta = {}
    rows = {"ub": [], "ur": [], "rb": []}
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                for tok in line[1:].split():
                    if "=" in tok:
                        key, val = tok.split("=")
                        meta[key] = val
                continue
            parts = line.split()
            if parts:
                rows[parts[0]].append([int(p) for p in parts[1:5]] + [float(parts[5]) + 1j * float(parts[6])])
    K, M, N = int(meta["K"]), int(meta["M"]), int(meta["N"])

    def fill(items, shape, cols):
        arr = np.zeros(shape, complex)
        for r in items:
            arr[tuple(r[c] for c in cols)] = r[4]
        return arr

    L_ub = 1 + max(r[2] for r in rows["ub"])
    L_ur = 1 + max((r[2] for r in rows["ur"]), default=0)
    L_rb = 1 + max((r[2] for r in rows["rb"]), default=0)
    h_ub = fill(rows["ub"], (K, L_ub, M), (0, 2, 3))
    h_ur = fill(rows["ur"], (K, N, L_ur), (0, 1, 2))
    h_rb = fill(rows["rb"], (N, L_rb, M), (1, 2, 3))
    return ChannelSet(h_ub, h_ur, h_rb, float(meta["noise_power"]), int(meta["L_cp"]), int(meta["J"]))
