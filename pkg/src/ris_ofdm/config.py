"""Scenario configuration and its INI-style file format."""
import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields

import numpy as np

from .exceptions import ConfigError

SCHEMA_VERSION = 1


def dbm_to_watts(dbm):
    return 10.0 ** (dbm / 10.0) / 1000.0


def watts_to_dbm(p):
    return 10.0 * np.log10(np.asarray(p, dtype=float) * 1000.0)


@dataclass
class ScenarioConfig:
    """All knobs of one experiment.

    Distances are in metres, powers in watts unless the name says dBm.
    ``J_prime`` is the number of precoder blocks; each block spans
    ``J // J_prime`` adjacent subcarriers.
    """

    K: int = 4
    M: int = 4
    N: int = 16
    J: int = 512
    J_prime: int = 8
    T_max: int = 1
    noise_dbm: float = -105.0
    Q: int = 2
    code: str = "ldpc_1024_r05"
    code_rate: float = 0.5
    P_tar: float = 1e-2
    L_ub: int = 6
    L_ur: int = 2
    L_rb: int = 5
    L_cp: int = 16
    rician_ur: float = 10.0
    rician_rb: float = 10.0
    pathloss_ref: float = 1e-3
    exp_ub: float = 4.0
    exp_ur: float = 2.0
    exp_rb: float = 2.5
    wavelength: float = 0.1
    seed: int = 0
    n_seeds: int = 50
    frames: int = 100
    bp_iters: int = 30
    optimizer: str = "sic"
    output_dir: str = "out"
    workers: int = 1

    def __post_init__(self):
        self.validate()

    @property
    def noise_power(self):
        return dbm_to_watts(self.noise_dbm)

    def validate(self):
        for name in ("K", "M", "J", "J_prime", "T_max", "Q", "L_ub", "L_ur", "L_rb", "n_seeds", "frames"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.N < 0:
            raise ConfigError("N must be non-negative")
        if self.J % self.J_prime:
            raise ConfigError(f"J_prime={self.J_prime} does not divide J={self.J}")
        if not 0.0 < self.P_tar < 0.5:
            raise ConfigError("P_tar must lie in (0, 0.5)")
        if self.L_cp < max(self.L_ub, self.L_ur + self.L_rb):
            raise ConfigError("cyclic prefix shorter than the channel memory")
        if self.optimizer not in ("sic", "info", "diagonal", "no_ris", "random_phase"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        return self

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def as_dict(self):
        return dataclasses.asdict(self)

    def digest(self):
        """Short stable hash of every field (used in run manifests)."""
        blob = json.dumps(self.as_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    # -- file format ------------------------------------------------------
    def save(self, path):
        cp = configparser.ConfigParser()
        cp.optionxform = str  # keep K and k distinct
        cp["meta"] = {"schema_version": str(SCHEMA_VERSION)}
        cp["scenario"] = {k: repr(v) if isinstance(v, str) else str(v) for k, v in self.as_dict().items()}
        with open(path, "w") as fh:
            cp.write(fh)

    @classmethod
    def load(cls, path):
        cp = configparser.ConfigParser()
        cp.optionxform = str
        if not cp.read(path):
            raise ConfigError(f"cannot read scenario file {path}")
        version = cp.getint("meta", "schema_version", fallback=None)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version}")
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for key, raw in cp["scenario"].items():
            if key not in types:
                raise ConfigError(f"unknown key {key!r}")
            kw[key] = _parse(raw, types[key], key)
        return cls(**kw)


def _parse(raw, typ, key):
    raw = raw.strip()
    try:
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
        return raw.strip("'\"")
    except ValueError as err:
        raise ConfigError(f"bad value for {key}: {raw!r}") from err


def load_or_default(path=None, **overrides):
    cfg = ScenarioConfig.load(path) if path else ScenarioConfig()
    return cfg.replace(**overrides) if overrides else cfg
