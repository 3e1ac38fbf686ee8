"""Scenario runners: optimizers, baselines, Monte Carlo closure and run manifests.

All optimizers work on the channel normalised to unit noise power and
downsampled to ``J'`` subcarriers; precoder powers stay in watts, so the
reported average power converts to dBm directly.
"""
import csv
import json
import logging
import subprocess
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.stats import binomtest

from . import __version__
from .channel import Geometry, assemble_effective, generate_channels
from .coding import CodeSpec, load_code, load_default_table, target_to_sinr
from .config import ScenarioConfig, watts_to_dbm
from .exceptions import RisOfdmError
from .info_optimizer import RateSpec, optimize_info
from .sic_optimizer import diagonal_constraints, fp_precode, optimize, sic_constraints
from .state_evolution import PATH_POINTS, Grouping, se_run
from .transceiver import PrecoderSet, simulate

log = logging.getLogger(__name__)

DIAGONAL_EPS = 1e-6
MC_SEED_OFFSET = 1_000_003


@dataclass
class RunRecord:
    """Design found for one channel realization."""

    optimizer: str
    seed: int
    precoders: PrecoderSet
    theta: np.ndarray
    grouping: Optional[Grouping]
    runtime: float
    power_trace: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    @property
    def power(self):
        """Average per-symbol transmit power ``(1/JK) sum |W|^2`` in watts."""
        return self.precoders.power()

    @property
    def power_dbm(self):
        return float(watts_to_dbm(self.power))


def build_channel(config: ScenarioConfig, seed, geometry=None):
    """``(full, opt)``: unit-noise channels on all ``J`` and on ``J'`` subcarriers."""
    full = assemble_effective(generate_channels(geometry or Geometry(wavelength=config.wavelength),
                                                config, seed)).normalized()
    return full, full.downsample(config.J_prime)


def targets(config: ScenarioConfig, table=None):
    """``(table, v_tar, rho_tar)`` for the configured code and target BER."""
    table = table or load_default_table(config.code)
    v_tar, rho_tar = target_to_sinr(table, config.P_tar)
    return table, v_tar, rho_tar


def random_phases(N, seed):
    """Phases shared by the random-phase baseline and the optimizers' starting point."""
    return np.exp(2j * np.pi * np.random.default_rng(seed).random(N))


def _record(name, seed, t0, precoders, theta, grouping=None, trace=None, **meta):
    return RunRecord(name, seed, precoders, np.asarray(theta, complex), grouping,
                     time.perf_counter() - t0, list(trace or []), meta)


def run_baseline_no_ris(config: ScenarioConfig, seed, table=None):
    """Single-group FP precoding on the direct channels only."""
    t0 = time.perf_counter()
    _, opt = build_channel(config, seed)
    _, _, rho_tar = targets(config, table)
    grouping = Grouping.single(config.K)
    fp = fp_precode(sic_constraints(grouping, rho_tar), opt.without_ris().compose(np.zeros(0)), 1.0)
    return _record("no_ris", seed, t0, fp.precoders, np.zeros(0), grouping, fp.power_trace)


def run_baseline_random_phase(config: ScenarioConfig, seed, table=None):
    """Single-group FP precoding with random phases."""
    t0 = time.perf_counter()
    _, opt = build_channel(config, seed)
    _, _, rho_tar = targets(config, table)
    grouping = Grouping.single(config.K)
    theta = random_phases(config.N, seed)
    fp = fp_precode(sic_constraints(grouping, rho_tar), opt.compose(theta), 1.0)
    return _record("random_phase", seed, t0, fp.precoders, theta, grouping, fp.power_trace)


def diagonal_requirements(table, v_tar, points=PATH_POINTS, eps=DIAGONAL_EPS):
    """Grid from 1 down to ``v_tar`` and the SINR each grid value needs."""
    grid = np.linspace(1.0, v_tar, points)
    return grid, np.array([table.psi_inv(v) for v in grid]) + eps


def run_diagonal_path(config: ScenarioConfig, seed, table=None, points=PATH_POINTS, eps=DIAGONAL_EPS):
    """Power minimisation with the diagonal of the variance cube as decoding path.

    No iteration budget applies. The constraint family (one per grid
    value and user) is handed to the same FP / SCA alternation.
    """
    t0 = time.perf_counter()
    _, opt = build_channel(config, seed)
    table, v_tar, rho_tar = targets(config, table)
    grid, need = diagonal_requirements(table, v_tar, points, eps)
    cons = diagonal_constraints(config.K, grid, need)
    res = optimize(opt, 1, rho_tar, seed=seed, constraints=cons, theta0=random_phases(config.N, seed))
    return _record("diagonal", seed, t0, res.precoders, res.theta, None, res.power_trace,
                   reconstruction=True, path_points=points, eps=eps, constraints=len(cons))


def run_sic(config: ScenarioConfig, seed, table=None):
    """Groupwise successive-cancellation design with ``T_max`` groups."""
    t0 = time.perf_counter()
    _, opt = build_channel(config, seed)
    _, _, rho_tar = targets(config, table)
    res = optimize(opt, config.T_max, rho_tar, seed=seed, theta0=random_phases(config.N, seed))
    return _record("sic", seed, t0, res.precoders, res.theta, res.grouping, res.power_trace,
                   rounds=res.rounds)


def run_info(config: ScenarioConfig, seed, table=None):
    """Capacity-region design (at most six users)."""
    t0 = time.perf_counter()
    _, opt = build_channel(config, seed)
    spec = RateSpec.uniform(config.K, config.Q, config.code_rate, config.L_cp, config.J, config.J_prime)
    res = optimize_info(opt, spec, seed=seed, theta0=random_phases(config.N, seed))
    return _record("info", seed, t0, res.precoders, res.theta, None, res.power_trace,
                   rounds=res.rounds, stopped_on_increase=res.increased)


RUNNERS = {
    "sic": run_sic,
    "info": run_info,
    "diagonal": run_diagonal_path,
    "no_ris": run_baseline_no_ris,
    "random_phase": run_baseline_random_phase,
}


def run_design(config: ScenarioConfig, seed, table=None):
    return RUNNERS[config.optimizer](config, seed, table)


def code_specs(config: ScenarioConfig):
    code = load_code(config.code)
    return [CodeSpec(code, config.Q).with_interleaver(config.seed * 1000 + k) for k in range(config.K)]


def se_prediction(record: RunRecord, config: ScenarioConfig, table=None):
    """State-evolution trace of a design on its optimisation grid."""
    table = table or load_default_table(config.code)
    _, opt = build_channel(config, record.seed)
    return se_run(config.T_max, table, opt.compose(record.theta), record.precoders.W, 1.0)


def monte_carlo(record: RunRecord, config: ScenarioConfig, frames=None):
    """Receiver simulation of a design on the full subcarrier grid."""
    full, _ = build_channel(config, record.seed)
    return simulate(full, record.theta, record.precoders, code_specs(config), config.T_max,
                    frames or config.frames, record.seed + MC_SEED_OFFSET, bp_iters=config.bp_iters)


def evaluate_seed(config: ScenarioConfig, seed, frames=None, table=None):
    """Design, predict and simulate one realization; failures become a status string."""
    table = table or load_default_table(config.code)
    row = {"seed": seed, "optimizer": config.optimizer, "config_hash": config.digest()}
    try:
        rec = run_design(config, seed, table)
        trace = se_prediction(rec, config, table)
        mc = monte_carlo(rec, config, frames) if (frames or config.frames) else None
    except RisOfdmError as err:
        log.warning("seed %d failed: %s", seed, err)
        row.update(status=f"{type(err).__name__}: {err}")
        return row
    row.update(status="ok", power_w=rec.power, power_dbm=rec.power_dbm, runtime=rec.runtime)
    se_ber = table.ber(trace.rho[-1])
    for k in range(config.K):
        row[f"se_ber{k + 1}"] = float(se_ber[k])
        if mc is not None:
            row[f"ber{k + 1}"] = float(mc.ber[k])
            row[f"errors{k + 1}"] = int(mc.errors[k])
    if mc is not None:
        row["bits"] = int(mc.bits)
    return row


def _evaluate(args):
    return evaluate_seed(*args)


def run_experiment(config: ScenarioConfig, seeds=None, frames=None, workers=None, csv_path=None):
    """One row per seed, sorted by seed whatever order the workers finish in.

    Parameters
    ----------
    config : ScenarioConfig
    seeds : iterable of int, optional
        Defaults to ``config.seed, ..., config.seed + n_seeds - 1``.
    frames : int, optional
        Monte Carlo frames per seed (``0`` skips the simulation).
    workers : int, optional
        Process-pool size; ``1`` runs in-process.
    csv_path : path, optional
    """
    seeds = list(range(config.seed, config.seed + config.n_seeds)) if seeds is None else list(seeds)
    frames = config.frames if frames is None else frames
    workers = config.workers if workers is None else workers
    jobs = [(config, s, frames) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_evaluate, jobs))
    else:
        table = load_default_table(config.code)
        rows = [evaluate_seed(config, s, frames, table) for s in seeds]
    rows.sort(key=lambda r: r["seed"])
    if csv_path is not None:
        write_rows(rows, csv_path)
    return rows


def write_rows(rows, path):
    keys = []
    for r in rows:
        keys.extend(k for k in r if k not in keys)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in r.items()})


def aggregate(rows, K):
    """Mean power in dBm and pooled per-user BER with 95% Wilson intervals."""
    ok = [r for r in rows if r.get("status") == "ok"]
    out = {"seeds": len(rows), "succeeded": len(ok)}
    if not ok:
        return out
    p = np.array([r["power_w"] for r in ok])
    out["mean_power_dbm"] = float(watts_to_dbm(p.mean()))
    out["mean_of_dbm"] = float(np.mean(watts_to_dbm(p)))
    if "bits" in ok[0]:
        bits = sum(r["bits"] for r in ok)
        for k in range(1, K + 1):
            err = sum(r[f"errors{k}"] for r in ok)
            ci = binomtest(err, bits).proportion_ci(method="wilson")
            out[f"ber{k}"] = err / bits
            out[f"ber{k}_ci"] = [float(ci.low), float(ci.high)]
    return out


def git_revision(path=None):
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], cwd=path or Path(__file__).parent,
                             capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


def write_manifest(path, config: ScenarioConfig, seeds, outputs=(), extra=None):
    """JSON record that is enough to replay a run."""
    manifest = {
        "package_version": __version__,
        "git_revision": git_revision(),
        "config_hash": config.digest(),
        "config": config.as_dict(),
        "seeds": list(seeds),
        "mc_seed_offset": MC_SEED_OFFSET,
        "outputs": [str(o) for o in outputs],
    }
    if extra:
        manifest.update(extra)
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest
