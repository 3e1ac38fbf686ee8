"""Command-line entry point: ``ris-ofdm <subcommand>``."""
import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .coding import build_table
from .config import ScenarioConfig, _parse, load_or_default
from .exceptions import RisOfdmError
from .harness import (
    aggregate,
    monte_carlo,
    run_design,
    run_experiment,
    se_prediction,
    write_manifest,
    write_rows,
)


def _overrides(pairs):
    types = {f.name: f.type for f in fields(ScenarioConfig)}
    out = {}
    for item in pairs or []:
        key, sep, raw = item.partition("=")
        if not sep or key not in types:
            raise SystemExit(f"bad override {item!r}; use KEY=VALUE with a scenario key")
        out[key] = _parse(raw, types[key], key)
    return out


def _config(args):
    return load_or_default(args.config, **_overrides(args.set))


def _outdir(args, cfg):
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_optimize(args):
    cfg = _config(args)
    out = _outdir(args, cfg)
    rec = run_design(cfg, args.seed)
    trace = out / f"power_trace_{cfg.optimizer}_{args.seed}.csv"
    write_rows([{"round": i, "power_w": p} for i, p in enumerate(rec.power_trace)], trace)
    design = out / f"design_{cfg.optimizer}_{args.seed}.npz"
    np.savez(design, W=rec.precoders.W, theta=rec.theta)
    write_manifest(out / "manifest.json", cfg, [args.seed], [trace, design])
    print(f"{cfg.optimizer} seed {args.seed}: {rec.power_dbm:.3f} dBm in {rec.runtime:.1f} s")


def cmd_simulate(args):
    cfg = _config(args)
    out = _outdir(args, cfg)
    rec = run_design(cfg, args.seed)
    res = monte_carlo(rec, cfg, args.frames)
    rows = [{"user": k + 1, "ber": float(res.ber[k]), "errors": int(res.errors[k]), "bits": res.bits}
            for k in range(cfg.K)]
    path = out / f"ber_{cfg.optimizer}_{args.seed}.csv"
    write_rows(rows, path)
    write_manifest(out / "manifest.json", cfg, [args.seed], [path])
    for r in rows:
        print(f"user {r['user']}: BER {r['ber']:.3e} ({r['errors']}/{r['bits']})")


def cmd_se_trace(args):
    cfg = _config(args)
    out = _outdir(args, cfg)
    rec = run_design(cfg, args.seed)
    trace = se_prediction(rec, cfg)
    path = out / f"se_trace_{cfg.optimizer}_{args.seed}.csv"
    trace.to_csv(path)
    write_manifest(out / "manifest.json", cfg, [args.seed], [path])
    print(f"final variances {np.array2string(trace.final_v, precision=4)}")


def cmd_sweep(args):
    cfg = _config(args)
    out = _outdir(args, cfg)
    values = [None] if args.axis is None else [_parse(v, type(getattr(cfg, args.axis)), args.axis)
                                                for v in args.values.split(",")]
    summary, outputs = [], []
    for val in values:
        c = cfg if val is None else cfg.replace(**{args.axis: val})
        tag = "" if val is None else f"_{args.axis}{val}"
        path = out / f"sweep_{c.optimizer}{tag}.csv"
        rows = run_experiment(c, frames=args.frames, workers=args.workers, csv_path=path)
        agg = aggregate(rows, c.K)
        if val is not None:
            agg[args.axis] = val
        summary.append(agg)
        outputs.append(path)
        print(json.dumps(agg))
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    seeds = list(range(cfg.seed, cfg.seed + cfg.n_seeds))
    write_manifest(out / "manifest.json", cfg, seeds, outputs + [out / "summary.json"],
                   {"axis": args.axis, "values": values})


def cmd_transfer_table(args):
    table = build_table(args.code, frames=args.frames, seed=args.seed, bp_iters=args.bp_iters,
                        min_errors=args.min_errors, max_frames=max(args.max_frames, args.frames))
    table.save(args.output)
    print(f"wrote {args.output} ({len(table.rho)} points)")


def build_parser():
    p = argparse.ArgumentParser(prog="ris-ofdm", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def scenario(sp):
        sp.add_argument("--config", help="scenario file (INI format)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a scenario key")
        sp.add_argument("--out", help="output directory (default: the scenario's output_dir)")

    sp = sub.add_parser("optimize", help="design precoders and phases for one realization")
    scenario(sp)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_optimize)

    sp = sub.add_parser("simulate", help="design, then Monte Carlo BER of the receiver")
    scenario(sp)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--frames", type=int)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("se-trace", help="design, then the state-evolution variance trace")
    scenario(sp)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_se_trace)

    sp = sub.add_parser("sweep", help="many realizations, optionally along one scenario axis")
    scenario(sp)
    sp.add_argument("--axis", help="scenario key to vary, e.g. N or T_max")
    sp.add_argument("--values", help="comma-separated values for --axis")
    sp.add_argument("--frames", type=int, help="Monte Carlo frames per seed (0 skips simulation)")
    sp.add_argument("--workers", type=int)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("transfer-table", help="tabulate the decoder transfer functions")
    sp.add_argument("--code", default="ldpc_1024_r05")
    sp.add_argument("--frames", type=int, default=500)
    sp.add_argument("--seed", type=int, default=2024)
    sp.add_argument("--bp-iters", type=int, default=30)
    sp.add_argument("--min-errors", type=int, default=500, help="keep sampling a point until this many bit errors")
    sp.add_argument("--max-frames", type=int, default=20000, help="cap on frames per point")
    sp.add_argument("--output", required=True)
    sp.set_defaults(func=cmd_transfer_table)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    if args.command == "sweep" and (args.axis is None) != (args.values is None):
        raise SystemExit("--axis and --values go together")
    try:
        args.func(args)
    except RisOfdmError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
