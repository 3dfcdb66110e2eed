"""Command line front end.

Subcommands: simulate, run, montecarlo, obs-report, evaluate.  Configuration
comes from a JSON file (--config) with sections "sim", "init" and top-level
run settings; individual flags override it.  On failure a single
machine-readable JSON error line goes to stderr and the exit code is nonzero.
"""

import argparse
import json
import sys
from dataclasses import replace

import numpy as np

from . import harness, sim as simmod
from .pipeline import MODES, RunConfig, run_pipeline, sim_config_from_dict
from .uwb_init import InitParams


def _load_config(path):
    if path is None:
        return {}
    with open(path) as f:
        return json.load(f)


def _build_run_config(args, raw):
    sim_raw = raw.get("sim", {})
    if sim_raw:
        base = simmod.SimConfig().to_dict()
        base.update(sim_raw)
        sim_cfg = sim_config_from_dict(base)
    else:
        sim_cfg = simmod.SimConfig()
    init_cfg = InitParams(**raw.get("init", {}))
    cfg = RunConfig(
        mode=args.mode or raw.get("mode", "fej-viro"),
        sim=sim_cfg,
        data_dir=getattr(args, "data", None) or raw.get("data_dir"),
        init=init_cfg,
        init_sigmas=tuple(raw.get("init_sigmas",
                                  RunConfig.__dataclass_fields__["init_sigmas"].default)),
        seed=args.seed if args.seed is not None else raw.get("seed"),
        out_dir=args.out,
    )
    if getattr(args, "trajectory", None):
        cfg = replace(cfg, sim=replace(cfg.sim, trajectory=args.trajectory))
    return cfg


def _cmd_simulate(args):
    raw = _load_config(args.config)
    cfg = _build_run_config(args, raw)
    data = simmod.simulate(cfg.sim)
    simmod.write_streams(data, args.out)
    print(f"wrote measurement streams to {args.out}")
    return 0


def _cmd_run(args):
    raw = _load_config(args.config)
    cfg = _build_run_config(args, raw)
    result = run_pipeline(cfg)
    ate = harness.write_run_outputs(result, args.out)
    init_note = ("init_stamp=" + ("%g" % result.init_stamp)
                 if np.isfinite(result.init_stamp) else "init=none")
    print(f"mode={result.mode} ate={ate:.4f} {init_note} out={args.out}")
    return 0


def _cmd_montecarlo(args):
    raw = _load_config(args.config)
    cfg = _build_run_config(args, raw)
    base_seed = cfg.seed if cfg.seed is not None else cfg.sim.seed
    seeds = [base_seed + i for i in range(args.runs)]
    mc = harness.monte_carlo(cfg, seeds, workers=args.workers)
    harness.write_montecarlo_outputs(mc, args.out)
    post = mc.mean_nees_ori[np.isfinite(mc.mean_nees_ori)]
    print(f"mode={cfg.mode} runs={args.runs} mean_ate={np.mean(mc.ates):.4f} "
          f"mean_nees_ori={np.mean(post):.2f} out={args.out}")
    return 0


def _cmd_obs_report(args):
    reports = harness.run_obs_report(args.out, trajectory=args.trajectory or "figure8",
                                     n_steps=args.steps, seed=args.seed or 0)
    for rep in reports:
        print(f"mode={rep.mode} rank={rep.rank} "
              f"n1_residual={rep.n1_residual:.3e} n2_residual={rep.n2_residual:.3e}")
    return 0


def _cmd_evaluate(args):
    ate = harness.evaluate_files(args.trajectory_csv, args.groundtruth_csv)
    print(f"ate={ate:.6f}")
    return 0


def make_parser():
    p = argparse.ArgumentParser(prog="viro",
                                description="visual-inertial-ranging odometry toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, needs_out=True):
        sp.add_argument("--config", default=None, help="JSON config file")
        sp.add_argument("--mode", choices=MODES, default=None)
        sp.add_argument("--seed", type=int, default=None)
        if needs_out:
            sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("simulate", help="generate measurement stream files")
    common(sp)
    sp.add_argument("--trajectory", choices=("figure8", "circle", "waypoints"))
    sp.set_defaults(fn=_cmd_simulate)

    sp = sub.add_parser("run", help="run the estimation pipeline once")
    common(sp)
    sp.add_argument("--trajectory", choices=("figure8", "circle", "waypoints"))
    sp.add_argument("--data", default=None, help="directory with measurement files")
    sp.set_defaults(fn=_cmd_run)

    sp = sub.add_parser("montecarlo", help="Monte-Carlo runs with merged metrics")
    common(sp)
    sp.add_argument("--trajectory", choices=("figure8", "circle", "waypoints"))
    sp.add_argument("--runs", type=int, default=20)
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(fn=_cmd_montecarlo)

    sp = sub.add_parser("obs-report", help="observability residual tables")
    common(sp)
    sp.add_argument("--trajectory", choices=("figure8", "circle", "waypoints"))
    sp.add_argument("--steps", type=int, default=50)
    sp.set_defaults(fn=_cmd_obs_report)

    sp = sub.add_parser("evaluate", help="ATE between trajectory and groundtruth CSVs")
    sp.add_argument("trajectory_csv")
    sp.add_argument("groundtruth_csv")
    sp.set_defaults(fn=_cmd_evaluate)
    return p


def main(argv=None):
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # single machine-readable error line
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
