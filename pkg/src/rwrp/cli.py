"""Command-line entry point: ``rwrp <subcommand> --config C [flags]``.

Flags override keys of the YAML config.  Exit codes: 0 success, 2 a failed
check, 3 a budget or feasibility failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time

from . import experiments as ex
from .config import ConfigError, ExperimentConfig

log = logging.getLogger("rwrp")


def _ints(s: str) -> list[int]:
    return [int(c) for c in s.replace(";", ",").split(",") if c.strip()]


def _common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
    p.add_argument("--config", required=config_required, help="YAML experiment config")
    p.add_argument("--out", help="output directory (default: output.dir of the config)")
    p.add_argument("--prefix", help="output file prefix")
    p.add_argument("--seed", type=int, help="global seed override")
    p.add_argument("--timing", action="store_true", help="record wall_ms in the JSON summary")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rwrp", description="Random walks in random potentials: free energies and large deviations.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("geometry", help="inspect a step set")
    g.add_argument("action", choices=["describe"])
    g.add_argument("--config", required=True)

    p = sub.add_parser("dp", help="partition functions by the transfer recursion")
    _common(p)
    p.add_argument("--target", choices=["line", "point"], default="line")
    p.add_argument("--zeta")
    p.add_argument("--n-schedule", type=_ints)
    p.add_argument("--prune", action="store_true", help="drop states below layer max minus 60 ln 10")

    p = sub.add_parser("duality", help="tilt table, Legendre transform and rate function")
    _common(p)
    p.add_argument("--tilt-radius", type=float)
    p.add_argument("--tilt-step", type=float)
    p.add_argument("--zeta-grid", type=int)

    p = sub.add_parser("rate", help="RWRE point-probability rates")
    _common(p)
    p.add_argument("--rwre", action="store_true", help="accepted for compatibility; the potential must be of kind rwre")
    p.add_argument("--zeta", action="append", help="velocity (repeatable)")
    p.add_argument("--n-schedule", type=_ints)

    p = sub.add_parser("l2", help="weak-disorder solution and diagnostics")
    _common(p)
    p.add_argument("--beta", type=float)
    p.add_argument("--zeta")
    p.add_argument("--n", type=int)
    p.add_argument("--samples", type=int)

    p = sub.add_parser("entropy", help="variational formula on a finite model")
    _common(p)
    p.add_argument("--zeta")
    p.add_argument("--gap", type=float, default=1e-6)

    p = sub.add_parser("concentration", help="tail frequencies of the quenched free energy")
    _common(p)
    p.add_argument("--samples", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--n-schedule", type=_ints)
    p.add_argument("--centering", choices=["lambda", "mean"])

    p = sub.add_parser("continuity", help="point-to-point free energy along a velocity segment")
    _common(p)
    p.add_argument("--zeta-grid", type=int)
    p.add_argument("--n-schedule", type=_ints)

    sub.add_parser("selftest", help="quick oracle checks")
    return ap


def _load(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.override("seed", args.seed)
    return cfg


def _dispatch(args, cfg: ExperimentConfig) -> ex.RunResult:
    exp = lambda key, val: val is not None and cfg.override(f"experiment.{key}", val)  # noqa: E731
    if args.cmd == "dp":
        return ex.run_dp(cfg, args.target, args.zeta, args.n_schedule, args.prune)
    if args.cmd == "duality":
        return ex.run_duality(cfg, args.tilt_radius, args.tilt_step, args.zeta_grid)
    if args.cmd == "rate":
        return ex.run_rate(cfg, args.zeta, args.n_schedule)
    if args.cmd == "l2":
        if args.beta is not None:
            cfg.override("potential.beta", args.beta)
        return ex.run_l2(cfg, None, args.zeta, args.n, args.samples)
    if args.cmd == "entropy":
        return ex.run_entropy(cfg, args.zeta, args.gap)
    if args.cmd == "concentration":
        exp("samples", args.samples)
        exp("epsilon", args.epsilon)
        exp("n_schedule", args.n_schedule)
        exp("centering", args.centering)
        return ex.run_concentration_cli(cfg)
    if args.cmd == "continuity":
        exp("zeta_grid", args.zeta_grid)
        exp("n_schedule", args.n_schedule)
        return ex.run_continuity_cli(cfg)
    raise AssertionError(args.cmd)


def selftest() -> int:
    """A handful of fast oracle checks; prints one line per check."""
    import math

    import numpy as np

    from .environment import Bernoulli, IIDEnvironment, PeriodicEnvironment, SitePotential
    from .geometry import build_geometry
    from .transfer import brute_force_log_partition, log_partition_line, perron_free_energy

    ok = True

    def check(name, cond):
        nonlocal ok
        ok &= bool(cond)
        print(f"{'PASS' if cond else 'FAIL'} {name}")

    geom = build_geometry(2, [(0, 1), (1, 1)])
    env = IIDEnvironment(Bernoulli(0.5, -1.0, 1.0), seed=7)
    pot = SitePotential(beta=0.7)
    check("dp equals enumeration", abs(log_partition_line(env, pot, geom, 8) - brute_force_log_partition(env, pot, geom, 8)) < 1e-9)
    g1 = build_geometry(1, [(1,), (2,)])
    per = PeriodicEnvironment(np.array([0.0, 1.0]))
    check("perron root, period 2", abs(perron_free_energy(per, SitePotential(beta=1.0), g1) - math.log(0.5 + 0.5 * math.e)) < 1e-10)
    check("free walk has zero free energy", abs(log_partition_line(env, SitePotential(beta=0.0), geom, 20)) < 1e-12)
    return 0 if ok else ex.EXIT_ASSERT


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    from .entropy import InfeasibleError
    from .transfer import BudgetError

    try:
        if args.cmd == "selftest":
            return selftest()
        cfg = _load(args)
        if args.cmd == "geometry":
            print(json.dumps(ex._jsonable(cfg.geometry().describe()), indent=2, sort_keys=True))
            return ex.EXIT_OK
        t0 = time.perf_counter()
        result = _dispatch(args, cfg)
        wall = (time.perf_counter() - t0) * 1000 if args.timing else None
        doc = ex.emit_outputs(result, cfg, args.out, args.prefix, wall)
        print(json.dumps(doc["metrics"], sort_keys=True))
        return result.exit_code
    except (BudgetError, InfeasibleError) as exc:
        log.error("%s", exc)
        return ex.EXIT_BUDGET
    except (ConfigError, ValueError) as exc:
        log.error("%s", exc)
        return ex.EXIT_ASSERT
    except OSError as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
