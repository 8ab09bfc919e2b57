"""Command-line front end.

    driftlimit diffusion-validate [--config FILE] [--override K=V]... [--out DIR] [--scale S]
    driftlimit simulate           [...]
    driftlimit c-study            [...]
"""

from __future__ import annotations

import argparse
import sys

from .harness import parse_config, run_c_study, run_diffusion_validation, \
    run_two_fluid


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="driftlimit",
        description="Two-fluid plasma simulation kit near the drift-fluid limit")
    sub = parser.add_subparsers(dest="experiment", required=True)
    for name in ("diffusion-validate", "simulate", "c-study"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config document")
        p.add_argument("--override", action="append", default=[],
                       metavar="K=V", help="override a config key")
        p.add_argument("--out", help="output directory")
        p.add_argument("--scale", type=float,
                       help="grid-resolution multiplier (0.5 = desk scale)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config, args.override,
                           experiment=args.experiment,
                           out_dir=args.out, scale=args.scale)
    except (ValueError, OSError) as exc:
        print(f"driftlimit: {exc}", file=sys.stderr)
        return 2

    if cfg.experiment == "diffusion-validate":
        out = run_diffusion_validation(cfg)
        for tau, table in out["h_sweep"].items():
            s = table.slopes()
            print(f"h-sweep  tau={tau:.0e}: slopes "
                  f"L1={s['L1']:.3f} L2={s['L2']:.3f} Linf={s['Linf']:.3f}")
        s = out["tau_sweep"].slopes()
        print(f"tau-sweep: slopes L1={s['L1']:.3f} L2={s['L2']:.3f} "
              f"Linf={s['Linf']:.3f}")
    elif cfg.experiment == "simulate":
        out = run_two_fluid(cfg)
        for scheme, res in out["results"].items():
            status = ("diverged at step %d" % res.diverged_step
                      if res.diverged_step >= 0 else "completed")
            print(f"{scheme}: {res.steps} steps (dt={res.dt:.3e}), {status}")
    else:
        out = run_c_study(cfg)
        for (C, dt), verdict in sorted(out["verdicts"].items(), reverse=True):
            print(f"C={C:.0e} dt={dt:.0e}: {verdict}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
