"""Command line: ``run`` a case file or ``compare`` two run directories."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from ..errors import ColocError
from .cases import compare_runs, run_case
from .config import parse_config


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="colocdem", description=__doc__)
    sub = ap.add_subparsers(dest="cmd", required=True)
    r = sub.add_parser("run", help="run a case configuration")
    r.add_argument("--config", required=True, help="path to a case .ini file")
    r.add_argument("--ranks", type=int, help="override [run] n_ranks")
    r.add_argument("--partition", choices=["colocated", "independent"])
    r.add_argument("--dummy", action="store_true", help="freeze particles, keep all exchanges")
    r.add_argument("--out", help="output directory (default: [output] dir)")
    r.add_argument("--steps", type=int, help="override [run] n_steps")
    r.add_argument("--snapshot", action="store_true", help="also write fluid.csv")
    r.add_argument("-q", "--quiet", action="store_true")
    c = sub.add_parser("compare", help="compare two run directories")
    c.add_argument("--a", required=True)
    c.add_argument("--b", required=True)
    c.add_argument("--tol-rel", type=float, default=1e-10)
    return ap


def cmd_run(args) -> int:
    cfg = parse_config(args.config)
    kw = {}
    if args.ranks is not None:
        kw["n_ranks"] = args.ranks
        kw["rank_grid"] = "auto"
    if args.partition:
        kw["partition"] = {"colocated": "colocated_uniform",
                           "independent": "independent_baseline"}[args.partition]
    if args.dummy:
        kw["dummy"] = True
    if args.steps is not None:
        kw["n_steps"] = args.steps
    if args.snapshot:
        kw["snapshot"] = True
    out = args.out or cfg.out_dir
    kw["out_dir"] = out
    cfg = cfg.replace(**kw)

    def progress(rep):
        if not args.quiet:
            print(f"step {rep.step:5d}  t={rep.time:.5f}  n_p={rep.n_particles}  "
                  f"|u_p|={float((rep.mean_velocity ** 2).sum()) ** 0.5:.5g}  "
                  f"cg={rep.pressure_iterations}", flush=True)

    res = run_case(cfg, out, progress)
    s = res.summary
    print(f"wrote {out}  ({s['steps']} steps, {s['wall_seconds']:.2f} s, "
          f"inter-physics messages {sum(s['inter_physics_messages_per_step'])})")
    return 0


def cmd_compare(args) -> int:
    rep = compare_runs(args.a, args.b, args.tol_rel)
    for q, v in rep["quantities"].items():
        flag = "ok  " if v["pass"] else "FAIL"
        extra = f"  at crossing {v['at_crossing']:.3e}" if "at_crossing" in v else ""
        print(f"{flag} {q:16s} max rel {v['max_rel']:.3e} (step {v['worst_step']}){extra}")
    print(json.dumps({"pass": rep["pass"], "crossing_step": rep["crossing_step"]}))
    return 0 if rep["pass"] else 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return cmd_run(args) if args.cmd == "run" else cmd_compare(args)
    except (ColocError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
