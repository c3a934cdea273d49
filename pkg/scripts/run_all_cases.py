"""Run every reference case at several rank counts in both partition modes.

Writes one run directory per (case, mode, ranks) under --out and prints a
table of inter-physics exchange volumes and wall times.
"""
import argparse
from pathlib import Path

from colocdem.bench.cases import run_case
from colocdem.bench.config import parse_config
from colocdem.runtime.ledger import LOCAL, REMOTE

ROOT = Path(__file__).resolve().parent.parent


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/all")
    ap.add_argument("--ranks", type=int, nargs="+", default=[1, 2, 4, 8])
    ap.add_argument("--cases", nargs="+", default=["case1", "case2", "case3"])
    ap.add_argument("--steps", type=int, help="override n_steps")
    args = ap.parse_args()
    print(f"{'case':6s} {'mode':12s} {'ranks':>5s} {'remote_msgs':>11s} {'remote_bytes':>12s} "
          f"{'local_bytes':>12s} {'wall_s':>7s}")
    for name in args.cases:
        base = parse_config(ROOT / "configs" / f"{name}.ini")
        for mode in ("colocated_uniform", "independent_baseline"):
            for n in args.ranks:
                if mode == "independent_baseline" and n == 1:
                    continue
                cfg = base.replace(n_ranks=n, rank_grid="auto", partition=mode)
                if args.steps:
                    cfg = cfg.replace(n_steps=args.steps)
                out = Path(args.out) / f"{name}_{mode.split('_')[0]}_{n}"
                try:
                    res = run_case(cfg, out)
                except Exception as exc:  # report and continue with the next run
                    print(f"{name:6s} {mode[:12]:12s} {n:5d} failed: {exc}")
                    continue
                t = res.summary["ledger_totals"]
                print(f"{name:6s} {mode[:12]:12s} {n:5d} {t[REMOTE]['messages']:11d} "
                      f"{t[REMOTE]['bytes']:12d} {t[LOCAL]['bytes']:12d} "
                      f"{res.summary['wall_seconds']:7.2f}")


if __name__ == "__main__":
    main()
