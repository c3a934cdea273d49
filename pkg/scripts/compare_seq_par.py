"""Sequential versus parallel runs of case1: deviation table and crossing continuity."""
import argparse
from pathlib import Path

import numpy as np

from colocdem.bench.cases import compare_runs, read_timeseries, run_case
from colocdem.bench.config import parse_config

ROOT = Path(__file__).resolve().parent.parent


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=str(ROOT / "configs" / "case1.ini"))
    ap.add_argument("--out", default="runs/seqpar")
    ap.add_argument("--ranks", type=int, nargs="+", default=[2, 4])
    ap.add_argument("--tol-rel", type=float, default=1e-10)
    args = ap.parse_args()
    cfg = parse_config(args.config)
    seq = Path(args.out) / "seq"
    run_case(cfg.replace(n_ranks=1, rank_grid="auto"), seq)
    ok = True
    for n in args.ranks:
        for mode in ("colocated_uniform", "independent_baseline"):
            par = Path(args.out) / f"par{n}_{mode.split('_')[0]}"
            run_case(cfg.replace(n_ranks=n, rank_grid="auto", partition=mode), par)
            rep = compare_runs(seq, par, args.tol_rel)
            worst = max(v["max_rel"] for v in rep["quantities"].values())
            print(f"{n} ranks {mode:22s} worst rel dev {worst:.3e}  crossing step "
                  f"{rep['crossing_step']}  {'PASS' if rep['pass'] else 'FAIL'}")
            ok &= rep["pass"]
            c = rep["crossing_step"]
            if c is not None:
                ts = read_timeseries(par / "timeseries.csv")
                u = np.stack([ts[f"u_p_{k}"] for k in "xyz"], axis=1)
                du = np.linalg.norm(np.diff(u, axis=0), axis=1)
                i = c - 2
                around = du[max(i - 2, 0):i + 3]
                print(f"    jump at crossing {du[i]:.3e}, median of 5 around {np.median(around):.3e}")
    raise SystemExit(0 if ok else 1)


if __name__ == "__main__":
    main()
