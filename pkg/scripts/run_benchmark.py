"""Run the simulation benchmark and write the metrics table.

    python3 scripts/run_benchmark.py --out runs/bench --replicates 10 --threads 1
"""
import argparse
from dataclasses import asdict
from pathlib import Path

from tsbcf.io import write_table
from tsbcf.simbench import BenchmarkConfig, run_benchmark


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/bench")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--replicates", type=int, default=10)
    p.add_argument("--n-burn", type=int, default=500)
    p.add_argument("--n-draws", type=int, default=500)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rr-curve", action="store_true", help="also record the standardized RR curve (slower)")
    args = p.parse_args()
    bc = BenchmarkConfig(n=args.n, replicates=args.replicates, n_burn=args.n_burn, n_draws=args.n_draws,
                         threads=args.threads, seed=args.seed,
                         standardized_curve=args.rr_curve)

    def progress(res):
        scen, rep, out = res
        print(scen, rep, {m: round(v.get("rmse", float("nan")), 3) for m, v in out.items()}, flush=True)

    table, _ = run_benchmark(bc, progress=progress)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_table(out / "metrics.csv", {k: [getattr(r, k) for r in table] for k in asdict(table[0])})
    for r in table:
        print(f"{r.scenario} {r.model:10s} rmse={r.rmse:.3f} coverage={r.coverage:.3f} "
              f"length={r.interval_length:.3f} roughness={r.roughness:.4f} "
              f"observed-roughness={r.roughness_observed:.4f}")


if __name__ == "__main__":
    main()
