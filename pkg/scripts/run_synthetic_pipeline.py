"""Run every stage on a synthetic cohort and print the comparison table.

    python scripts/run_synthetic_pipeline.py --seed 0 --out run --patients 1500
"""
import argparse
import time

from koasev import pipeline as pl


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="run")
    ap.add_argument("--patients", type=int, default=1500)
    ap.add_argument("--icc", type=float, default=0.265)
    args = ap.parse_args()

    cfg = pl.PipelineConfig(seed=args.seed, synthetic_patients=args.patients, synthetic_icc=args.icc)
    t0 = time.perf_counter()
    res = pl.run_pipeline(cfg, args.out)
    base = res["baseline"].overall
    print(f"{'model':<16}" + "".join(f"{'L' + str(k):>8}" for k in range(5)) + f"{'overall':>9}{'gain':>8}")
    for rep in [*res["reports"], res["baseline"]]:
        cells = "".join(f"{r:8.3f}" for r in rep.rmse_by_level)
        print(f"{rep.label:<16}{cells}{rep.overall:9.3f}{1 - rep.overall / base:8.1%}")
    print(f"{time.perf_counter() - t0:.1f} s, outputs in {args.out}")


if __name__ == "__main__":
    main()
