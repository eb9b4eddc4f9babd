"""Validation RMSE of the random forest as the number of trees grows.

Needs a run directory that has been through ``preprocess``. Trees are
seeded by index, so each forest extends the previous one.

    python scripts/forest_tree_sweep.py run 10 25 50 100 200
"""
import sys
from pathlib import Path

from koasev import forest as rf
from koasev import pipeline as pl
from koasev.metrics import rmse


def main(run="run", *sizes):
    sizes = [int(s) for s in sizes] or [10, 25, 50, 100, 200]
    saved = Path(run) / "config.txt"
    cfg = pl.load_config(saved) if saved.exists() else pl.PipelineConfig()
    mtry = None if cfg.rf_mtry == "auto" else int(cfg.rf_mtry)
    tr, va = pl.RunDir(run).design()
    seed = pl.stage_seed(cfg.seed, "fit-rf")
    print(f"{'n_trees':>8}{'valid_rmse':>12}{'oob_rmse':>10}")
    for n in sizes:
        f = rf.fit(tr.X, tr.y, rf.ForestConfig(n_trees=n, mtry=mtry, min_leaf=cfg.rf_min_leaf, seed=seed))
        print(f"{n:8d}{rmse(f.predict(va.X), va.y):12.4f}{f.oob_rmse:10.4f}")


if __name__ == "__main__":
    main(*sys.argv[1:])
