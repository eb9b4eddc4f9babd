"""Print the elastic net CV curve of a run directory (after ``fit-en``).

Marks the chosen lambda and the largest lambda within one standard error
of the minimum, for plotting RMSE against log(lambda).

    python scripts/en_cv_curve.py run
"""
import sys
from pathlib import Path

import numpy as np

from koasev.textio import read_csv, read_kv


def main(run="run"):
    rows = read_csv(Path(run) / "en/cv_curve.csv")
    lam = np.array([float(r["lambda"]) for r in rows])
    mean = np.array([float(r["mean_rmse"]) for r in rows])
    se = np.array([float(r["se"]) for r in rows])
    best = int(np.argmin(mean))
    one_se = int(np.flatnonzero(mean <= mean[best] + se[best]).min())  # grid is decreasing
    print(read_kv(Path(run) / "en/model.txt").get("lambda", ""), "chosen")
    print(f"{'log_lambda':>11}{'rmse':>8}{'se':>8}{'nonzero':>9}")
    for i, r in enumerate(rows):
        mark = " <- min" if i == best else " <- 1se" if i == one_se else ""
        print(f"{np.log(lam[i]):11.3f}{mean[i]:8.4f}{se[i]:8.4f}{int(r['n_nonzero']):9d}{mark}")


if __name__ == "__main__":
    main(*sys.argv[1:])
