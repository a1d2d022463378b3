"""Hyperparameter sweep repeated over seeds, reporting the median RMSE per value.

    python scripts/run_sweep.py --axis n_channels --values 1,2,3 --seeds 5
"""

import argparse
import json
import logging
from pathlib import Path

import numpy as np

from urbanmind import SweepSpec, load_config, run_sweep
from urbanmind.experiments import SWEEP_AXES
from urbanmind.plots import emit_plots


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--config", default="configs/benchmark.json")
    parser.add_argument("--axis", choices=SWEEP_AXES, required=True)
    parser.add_argument("--values", required=True, help="comma-separated")
    parser.add_argument("--seeds", type=int, default=5)
    parser.add_argument("--out", default="runs/sweep")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")

    base = load_config(args.config)
    values = [v for v in args.values.split(",") if v]
    out = Path(args.out)
    rmse: dict[float, list[float]] = {}
    for seed in range(args.seeds):
        cfg = base.replace(eval={"seed": seed}, data={"seed": seed})
        table = run_sweep(SweepSpec(args.axis, values, cfg), out / f"seed{seed}")
        emit_plots(table, out / f"seed{seed}" / "plots")
        for row in table.rows:
            rmse.setdefault(row.value, []).append(row.rmse)

    medians = {v: float(np.median(r)) for v, r in rmse.items()}
    for v, med in medians.items():
        print(f"{args.axis}={v:g}  median RMSE {med:.5f}  ({' '.join(f'{x:.4f}' for x in rmse[v])})")
    (out / "summary.json").write_text(json.dumps(
        {"axis": args.axis, "rmse": {str(k): v for k, v in rmse.items()}, "median": {str(k): v for k, v in medians.items()}},
        indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
