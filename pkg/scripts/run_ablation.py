"""Full model versus every ablation switch over several seeds.

    python scripts/run_ablation.py --config configs/benchmark.json --seeds 3 --out runs/ablation
"""

import argparse
import json
import logging
from pathlib import Path

import numpy as np

from urbanmind import ABLATIONS, load_config, run_ablations
from urbanmind.plots import emit_plots


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--config", default="configs/benchmark.json")
    parser.add_argument("--seeds", type=int, default=3)
    parser.add_argument("--switch", action="append", choices=ABLATIONS)
    parser.add_argument("--out", default="runs/ablation")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")

    base = load_config(args.config)
    switches = tuple(args.switch) if args.switch else ABLATIONS
    out = Path(args.out)
    table: dict[str, list[float]] = {}
    for seed in range(args.seeds):
        cfg = base.replace(eval={"seed": seed}, data={"seed": seed})
        reports = run_ablations(cfg, switches, out / f"seed{seed}")
        for name, rep in reports.items():
            table.setdefault(name, []).append(rep.rmse)
        emit_plots(reports, out / f"seed{seed}" / "plots")

    print(f"{'variant':28s} {'median RMSE':>12s}  per seed")
    for name, values in table.items():
        print(f"{name:28s} {np.median(values):12.5f}  " + " ".join(f"{v:.4f}" for v in values))
    (out / "summary.json").write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
