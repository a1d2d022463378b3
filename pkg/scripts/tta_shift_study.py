"""Pre- versus post-adaptation RMSE on test regions with a shifted generator.

Trains once per seed, then evaluates the configured adaptation policy (and any
extra learning rates given with --lr) on the same stage-2 model.

    python scripts/tta_shift_study.py --seeds 10
"""

import argparse
import dataclasses

import numpy as np

from urbanmind import Pipeline, load_config, rmse_metric


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--config", default="configs/benchmark.json")
    parser.add_argument("--seeds", type=int, default=10)
    parser.add_argument("--lr", type=float, action="append", default=[])
    parser.add_argument("--epochs", type=int)
    args = parser.parse_args()

    base = load_config(args.config)
    policies = {"default": base.tta}
    for lr in args.lr:
        policies[f"lr={lr:g}"] = dataclasses.replace(base.tta, lr=lr)
    if args.epochs:
        policies = {k: dataclasses.replace(p, epochs=args.epochs) for k, p in policies.items()}

    wins = dict.fromkeys(policies, 0)
    for seed in range(args.seeds):
        pipe = Pipeline(base.replace(eval={"seed": seed}, data={"seed": seed}))
        pipe.run_stage1()
        pipe.build_model()
        pipe.run_stage2()
        for name, policy in policies.items():
            res = pipe.run_stage3(policy)
            pre, post = rmse_metric(res.unadapted, res.truth), rmse_metric(res.predictions, res.truth)
            dec = np.mean([np.mean(np.diff(c) < 0) for c in res.recon_losses])
            wins[name] += post <= pre
            print(f"seed {seed} {name:10s} pre {pre:.5f} post {post:.5f} decreasing steps {dec:.2f}", flush=True)
    for name, w in wins.items():
        print(f"{name:10s} post <= pre in {w}/{args.seeds} seeds")


if __name__ == "__main__":
    main()
