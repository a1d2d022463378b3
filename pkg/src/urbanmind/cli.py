"""Command-line entry point: ``urbanmind <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ABLATIONS, ExperimentConfig, load_config, save_config
from .errors import InvalidArgument, StageOrderError
from .experiments import SWEEP_AXES, SweepSpec, report_for, run_ablations, run_sweep
from .grid_data import CityGrid, load_city, make_splits, partition_city, save_city, split_region_array
from .metrics import MetricReport
from .pipeline import Pipeline, Stage3Result, synthetic_city
from .plots import emit_plots

logger = logging.getLogger("urbanmind")


def _config(args) -> ExperimentConfig:
    return load_config(getattr(args, "config", None))


# ---------------------------------------------------------------- data


def cmd_data_gen(args) -> int:
    cfg = _config(args)
    overrides = {k: v for k, v in {
        "seed": args.seed, "n_days": args.n, "n_slots": args.t, "n_channels": args.c,
        "side": args.side, "stride": args.stride, "mode": args.mode,
        "grid_height": args.height, "grid_width": args.width,
    }.items() if v is not None}
    cfg = cfg.replace(data=overrides)
    grid, raw, split = synthetic_city(cfg.data)
    save_city(raw, grid, args.out)
    (Path(args.out) / "split.json").write_text(json.dumps(split.to_dict(), indent=2))
    print(f"wrote {len(raw)} regions of shape {raw[0].shape} to {args.out}")
    return 0


def cmd_data_import(args) -> int:
    with np.load(args.npz) as npz:
        arrays = {name: npz[name] for name in npz.files}
    grid = CityGrid(args.city, args.height, args.width)
    regions = partition_city(grid, args.side, args.stride)
    tensors = split_region_array(arrays, regions, args.city)
    save_city(tensors, grid, args.out)
    print(f"imported {len(tensors)} regions with channels {tensors[0].channel_names} to {args.out}")
    return 0


def cmd_data_split(args) -> int:
    _, tensors = load_city(args.city_dir)
    split = make_splits([t.region for t in tensors], args.mode, args.test_fraction, args.seed or 0)
    text = json.dumps(split.to_dict(), indent=2)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


# ---------------------------------------------------------------- training


def cmd_mae_train(args) -> int:
    cfg = _config(args)
    pipe = Pipeline(cfg, args.out)
    pipe.run_stage1()
    for name, hist in pipe.manifest.loss_histories.items():
        print(f"{name}: loss {hist[0]:.5f} -> {hist[-1]:.5f} over {len(hist) - 1} epochs")
    return 0


def _finish_run(cfg: ExperimentConfig, out: Path, result: Stage3Result) -> MetricReport:
    report = report_for(cfg, result)
    report.save(out / "metrics.json")
    return report


def cmd_run(args) -> int:
    out = Path(args.out)
    if args.stage in ("2", "3") and args.config is None and (out / "manifest.json").exists():
        cfg = ExperimentConfig.from_dict(json.loads((out / "manifest.json").read_text())["config"])
    else:
        cfg = _config(args)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    pipe = Pipeline(cfg, out)
    if args.stage in ("1", "all"):
        pipe.run_stage1()
    if args.stage == "2":
        if not (out / "stage1" / "tokens.f32").exists():
            raise StageOrderError(f"{out} has no stage-1 output; run --stage 1 first")
        pipe.load_stage1(out / "stage1")
    if args.stage in ("2", "all"):
        pipe.build_model()
        pipe.run_stage2()
    if args.stage == "3":
        ckpt = out / "stage2" / "model"
        if not ckpt.exists():
            raise StageOrderError(f"{out} has no stage-2 checkpoint; run --stage 2 first")
        pipe.load_stage2(ckpt)
    if args.stage in ("3", "all"):
        report = _finish_run(cfg, out, pipe.run_stage3())
        print(f"MAE {report.mae:.5f} RMSE {report.rmse:.5f} ({report.n_samples} test samples)")
    return 0


def cmd_eval(args) -> int:
    run = Path(args.run)
    manifest = json.loads((run / "manifest.json").read_text())
    cfg = ExperimentConfig.from_dict(manifest["config"])
    meta = json.loads((run / "stage3" / "predictions.json").read_text())
    shape = meta["shape"]
    pred = np.fromfile(run / "stage3" / "predictions.f32", dtype="<f4").reshape(shape)
    truth = np.fromfile(run / "stage3" / "truth.f32", dtype="<f4").reshape(shape)
    report = MetricReport.from_predictions(
        pred, truth, fingerprint=cfg.fingerprint(), seed=cfg.eval.seed, ablations=cfg.eval.ablations,
        extra={"tta_fallbacks": float(manifest["notes"].get("tta_fallbacks", 0))},
    )
    report.save(run / "metrics.json")
    print(report.to_json(), end="")
    if args.plots:
        emit_plots(report, run / "plots")
    return 0


def cmd_sweep(args) -> int:
    values = [v for v in args.values.split(",") if v]
    sweep = SweepSpec(args.axis, values, _config(args))
    table = run_sweep(sweep, args.out)
    for row in table.rows:
        print(f"{args.axis}={row.value:g}  MAE {row.mae:.5f}  RMSE {row.rmse:.5f}")
    if args.out:
        emit_plots(table, Path(args.out) / "plots")
    return 0


def cmd_ablate(args) -> int:
    switches = ABLATIONS if "all" in args.switch else tuple(args.switch)
    reports = run_ablations(_config(args), switches, args.out)
    for name, rep in reports.items():
        print(f"{name:28s} MAE {rep.mae:.5f}  RMSE {rep.rmse:.5f}")
    if args.out:
        emit_plots(reports, Path(args.out) / "plots")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="urbanmind", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    data = sub.add_parser("data", help="generate, import or split datasets")
    dsub = data.add_subparsers(dest="data_command", required=True)
    gen = dsub.add_parser("gen", help="write a synthetic city")
    gen.add_argument("--out", required=True)
    gen.add_argument("--config")
    gen.add_argument("--seed", type=int)
    gen.add_argument("--n", type=int, help="days")
    gen.add_argument("--t", type=int, help="slots per day")
    gen.add_argument("--c", type=int, help="channels")
    gen.add_argument("--side", type=int)
    gen.add_argument("--stride", type=int)
    gen.add_argument("--height", type=int)
    gen.add_argument("--width", type=int)
    gen.add_argument("--mode", choices=("standard", "zero_shot"))
    gen.set_defaults(func=cmd_data_gen)

    imp = dsub.add_parser("import", help="split pre-gridded (N, T, R, l, l) arrays into regions")
    imp.add_argument("--npz", required=True, help="one array per channel name")
    imp.add_argument("--out", required=True)
    imp.add_argument("--city", required=True)
    imp.add_argument("--height", type=int, required=True)
    imp.add_argument("--width", type=int, required=True)
    imp.add_argument("--side", type=int, default=10)
    imp.add_argument("--stride", type=int, default=10)
    imp.set_defaults(func=cmd_data_import)

    split = dsub.add_parser("split", help="print the region split of a city directory")
    split.add_argument("city_dir")
    split.add_argument("--mode", choices=("standard", "zero_shot"), default="zero_shot")
    split.add_argument("--test-fraction", type=float, default=0.25)
    split.add_argument("--seed", type=int, default=0)
    split.add_argument("--out")
    split.set_defaults(func=cmd_data_split)

    mae = sub.add_parser("mae", help="masked autoencoder stage")
    msub = mae.add_subparsers(dest="mae_command", required=True)
    mtrain = msub.add_parser("train")
    mtrain.add_argument("--config")
    mtrain.add_argument("--out", required=True)
    mtrain.set_defaults(func=cmd_mae_train)

    run = sub.add_parser("run", help="run pipeline stages into a run directory")
    run.add_argument("--config")
    run.add_argument("--out", required=True)
    run.add_argument("--stage", choices=("1", "2", "3", "all"), default="all")
    run.set_defaults(func=cmd_run)

    ev = sub.add_parser("eval", help="recompute metrics.json from a run's predictions")
    ev.add_argument("--run", required=True)
    ev.add_argument("--plots", action="store_true")
    ev.set_defaults(func=cmd_eval)

    sw = sub.add_parser("sweep", help="one run per value of a hyperparameter")
    sw.add_argument("--config")
    sw.add_argument("--axis", choices=SWEEP_AXES, required=True)
    sw.add_argument("--values", required=True, help="comma-separated")
    sw.add_argument("--out")
    sw.set_defaults(func=cmd_sweep)

    ab = sub.add_parser("ablate", help="full model plus ablation runs")
    ab.add_argument("--config")
    ab.add_argument("--switch", action="append", choices=(*ABLATIONS, "all"), required=True)
    ab.add_argument("--out")
    ab.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (InvalidArgument, StageOrderError, ValueError, OSError) as exc:
        print(f"urbanmind: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
