"""Experiment runners: single runs, hyperparameter sweeps and ablations."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from .config import ABLATIONS, ExperimentConfig
from .errors import InvalidArgument
from .metrics import MetricReport
from .pipeline import Pipeline, Stage3Result

logger = logging.getLogger(__name__)

SWEEP_AXES = ("p_t", "p_s", "trainable_layers", "n_channels")


@dataclass
class RunOutcome:
    report: MetricReport
    unadapted: MetricReport
    pipeline: Pipeline
    result: Stage3Result


def report_for(config: ExperimentConfig, result: Stage3Result, adapted: bool = True) -> MetricReport:
    pred = result.predictions if adapted else result.unadapted
    extra = {"tta_fallbacks": float(result.fallbacks)}
    return MetricReport.from_predictions(
        pred, result.truth, fingerprint=config.fingerprint(), seed=config.eval.seed,
        ablations=config.eval.ablations, extra=extra,
    )


def run_experiment(config: ExperimentConfig, run_dir: str | Path | None = None) -> RunOutcome:
    """Full three-stage run; writes ``metrics.json`` into ``run_dir`` when given."""
    pipe = Pipeline(config, run_dir)
    result = pipe.run_all()
    report = report_for(config, result)
    unadapted = report_for(config, result, adapted=False)
    if run_dir is not None:
        report.save(Path(run_dir) / "metrics.json")
    logger.info("run %s: MAE %.4f RMSE %.4f", config.fingerprint(), report.mae, report.rmse)
    return RunOutcome(report, unadapted, pipe, result)


@dataclass
class SweepSpec:
    axis: str
    values: list
    base: ExperimentConfig = field(default_factory=ExperimentConfig)

    def __post_init__(self):
        if self.axis not in SWEEP_AXES:
            raise InvalidArgument(f"unknown sweep axis {self.axis!r}; choose from {SWEEP_AXES}")
        if not self.values:
            raise InvalidArgument("sweep needs at least one value")
        for v in self.values:
            self._check(v)

    def _check(self, v) -> None:
        if self.axis in ("p_t", "p_s") and not 0.0 < float(v) < 1.0:
            raise InvalidArgument(f"{self.axis} must be in (0, 1), got {v}")
        if self.axis == "trainable_layers" and not 0 <= int(v) <= self.base.backbone.L:
            raise InvalidArgument(f"trainable_layers must be in [0, {self.base.backbone.L}], got {v}")
        if self.axis == "n_channels" and int(v) < 1:
            raise InvalidArgument(f"n_channels must be >= 1, got {v}")

    def config_for(self, value) -> ExperimentConfig:
        if self.axis in ("p_t", "p_s"):
            return self.base.replace(mae={self.axis: float(value)})
        if self.axis == "trainable_layers":
            return self.base.replace(backbone={"l_frozen": self.base.backbone.L - int(value)})
        return self.base.replace(data={"n_channels": int(value)})


@dataclass
class SweepRow:
    value: float
    mae: float
    rmse: float
    fingerprint: str


@dataclass
class SweepTable:
    axis: str
    rows: list[SweepRow]
    seeds: dict[str, int]

    def to_dict(self) -> dict:
        return {
            "axis": self.axis,
            "seeds": self.seeds,
            "rows": [{"value": r.value, "mae": r.mae, "rmse": r.rmse, "fingerprint": r.fingerprint} for r in self.rows],
        }

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def run_sweep(sweep: SweepSpec, out_dir: str | Path | None = None) -> SweepTable:
    """One full experiment per axis value with the base config's seeds."""
    rows = []
    for value in sorted(sweep.values, key=float):
        cfg = sweep.config_for(value)
        run_dir = Path(out_dir) / f"{sweep.axis}={value}" if out_dir is not None else None
        outcome = run_experiment(cfg, run_dir)
        rows.append(SweepRow(float(value), outcome.report.mae, outcome.report.rmse, cfg.fingerprint()))
    seeds = {"eval": sweep.base.eval.seed, "data": sweep.base.data.seed}
    table = SweepTable(sweep.axis, rows, seeds)
    if out_dir is not None:
        table.save(Path(out_dir) / "sweep.json")
    return table


@dataclass
class AblationSpec:
    switches: tuple[str, ...]

    def __post_init__(self):
        self.switches = tuple(sorted(set(self.switches)))
        unknown = set(self.switches) - set(ABLATIONS)
        if unknown:
            raise InvalidArgument(f"unknown ablation switches {sorted(unknown)}")

    def apply(self, base: ExperimentConfig) -> ExperimentConfig:
        merged = tuple(sorted(set(base.eval.ablations) | set(self.switches)))
        return base.replace(eval={"ablations": merged})


def run_ablations(base: ExperimentConfig, switches=ABLATIONS, out_dir: str | Path | None = None) -> dict[str, MetricReport]:
    """The full model plus one run per switch; keys are ``"full"`` and switch names."""
    reports = {}
    for name in ("full", *switches):
        cfg = base if name == "full" else AblationSpec((name,)).apply(base)
        run_dir = Path(out_dir) / name if out_dir is not None else None
        reports[name] = run_experiment(cfg, run_dir).report
    return reports
