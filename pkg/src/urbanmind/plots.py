"""Line plots with CSV twins for metric reports and sweep tables."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import InvalidArgument  # noqa: E402
from .experiments import SweepTable  # noqa: E402
from .metrics import MetricReport  # noqa: E402


def _out_dir(out_dir) -> Path:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InvalidArgument(f"cannot write plots to {out}: {exc}") from exc
    return out


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def plot_horizon(reports: dict[str, MetricReport], out_dir, name: str = "horizon_rmse") -> list[Path]:
    """RMSE per horizon step, one line per labelled report."""
    if not reports:
        raise InvalidArgument("no reports to plot")
    out = _out_dir(out_dir)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    rows = []
    for label, rep in reports.items():
        steps = list(range(1, len(rep.rmse_per_step) + 1))
        ax.plot(steps, rep.rmse_per_step, marker="o", label=label)
        rows += [[label, s, v] for s, v in zip(steps, rep.rmse_per_step)]
    ax.set_xlabel("horizon step")
    ax.set_ylabel("RMSE (normalized)")
    ax.legend(fontsize="small")
    fig.tight_layout()
    png = out / f"{name}.png"
    fig.savefig(png, dpi=120)
    plt.close(fig)
    csv_path = out / f"{name}.csv"
    _write_csv(csv_path, ["series", "step", "rmse"], rows)
    return [png, csv_path]


def plot_sweep(table: SweepTable, out_dir) -> list[Path]:
    if not table.rows:
        raise InvalidArgument("empty sweep table")
    out = _out_dir(out_dir)
    xs = [r.value for r in table.rows]
    ys = [r.rmse for r in table.rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(xs, ys, marker="o")
    ax.set_xlabel(table.axis)
    ax.set_ylabel("RMSE (normalized)")
    fig.tight_layout()
    png = out / f"sweep_{table.axis}.png"
    fig.savefig(png, dpi=120)
    plt.close(fig)
    csv_path = out / f"sweep_{table.axis}.csv"
    _write_csv(csv_path, [table.axis, "mae", "rmse"], [[r.value, r.mae, r.rmse] for r in table.rows])
    return [png, csv_path]


def emit_plots(source, out_dir) -> list[Path]:
    """Dispatch on a report, a mapping of reports, or a sweep table."""
    if isinstance(source, SweepTable):
        return plot_sweep(source, out_dir)
    if isinstance(source, MetricReport):
        return plot_horizon({"model": source}, out_dir)
    if isinstance(source, dict):
        return plot_horizon(source, out_dir)
    raise InvalidArgument(f"cannot plot {type(source).__name__}")
