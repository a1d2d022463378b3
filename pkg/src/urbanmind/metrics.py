"""Error metrics and the per-run metric report."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidArgument


def _check(pred: np.ndarray, truth: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise InvalidArgument(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    if pred.size == 0:
        raise InvalidArgument("cannot score an empty prediction set")
    return pred, truth


def mae_metric(pred, truth) -> float:
    pred, truth = _check(pred, truth)
    return float(np.mean(np.abs(pred - truth)))


def rmse_metric(pred, truth) -> float:
    pred, truth = _check(pred, truth)
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


@dataclass
class MetricReport:
    """MAE/RMSE per horizon step and over all steps, in normalized units.

    Serialized with sorted keys and fixed float formatting, so identical inputs
    give byte-identical files.
    """

    fingerprint: str
    seed: int
    ablations: tuple[str, ...]
    mae: float
    rmse: float
    mae_per_step: list[float]
    rmse_per_step: list[float]
    n_samples: int
    extra: dict[str, float] = field(default_factory=dict)

    @classmethod
    def from_predictions(cls, pred, truth, *, fingerprint: str, seed: int, ablations=(), extra=None) -> "MetricReport":
        """``pred``/``truth`` are ``(S, m, ...)``; step metrics pool samples and cells."""
        pred, truth = _check(pred, truth)
        if pred.ndim < 2:
            raise InvalidArgument("predictions need a horizon axis at position 1")
        m = pred.shape[1]
        return cls(
            fingerprint=fingerprint,
            seed=int(seed),
            ablations=tuple(sorted(ablations)),
            mae=mae_metric(pred, truth),
            rmse=rmse_metric(pred, truth),
            mae_per_step=[mae_metric(pred[:, k], truth[:, k]) for k in range(m)],
            rmse_per_step=[rmse_metric(pred[:, k], truth[:, k]) for k in range(m)],
            n_samples=int(pred.shape[0]),
            extra=dict(extra or {}),
        )

    def to_dict(self) -> dict:
        def r(x):
            return float(f"{x:.10g}")

        return {
            "fingerprint": self.fingerprint,
            "seed": self.seed,
            "ablations": list(self.ablations),
            "mae": r(self.mae),
            "rmse": r(self.rmse),
            "mae_per_step": [r(x) for x in self.mae_per_step],
            "rmse_per_step": [r(x) for x in self.rmse_per_step],
            "n_samples": self.n_samples,
            "extra": {k: r(v) for k, v in sorted(self.extra.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(
            fingerprint=d["fingerprint"],
            seed=d["seed"],
            ablations=tuple(d["ablations"]),
            mae=d["mae"],
            rmse=d["rmse"],
            mae_per_step=list(d["mae_per_step"]),
            rmse_per_step=list(d["rmse_per_step"]),
            n_samples=d["n_samples"],
            extra=dict(d.get("extra", {})),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "MetricReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()
