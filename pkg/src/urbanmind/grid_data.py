"""City grids, regions, dynamics tensors and their on-disk format.

Indices of grid cells are 1-based ``(row, col)`` pairs, as in the usual
``s_ij`` notation. Array axes inside :class:`UrbanDynamicsTensor` are 0-based
and ordered ``(day, slot, channel, row, col)``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from .errors import DatasetFormatError, DegenerateScaleError, InvalidArgument

logger = logging.getLogger(__name__)

DEFAULT_CHANNELS = ("speed", "inflow", "demand")
SPEED_CAP = 140.0
COUNT_PERCENTILE = 90.0

# synthetic driver constants (arbitrary physical units)
_LEVEL = 50.0
_SWING = 20.0
_GRAD_ROW = 0.5
_GRAD_COL = -0.3


@dataclass(frozen=True)
class CityGrid:
    name: str
    height: int
    width: int
    cell_size_km: float = 1.0

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise InvalidArgument(f"grid must be at least 1x1, got {self.height}x{self.width}")

    def contains(self, i: int, j: int) -> bool:
        return 1 <= i <= self.height and 1 <= j <= self.width


@dataclass(frozen=True)
class Region:
    top_left: tuple[int, int]
    side: int

    def __post_init__(self):
        if self.side < 1:
            raise InvalidArgument(f"region side must be >= 1, got {self.side}")
        object.__setattr__(self, "top_left", (int(self.top_left[0]), int(self.top_left[1])))

    def fits(self, grid: CityGrid) -> bool:
        i, j = self.top_left
        return grid.contains(i, j) and grid.contains(i + self.side - 1, j + self.side - 1)

    def to_dict(self) -> dict:
        return {"top_left": list(self.top_left), "side": self.side}

    @classmethod
    def from_dict(cls, d: dict) -> "Region":
        return cls(tuple(d["top_left"]), int(d["side"]))


@dataclass(frozen=True)
class ClipRule:
    """Upper bound rule for one channel: a fixed ``cap`` or a ``percentile`` of the data."""

    kind: Literal["cap", "percentile", "none"]
    value: float = 0.0

    def to_dict(self) -> dict:
        return {"kind": self.kind, "value": self.value}


def default_clip_policy(channel_names: Sequence[str]) -> dict[str, ClipRule]:
    """Speed is capped at 140; count-type channels at their 90th percentile."""
    policy = {}
    for name in channel_names:
        if name == "speed":
            policy[name] = ClipRule("cap", SPEED_CAP)
        else:
            policy[name] = ClipRule("percentile", COUNT_PERCENTILE)
    return policy


@dataclass(frozen=True)
class NormalizationScaler:
    per_channel_min: tuple[float, ...]
    per_channel_max: tuple[float, ...]
    clip_policy: dict[str, ClipRule] = field(default_factory=dict)

    def __post_init__(self):
        for lo, hi in zip(self.per_channel_min, self.per_channel_max):
            if not hi > lo:
                raise DegenerateScaleError(f"channel range [{lo}, {hi}] is empty")

    def _bounds(self, ndim_after_channel: int):
        shape = (-1,) + (1,) * ndim_after_channel
        lo = np.asarray(self.per_channel_min, dtype=np.float64).reshape(shape)
        hi = np.asarray(self.per_channel_max, dtype=np.float64).reshape(shape)
        return lo, hi

    def normalize(self, values: np.ndarray, channel_axis: int = 2) -> np.ndarray:
        lo, hi = self._bounds(values.ndim - channel_axis - 1)
        return 2.0 * (values - lo) / (hi - lo) - 1.0

    def denormalize(self, values: np.ndarray, channel_axis: int = 2) -> np.ndarray:
        lo, hi = self._bounds(values.ndim - channel_axis - 1)
        return (np.asarray(values, dtype=np.float64) + 1.0) * 0.5 * (hi - lo) + lo

    def to_dict(self) -> dict:
        return {
            "per_channel_min": list(self.per_channel_min),
            "per_channel_max": list(self.per_channel_max),
            "clip_policy": {k: v.to_dict() for k, v in self.clip_policy.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationScaler":
        return cls(
            tuple(float(x) for x in d["per_channel_min"]),
            tuple(float(x) for x in d["per_channel_max"]),
            {k: ClipRule(v["kind"], float(v["value"])) for k, v in d.get("clip_policy", {}).items()},
        )


@dataclass(frozen=True)
class UrbanDynamicsTensor:
    """Urban dynamics of one region, shape ``(N, T, C, side, side)``.

    The value array is made read-only on construction.
    """

    values: np.ndarray
    channel_names: tuple[str, ...]
    region: Region
    normalized: bool = False
    city: str = "synthetic"
    scaler: NormalizationScaler | None = None

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float32, copy=True)
        if values.ndim != 5:
            raise InvalidArgument(f"expected 5-D (N, T, C, l, l) values, got shape {values.shape}")
        n, t, c, a, b = values.shape
        side = self.region.side
        if (a, b) != (side, side):
            raise InvalidArgument(f"spatial shape {(a, b)} does not match region side {side}")
        if min(n, t, c) < 1:
            raise InvalidArgument(f"empty tensor of shape {values.shape}")
        if len(self.channel_names) != c:
            raise InvalidArgument(f"{len(self.channel_names)} channel names for {c} channels")
        if not np.all(np.isfinite(values)):
            raise InvalidArgument("dynamics tensor contains non-finite values")
        if self.normalized and (values.min() < -1.0 or values.max() > 1.0):
            raise InvalidArgument("normalized tensor has values outside [-1, 1]")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "channel_names", tuple(self.channel_names))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def n_days(self) -> int:
        return self.values.shape[0]

    @property
    def n_slots(self) -> int:
        return self.values.shape[1]

    @property
    def n_channels(self) -> int:
        return self.values.shape[2]

    def channel_index(self, name: str) -> int:
        try:
            return self.channel_names.index(name)
        except ValueError:
            raise InvalidArgument(f"unknown channel {name!r}; have {self.channel_names}") from None

    def select_channels(self, names: Sequence[str]) -> "UrbanDynamicsTensor":
        idx = [self.channel_index(n) for n in names]
        scaler = None
        if self.scaler is not None:
            scaler = NormalizationScaler(
                tuple(self.scaler.per_channel_min[i] for i in idx),
                tuple(self.scaler.per_channel_max[i] for i in idx),
                {n: self.scaler.clip_policy[n] for n in names if n in self.scaler.clip_policy},
            )
        return UrbanDynamicsTensor(
            self.values[:, :, idx], tuple(names), self.region, self.normalized, self.city, scaler
        )

    def replace_values(self, values: np.ndarray, **changes) -> "UrbanDynamicsTensor":
        kwargs = dict(
            channel_names=self.channel_names,
            region=self.region,
            normalized=self.normalized,
            city=self.city,
            scaler=self.scaler,
        )
        kwargs.update(changes)
        return UrbanDynamicsTensor(values, **kwargs)


@dataclass(frozen=True)
class SplitSpec:
    train_regions: tuple[Region, ...]
    test_regions: tuple[Region, ...]
    mode: Literal["standard", "zero_shot"]
    train_day_fraction: float = 0.8

    def __post_init__(self):
        train, test = set(self.train_regions), set(self.test_regions)
        if self.mode == "zero_shot" and train & test:
            raise InvalidArgument("zero-shot split shares regions between train and test")
        if self.mode == "standard" and not test <= train:
            raise InvalidArgument("standard split has test regions outside the training set")

    def day_split(self, n_days: int) -> tuple[np.ndarray, np.ndarray]:
        """Day indices used for training and testing.

        Zero-shot uses every day on both sides (the regions differ); standard
        mode trains on the first ``train_day_fraction`` of days.
        """
        days = np.arange(n_days)
        if self.mode == "zero_shot":
            return days, days
        n_train = int(math.floor(self.train_day_fraction * n_days + 0.5))
        n_train = min(max(n_train, 1), n_days - 1)
        return days[:n_train], days[n_train:]

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "train_day_fraction": self.train_day_fraction,
            "train_regions": [r.to_dict() for r in self.train_regions],
            "test_regions": [r.to_dict() for r in self.test_regions],
        }


# ---------------------------------------------------------------- operations


def partition_city(grid: CityGrid, side: int, stride: int) -> list[Region]:
    """Slide an ``side x side`` window over the grid, row-major."""
    if side < 1 or side > min(grid.height, grid.width):
        raise InvalidArgument(f"side {side} does not fit a {grid.height}x{grid.width} grid")
    if stride < 1:
        raise InvalidArgument(f"stride must be >= 1, got {stride}")
    return [
        Region((i, j), side)
        for i in range(1, grid.height - side + 2, stride)
        for j in range(1, grid.width - side + 2, stride)
    ]


def resolve_clip_bounds(
    tensors: Sequence[UrbanDynamicsTensor], policy: dict[str, ClipRule] | None = None
) -> np.ndarray:
    """Per-channel upper bounds, with percentiles taken over all given tensors jointly."""
    first = tensors[0]
    policy = policy if policy is not None else default_clip_policy(first.channel_names)
    bounds = np.full(first.n_channels, np.inf)
    for c, name in enumerate(first.channel_names):
        rule = policy.get(name, ClipRule("none"))
        if rule.kind == "cap":
            bounds[c] = rule.value
        elif rule.kind == "percentile":
            pooled = np.concatenate([t.values[:, :, c].ravel() for t in tensors])
            if pooled.size == 0:
                raise InvalidArgument(f"channel {name!r} is empty")
            bounds[c] = np.percentile(pooled.astype(np.float64), rule.value)
    return bounds


def clip_outliers(
    raw: UrbanDynamicsTensor,
    policy: dict[str, ClipRule] | None = None,
    bounds: np.ndarray | None = None,
) -> UrbanDynamicsTensor:
    """Clip each channel from above; values are never increased.

    ``bounds`` overrides the policy with precomputed upper bounds (e.g. fitted
    over a whole city with :func:`resolve_clip_bounds`).
    """
    if raw.normalized:
        raise InvalidArgument("clip_outliers expects raw (unnormalized) data")
    if raw.values.size == 0:
        raise InvalidArgument("empty channel")
    if bounds is None:
        bounds = resolve_clip_bounds([raw], policy)
    upper = np.asarray(bounds, dtype=np.float64).reshape(1, 1, -1, 1, 1)
    clipped = np.minimum(raw.values.astype(np.float64), upper)
    return raw.replace_values(clipped.astype(np.float32))


def fit_scaler(
    tensors: Sequence[UrbanDynamicsTensor], clip_policy: dict[str, ClipRule] | None = None
) -> NormalizationScaler:
    c = tensors[0].n_channels
    stacked = [t.values.reshape(-1, c, t.region.side ** 2) for t in tensors]
    lo = np.min([v.min(axis=(0, 2)) for v in stacked], axis=0)
    hi = np.max([v.max(axis=(0, 2)) for v in stacked], axis=0)
    for k in range(c):
        if not hi[k] > lo[k]:
            raise DegenerateScaleError(f"channel {tensors[0].channel_names[k]!r} is constant")
    return NormalizationScaler(
        tuple(float(x) for x in lo), tuple(float(x) for x in hi), dict(clip_policy or {})
    )


def apply_scaler(raw: UrbanDynamicsTensor, scaler: NormalizationScaler) -> UrbanDynamicsTensor:
    scaled = scaler.normalize(raw.values.astype(np.float64))
    # float rounding can push endpoints a hair outside the range
    scaled = np.clip(scaled, -1.0, 1.0).astype(np.float32)
    return raw.replace_values(scaled, normalized=True, scaler=scaler)


def minmax_normalize(raw: UrbanDynamicsTensor) -> tuple[UrbanDynamicsTensor, NormalizationScaler]:
    """Map each channel affinely onto [-1, 1] using its own min and max."""
    if raw.normalized:
        raise InvalidArgument("tensor is already normalized")
    scaler = fit_scaler([raw])
    return apply_scaler(raw, scaler), scaler


def preprocess_city(
    tensors: Sequence[UrbanDynamicsTensor], policy: dict[str, ClipRule] | None = None
) -> tuple[list[UrbanDynamicsTensor], NormalizationScaler]:
    """Clip then normalize a set of regions with statistics pooled over all of them."""
    policy = policy if policy is not None else default_clip_policy(tensors[0].channel_names)
    bounds = resolve_clip_bounds(tensors, policy)
    clipped = [clip_outliers(t, bounds=bounds) for t in tensors]
    scaler = fit_scaler(clipped, policy)
    return [apply_scaler(t, scaler) for t in clipped], scaler


def make_splits(
    regions: Sequence[Region],
    mode: str,
    test_fraction: float = 0.25,
    seed: int = 0,
    train_day_fraction: float = 0.8,
) -> SplitSpec:
    regions = list(regions)
    if not regions:
        raise InvalidArgument("no regions to split")
    if mode == "standard":
        return SplitSpec(tuple(regions), tuple(regions), "standard", train_day_fraction)
    if mode != "zero_shot":
        raise InvalidArgument(f"unknown split mode {mode!r}")
    if len(regions) < 2:
        raise InvalidArgument("zero-shot split needs at least two regions")
    if not 0.0 < test_fraction < 1.0:
        raise InvalidArgument(f"test_fraction must be in (0, 1), got {test_fraction}")
    n_test = int(math.floor(test_fraction * len(regions) + 0.5))
    n_test = min(max(n_test, 1), len(regions) - 1)
    rng = np.random.default_rng(seed)
    test_idx = set(rng.permutation(len(regions))[:n_test].tolist())
    train = tuple(r for k, r in enumerate(regions) if k not in test_idx)
    test = tuple(r for k, r in enumerate(regions) if k in test_idx)
    return SplitSpec(train, test, "zero_shot", train_day_fraction)


def channel_names_for(n_channels: int) -> tuple[str, ...]:
    names = list(DEFAULT_CHANNELS[:n_channels])
    names += [f"channel_{k}" for k in range(len(names), n_channels)]
    return tuple(names)


def generate_synthetic(
    region: Region,
    n_days: int,
    n_slots: int,
    n_channels: int,
    seed: int,
    *,
    noise: float = 0.05,
    coupling: float = 1.0,
    lag: int = 1,
    phase: float = 0.0,
    amplitude: float = 1.0,
    event_scale: float = 0.0,
    channel_names: Sequence[str] | None = None,
    city: str = "synthetic",
) -> UrbanDynamicsTensor:
    """Seeded synthetic dynamics with cross-channel structure.

    Channel 0 (the driver) at absolute slot ``tau = n*T + t`` and global cell
    ``(gi, gj)`` is::

        50 + 20*amplitude*sin(2*pi*(t + phase)/T) + 0.5*gi - 0.3*gj
            + events(tau) + noise*20*eps

    ``events`` adds one Gaussian bump per day (random centre, random signed
    height scaled by ``event_scale``), uniform over the region. Channel ``c >= 1``
    is an affine image of the noiseless driver delayed by ``c*lag`` slots
    (negative ``lag`` makes it lead)::

        x_c(tau) = b_c + a_c*coupling*(driver(tau - c*lag) - 50) + noise*20*a_c*eps
    """
    if min(n_days, n_slots, n_channels) < 1:
        raise InvalidArgument("n_days, n_slots and n_channels must be >= 1")
    names = tuple(channel_names) if channel_names is not None else channel_names_for(n_channels)
    rng = np.random.default_rng(seed)
    side = region.side
    gi = region.top_left[0] + np.arange(side)
    gj = region.top_left[1] + np.arange(side)
    spatial = _GRAD_ROW * gi[:, None] + _GRAD_COL * gj[None, :]

    max_shift = abs(lag) * (n_channels - 1)
    tau = np.arange(-max_shift, n_days * n_slots + max_shift)
    t_of_day = np.mod(tau, n_slots)
    temporal = _LEVEL + _SWING * amplitude * np.sin(2.0 * np.pi * (t_of_day + phase) / n_slots)
    if event_scale > 0:
        first_day = int(np.floor(tau[0] / n_slots))
        last_day = int(np.floor(tau[-1] / n_slots))
        n_ev = last_day - first_day + 1
        centres = (np.arange(first_day, last_day + 1) * n_slots
                   + rng.uniform(0, n_slots, size=n_ev))
        heights = rng.normal(0.0, _SWING * event_scale, size=n_ev)
        width = 1.5
        bumps = heights[None, :] * np.exp(-0.5 * ((tau[:, None] - centres[None, :]) / width) ** 2)
        temporal = temporal + bumps.sum(axis=1)
    driver = temporal[:, None, None] + spatial[None, :, :]

    out = np.empty((n_days * n_slots, n_channels, side, side), dtype=np.float64)
    inner = slice(max_shift, max_shift + n_days * n_slots)
    out[:, 0] = driver[inner] + noise * _SWING * rng.standard_normal(out[:, 0].shape)
    for c in range(1, n_channels):
        a_c, b_c = 1.5 + 0.5 * c, 60.0 + 40.0 * c
        shift = c * lag
        delayed = driver[max_shift - shift: max_shift - shift + n_days * n_slots]
        eps = rng.standard_normal(delayed.shape)
        out[:, c] = b_c + a_c * coupling * (delayed - _LEVEL) + noise * _SWING * a_c * eps
    values = out.reshape(n_days, n_slots, n_channels, side, side)
    return UrbanDynamicsTensor(values.astype(np.float32), names, region, False, city)


# ---------------------------------------------------------------- persistence

META_NAME = "meta"
VALUES_NAME = "values.f32"


def save_dataset(tensor: UrbanDynamicsTensor, path: str | Path) -> Path:
    """Write ``meta`` (JSON) and ``values.f32`` (little-endian float32, row-major)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    n, t, c, side, _ = tensor.shape
    meta = {
        "city": tensor.city,
        "region": tensor.region.to_dict(),
        "N": n,
        "T": t,
        "C": c,
        "channel_names": list(tensor.channel_names),
        "normalized": tensor.normalized,
        "scaler": tensor.scaler.to_dict() if tensor.scaler is not None else None,
    }
    (path / META_NAME).write_text(json.dumps(meta, indent=2))
    tensor.values.astype("<f4").tofile(path / VALUES_NAME)
    return path


def load_dataset(path: str | Path) -> UrbanDynamicsTensor:
    path = Path(path)
    try:
        meta = json.loads((path / META_NAME).read_text())
        region = Region.from_dict(meta["region"])
        shape = (int(meta["N"]), int(meta["T"]), int(meta["C"]), region.side, region.side)
        names = tuple(meta["channel_names"])
        normalized = bool(meta["normalized"])
    except FileNotFoundError:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise DatasetFormatError(f"corrupt dataset header in {path}: {exc}") from exc
    raw = np.fromfile(path / VALUES_NAME, dtype="<f4")
    expected = int(np.prod(shape))
    if raw.size != expected:
        raise DatasetFormatError(
            f"{path}: metadata declares shape {shape} ({expected} values), payload has {raw.size}"
        )
    scaler = NormalizationScaler.from_dict(meta["scaler"]) if meta.get("scaler") else None
    try:
        return UrbanDynamicsTensor(
            raw.reshape(shape), names, region, normalized, meta.get("city", "unknown"), scaler
        )
    except InvalidArgument as exc:
        raise DatasetFormatError(f"{path}: {exc}") from exc


def region_dirname(region: Region) -> str:
    return f"region_{region.top_left[0]}_{region.top_left[1]}"


def save_city(
    tensors: Sequence[UrbanDynamicsTensor], grid: CityGrid, path: str | Path
) -> Path:
    """A city directory: ``city.json`` plus one dataset directory per region."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for t in tensors:
        save_dataset(t, path / region_dirname(t.region))
    index = {
        "city": grid.name,
        "height": grid.height,
        "width": grid.width,
        "cell_size_km": grid.cell_size_km,
        "regions": [region_dirname(t.region) for t in tensors],
    }
    (path / "city.json").write_text(json.dumps(index, indent=2))
    return path


def load_city(path: str | Path) -> tuple[CityGrid, list[UrbanDynamicsTensor]]:
    path = Path(path)
    try:
        index = json.loads((path / "city.json").read_text())
        grid = CityGrid(index["city"], int(index["height"]), int(index["width"]),
                        float(index.get("cell_size_km", 1.0)))
    except (ValueError, KeyError, TypeError) as exc:
        raise DatasetFormatError(f"corrupt city index in {path}: {exc}") from exc
    return grid, [load_dataset(path / name) for name in index["regions"]]


def split_region_array(
    arrays: dict[str, np.ndarray],
    regions: Sequence[Region],
    city: str = "imported",
) -> list[UrbanDynamicsTensor]:
    """Turn per-channel city arrays shaped ``(N, T, R, l, l)`` into R region tensors.

    This is the layout of pre-gridded city exports such as ``(162, 12, 63, 10, 10)``.
    """
    names = tuple(arrays)
    if not names:
        raise InvalidArgument("no channels given")
    shapes = {a.shape for a in arrays.values()}
    if len(shapes) != 1:
        raise DatasetFormatError(f"channel arrays disagree in shape: {sorted(shapes)}")
    (shape,) = shapes
    if len(shape) != 5 or shape[2] != len(regions):
        raise DatasetFormatError(
            f"expected (N, T, R={len(regions)}, l, l) arrays, got {shape}"
        )
    stacked = np.stack([np.asarray(arrays[n], dtype=np.float32) for n in names], axis=3)
    return [
        UrbanDynamicsTensor(stacked[:, :, r], names, region, False, city)
        for r, region in enumerate(regions)
    ]
