"""Channel-sensitive spatial, channel-sensitive temporal and global masking.

All masks index a single sample of shape ``(T, C, l, l)`` with 0-based
``(t, c, i, j)`` tuples. Counts use round-half-up with a minimum of one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
import torch

from .errors import InvalidArgument

Strategy = Literal["spatial", "temporal", "global"]
STRATEGIES: tuple[Strategy, ...] = ("spatial", "temporal", "global")


def mask_count(ratio: float, n: int) -> int:
    """``round(ratio * n)`` rounding halves up, clamped to ``[1, n]``."""
    return min(max(int(math.floor(ratio * n + 0.5)), 1), n)


@dataclass(frozen=True, eq=False)
class MaskSpec:
    strategy: Strategy
    indices: np.ndarray  # (K, 4) int64, lexicographically sorted, unique
    shape: tuple[int, int, int, int]
    p_s: float | None = None
    p_t: float | None = None

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).reshape(-1, 4)
        if idx.size and (np.any(idx < 0) or np.any(idx >= np.asarray(self.shape))):
            raise InvalidArgument("mask index out of bounds")
        idx = np.unique(idx, axis=0)
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))

    def __len__(self) -> int:
        return len(self.indices)

    def __eq__(self, other) -> bool:
        if not isinstance(other, MaskSpec):
            return NotImplemented
        return (self.strategy, self.shape, self.p_s, self.p_t) == (
            other.strategy, other.shape, other.p_s, other.p_t
        ) and np.array_equal(self.indices, other.indices)

    def as_set(self) -> set[tuple[int, int, int, int]]:
        return {tuple(int(v) for v in row) for row in self.indices}

    def to_bool(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=bool)
        if len(self.indices):
            out[tuple(self.indices.T)] = True
        return out

    def to_log(self) -> dict:
        return {"strategy": self.strategy, "p_s": self.p_s, "p_t": self.p_t,
                "shape": list(self.shape), "n_masked": len(self)}

    @classmethod
    def empty(cls, shape) -> "MaskSpec":
        return cls("spatial", np.zeros((0, 4), dtype=np.int64), tuple(shape))


def _check_ratio(name: str, value: float) -> None:
    if not 0.0 < value < 1.0:
        raise InvalidArgument(f"{name} must lie in (0, 1), got {value}")


def _check_shape(shape) -> tuple[int, int, int, int]:
    if len(shape) != 4 or shape[2] != shape[3] or min(shape) < 1:
        raise InvalidArgument(f"expected mask shape (T, C, l, l), got {tuple(shape)}")
    return tuple(int(s) for s in shape)


def spatial_mask(shape, p_s: float, rng: np.random.Generator) -> MaskSpec:
    """For every time step pick one channel, then mask ``round(p_s*l^2)`` of its cells."""
    _check_ratio("p_s", p_s)
    T, C, side, _ = _check_shape(shape)
    k = mask_count(p_s, side * side)
    channels = rng.integers(C, size=T)
    rows = []
    for t in range(T):
        cells = rng.choice(side * side, size=k, replace=False)
        rows.append(np.stack([np.full(k, t), np.full(k, channels[t]), cells // side, cells % side], 1))
    return MaskSpec("spatial", np.concatenate(rows), (T, C, side, side), p_s=p_s)


def temporal_mask(shape, p_t: float, rng: np.random.Generator) -> MaskSpec:
    """Sample ``round(p_t*T)`` steps; blank one random channel's whole grid at each."""
    _check_ratio("p_t", p_t)
    T, C, side, _ = _check_shape(shape)
    steps = rng.choice(T, size=mask_count(p_t, T), replace=False)
    channels = rng.integers(C, size=len(steps))
    ii, jj = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    cells = side * side
    rows = [
        np.stack([np.full(cells, t), np.full(cells, c), ii.ravel(), jj.ravel()], 1)
        for t, c in zip(steps, channels)
    ]
    return MaskSpec("temporal", np.concatenate(rows), (T, C, side, side), p_t=p_t)


def global_mask(shape, p_s: float, p_t: float, rng: np.random.Generator) -> MaskSpec:
    """Sample ``round(p_t*T)`` steps; mask ``round(p_s*C*l^2)`` (c, i, j) triples at each."""
    _check_ratio("p_s", p_s)
    _check_ratio("p_t", p_t)
    T, C, side, _ = _check_shape(shape)
    steps = rng.choice(T, size=mask_count(p_t, T), replace=False)
    per_step = C * side * side
    k = mask_count(p_s, per_step)
    rows = []
    for t in steps:
        flat = rng.choice(per_step, size=k, replace=False)
        c, rem = np.divmod(flat, side * side)
        rows.append(np.stack([np.full(k, t), c, rem // side, rem % side], 1))
    return MaskSpec("global", np.concatenate(rows), (T, C, side, side), p_s=p_s, p_t=p_t)


def draw_mask(strategy: Strategy, shape, p_s: float, p_t: float, rng: np.random.Generator) -> MaskSpec:
    if strategy == "spatial":
        return spatial_mask(shape, p_s, rng)
    if strategy == "temporal":
        return temporal_mask(shape, p_t, rng)
    if strategy == "global":
        return global_mask(shape, p_s, p_t, rng)
    raise InvalidArgument(f"unknown masking strategy {strategy!r}")


def apply_mask(x, mask: MaskSpec):
    """Return a copy of ``x`` with masked positions set to exactly 0.

    Accepts numpy arrays or torch tensors of shape ``(T, C, l, l)``.
    """
    if tuple(x.shape) != mask.shape:
        raise InvalidArgument(f"mask shape {mask.shape} does not match input {tuple(x.shape)}")
    if isinstance(x, torch.Tensor):
        out = x.clone()
        if len(mask):
            idx = torch.from_numpy(mask.indices.copy())
            out[idx[:, 0], idx[:, 1], idx[:, 2], idx[:, 3]] = 0.0
        return out
    out = np.array(x, copy=True)
    if len(mask):
        out[tuple(mask.indices.T)] = 0.0
    return out
