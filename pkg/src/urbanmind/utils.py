"""Small shared helpers: seeded module construction, activations, hashing."""

from __future__ import annotations

import contextlib
import hashlib
import json

import numpy as np
import torch
from torch import nn


@contextlib.contextmanager
def seeded_torch(seed: int):
    """Run a block with the torch CPU RNG seeded, restoring the outer state afterwards."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        yield


def activation(name: str) -> nn.Module:
    table = {"gelu": nn.GELU, "relu": nn.ReLU, "tanh": nn.Tanh, "silu": nn.SiLU}
    try:
        return table[name]()
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; choose from {sorted(table)}") from None


def derive_seed(seed: int, *tags: int | str) -> int:
    """Stable child seed from a parent seed and tags."""
    material = json.dumps([int(seed), *[str(t) for t in tags]]).encode()
    return int.from_bytes(hashlib.sha256(material).digest()[:4], "little")


def param_snapshot(module: nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in module.named_parameters()}


def restore_params(module: nn.Module, snapshot: dict[str, torch.Tensor]) -> None:
    with torch.no_grad():
        for k, v in module.named_parameters():
            v.copy_(snapshot[k])


def rng_state_to_json(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def rng_from_json(state: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng
