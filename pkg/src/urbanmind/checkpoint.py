"""Checkpoint directories: ``meta`` (JSON text) and ``params.f32``.

``params.f32`` is one flat little-endian float32 vector. The manifest in
``meta`` maps each parameter (and each Adam moment, when an optimizer is
saved) to its offset and shape. ``trainable_mask`` records the
``requires_grad`` flag of every parameter and ``shared`` names the parameters
that several heads use.
"""

from __future__ import annotations

import base64
import hashlib
import json
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
from torch import nn

from .errors import CheckpointFormatError
from .utils import rng_from_json

FORMAT = "urbanmind-checkpoint"
VERSION = 1
META_NAME = "meta"
PARAMS_NAME = "params.f32"


def _named_optimizer_params(module: nn.Module, optimizer: torch.optim.Optimizer) -> list[str]:
    by_id = {id(p): n for n, p in module.named_parameters()}
    names = []
    for group in optimizer.param_groups:
        for p in group["params"]:
            if id(p) not in by_id:
                raise CheckpointFormatError("optimizer holds a parameter outside the module")
            names.append(by_id[id(p)])
    return names


def save_checkpoint(
    path: str | Path,
    module: nn.Module,
    *,
    config: dict | None = None,
    optimizer: torch.optim.Optimizer | None = None,
    rng: np.random.Generator | None = None,
    shared: Iterable[str] = (),
    extra: dict | None = None,
) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    chunks, manifest, offset = [], [], 0

    def add(name, tensor, kind):
        nonlocal offset
        arr = tensor.detach().cpu().numpy().astype("<f4").ravel()
        manifest.append({"name": name, "kind": kind, "offset": offset, "shape": list(tensor.shape)})
        chunks.append(arr)
        offset += arr.size

    named = list(module.named_parameters())
    for name, p in named:
        add(name, p, "param")

    optim_meta = None
    if optimizer is not None:
        names = _named_optimizer_params(module, optimizer)
        lookup = dict(named)
        steps = {}
        for name in names:
            state = optimizer.state.get(lookup[name], {})
            if state:
                steps[name] = float(state["step"])
                add(f"optim.{name}.exp_avg", state["exp_avg"], "optim")
                add(f"optim.{name}.exp_avg_sq", state["exp_avg_sq"], "optim")
        group = optimizer.param_groups[0]
        optim_meta = {
            "type": type(optimizer).__name__,
            "param_names": names,
            "steps": steps,
            "lr": group["lr"],
            "betas": list(group.get("betas", ())),
            "eps": group.get("eps"),
        }

    flat = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f4")
    flat.astype("<f4").tofile(path / PARAMS_NAME)
    meta = {
        "format": FORMAT,
        "version": VERSION,
        "config": config or {},
        "manifest": manifest,
        "trainable_mask": {n: bool(p.requires_grad) for n, p in named},
        "shared": sorted(shared),
        "optimizer": optim_meta,
        "rng": {
            "numpy": rng.bit_generator.state if rng is not None else None,
            "torch": base64.b64encode(torch.get_rng_state().numpy().tobytes()).decode(),
        },
        "params_sha256": hashlib.sha256(flat.astype("<f4").tobytes()).hexdigest(),
        "extra": extra or {},
    }
    meta["manifest_sha256"] = _manifest_digest(meta)
    (path / META_NAME).write_text(json.dumps(meta, indent=1))
    return path


def _manifest_digest(meta: dict) -> str:
    covered = {k: meta.get(k) for k in ("config", "manifest", "trainable_mask", "shared", "optimizer")}
    return hashlib.sha256(json.dumps(covered, sort_keys=True).encode()).hexdigest()


def read_meta(path: str | Path) -> dict:
    path = Path(path)
    try:
        meta = json.loads((path / META_NAME).read_text())
    except (OSError, ValueError) as exc:
        raise CheckpointFormatError(f"unreadable checkpoint meta in {path}: {exc}") from exc
    if meta.get("format") != FORMAT or meta.get("version") != VERSION:
        raise CheckpointFormatError(
            f"{path}: unsupported checkpoint format {meta.get('format')!r} v{meta.get('version')}"
        )
    if meta.get("manifest_sha256") != _manifest_digest(meta):
        raise CheckpointFormatError(f"{path}: manifest was modified after saving")
    return meta


def load_checkpoint(
    path: str | Path,
    module: nn.Module,
    optimizer: torch.optim.Optimizer | None = None,
    restore_torch_rng: bool = False,
) -> dict:
    """Restore parameters (and optionally Adam state) in place.

    Returns the meta dict with ``meta["rng"]["generator"]`` set to a restored
    numpy Generator when one was saved.
    """
    path = Path(path)
    meta = read_meta(path)
    flat = np.fromfile(path / PARAMS_NAME, dtype="<f4")
    if hashlib.sha256(flat.tobytes()).hexdigest() != meta.get("params_sha256"):
        raise CheckpointFormatError(f"{path}: parameter payload checksum mismatch")

    entries = {}
    expected_offset = 0
    try:
        for entry in meta["manifest"]:
            size = int(np.prod(entry["shape"])) if entry["shape"] else 1
            if entry["offset"] != expected_offset:
                raise CheckpointFormatError(f"{path}: manifest offset for {entry['name']} is inconsistent")
            expected_offset += size
            entries[entry["name"]] = (entry["offset"], tuple(entry["shape"]), size)
    except (KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"{path}: malformed manifest: {exc}") from exc
    if expected_offset != flat.size:
        raise CheckpointFormatError(
            f"{path}: manifest covers {expected_offset} values, payload has {flat.size}"
        )

    def fetch(name, like: torch.Tensor) -> torch.Tensor:
        if name not in entries:
            raise CheckpointFormatError(f"{path}: missing tensor {name}")
        offset, shape, size = entries[name]
        if shape != tuple(like.shape):
            raise CheckpointFormatError(f"{path}: {name} has shape {shape}, model expects {tuple(like.shape)}")
        return torch.from_numpy(flat[offset:offset + size].reshape(shape).copy()).to(like.dtype)

    named = dict(module.named_parameters())
    stored = {e["name"] for e in meta["manifest"] if e["kind"] == "param"}
    if stored != set(named):
        missing, surplus = set(named) - stored, stored - set(named)
        raise CheckpointFormatError(
            f"{path}: parameter names differ (missing {sorted(missing)[:3]}, unexpected {sorted(surplus)[:3]})"
        )
    mask = meta.get("trainable_mask", {})
    with torch.no_grad():
        for name, p in named.items():
            p.copy_(fetch(name, p))
            if name in mask:
                p.requires_grad_(bool(mask[name]))

    if optimizer is not None:
        om = meta.get("optimizer")
        if om is None:
            raise CheckpointFormatError(f"{path}: no optimizer state saved")
        names = _named_optimizer_params(module, optimizer)
        if names != om["param_names"]:
            raise CheckpointFormatError(f"{path}: optimizer parameter list differs from checkpoint")
        optimizer.state.clear()
        for name in names:
            if name in om["steps"]:
                p = named[name]
                optimizer.state[p] = {
                    "step": torch.tensor(om["steps"][name], dtype=torch.float32),
                    "exp_avg": fetch(f"optim.{name}.exp_avg", p),
                    "exp_avg_sq": fetch(f"optim.{name}.exp_avg_sq", p),
                }

    rng_meta = meta.get("rng") or {}
    if rng_meta.get("numpy") is not None:
        rng_meta["generator"] = rng_from_json(rng_meta["numpy"])
    if restore_torch_rng and rng_meta.get("torch"):
        state = np.frombuffer(base64.b64decode(rng_meta["torch"]), dtype=np.uint8).copy()
        torch.set_rng_state(torch.from_numpy(state))
    return meta
