"""Three-stage training and inference pipeline.

Stage 1 trains the two masked autoencoders and caches per-slot tokens for every
region and day. Stage 2 fine-tunes the backbone under PFA together with the
predictor. Stage 3 adapts the shared trunk on each test unit through the
reconstructor, then predicts.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .backbone import Backbone, build_backbone, finetune_step, pfa_partition, pretrain_language_model, trainable_mask
from .checkpoint import load_checkpoint, save_checkpoint
from .config import AdaptationPolicy, ExperimentConfig
from .errors import FreezeViolation, InvalidArgument, StageOrderError, TrainingFailure
from .grid_data import (
    CityGrid,
    Region,
    SplitSpec,
    UrbanDynamicsTensor,
    apply_scaler,
    clip_outliers,
    default_clip_policy,
    fit_scaler,
    generate_synthetic,
    load_city,
    make_splits,
    partition_city,
    resolve_clip_bounds,
)
from .heads import PredictorHead, ReconstructorHead, build_heads, mask_embeddings, prediction_loss, reconstruction_loss
from .masking import STRATEGIES
from .muffin_mae import MAEModel, build_mae, encode_dataset, fuse_arrays, train_mae
from .prompts import PromptContext, Vocabulary, assemble_input, build_prompt
from .utils import derive_seed, param_snapshot, restore_params

logger = logging.getLogger(__name__)

__all__ = [
    "AdaptationPolicy", "Pipeline", "PreparedData", "RunManifest", "Stage2Trainer", "Stage3Result",
    "UrbanMindModel", "prepare_data", "synthetic_city",
]


# ---------------------------------------------------------------- data


@dataclass
class PreparedData:
    grid: CityGrid
    regions: list[Region]
    tensors: list[UrbanDynamicsTensor]  # normalized, one per region
    split: SplitSpec
    target_index: int
    train_samples: list[tuple[int, int]]  # (region index, day)
    test_samples: list[tuple[int, int]]

    @property
    def values(self) -> np.ndarray:
        """``(R, N, T, C, l, l)`` stacked normalized values."""
        return np.stack([t.values for t in self.tensors])

    @property
    def channel_names(self) -> tuple[str, ...]:
        return self.tensors[0].channel_names

    def gather(self, samples) -> np.ndarray:
        vals = self.values
        return np.stack([vals[r, n] for r, n in samples]) if samples else vals[:0, 0]


def region_params(data_cfg, region: Region, is_test: bool) -> tuple[float, float]:
    """Per-region (phase, amplitude) for the synthetic generator."""
    rng = np.random.default_rng(derive_seed(data_cfg.seed, "region-params", *region.top_left))
    phase = data_cfg.region_phase_spread * rng.uniform(-1, 1)
    amplitude = 1.0 + data_cfg.region_amplitude_spread * rng.uniform(-1, 1)
    if is_test and data_cfg.mode == "zero_shot":
        phase += data_cfg.shift_phase
        amplitude *= data_cfg.shift_amplitude
    return phase, amplitude


def synthetic_city(data_cfg) -> tuple[CityGrid, list[UrbanDynamicsTensor], SplitSpec]:
    """Raw synthetic tensors for every region; test regions carry the configured shift."""
    d = data_cfg
    grid = CityGrid(d.city, d.grid_height, d.grid_width)
    regions = partition_city(grid, d.side, d.stride)
    split = make_splits(regions, d.mode, d.test_fraction, d.seed, d.train_day_fraction)
    test_set = set(split.test_regions)
    raw = []
    for r in regions:
        phase, amplitude = region_params(d, r, r in test_set)
        raw.append(generate_synthetic(
            r, d.n_days, d.n_slots, d.n_channels, derive_seed(d.seed, "region", *r.top_left),
            noise=d.noise, coupling=d.coupling, lag=d.lag, phase=phase, amplitude=amplitude,
            event_scale=d.event_scale, city=d.city,
        ))
    return grid, raw, split


def prepare_data(config: ExperimentConfig) -> PreparedData:
    """Load or generate the city, split it, and normalize with training-side statistics."""
    d = config.data
    if d.source == "synthetic":
        grid, raw, split = synthetic_city(d)
        regions = [t.region for t in raw]
    else:
        grid, raw = load_city(d.source)
        regions = [t.region for t in raw]
        split = make_splits(regions, d.mode, d.test_fraction, d.seed, d.train_day_fraction)
        if raw[0].n_channels > d.n_channels:
            names = list(raw[0].channel_names)
            keep = [d.task] + [n for n in names if n != d.task][: d.n_channels - 1]
            raw = [t.select_channels([n for n in names if n in keep]) for t in raw]

    n_days = raw[0].n_days
    train_days, test_days = split.day_split(n_days)
    train_set = set(split.train_regions)
    if raw[0].normalized:
        tensors = raw
    else:
        fit_on = [
            t.replace_values(t.values[train_days]) for t in raw if t.region in train_set
        ]
        policy = default_clip_policy(raw[0].channel_names)
        bounds = resolve_clip_bounds(fit_on, policy)
        scaler = fit_scaler([clip_outliers(t, bounds=bounds) for t in fit_on], policy)
        tensors = [apply_scaler(clip_outliers(t, bounds=bounds), scaler) for t in raw]

    target_index = tensors[0].channel_index(d.task)
    index = {r: k for k, r in enumerate(regions)}
    train_samples = [(index[r], int(n)) for r in split.train_regions for n in train_days]
    test_samples = [(index[r], int(n)) for r in split.test_regions for n in test_days]
    return PreparedData(grid, regions, tensors, split, target_index, train_samples, test_samples)


# ---------------------------------------------------------------- model container


class UrbanMindModel(nn.Module):
    """Every trainable piece, registered once (the trunk appears under ``predictor.trunk``)."""

    def __init__(self, mae_multi: MAEModel | None, mae_target: MAEModel | None, backbone: Backbone,
                 predictor: PredictorHead, reconstructor: ReconstructorHead):
        super().__init__()
        self.mae_multi = mae_multi
        self.mae_target = mae_target
        self.backbone = backbone
        self.predictor = predictor
        self.reconstructor = reconstructor

    def shared_names(self) -> list[str]:
        return [n for n, _ in self.named_parameters() if n.startswith("predictor.trunk.")]

    def embed(self, prompt_ids: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        """Backbone states at the data-token positions, ``(..., h, hidden)``."""
        inp = assemble_input(prompt_ids, tokens, self.backbone.text, self.backbone.projector)
        return self.backbone(inp)[..., inp.boundary:, :]


@dataclass
class RunManifest:
    config: dict
    seeds: dict[str, int]
    stages: dict[str, str] = field(default_factory=lambda: {"1": "pending", "2": "pending", "3": "pending"})
    checkpoints: dict[str, str] = field(default_factory=dict)
    loss_histories: dict[str, list] = field(default_factory=dict)
    wall_clock: dict[str, float] = field(default_factory=dict)
    notes: dict[str, object] = field(default_factory=dict)

    def mark(self, stage: int, status: str) -> None:
        if status == "complete":
            for earlier in range(1, stage):
                if self.stages[str(earlier)] != "complete":
                    raise StageOrderError(f"stage {stage} finished before stage {earlier}")
        self.stages[str(stage)] = status

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "seeds": self.seeds,
            "stages": self.stages,
            "checkpoints": self.checkpoints,
            "loss_histories": self.loss_histories,
            "wall_clock": self.wall_clock,
            "notes": self.notes,
        }


@dataclass
class Stage3Result:
    samples: list[tuple[int, int]]
    predictions: np.ndarray  # (S, m, 1, l, l) after adaptation
    unadapted: np.ndarray  # (S, m, 1, l, l) from the stage-2 predictor
    truth: np.ndarray
    recon_losses: list[list[float]]  # one curve per test unit
    fallbacks: int = 0


# ---------------------------------------------------------------- pipeline


class Pipeline:
    def __init__(self, config: ExperimentConfig, run_dir: str | Path | None = None,
                 data: PreparedData | None = None):
        self.config = config
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.data = data if data is not None else prepare_data(config)
        seed = config.eval.seed
        self.seeds = {
            "data": config.data.seed,
            "stage1": derive_seed(seed, "stage1"),
            "stage2": derive_seed(seed, "stage2"),
            "stage3": derive_seed(seed, "stage3"),
        }
        self.manifest = RunManifest(config.to_dict(), dict(self.seeds))
        self.manifest.notes["split"] = self.data.split.to_dict()
        self.mae_multi: MAEModel | None = None
        self.mae_target: MAEModel | None = None
        self.tokens: np.ndarray | None = None  # (R, N, T, width)
        self.model: UrbanMindModel | None = None
        self.vocab: Vocabulary | None = None
        self._stage2_state: dict[str, torch.Tensor] | None = None

    # -- helpers

    @property
    def ablations(self) -> frozenset[str]:
        return self.config.ablations

    @property
    def token_parts(self) -> tuple[str, ...]:
        parts = []
        if "no_multifaceted_embedding" not in self.ablations:
            parts.append("multifaceted")
        if "no_target_embedding" not in self.ablations:
            parts.append("target")
        return tuple(parts)

    def _strategies(self) -> tuple[str, ...]:
        removed = {s for s in STRATEGIES if f"no_{s}_mask" in self.ablations}
        return tuple(s for s in self.config.mae.strategies if s not in removed)

    def _stage_dir(self, name: str) -> Path | None:
        if self.run_dir is None:
            return None
        path = self.run_dir / name
        path.mkdir(parents=True, exist_ok=True)
        return path

    def write_manifest(self) -> None:
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            (self.run_dir / "manifest.json").write_text(json.dumps(self.manifest.to_dict(), indent=2))

    def prompt_ids(self, samples) -> torch.Tensor:
        d = self.config.data
        cache = {}
        rows = []
        for r, _ in samples:
            if r not in cache:
                region = self.data.regions[r]
                ctx = PromptContext(
                    city=self.data.tensors[r].city,
                    top_left=region.top_left,
                    side=region.side,
                    prior_hours=tuple(range(1, d.prior_slots + 1)),
                    target_hours=tuple(range(d.prior_slots + 1, d.prior_slots + d.horizon + 1)),
                    task=d.task,
                    vocabulary=self.data.channel_names,
                )
                cache[r] = self.vocab.encode(build_prompt(ctx))
            rows.append(cache[r])
        if len({len(row) for row in rows}) > 1:
            raise InvalidArgument("prompts in one batch tokenize to different lengths")
        return torch.tensor(rows, dtype=torch.long)

    def sample_tokens(self, samples) -> torch.Tensor:
        h = self.config.data.prior_slots
        return torch.as_tensor(np.stack([self.tokens[r, n, :h] for r, n in samples]))

    def sample_targets(self, samples) -> torch.Tensor:
        d = self.config.data
        k = self.data.target_index
        vals = self.data.values
        frames = np.stack([vals[r, n, d.prior_slots:d.prior_slots + d.horizon, k:k + 1] for r, n in samples])
        return torch.as_tensor(frames)

    # -- stage 1

    def run_stage1(self) -> np.ndarray:
        started = time.perf_counter()
        cfg, d = self.config, self.config.data
        self.manifest.mark(1, "running")
        seed = self.seeds["stage1"]
        k = self.data.target_index
        train = self.data.gather(self.data.train_samples)
        side, n_ch = d.side, self.data.tensors[0].n_channels
        strategies = self._strategies()
        train_models = "no_muffin_mae" not in self.ablations
        if train_models and not strategies:
            raise InvalidArgument("all masking strategies are disabled")
        histories = {}

        if "multifaceted" in self.token_parts:
            mcfg = cfg.mae.model_config(n_ch, cfg.mae.d_v, side)
            mcfg.strategies = strategies or mcfg.strategies
            self.mae_multi = build_mae(mcfg, derive_seed(seed, "E1"))
            if train_models:
                _, histories["mae_multifaceted"] = train_mae(self.mae_multi, train, mcfg, derive_seed(seed, "fit1"))
        if "target" in self.token_parts:
            tcfg = cfg.mae.model_config(1, cfg.mae.d_k, side)
            tcfg.strategies = strategies or tcfg.strategies
            self.mae_target = build_mae(tcfg, derive_seed(seed, "E2"))
            if train_models:
                _, histories["mae_target"] = train_mae(self.mae_target, train[:, :, k:k + 1], tcfg, derive_seed(seed, "fit2"))

        vals = self.data.values  # (R, N, T, C, l, l)
        R, N = vals.shape[:2]
        flat = vals.reshape(R * N, *vals.shape[2:])
        v = encode_dataset(self.mae_multi, flat) if self.mae_multi is not None else None
        vk = encode_dataset(self.mae_target, flat[:, :, k:k + 1]) if self.mae_target is not None else None
        tokens = fuse_arrays(v, vk, self.token_parts) if v is not None and vk is not None else (v if v is not None else vk)
        self.tokens = np.ascontiguousarray(tokens.reshape(R, N, d.n_slots, -1).astype(np.float32))

        self.manifest.loss_histories.update(histories)
        out = self._stage_dir("stage1")
        if out is not None:
            maes = nn.ModuleDict({k_: m for k_, m in (("mae_multi", self.mae_multi), ("mae_target", self.mae_target)) if m is not None})
            save_checkpoint(out / "mae", maes, config=cfg.to_dict())
            self.tokens.astype("<f4").tofile(out / "tokens.f32")
            (out / "tokens.json").write_text(json.dumps({
                "shape": list(self.tokens.shape), "parts": list(self.token_parts),
                "regions": [r.to_dict() for r in self.data.regions],
            }))
            self.manifest.checkpoints["stage1"] = str(out / "mae")
        self.manifest.wall_clock["stage1"] = time.perf_counter() - started
        self.manifest.mark(1, "complete")
        self.write_manifest()
        return self.tokens

    # -- stage 2

    def build_model(self) -> UrbanMindModel:
        if self.tokens is None:
            raise StageOrderError("stage 2 needs the stage-1 token cache")
        cfg, d = self.config, self.config.data
        seed = self.seeds["stage2"]
        max_int = max(d.grid_height, d.grid_width, d.n_slots, d.side) + 1
        self.vocab = Vocabulary.build(cities=(self.data.tensors[0].city,), tasks=self.data.channel_names, max_int=max_int)
        l_frozen = cfg.backbone.L if "no_finetuning" in self.ablations else cfg.backbone.l_frozen
        bcfg = cfg.backbone.model_config(l_frozen)
        backbone = build_backbone(bcfg, self.vocab, self.tokens.shape[-1], derive_seed(seed, "backbone"))
        if bcfg.pretrain_steps > 0:
            texts = [build_prompt(PromptContext(
                self.data.tensors[r].city, self.data.regions[r].top_left, d.side,
                tuple(range(1, d.prior_slots + 1)),
                tuple(range(d.prior_slots + 1, d.prior_slots + d.horizon + 1)),
                d.task, self.data.channel_names,
            )) for r in range(len(self.data.regions))]
            self.manifest.loss_histories["backbone_pretrain"] = pretrain_language_model(
                backbone, texts, bcfg.pretrain_steps, seed=derive_seed(seed, "pretrain"))
        pfa_partition(backbone, l_frozen)
        predictor, reconstructor = build_heads(
            cfg.heads, bcfg.hidden_dim, d.prior_slots, d.horizon, d.side, derive_seed(seed, "heads"))
        self.model = UrbanMindModel(self.mae_multi, self.mae_target, backbone, predictor, reconstructor)
        for m in (self.mae_multi, self.mae_target):
            if m is not None:
                m.requires_grad_(False)
        return self.model

    def run_stage2(self, trainer: "Stage2Trainer | None" = None) -> list[float]:
        if self.manifest.stages["1"] != "complete":
            raise StageOrderError("stage 2 requires a completed stage 1")
        started = time.perf_counter()
        self.manifest.mark(2, "running")
        trainer = trainer or Stage2Trainer(self)
        before = {n: p.detach().clone() for n, p in trainer.frozen.items()}
        history = trainer.run_epochs(self.config.backbone.epochs)
        for name, p in trainer.frozen.items():
            if not torch.equal(before[name], p.detach()):
                raise FreezeViolation(f"frozen parameter {name} changed during stage 2")
        self._stage2_state = param_snapshot(self.model)
        self.manifest.loss_histories["stage2"] = history
        out = self._stage_dir("stage2")
        if out is not None:
            save_checkpoint(out / "model", self.model, config=self.config.to_dict(),
                            shared=self.model.shared_names(), rng=trainer.rng)
            self.manifest.checkpoints["stage2"] = str(out / "model")
        self.manifest.wall_clock["stage2"] = time.perf_counter() - started
        self.manifest.mark(2, "complete")
        self.write_manifest()
        return history

    def load_stage1(self, stage1_dir: str | Path) -> np.ndarray:
        """Restore the token cache and both autoencoders written by :meth:`run_stage1`."""
        stage1_dir = Path(stage1_dir)
        meta = json.loads((stage1_dir / "tokens.json").read_text())
        if tuple(meta["parts"]) != self.token_parts:
            raise StageOrderError(f"stage-1 cache holds {meta['parts']}, config needs {list(self.token_parts)}")
        self.tokens = np.fromfile(stage1_dir / "tokens.f32", dtype="<f4").reshape(meta["shape"])
        d, n_ch = self.config.data, self.data.tensors[0].n_channels
        maes = {}
        if "multifaceted" in self.token_parts:
            maes["mae_multi"] = build_mae(self.config.mae.model_config(n_ch, self.config.mae.d_v, d.side), 0)
        if "target" in self.token_parts:
            maes["mae_target"] = build_mae(self.config.mae.model_config(1, self.config.mae.d_k, d.side), 0)
        load_checkpoint(stage1_dir / "mae", nn.ModuleDict(maes))
        self.mae_multi, self.mae_target = maes.get("mae_multi"), maes.get("mae_target")
        self.manifest.stages["1"] = "complete"
        return self.tokens

    def load_stage2(self, path: str | Path) -> None:
        """Rebuild the model from a stage-2 checkpoint inside a run directory."""
        path = Path(path)
        if self.tokens is None:
            self.load_stage1(path.parent.parent / "stage1")
        self.build_model()
        load_checkpoint(path, self.model)
        self._stage2_state = param_snapshot(self.model)
        self.manifest.stages["2"] = "complete"

    # -- stage 3

    def adaptation_units(self, samples, policy: AdaptationPolicy) -> list[list[int]]:
        """Positions into ``samples`` grouped into test units."""
        if policy.scope == "per_region":
            groups: dict[int, list[int]] = {}
            for pos, (r, _) in enumerate(samples):
                groups.setdefault(r, []).append(pos)
            return list(groups.values())
        return [list(range(s, min(s + policy.batch_size, len(samples))))
                for s in range(0, len(samples), policy.batch_size)]

    def run_stage3(self, policy: AdaptationPolicy | None = None, samples=None) -> Stage3Result:
        if self._stage2_state is None or self.model is None:
            raise StageOrderError("stage 3 requires a completed stage 2 (train or load a checkpoint)")
        started = time.perf_counter()
        self.manifest.mark(3, "running")
        policy = policy or self.config.tta
        samples = list(samples if samples is not None else self.data.test_samples)
        adapt = "no_adaptation" not in self.ablations
        model = self.model
        rng = np.random.default_rng(self.seeds["stage3"])
        G, P = model.reconstructor, model.predictor
        adapt_params = list(P.trunk.parameters()) + list(G.private_parameters())
        p_private_before = [p.detach().clone() for p in P.private_parameters()]

        preds = np.zeros((len(samples), *self.sample_targets(samples[:1]).shape[1:]), dtype=np.float32)
        unadapted = np.zeros_like(preds)
        curves, fallbacks = [], 0
        for unit in self.adaptation_units(samples, policy):
            unit_samples = [samples[p] for p in unit]
            with torch.no_grad():
                e = model.embed(self.prompt_ids(unit_samples), self.sample_tokens(unit_samples))
                base = P(e)
            unadapted[unit] = base.numpy()
            if not adapt:
                preds[unit] = base.numpy()
                continue
            snapshot = param_snapshot(model)
            masked, _ = mask_embeddings(e, policy.p, rng)
            optimizer = torch.optim.Adam(adapt_params, lr=policy.lr)
            curve, diverged = [], False
            for _ in range(policy.epochs):
                loss = reconstruction_loss(G, masked, e)
                curve.append(loss.item())
                if not torch.isfinite(loss):
                    diverged = True
                    break
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
            if not diverged:
                with torch.no_grad():
                    final = reconstruction_loss(G, masked, e)
                    curve.append(final.item())
                    diverged = not torch.isfinite(final)
            if diverged:
                fallbacks += 1
                restore_params(model, snapshot)
                preds[unit] = base.numpy()
            else:
                with torch.no_grad():
                    preds[unit] = P(e).numpy()
            curves.append(curve)
            if policy.reset:
                restore_params(model, self._stage2_state)

        for before, p in zip(p_private_before, P.private_parameters()):
            if not torch.equal(before, p.detach()):
                raise FreezeViolation("predictor-private parameters changed during adaptation")

        truth = self.sample_targets(samples).numpy()
        result = Stage3Result(samples, preds, unadapted, truth, curves, fallbacks)
        self.manifest.loss_histories["stage3_recon"] = curves
        self.manifest.notes["tta_fallbacks"] = fallbacks
        self.manifest.notes["tta_policy"] = {
            "epochs": policy.epochs, "lr": policy.lr, "p": policy.p,
            "scope": policy.scope, "reset": policy.reset, "adapted": adapt,
            "recon_norm": "per-vector sum of squares, averaged over vectors",
        }
        out = self._stage_dir("stage3")
        if out is not None:
            preds.astype("<f4").tofile(out / "predictions.f32")
            truth.astype("<f4").tofile(out / "truth.f32")
            (out / "predictions.json").write_text(json.dumps({
                "shape": list(preds.shape),
                "samples": [[int(r), int(n)] for r, n in samples],
                "regions": [self.data.regions[r].to_dict() for r, _ in samples],
            }))
        self.manifest.wall_clock["stage3"] = time.perf_counter() - started
        self.manifest.mark(3, "complete")
        self.write_manifest()
        return result

    def run_all(self) -> Stage3Result:
        self.run_stage1()
        self.build_model()
        self.run_stage2()
        return self.run_stage3()


class Stage2Trainer:
    """Stage-2 optimization stream; resumable through :meth:`save` / :meth:`load`."""

    def __init__(self, pipe: Pipeline, samples=None):
        self.pipe = pipe
        if pipe.model is None:
            pipe.build_model()
        self.model = pipe.model
        cfg = pipe.config
        self.samples = list(samples if samples is not None else pipe.data.train_samples)
        self.batch_size = cfg.backbone.batch_size
        self.recon_mode = cfg.heads.recon_mode
        self.recon_weight = cfg.heads.recon_weight
        self.recon_p = cfg.tta.p
        params = [p for p in self.model.backbone.parameters() if p.requires_grad]
        params += list(self.model.predictor.parameters())
        if self.recon_mode != "none":
            params += list(self.model.reconstructor.private_parameters())
        self.params = params
        trainable_ids = {id(p) for p in params}
        self.frozen = {n: p for n, p in self.model.named_parameters() if id(p) not in trainable_ids}
        self.optimizer = torch.optim.Adam(params, lr=cfg.backbone.lr)
        self.rng = np.random.default_rng(derive_seed(pipe.seeds["stage2"], "batches"))
        self.order: np.ndarray | None = None
        self.cursor = 0
        self.steps = 0
        self.last_prediction_loss = float("nan")
        self._targets = pipe.sample_targets(self.samples)
        self._tokens = pipe.sample_tokens(self.samples)
        self._prompts = pipe.prompt_ids(self.samples)

    def next_batch(self) -> np.ndarray:
        if self.order is None or self.cursor >= len(self.order):
            self.order = self.rng.permutation(len(self.samples))
            self.cursor = 0
        idx = self.order[self.cursor:self.cursor + self.batch_size]
        self.cursor += len(idx)
        return idx

    def loss_on(self, idx) -> torch.Tensor:
        e = self.model.embed(self._prompts[idx], self._tokens[idx])
        loss = prediction_loss(self.model.predictor(e), self._targets[idx])
        self.last_prediction_loss = loss.item()
        if self.recon_mode != "none":
            # "head": G-private layers follow the trunk without pushing gradients into it
            target = e.detach()
            masked, _ = mask_embeddings(target, self.recon_p, self.rng)
            recon = reconstruction_loss(self.model.reconstructor, masked, target,
                                        detach_trunk=self.recon_mode == "head")
            loss = loss + self.recon_weight * recon
        return loss

    def step(self) -> float:
        """One optimizer step; returns the prediction-loss part of the objective."""
        idx = self.next_batch()
        finetune_step(self.params, lambda: self.loss_on(idx), self.optimizer)
        self.steps += 1
        return self.last_prediction_loss

    def run_epochs(self, epochs: int) -> list[float]:
        per_epoch = math.ceil(len(self.samples) / self.batch_size)
        history = []
        for _ in range(epochs):
            losses = [self.step() for _ in range(per_epoch)]
            history.append(float(np.mean(losses)))
        return history

    def evaluate(self) -> float:
        with torch.no_grad():
            e = self.model.embed(self._prompts, self._tokens)
            return float(prediction_loss(self.model.predictor(e), self._targets))

    def save(self, path: str | Path) -> Path:
        extra = {"order": self.order.tolist() if self.order is not None else None,
                 "cursor": self.cursor, "steps": self.steps}
        return save_checkpoint(path, self.model, config=self.pipe.config.to_dict(), optimizer=self.optimizer,
                               rng=self.rng, shared=self.model.shared_names(), extra=extra)

    def load(self, path: str | Path) -> None:
        meta = load_checkpoint(path, self.model, self.optimizer)
        self.rng = meta["rng"]["generator"]
        extra = meta["extra"]
        self.order = np.asarray(extra["order"]) if extra["order"] is not None else None
        self.cursor = extra["cursor"]
        self.steps = extra["steps"]
