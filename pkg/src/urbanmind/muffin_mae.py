"""Dual masked autoencoder producing one embedding per time slot.

Two instances are used: one over all channels (multifaceted embeddings) and one
over the single target channel (target embeddings). Each encoder is a stack of
stride-2 convolutions applied to every slot's ``(C, l, l)`` frame separately,
followed by a linear map to ``embed_dim``; the decoder mirrors it with
transposed convolutions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
import torch
from torch import nn

from .errors import InvalidArgument, TrainingFailure
from .masking import STRATEGIES, draw_mask
from .prompts import TokenSequence
from .utils import activation, param_snapshot, seeded_torch

logger = logging.getLogger(__name__)


@dataclass
class MAEConfig:
    channels_in: int = 3
    embed_dim: int = 64
    side: int = 10
    conv_widths: tuple[int, ...] = (32, 64)
    activation: str = "gelu"
    lr: float = 1e-4
    epochs: int = 200
    batch_size: int = 16
    p_s: float = 0.25
    p_t: float = 0.33
    strategies: tuple[str, ...] = STRATEGIES

    def __post_init__(self):
        self.conv_widths = tuple(self.conv_widths)
        self.strategies = tuple(self.strategies)
        if self.embed_dim < 1:
            raise InvalidArgument("embed_dim must be >= 1")
        if not self.conv_widths:
            raise InvalidArgument("conv_widths must be non-empty")
        if self.channels_in < 1 or self.side < 1:
            raise InvalidArgument("channels_in and side must be >= 1")
        unknown = set(self.strategies) - set(STRATEGIES)
        if unknown:
            raise InvalidArgument(f"unknown masking strategies {sorted(unknown)}")


def _downsampled(side: int, n_layers: int) -> list[int]:
    sizes = [side]
    for _ in range(n_layers):
        sizes.append((sizes[-1] - 1) // 2 + 1)
    return sizes


class MAEModel(nn.Module):
    def __init__(self, config: MAEConfig):
        super().__init__()
        self.config = config
        widths = [config.channels_in, *config.conv_widths, config.embed_dim]
        n_conv = len(widths) - 1
        self.sizes = _downsampled(config.side, n_conv)
        last = self.sizes[-1]
        d = config.embed_dim

        enc = []
        for cin, cout in zip(widths[:-1], widths[1:]):
            enc += [nn.Conv2d(cin, cout, 3, stride=2, padding=1), activation(config.activation)]
        self.encoder_convs = nn.Sequential(*enc)
        self.encoder_out = nn.Linear(d * last * last, d)

        self.decoder_in = nn.Linear(d, d * last * last)
        self.decoder_act = activation(config.activation)
        rev = widths[::-1]
        self.decoder_convs = nn.ModuleList(
            nn.ConvTranspose2d(cin, cout, 3, stride=2, padding=1)
            for cin, cout in zip(rev[:-1], rev[1:])
        )
        self.decoder_acts = nn.ModuleList(activation(config.activation) for _ in rev[2:])

    def encode_frames(self, x: torch.Tensor) -> torch.Tensor:
        """``(..., T, C, l, l)`` -> ``(..., T, d)``."""
        c, side = self.config.channels_in, self.config.side
        if x.ndim < 4 or tuple(x.shape[-3:]) != (c, side, side):
            raise InvalidArgument(
                f"expected (..., T, {c}, {side}, {side}) input, got {tuple(x.shape)}"
            )
        lead = x.shape[:-3]
        h = self.encoder_convs(x.reshape(-1, c, side, side))
        return self.encoder_out(h.flatten(1)).reshape(*lead, self.config.embed_dim)

    def decode_frames(self, v: torch.Tensor) -> torch.Tensor:
        """``(..., T, d)`` -> ``(..., T, C, l, l)``."""
        d = self.config.embed_dim
        if v.shape[-1] != d:
            raise InvalidArgument(f"embedding dim {v.shape[-1]} does not match config {d}")
        lead = v.shape[:-1]
        last = self.sizes[-1]
        h = self.decoder_act(self.decoder_in(v.reshape(-1, d))).reshape(-1, d, last, last)
        targets = self.sizes[::-1][1:]
        for k, conv in enumerate(self.decoder_convs):
            h = conv(h, output_size=(targets[k], targets[k]))
            if k < len(self.decoder_acts):
                h = self.decoder_acts[k](h)
        c, side = self.config.channels_in, self.config.side
        return h.reshape(*lead, c, side, side)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode_frames(self.encode_frames(x))


def build_mae(config: MAEConfig, seed: int) -> MAEModel:
    with seeded_torch(seed):
        return MAEModel(config)


@dataclass(frozen=True)
class EmbeddingSequence:
    vectors: torch.Tensor  # (T, d)
    source: Literal["multifaceted", "target"] = "multifaceted"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.vectors.ndim != 2:
            raise InvalidArgument(f"embedding sequence must be (T, d), got {tuple(self.vectors.shape)}")
        if not torch.isfinite(self.vectors).all():
            raise InvalidArgument("embedding sequence contains non-finite values")

    def __len__(self) -> int:
        return self.vectors.shape[0]


def encode(model: MAEModel, x_masked, source: str = "multifaceted", provenance: dict | None = None) -> EmbeddingSequence:
    x = torch.as_tensor(np.asarray(x_masked) if not isinstance(x_masked, torch.Tensor) else x_masked,
                        dtype=next(model.parameters()).dtype)
    if x.ndim != 4:
        raise InvalidArgument(f"expected a (T, C, l, l) sample, got shape {tuple(x.shape)}")
    with torch.no_grad():
        v = model.encode_frames(x)
    return EmbeddingSequence(v, source, dict(provenance or {}))


def decode(model: MAEModel, v: EmbeddingSequence | torch.Tensor) -> torch.Tensor:
    vectors = v.vectors if isinstance(v, EmbeddingSequence) else v
    with torch.no_grad():
        return model.decode_frames(vectors)


def mae_loss(x_hat: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Per-slot mean squared error averaged over the T slots (and the batch, if any)."""
    if x_hat.shape != x.shape:
        raise InvalidArgument(f"shape mismatch {tuple(x_hat.shape)} vs {tuple(x.shape)}")
    per_slot = ((x_hat - x) ** 2).flatten(-3).mean(-1)  # (..., T)
    return per_slot.mean()


def fuse_tokens(v: EmbeddingSequence, vk: EmbeddingSequence) -> TokenSequence:
    """``u_t = concat(v_t, v^k_t)`` for every slot."""
    if len(v) != len(vk):
        raise InvalidArgument(f"sequence lengths differ: {len(v)} vs {len(vk)}")
    if v.source != "multifaceted" or vk.source != "target":
        raise InvalidArgument("fuse_tokens expects (multifaceted, target) embeddings in that order")
    return TokenSequence(torch.cat([v.vectors, vk.vectors], dim=-1), dict(v.provenance))


def masked_batch(
    batch: np.ndarray, strategy: str, p_s: float, p_t: float, rng: np.random.Generator
) -> np.ndarray:
    """Apply one freshly drawn mask of ``strategy`` to every sample of a batch."""
    keep = np.ones_like(batch, dtype=bool)
    for k in range(len(batch)):
        keep[k] = ~draw_mask(strategy, batch.shape[1:], p_s, p_t, rng).to_bool()
    return np.where(keep, batch, 0.0).astype(batch.dtype)


def _monitor_set(data: np.ndarray, config: MAEConfig, seed: int) -> np.ndarray:
    """Fixed masked copy of the training set; strategies cycle over samples."""
    rng = np.random.default_rng(seed)
    out = np.empty_like(data)
    for k in range(len(data)):
        strategy = config.strategies[k % len(config.strategies)]
        out[k] = masked_batch(data[k:k + 1], strategy, config.p_s, config.p_t, rng)[0]
    return out


def evaluate_mae(model: MAEModel, masked: np.ndarray, clean: np.ndarray, chunk: int = 64) -> float:
    dtype = next(model.parameters()).dtype
    total = 0.0
    with torch.no_grad():
        for s in range(0, len(clean), chunk):
            xm = torch.as_tensor(masked[s:s + chunk], dtype=dtype)
            x = torch.as_tensor(clean[s:s + chunk], dtype=dtype)
            total += float(mae_loss(model(xm), x)) * len(x)
    return total / len(clean)


def train_mae(
    model: MAEModel,
    dataset: np.ndarray,
    config: MAEConfig | None = None,
    seed: int = 0,
) -> tuple[MAEModel, list[float]]:
    """Masked reconstruction training with Adam.

    Each batch gets one strategy, cycling through ``config.strategies`` in order;
    every sample in the batch gets its own mask. The returned history holds, per
    epoch, the reconstruction loss on a fixed masked copy of the training set, so
    it depends only on the parameters (``lr=0`` gives a constant history).
    """
    config = config or model.config
    data = np.asarray(dataset, dtype=np.float32)
    if data.ndim != 5:
        raise InvalidArgument(f"dataset must be (S, T, C, l, l), got {data.shape}")
    if not config.strategies:
        raise InvalidArgument("no masking strategies enabled")
    rng = np.random.default_rng(seed)
    monitor = _monitor_set(data, config, seed + 1)
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=config.lr)
    dtype = next(model.parameters()).dtype
    history = [evaluate_mae(model, monitor, data)]
    step = 0
    for epoch in range(config.epochs):
        last_good = param_snapshot(model)
        order = rng.permutation(len(data))
        for start in range(0, len(data), config.batch_size):
            idx = order[start:start + config.batch_size]
            strategy = config.strategies[step % len(config.strategies)]
            xm = masked_batch(data[idx], strategy, config.p_s, config.p_t, rng)
            x = torch.as_tensor(data[idx], dtype=dtype)
            loss = mae_loss(model(torch.as_tensor(xm, dtype=dtype)), x)
            if not torch.isfinite(loss):
                raise TrainingFailure(f"MAE loss became non-finite at epoch {epoch}", last_good)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            step += 1
        history.append(evaluate_mae(model, monitor, data))
        if not np.isfinite(history[-1]):
            raise TrainingFailure(f"MAE loss became non-finite after epoch {epoch}", last_good)
    logger.debug("MAE trained: loss %.4g -> %.4g", history[0], history[-1])
    return model, history


def encode_dataset(model: MAEModel, data: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Embeddings for every sample, ``(S, T, d)`` float32, without masking."""
    dtype = next(model.parameters()).dtype
    out = []
    with torch.no_grad():
        for s in range(0, len(data), chunk):
            out.append(model.encode_frames(torch.as_tensor(data[s:s + chunk], dtype=dtype)))
    return torch.cat(out).float().numpy()


def token_width(d_v: int, d_k: int, use_multifaceted: bool = True, use_target: bool = True) -> int:
    return d_v * use_multifaceted + d_k * use_target


def fuse_arrays(v: np.ndarray, vk: np.ndarray, parts: Sequence[str] = ("multifaceted", "target")) -> np.ndarray:
    """Batched concatenation used for the token cache; ``parts`` selects the halves kept."""
    pieces = []
    if "multifaceted" in parts:
        pieces.append(v)
    if "target" in parts:
        pieces.append(vk)
    if not pieces:
        raise InvalidArgument("at least one embedding kind must be kept")
    return np.concatenate(pieces, axis=-1)
