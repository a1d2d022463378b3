"""Predictor and reconstructor heads sharing a self-attention trunk.

The predictor maps backbone states to ``m`` future frames of the target
channel. The reconstructor maps masked backbone states back to the unmasked
ones; both run the same trunk object, so adapting it through the reconstructor
changes the predictor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .backbone import TransformerLayer
from .errors import InvalidArgument
from .masking import mask_count
from .utils import seeded_torch


@dataclass
class HeadsConfig:
    n_shared: int = 2
    n_heads: int = 4
    ffn_dim: int = 256
    # How G is trained before test time: "none" (only at test time), "head" (G-private
    # layers fitted on training embeddings during stage 2, trunk untouched by the reconstruction loss),
    # or "joint" (reconstruction loss added to the prediction loss with recon_weight, trunk included).
    recon_mode: str = "joint"
    recon_weight: float = 0.01

    def __post_init__(self):
        if self.recon_mode not in ("none", "head", "joint"):
            raise InvalidArgument(f"unknown recon_mode {self.recon_mode!r}")
        if self.recon_weight < 0:
            raise InvalidArgument("recon_weight must be >= 0")


class SharedTrunk(nn.Module):
    def __init__(self, hidden: int, n_layers: int, n_heads: int, ffn_dim: int):
        super().__init__()
        self.layers = nn.ModuleList(
            TransformerLayer(hidden, n_heads, ffn_dim, causal=False) for _ in range(n_layers)
        )

    def forward(self, e: torch.Tensor) -> torch.Tensor:
        for layer in self.layers:
            e = layer(e)
        return e


class PredictorHead(nn.Module):
    """Trunk, one private attention layer, then a linear map over the slot positions."""

    def __init__(self, trunk: SharedTrunk, hidden: int, h: int, m: int, side: int, n_heads: int, ffn_dim: int):
        super().__init__()
        self.trunk = trunk
        self.h, self.m, self.side = h, m, side
        self.block = TransformerLayer(hidden, n_heads, ffn_dim, causal=False)
        self.fc = nn.Linear(h * hidden, m * side * side)

    def private_parameters(self):
        yield from self.block.parameters()
        yield from self.fc.parameters()

    def forward(self, e: torch.Tensor) -> torch.Tensor:
        z = self.block(self.trunk(e))
        slots = z[..., -self.h:, :].flatten(-2)
        out = torch.tanh(self.fc(slots))
        return out.reshape(*e.shape[:-2], self.m, 1, self.side, self.side)


class ReconstructorHead(nn.Module):
    """Trunk, one private attention layer, then a linear map back to the hidden width."""

    def __init__(self, trunk: SharedTrunk, hidden: int, n_heads: int, ffn_dim: int):
        super().__init__()
        self.trunk = trunk
        self.block = TransformerLayer(hidden, n_heads, ffn_dim, causal=False)
        self.out = nn.Linear(hidden, hidden)

    def private_parameters(self):
        yield from self.block.parameters()
        yield from self.out.parameters()

    def forward(self, e_masked: torch.Tensor, detach_trunk: bool = False) -> torch.Tensor:
        z = self.trunk(e_masked)
        if detach_trunk:
            z = z.detach()
        return self.out(self.block(z))


def build_heads(config: HeadsConfig, hidden: int, h: int, m: int, side: int, seed: int):
    with seeded_torch(seed):
        trunk = SharedTrunk(hidden, config.n_shared, config.n_heads, config.ffn_dim)
        predictor = PredictorHead(trunk, hidden, h, m, side, config.n_heads, config.ffn_dim)
        reconstructor = ReconstructorHead(trunk, hidden, config.n_heads, config.ffn_dim)
    return predictor, reconstructor


def predict(P: PredictorHead, e_seq: torch.Tensor, h: int | None = None, m: int | None = None) -> torch.Tensor:
    if h is not None and h != P.h or m is not None and m != P.m:
        raise InvalidArgument(f"predictor built for h={P.h}, m={P.m}; asked for h={h}, m={m}")
    if e_seq.shape[-2] < P.h:
        raise InvalidArgument(f"sequence of length {e_seq.shape[-2]} shorter than h={P.h}")
    return P(e_seq)


def prediction_loss(x_hat: torch.Tensor, x: torch.Tensor, m: int | None = None) -> torch.Tensor:
    """Mean over horizon steps of the cell-averaged squared error (batch-averaged)."""
    if x_hat.shape != x.shape:
        raise InvalidArgument(f"shape mismatch {tuple(x_hat.shape)} vs {tuple(x.shape)}")
    if x.ndim < 4 or (m is not None and x.shape[-4] != m):
        raise InvalidArgument(f"expected (..., m, 1, l, l) frames, got {tuple(x.shape)}")
    per_step = ((x_hat - x) ** 2).flatten(-3).mean(-1)  # (..., m)
    return per_step.mean()


@dataclass(frozen=True, eq=False)
class EmbeddingMask:
    keep: torch.Tensor  # same shape as the embeddings, 1 = kept, 0 = masked
    p: float

    @property
    def n_masked_per_vector(self) -> torch.Tensor:
        return (self.keep == 0).sum(-1)


def mask_embeddings(e_seq: torch.Tensor, p: float, rng: np.random.Generator) -> tuple[torch.Tensor, EmbeddingMask]:
    """Zero ``round(p*d)`` uniformly chosen entries of every embedding vector."""
    if not 0.0 < p < 1.0:
        raise InvalidArgument(f"mask ratio must be in (0, 1), got {p}")
    d = e_seq.shape[-1]
    k = mask_count(p, d)
    n_vec = int(np.prod(e_seq.shape[:-1]))
    # argsort of uniform noise gives a uniform random subset per row
    chosen = np.argsort(rng.random((n_vec, d)), axis=1)[:, :k]
    keep = np.ones((n_vec, d), dtype=np.float32)
    np.put_along_axis(keep, chosen, 0.0, axis=1)
    keep_t = torch.as_tensor(keep.reshape(e_seq.shape), dtype=e_seq.dtype)
    return e_seq * keep_t, EmbeddingMask(keep_t, p)


def reconstruction_loss(G, masked_seq: torch.Tensor, e_seq: torch.Tensor, **kwargs) -> torch.Tensor:
    """Per-vector sum of squared errors averaged over the vectors."""
    if masked_seq.shape != e_seq.shape:
        raise InvalidArgument(f"length/shape mismatch {tuple(masked_seq.shape)} vs {tuple(e_seq.shape)}")
    recon = G(masked_seq, **kwargs)
    return ((recon - e_seq) ** 2).sum(-1).mean()
