"""Compact decoder-style transformer with partially frozen attention (PFA).

Each layer computes ``e = LayerNorm(e + SA(e))`` and, when ``ffn_dim > 0``, a
second post-norm feed-forward sublayer. Under PFA the first ``l_frozen`` layers
are fixed entirely; later layers only update their query projection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import FreezeViolation, InvalidArgument, TrainingFailure
from .prompts import BackboneInput, TextEmbedding, Vocabulary
from .utils import seeded_torch


@dataclass
class BackboneConfig:
    L: int = 6
    l_frozen: int = 4
    hidden_dim: int = 128
    n_heads: int = 4
    ffn_dim: int = 256
    vocab_size: int = 0  # 0: taken from the prompt vocabulary
    max_seq_len: int = 96
    causal: bool = True
    pretrain_steps: int = 0

    def __post_init__(self):
        if self.L < 0 or not 0 <= self.l_frozen <= self.L:
            raise InvalidArgument(f"need 0 <= l_frozen <= L, got l_frozen={self.l_frozen}, L={self.L}")
        if self.hidden_dim % self.n_heads:
            raise InvalidArgument("hidden_dim must be divisible by n_heads")


class SelfAttention(nn.Module):
    def __init__(self, hidden: int, n_heads: int, causal: bool):
        super().__init__()
        self.n_heads = n_heads
        self.causal = causal
        self.w_q = nn.Linear(hidden, hidden, bias=False)
        self.w_k = nn.Linear(hidden, hidden, bias=False)
        self.w_v = nn.Linear(hidden, hidden, bias=False)
        self.w_o = nn.Linear(hidden, hidden, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        *lead, s, hidden = x.shape
        hd = hidden // self.n_heads

        def heads(t):
            return t.reshape(*lead, s, self.n_heads, hd).transpose(-3, -2)

        q, k, v = heads(self.w_q(x)), heads(self.w_k(x)), heads(self.w_v(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
        if self.causal:
            future = torch.triu(torch.ones(s, s, dtype=torch.bool, device=x.device), diagonal=1)
            scores = scores.masked_fill(future, float("-inf"))
        out = torch.softmax(scores, dim=-1) @ v
        return self.w_o(out.transpose(-3, -2).reshape(*lead, s, hidden))


class TransformerLayer(nn.Module):
    def __init__(self, hidden: int, n_heads: int, ffn_dim: int, causal: bool):
        super().__init__()
        self.attn = SelfAttention(hidden, n_heads, causal)
        self.norm1 = nn.LayerNorm(hidden)
        if ffn_dim > 0:
            self.ffn = nn.Sequential(nn.Linear(hidden, ffn_dim), nn.GELU(), nn.Linear(ffn_dim, hidden))
            self.norm2 = nn.LayerNorm(hidden)
        else:
            self.ffn = None

    def forward(self, e: torch.Tensor) -> torch.Tensor:
        e = self.norm1(e + self.attn(e))
        if self.ffn is not None:
            e = self.norm2(e + self.ffn(e))
        return e


class Backbone(nn.Module):
    """Parameters of the stand-in language model plus the token projector."""

    def __init__(self, config: BackboneConfig, vocab: Vocabulary, token_dim: int):
        super().__init__()
        if config.vocab_size and config.vocab_size != len(vocab):
            raise InvalidArgument(f"vocab_size {config.vocab_size} != vocabulary size {len(vocab)}")
        self.config = config
        self.text = TextEmbedding(vocab, config.hidden_dim)
        self.projector = nn.Linear(token_dim, config.hidden_dim)
        self.layers = nn.ModuleList(
            TransformerLayer(config.hidden_dim, config.n_heads, config.ffn_dim, config.causal)
            for _ in range(config.L)
        )
        self.lm_head_bias = nn.Parameter(torch.zeros(len(vocab)))

    @property
    def vocab(self) -> Vocabulary:
        return self.text.vocab

    def forward(self, inp: BackboneInput | torch.Tensor, return_all: bool = False):
        e = inp.embedded_sequence if isinstance(inp, BackboneInput) else inp
        if e.shape[-2] > self.config.max_seq_len:
            raise InvalidArgument(
                f"sequence length {e.shape[-2]} exceeds max_seq_len {self.config.max_seq_len}"
            )
        states = [e]
        for layer in self.layers:
            e = layer(e)
            states.append(e)
        return states if return_all else e


def build_backbone(config: BackboneConfig, vocab: Vocabulary, token_dim: int, seed: int) -> Backbone:
    with seeded_torch(seed):
        return Backbone(config, vocab, token_dim)


def forward(state: Backbone, inp: BackboneInput) -> torch.Tensor:
    return state(inp)


def pfa_partition(state: Backbone, l_frozen: int | None = None) -> tuple[list[str], list[str]]:
    """Set ``requires_grad`` per the PFA rule and return (frozen, trainable) names.

    Trainable: ``w_q`` of layers ``l_frozen+1..L`` and the token projector.
    Everything else, including keys, values, output projections, FFNs and
    layer norms of the trainable layers, is frozen.
    """
    l_frozen = state.config.l_frozen if l_frozen is None else l_frozen
    if not 0 <= l_frozen <= len(state.layers):
        raise InvalidArgument(f"l_frozen must be in [0, {len(state.layers)}], got {l_frozen}")
    frozen, trainable = [], []
    for name, p in state.named_parameters():
        train = name.startswith("projector.")
        if name.startswith("layers."):
            layer_idx = int(name.split(".")[1])
            train = layer_idx >= l_frozen and ".attn.w_q." in name
        p.requires_grad_(train)
        (trainable if train else frozen).append(name)
    state.pfa_l_frozen = l_frozen
    return frozen, trainable


def trainable_mask(module: nn.Module) -> dict[str, bool]:
    return {name: p.requires_grad for name, p in module.named_parameters()}


def finetune_step(
    params: list[nn.Parameter],
    loss_fn,
    optimizer: torch.optim.Optimizer,
    frozen: dict[str, nn.Parameter] | None = None,
    check: bool = False,
) -> float:
    """One optimizer step on ``loss_fn()``.

    Gradients flow through the whole graph; only parameters registered with the
    optimizer move. With ``check=True`` every tensor in ``frozen`` is compared
    before and after the step.
    """
    before = {k: v.detach().clone() for k, v in frozen.items()} if check and frozen else None
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise TrainingFailure(f"non-finite fine-tuning loss {loss.item()}")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    if before is not None:
        for k, v in frozen.items():
            if not torch.equal(before[k], v.detach()):
                raise FreezeViolation(f"frozen parameter {k} changed during fine-tuning")
    return loss.item()


def pretrain_language_model(state: Backbone, texts: list[str], steps: int, lr: float = 1e-3, seed: int = 0) -> list[float]:
    """Optional next-token pre-training on rendered prompts (weights tied to the text table)."""
    if steps <= 0 or state.config.L == 0:
        return []
    ids = [torch.tensor(state.vocab.encode(t)) for t in texts]
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(state.parameters(), lr=lr)
    losses = []
    for _ in range(steps):
        seq = ids[int(torch.randint(len(ids), (1,), generator=gen))]
        h = state(state.text(seq[:-1]))
        logits = h @ state.text.table.weight.T + state.lm_head_bias
        loss = nn.functional.cross_entropy(logits, seq[1:])
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    return losses
