"""Semantic prompts and assembly of the backbone input sequence.

A prompt is rendered from a fixed template, split into word-level tokens from a
closed vocabulary, embedded with the backbone's text table and followed by the
projected spatial-temporal tokens.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Sequence

import torch
from torch import nn

from .errors import InvalidArgument

DEFAULT_TEMPLATE = (
    "City: {city}. Region top-left: ({i},{j}). Side: {side}. Task: {task}. "
    "Given hours {prior} predict hours {target}."
)
TASKS = ("speed", "inflow", "demand")

_TOKEN_RE = re.compile(r"[A-Za-z][\w'\-]*|\d+|[^\w\s]")
_PARSE_RE = re.compile(
    r"^City: (?P<city>.+?)\. Region top-left: \((?P<i>\d+),(?P<j>\d+)\)\. Side: (?P<side>\d+)\. "
    r"Task: (?P<task>\S+)\. Given hours (?P<prior>[\d,]+) predict hours (?P<target>[\d,]+)\.$"
)


@dataclass(frozen=True)
class PromptContext:
    city: str
    top_left: tuple[int, int]
    side: int
    prior_hours: tuple[int, ...]
    target_hours: tuple[int, ...]
    task: str
    vocabulary: tuple[str, ...] = TASKS

    def __post_init__(self):
        object.__setattr__(self, "prior_hours", tuple(int(h) for h in self.prior_hours))
        object.__setattr__(self, "target_hours", tuple(int(h) for h in self.target_hours))
        object.__setattr__(self, "top_left", (int(self.top_left[0]), int(self.top_left[1])))
        if not self.prior_hours or not self.target_hours:
            raise InvalidArgument("prior and target hour lists must be non-empty")
        if set(self.prior_hours) & set(self.target_hours):
            raise InvalidArgument("prior and target hours overlap")
        if self.task not in self.vocabulary:
            raise InvalidArgument(f"task {self.task!r} not in {self.vocabulary}")


def build_prompt(ctx: PromptContext, template: str = DEFAULT_TEMPLATE) -> str:
    return template.format(
        city=ctx.city,
        i=ctx.top_left[0],
        j=ctx.top_left[1],
        side=ctx.side,
        task=ctx.task,
        prior=",".join(map(str, ctx.prior_hours)),
        target=",".join(map(str, ctx.target_hours)),
    )


def parse_prompt(text: str, vocabulary: Sequence[str] = TASKS) -> PromptContext:
    """Inverse of :func:`build_prompt` for the default template."""
    m = _PARSE_RE.match(text)
    if m is None:
        raise InvalidArgument(f"not a rendered prompt: {text!r}")
    return PromptContext(
        city=m["city"],
        top_left=(int(m["i"]), int(m["j"])),
        side=int(m["side"]),
        prior_hours=tuple(int(h) for h in m["prior"].split(",")),
        target_hours=tuple(int(h) for h in m["target"].split(",")),
        task=m["task"],
        vocabulary=tuple(vocabulary),
    )


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text)


@dataclass(frozen=True)
class Vocabulary:
    words: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    PAD = "<pad>"
    UNK = "<unk>"

    def __post_init__(self):
        object.__setattr__(self, "index", {w: k for k, w in enumerate(self.words)})

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, text: str) -> list[int]:
        unk = self.index[self.UNK]
        return [self.index.get(tok, unk) for tok in tokenize(text)]

    @classmethod
    def build(
        cls,
        cities: Sequence[str] = ("synthetic",),
        tasks: Sequence[str] = TASKS,
        max_int: int = 64,
        template: str = DEFAULT_TEMPLATE,
    ) -> "Vocabulary":
        """Closed vocabulary covering every rendering of ``template``."""
        words = [cls.PAD, cls.UNK]
        fixed = re.sub(r"\{[^}]*\}", " ", template)
        for source in (*tokenize(fixed), *sum((tokenize(c) for c in cities), []), *tasks):
            if source not in words:
                words.append(source)
        for tok in ("(", ")", ",", ".", ":"):
            if tok not in words:
                words.append(tok)
        words += [str(k) for k in range(max_int + 1) if str(k) not in words]
        return cls(tuple(words))


@dataclass(frozen=True)
class TokenSequence:
    tokens: torch.Tensor  # (h, d_v + d_k)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.tokens.ndim != 2:
            raise InvalidArgument(f"tokens must be 2-D (slots, width), got {tuple(self.tokens.shape)}")
        if not torch.isfinite(self.tokens).all():
            raise InvalidArgument("token sequence contains non-finite values")

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def width(self) -> int:
        return self.tokens.shape[1]


@dataclass(frozen=True)
class BackboneInput:
    embedded_sequence: torch.Tensor  # (n_text + h, hidden) or batched (B, n_text + h, hidden)
    boundary: int

    @property
    def seq_len(self) -> int:
        return self.embedded_sequence.shape[-2]


class TextEmbedding(nn.Module):
    """Word embedding table bound to its vocabulary."""

    def __init__(self, vocab: Vocabulary, hidden_dim: int):
        super().__init__()
        self.vocab = vocab
        self.table = nn.Embedding(len(vocab), hidden_dim)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        return self.table(ids)

    def embed_text(self, text: str) -> torch.Tensor:
        ids = torch.tensor(self.vocab.encode(text), dtype=torch.long)
        return self.table(ids)


def assemble_input(
    prompt: str | torch.Tensor,
    u: TokenSequence | torch.Tensor,
    backbone_embed_table: TextEmbedding,
    projector: nn.Module,
) -> BackboneInput:
    """Embedded prompt followed by ``projector(u_t)`` for each slot.

    ``prompt`` may be text or pre-encoded ids (``(n_text,)`` or ``(B, n_text)``);
    ``u`` may be a :class:`TokenSequence` or a ``(h, w)`` / ``(B, h, w)`` tensor.
    """
    tokens = u.tokens if isinstance(u, TokenSequence) else u
    in_features = getattr(projector, "in_features", tokens.shape[-1])
    if tokens.shape[-1] != in_features:
        raise InvalidArgument(
            f"token width {tokens.shape[-1]} does not match projector input {in_features}"
        )
    if isinstance(prompt, str):
        text = backbone_embed_table.embed_text(prompt)
    else:
        text = backbone_embed_table(prompt)
    projected = projector(tokens)
    if text.shape[-1] != projected.shape[-1]:
        raise InvalidArgument(
            f"text width {text.shape[-1]} does not match projected width {projected.shape[-1]}"
        )
    if projected.ndim == 3 and text.ndim == 2:
        text = text.unsqueeze(0).expand(projected.shape[0], -1, -1)
    n_text = text.shape[-2]
    return BackboneInput(torch.cat([text, projected], dim=-2), n_text)
