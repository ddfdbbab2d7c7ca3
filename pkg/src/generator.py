"""
Report decoder conditioned on [f_D; text slot; retrieved text blocks].

The conditioning rows form an unordered cross-attention memory: they get a
block-type embedding but no position, so the order of retrieved blocks does
not matter.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Literal

import torch
from torch import nn

from .config import TrainConfig
from .corpus import BOS, EOS, PAD, TokenSequence
from .encoders import Attention, FeedForward
from .errors import DimensionError, InputValidationError
from .numerics import DTYPE, EPS

logger = logging.getLogger(__name__)

BLOCK_TAGS = ("disease", "text", "retrieved")


@dataclass
class ConditioningBundle:
    disease: torch.Tensor    # (B, d, e)   f_D
    text: torch.Tensor       # (B, d, e)   f_T, the null placeholder, or f*_T_hat
    retrieved: torch.Tensor  # (B, k, d, e)

    def __post_init__(self):
        if self.disease.shape != self.text.shape or self.retrieved.shape[2:] != self.disease.shape[1:]:
            raise DimensionError(
                f"bundle blocks disagree: disease {tuple(self.disease.shape)}, text {tuple(self.text.shape)}, "
                f"retrieved {tuple(self.retrieved.shape)}"
            )

    @property
    def batch(self) -> int:
        return self.disease.shape[0]

    @property
    def k(self) -> int:
        return self.retrieved.shape[1]

    @property
    def row_count(self) -> int:
        return (2 + self.k) * self.disease.shape[1]

    def tags(self) -> list[str]:
        """Source tag of each d-row block, in memory order."""
        return ["disease", "text"] + ["retrieved"] * self.k

    def block_types(self) -> torch.Tensor:
        d = self.disease.shape[1]
        types = [BLOCK_TAGS.index(tag) for tag in self.tags()]
        return torch.tensor(types, dtype=torch.long).repeat_interleave(d)

    def memory(self) -> torch.Tensor:
        B, d, e = self.disease.shape
        blocks = [self.disease, self.text, self.retrieved.reshape(B, self.k * d, e)]
        return torch.cat(blocks, dim=1)

    def select(self, rows) -> "ConditioningBundle":
        return ConditioningBundle(self.disease[rows], self.text[rows], self.retrieved[rows])

    def repeat(self, times: int) -> "ConditioningBundle":
        return ConditioningBundle(
            self.disease.expand(times, -1, -1),
            self.text.expand(times, -1, -1),
            self.retrieved.expand(times, -1, -1, -1),
        )


class DecoderBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mult: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, dtype=DTYPE)
        self.self_attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, dtype=DTYPE)
        self.cross_attn = Attention(dim, heads)
        self.norm3 = nn.LayerNorm(dim, dtype=DTYPE)
        self.ff = FeedForward(dim, mult)

    def forward(self, x: torch.Tensor, memory: torch.Tensor, causal: torch.Tensor) -> torch.Tensor:
        y = self.norm1(x)
        x = x + self.self_attn(y, y, causal)
        x = x + self.cross_attn(self.norm2(x), memory)
        return x + self.ff(self.norm3(x))


class ReportDecoder(nn.Module):
    def __init__(self, config: TrainConfig, vocab_size: int):
        super().__init__()
        self.max_len = config.max_len
        self.token_embed = nn.Embedding(vocab_size, config.e, dtype=DTYPE)
        nn.init.normal_(self.token_embed.weight, std=0.02)
        self.pos_embed = nn.Parameter(torch.randn(config.max_len, config.e, dtype=DTYPE) * 0.02)
        self.memory_type = nn.Parameter(torch.randn(len(BLOCK_TAGS), config.e, dtype=DTYPE) * 0.02)
        self.blocks = nn.ModuleList(
            DecoderBlock(config.e, config.heads, config.ff_mult) for _ in range(config.layers)
        )
        self.norm = nn.LayerNorm(config.e, dtype=DTYPE)
        self.output = nn.Linear(config.e, vocab_size, dtype=DTYPE)

    def forward(self, tokens: torch.Tensor, bundle: ConditioningBundle) -> torch.Tensor:
        """tokens (B, L) -> next-token logits (B, L, |V|)."""
        L = tokens.shape[1]
        if L > self.max_len:
            raise DimensionError(f"decoder input of length {L} exceeds max_len={self.max_len}")
        memory = bundle.memory() + self.memory_type[bundle.block_types()]
        causal = torch.ones((L, L), dtype=torch.bool).tril().unsqueeze(0)
        x = self.token_embed(tokens) + self.pos_embed[:L]
        for block in self.blocks:
            x = block(x, memory, causal)
        return self.output(self.norm(x))


def check_targets(tokens: torch.Tensor) -> None:
    """Every row is BOS ... EOS followed only by PAD."""
    if tokens.shape[1] < 2:
        raise InputValidationError("target sequences need at least BOS and EOS")
    for row in tokens.tolist():
        if row[0] != BOS or EOS not in row:
            raise InputValidationError("target sequence must start with BOS and contain EOS")
        end = row.index(EOS)
        if PAD in row[:end] or any(t != PAD for t in row[end + 1 :]):
            raise InputValidationError("target sequence contains PAD inside the sequence")


def generation_loss(tokens: torch.Tensor, bundle: ConditioningBundle, decoder: ReportDecoder) -> torch.Tensor:
    """
    Teacher-forced negative log-likelihood: summed over positions, averaged
    over the batch. Token probabilities are clipped at EPS.
    """
    check_targets(tokens)
    logits = decoder(tokens[:, :-1], bundle)
    log_probs = torch.log_softmax(logits, dim=-1).clamp_min(math.log(EPS))
    target = tokens[:, 1:]
    picked = log_probs.gather(-1, target.unsqueeze(-1)).squeeze(-1)
    nll = -(picked * (target != PAD))
    return nll.sum(dim=1).mean()


def _finish(ids: List[int], truncated: bool) -> TokenSequence:
    return TokenSequence(tuple(ids), truncated)


def _greedy(bundle: ConditioningBundle, decoder: ReportDecoder, max_len: int) -> List[TokenSequence]:
    B = bundle.batch
    seqs = torch.full((B, 1), BOS, dtype=torch.long)
    done = torch.zeros(B, dtype=torch.bool)
    truncated = torch.zeros(B, dtype=torch.bool)
    while seqs.shape[1] < max_len and not bool(done.all()):
        log_probs = torch.log_softmax(decoder(seqs, bundle)[:, -1], dim=-1)
        nxt = log_probs.argmax(dim=-1)  # first maximum = lowest token id
        if seqs.shape[1] == max_len - 1:
            truncated |= ~done & (nxt != EOS)
            nxt = torch.full_like(nxt, EOS)
        nxt = torch.where(done, torch.full_like(nxt, PAD), nxt)
        seqs = torch.cat([seqs, nxt.unsqueeze(1)], dim=1)
        done |= nxt == EOS

    results = []
    for row, flag in zip(seqs.tolist(), truncated.tolist()):
        results.append(_finish(row[: row.index(EOS) + 1], flag))
    return results


def _beam(bundle: ConditioningBundle, decoder: ReportDecoder, max_len: int, width: int) -> TokenSequence:
    alive: list[tuple[list[int], float]] = [([BOS], 0.0)]
    finished: list[tuple[list[int], float, bool]] = []
    while alive and len(finished) < width:
        prefix = torch.tensor([ids for ids, _ in alive], dtype=torch.long)
        log_probs = torch.log_softmax(decoder(prefix, bundle.repeat(len(alive)))[:, -1], dim=-1)
        candidates = []
        for b, (ids, score) in enumerate(alive):
            order = torch.sort(-log_probs[b], stable=True).indices[:width]
            for tok in order.tolist():
                candidates.append((score + float(log_probs[b, tok]), b, tok))
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))

        next_alive = []
        for score, b, tok in candidates[:width]:
            ids = alive[b][0] + [tok]
            if tok == EOS:
                finished.append((ids, score, False))
            elif len(ids) == max_len:
                finished.append((ids[:-1] + [EOS], score, True))
            else:
                next_alive.append((ids, score))
        alive = next_alive

    best = max(finished, key=lambda f: f[1] / (len(f[0]) - 1))
    return _finish(best[0], best[2])


def decode(
    bundle: ConditioningBundle,
    decoder: ReportDecoder,
    max_len: int,
    mode: Literal["greedy", "beam"] = "greedy",
    width: int = 1,
) -> List[TokenSequence]:
    """
    Decode one report per bundle row. Generation stops at EOS or max_len;
    a sequence cut at max_len ends in EOS and carries truncated=True.
    Beam search ranks finished hypotheses by mean token log-probability.
    """
    if max_len < 2:
        raise ValueError(f"max_len must be at least 2, got {max_len}")
    max_len = min(max_len, decoder.max_len)
    with torch.no_grad():
        if mode == "greedy":
            return _greedy(bundle, decoder, max_len)
        if mode == "beam":
            if width < 1:
                raise ValueError(f"beam width must be positive, got {width}")
            return [_beam(bundle.select(slice(r, r + 1)), decoder, max_len, width) for r in range(bundle.batch)]
    raise ValueError(f"unknown decoding mode {mode!r}")
