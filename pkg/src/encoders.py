"""
Image and text encoders. Both end in slot pooling: d learned slot queries
cross-attend over the token states, so every output is a d x e matrix
whatever the number of views or tokens.
"""
from __future__ import annotations

import logging
import math

import numpy as np
import torch
from torch import nn

from .config import TrainConfig
from .corpus import PAD, TokenSequence
from .errors import DimensionError
from .numerics import DTYPE

logger = logging.getLogger(__name__)


class Attention(nn.Module):
    """Multi-head scaled dot-product attention of x over memory."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise DimensionError(f"{heads} heads do not divide dimension {dim}")
        self.heads = heads
        self.query = nn.Linear(dim, dim, dtype=DTYPE)
        # no key bias: it would shift every score of a query equally
        self.key = nn.Linear(dim, dim, bias=False, dtype=DTYPE)
        self.value = nn.Linear(dim, dim, dtype=DTYPE)
        self.out = nn.Linear(dim, dim, dtype=DTYPE)

    def forward(self, x: torch.Tensor, memory: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """mask broadcasts to (B, Lq, Lk); True marks keys a query may attend to."""
        B, Lq, E = x.shape
        Lk = memory.shape[1]
        h, dh = self.heads, E // self.heads
        q = self.query(x).view(B, Lq, h, dh).transpose(1, 2)
        k = self.key(memory).view(B, Lk, h, dh).transpose(1, 2)
        v = self.value(memory).view(B, Lk, h, dh).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(dh)
        if mask is not None:
            scores = scores.masked_fill(~mask.unsqueeze(1), float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        return self.out((weights @ v).transpose(1, 2).reshape(B, Lq, E))


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim, dim * mult, dtype=DTYPE),
            nn.GELU(),
            nn.Linear(dim * mult, dim, dtype=DTYPE),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class EncoderBlock(nn.Module):
    """Pre-norm self-attention block."""

    def __init__(self, dim: int, heads: int, mult: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, dtype=DTYPE)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, dtype=DTYPE)
        self.ff = FeedForward(dim, mult)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor) -> torch.Tensor:
        y = self.norm1(x)
        x = x + self.attn(y, y, key_mask[:, None, :])
        return x + self.ff(self.norm2(x))


class SlotPooling(nn.Module):
    """
    d slot queries attend over the states (single head, scale 1/sqrt(e)).
    Output row i is slot i's query plus its attended value.
    """

    def __init__(self, dim: int, slots: int):
        super().__init__()
        self.slots = nn.Parameter(torch.randn(slots, dim, dtype=DTYPE) * 0.5)
        self.key = nn.Linear(dim, dim, bias=False, dtype=DTYPE)
        self.value = nn.Linear(dim, dim, dtype=DTYPE)

    def forward(self, states: torch.Tensor, key_mask: torch.Tensor) -> torch.Tensor:
        scores = self.slots @ self.key(states).transpose(-2, -1) / math.sqrt(states.shape[-1])
        scores = scores.masked_fill(~key_mask[:, None, :], float("-inf"))
        return self.slots + torch.softmax(scores, dim=-1) @ self.value(states)


class ImageEncoder(nn.Module):
    """Patch projection + view/position embeddings + self-attention + slot pooling."""

    def __init__(self, config: TrainConfig):
        super().__init__()
        self.size = (config.h, config.w)
        self.patch = config.patch
        num_patches = (config.h // config.patch) * (config.w // config.patch)
        self.patch_proj = nn.Linear(config.patch**2, config.e, dtype=DTYPE)
        self.view_embed = nn.Parameter(torch.randn(2, config.e, dtype=DTYPE) * 0.02)
        self.patch_pos = nn.Parameter(torch.randn(num_patches, config.e, dtype=DTYPE) * 0.02)
        self.blocks = nn.ModuleList(
            EncoderBlock(config.e, config.heads, config.ff_mult) for _ in range(config.layers)
        )
        self.norm = nn.LayerNorm(config.e, dtype=DTYPE)
        self.pool = SlotPooling(config.e, config.d)

    def forward(self, views: torch.Tensor, view_mask: torch.Tensor) -> torch.Tensor:
        """views (B, 2, h, w), view_mask (B, 2) -> (B, d, e)."""
        if views.dim() != 4 or views.shape[1] != 2 or tuple(views.shape[-2:]) != self.size:
            raise DimensionError(f"expected views of shape (B, 2, {self.size[0]}, {self.size[1]}), got {tuple(views.shape)}")
        B, p = views.shape[0], self.patch
        patches = views.unfold(2, p, p).unfold(3, p, p)  # (B, 2, h/p, w/p, p, p)
        patches = patches.reshape(B, 2, -1, p * p)
        x = self.patch_proj(patches) + self.view_embed[None, :, None, :] + self.patch_pos[None, None]
        num_patches = x.shape[2]
        x = x.reshape(B, 2 * num_patches, -1)
        key_mask = view_mask.repeat_interleave(num_patches, dim=1)
        for block in self.blocks:
            x = block(x, key_mask)
        return self.pool(self.norm(x), key_mask)


class TextEncoder(nn.Module):
    """Token + position embeddings, self-attention blocks, slot pooling."""

    def __init__(self, config: TrainConfig, vocab_size: int):
        super().__init__()
        self.max_len = config.max_len
        self.token_embed = nn.Embedding(vocab_size, config.e, dtype=DTYPE)
        nn.init.normal_(self.token_embed.weight, std=0.02)
        self.pos_embed = nn.Parameter(torch.randn(config.max_len, config.e, dtype=DTYPE) * 0.02)
        self.blocks = nn.ModuleList(
            EncoderBlock(config.e, config.heads, config.ff_mult) for _ in range(config.layers)
        )
        self.norm = nn.LayerNorm(config.e, dtype=DTYPE)
        self.pool = SlotPooling(config.e, config.d)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """tokens (B, L) PAD-padded -> (B, d, e)."""
        if tokens.shape[1] > self.max_len:
            logger.warning("text of %d tokens truncated to max_len=%d", tokens.shape[1], self.max_len)
            tokens = tokens[:, : self.max_len]
        key_mask = tokens != PAD
        x = self.token_embed(tokens) + self.pos_embed[: tokens.shape[1]]
        for block in self.blocks:
            x = block(x, key_mask)
        return self.pool(self.norm(x), key_mask)


def encode_image(views, encoder: ImageEncoder) -> torch.Tensor:
    """Encode one record's 1 or 2 views (v, h, w) into a d x e feature matrix."""
    grids = torch.as_tensor(np.asarray(views), dtype=DTYPE)
    if grids.dim() != 3 or not 1 <= grids.shape[0] <= 2:
        raise DimensionError(f"expected 1 or 2 views of shape (h, w), got {tuple(grids.shape)}")
    if tuple(grids.shape[1:]) != encoder.size:
        raise DimensionError(f"view size {tuple(grids.shape[1:])} does not match configured {encoder.size}")
    padded = torch.zeros((1, 2, *encoder.size), dtype=DTYPE)
    padded[0, : grids.shape[0]] = grids
    mask = torch.zeros((1, 2), dtype=torch.bool)
    mask[0, : grids.shape[0]] = True
    return encoder(padded, mask)[0]


def encode_text(seq: TokenSequence, encoder: TextEncoder) -> torch.Tensor:
    tokens = torch.as_tensor([list(seq.ids)], dtype=torch.long)
    return encoder(tokens)[0]
