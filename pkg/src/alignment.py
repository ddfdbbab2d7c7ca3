"""
Shared embedding space training: the symmetric contrastive loss over in-batch
pairs plus a FIFO training queue of recent detached features.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from .errors import DimensionError, InvariantViolation
from .numerics import DTYPE, pairwise_cosine


@dataclass(frozen=True)
class QueueEntry:
    entry_id: int
    record_id: str
    text_features: torch.Tensor   # (d, e), detached
    image_features: torch.Tensor  # (d, e), detached
    annotation: torch.Tensor      # (d, 2)


@dataclass(frozen=True)
class FeatureBank:
    """
    Immutable stack of queue entries, ordered by ascending entry_id.
    Used for queue snapshots and for the frozen retrieval index.
    """

    entry_ids: tuple[int, ...]
    record_ids: tuple[str, ...]
    text_features: torch.Tensor   # (N, d, e)
    image_features: torch.Tensor  # (N, d, e)
    annotations: torch.Tensor     # (N, d, 2)

    def __len__(self) -> int:
        return len(self.entry_ids)

    @classmethod
    def from_entries(cls, entries: Sequence[QueueEntry], d: int, e: int) -> "FeatureBank":
        if not entries:
            return cls(
                (), (),
                torch.zeros((0, d, e), dtype=DTYPE),
                torch.zeros((0, d, e), dtype=DTYPE),
                torch.zeros((0, d, 2), dtype=DTYPE),
            )
        return cls(
            entry_ids=tuple(x.entry_id for x in entries),
            record_ids=tuple(x.record_id for x in entries),
            text_features=torch.stack([x.text_features for x in entries]),
            image_features=torch.stack([x.image_features for x in entries]),
            annotations=torch.stack([x.annotation for x in entries]),
        )


class TrainingQueue:
    """FIFO of the most recent `capacity` feature pairs with monotone ids."""

    def __init__(self, capacity: int, d: int, e: int):
        if capacity < 1:
            raise ValueError(f"queue capacity must be positive, got {capacity}")
        self.capacity = capacity
        self.d, self.e = d, e
        self._entries: deque[QueueEntry] = deque(maxlen=capacity)
        self._next_id = 0

    def __len__(self) -> int:
        return len(self._entries)

    def entries(self) -> list[QueueEntry]:
        return list(self._entries)

    def push(
        self,
        record_ids: Sequence[str],
        text_features: torch.Tensor,
        image_features: torch.Tensor,
        annotations: torch.Tensor,
    ) -> None:
        if text_features.requires_grad or image_features.requires_grad:
            raise InvariantViolation("queue entries must be detached from the gradient tape")
        if text_features.shape[1:] != (self.d, self.e) or image_features.shape != text_features.shape:
            raise DimensionError(
                f"queue expects (B, {self.d}, {self.e}) features, got {tuple(text_features.shape)} "
                f"and {tuple(image_features.shape)}"
            )
        for row, record_id in enumerate(record_ids):
            self._entries.append(
                QueueEntry(
                    entry_id=self._next_id,
                    record_id=record_id,
                    text_features=text_features[row].clone(),
                    image_features=image_features[row].clone(),
                    annotation=annotations[row].detach().clone(),
                )
            )
            self._next_id += 1

    def snapshot(self) -> FeatureBank:
        return FeatureBank.from_entries(list(self._entries), self.d, self.e)


def queue_push(
    queue: TrainingQueue,
    record_ids: Sequence[str],
    text_features: torch.Tensor,
    image_features: torch.Tensor,
    annotations: torch.Tensor,
) -> TrainingQueue:
    queue.push(record_ids, text_features, image_features, annotations)
    return queue


def _exclusion_mask(record_ids: Sequence[str], bank: FeatureBank) -> torch.Tensor:
    return torch.tensor([[rid == other for other in bank.record_ids] for rid in record_ids], dtype=torch.bool)


def contrastive_loss(
    image_features: torch.Tensor,
    text_features: torch.Tensor,
    bank: FeatureBank | None,
    tau: torch.Tensor,
    record_ids: Sequence[str] | None = None,
) -> torch.Tensor:
    """
    Symmetric contrastive loss over Frobenius cosine similarities / tau.

    Image-to-text: each image scores its own text (the positive) against the
    other in-batch texts and all queued texts; text-to-image mirrors this
    with image candidates. Queue entries of the same record are left out.
    The loss is the batch mean of 0.5 * (both cross-entropies).
    """
    if image_features.shape != text_features.shape:
        raise DimensionError(
            f"image {tuple(image_features.shape)} and text {tuple(text_features.shape)} features differ"
        )
    temperature = tau.reshape(())
    sims = pairwise_cosine(image_features, text_features) / temperature
    i2t, t2i = sims, sims.transpose(0, 1)

    if bank is not None and len(bank):
        queued_texts = pairwise_cosine(image_features, bank.text_features) / temperature
        queued_images = pairwise_cosine(text_features, bank.image_features) / temperature
        if record_ids is not None:
            # masked after scaling so tau never sees an infinite logit
            same = _exclusion_mask(record_ids, bank)
            queued_texts = queued_texts.masked_fill(same, float("-inf"))
            queued_images = queued_images.masked_fill(same, float("-inf"))
        i2t = torch.cat([i2t, queued_texts], dim=1)
        t2i = torch.cat([t2i, queued_images], dim=1)

    labels = torch.arange(image_features.shape[0])
    loss_i2t = F.cross_entropy(i2t, labels, reduction="none")
    loss_t2i = F.cross_entropy(t2i, labels, reduction="none")
    return (0.5 * (loss_i2t + loss_t2i)).mean()


def clamp_temperature(tau: torch.Tensor, low: float, high: float) -> None:
    with torch.no_grad():
        tau.clamp_(low, high)
