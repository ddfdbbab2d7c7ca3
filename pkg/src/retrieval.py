"""
Exact top-k image-to-text retrieval over the training queue or the frozen
index, and the disease-matching constraint on the retrieved annotations.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Union

import numpy as np
import torch

from .alignment import FeatureBank, TrainingQueue
from .errors import CheckpointError, DimensionError, RetrievalError
from .numerics import DTYPE, cosine, cross_entropy_rows, pairwise_cosine

INDEX_MAGIC = b"DARTINDX"
INDEX_VERSION = 1
_INDEX_HEADER = struct.Struct("<8sIIIQ")  # magic, version, d, e, count


@dataclass(frozen=True)
class Hit:
    entry_id: int
    record_id: str
    similarity: float
    text_features: torch.Tensor  # (d, e)
    annotation: torch.Tensor     # (d, 2)


@dataclass(frozen=True)
class RetrievalResult:
    """Hits sorted by similarity (descending), ties by ascending entry_id."""

    hits: tuple[Hit, ...]

    def __len__(self) -> int:
        return len(self.hits)

    @property
    def ids(self) -> list[int]:
        return [h.entry_id for h in self.hits]

    @property
    def record_ids(self) -> list[str]:
        return [h.record_id for h in self.hits]

    @property
    def similarities(self) -> list[float]:
        return [h.similarity for h in self.hits]


class FrozenIndex:
    """Immutable retrieval source built from the training split after stage 1."""

    def __init__(self, bank: FeatureBank):
        self.bank = bank
        self._payload = _index_payload(bank)
        self.content_hash = hashlib.sha256(self._payload).hexdigest()

    def __len__(self) -> int:
        return len(self.bank)

    def to_bytes(self) -> bytes:
        return self._payload + bytes.fromhex(self.content_hash)

    def save(self, path: Union[str, Path]) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.to_bytes())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "FrozenIndex":
        return cls.from_bytes(Path(path).read_bytes())

    @classmethod
    def from_bytes(cls, blob: bytes) -> "FrozenIndex":
        if len(blob) < _INDEX_HEADER.size + 32:
            raise CheckpointError("index file is truncated")
        payload, digest = blob[:-32], blob[-32:]
        if hashlib.sha256(payload).digest() != digest:
            raise CheckpointError("index content hash mismatch")
        magic, version, d, e, count = _INDEX_HEADER.unpack_from(payload, 0)
        if magic != INDEX_MAGIC:
            raise CheckpointError("not a frozen index file")
        if version != INDEX_VERSION:
            raise CheckpointError(f"index version {version} is not supported (expected {INDEX_VERSION})")
        offset = _INDEX_HEADER.size
        if len(payload) < offset + 8:
            raise CheckpointError("index file is truncated")
        (ids_len,) = struct.unpack_from("<Q", payload, offset)
        offset += 8
        feat = count * d * e
        if len(payload) != offset + ids_len + 8 * (2 * feat + count * d * 2):
            raise CheckpointError(f"index payload size does not match {count} entries of {d}x{e}")
        try:
            record_ids = json.loads(payload[offset : offset + ids_len].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as err:
            raise CheckpointError(f"index record ids are unreadable: {err}") from err
        if len(record_ids) != count:
            raise CheckpointError(f"index lists {len(record_ids)} record ids for {count} entries")
        offset += ids_len
        floats = np.frombuffer(payload, dtype="<f8", offset=offset)
        text = floats[:feat].reshape(count, d, e)
        image = floats[feat : 2 * feat].reshape(count, d, e)
        annotations = floats[2 * feat :].reshape(count, d, 2)
        bank = FeatureBank(
            entry_ids=tuple(range(count)),
            record_ids=tuple(record_ids),
            text_features=torch.tensor(text, dtype=DTYPE),
            image_features=torch.tensor(image, dtype=DTYPE),
            annotations=torch.tensor(annotations, dtype=DTYPE),
        )
        return cls(bank)


def _index_payload(bank: FeatureBank) -> bytes:
    count, d, e = bank.text_features.shape
    ids = json.dumps(list(bank.record_ids)).encode("utf-8")
    parts = [
        _INDEX_HEADER.pack(INDEX_MAGIC, INDEX_VERSION, d, e, count),
        struct.pack("<Q", len(ids)),
        ids,
    ]
    for tensor in (bank.text_features, bank.image_features, bank.annotations):
        parts.append(tensor.detach().numpy().astype("<f8").tobytes())
    return b"".join(parts)


Source = Union[TrainingQueue, FeatureBank, FrozenIndex]


def as_bank(source: Source) -> FeatureBank:
    if isinstance(source, TrainingQueue):
        return source.snapshot()
    if isinstance(source, FrozenIndex):
        return source.bank
    return source


def _rank(similarities: torch.Tensor, bank: FeatureBank, k: int, exclude_id: str | None) -> RetrievalResult:
    if k == 0:
        return RetrievalResult(())
    keep = [i for i in range(len(bank)) if bank.record_ids[i] != exclude_id]
    if len(keep) < k:
        raise RetrievalError(
            f"top-{k} retrieval needs {k} candidates but the source has {len(bank)} "
            f"({len(keep)} after self-exclusion)"
        )
    keep.sort(key=lambda i: bank.entry_ids[i])
    rows = torch.tensor(keep, dtype=torch.long)
    # stable ascending sort of -sim keeps ascending entry_id among ties
    order = torch.sort(-similarities[rows], stable=True).indices[:k]
    hits = []
    for position in order.tolist():
        row = keep[position]
        hits.append(
            Hit(
                entry_id=bank.entry_ids[row],
                record_id=bank.record_ids[row],
                similarity=float(similarities[row]),
                text_features=bank.text_features[row],
                annotation=bank.annotations[row],
            )
        )
    return RetrievalResult(tuple(hits))


def topk(f_I: torch.Tensor, source: Source, k: int, exclude_id: str | None = None) -> RetrievalResult:
    """
    Exact Frobenius-cosine top-k of one image feature matrix against the
    text features of the source. exclude_id drops the query's own record.
    """
    return topk_many(f_I.unsqueeze(0), source, k, [exclude_id])[0]


def topk_many(
    queries: torch.Tensor,
    source: Source,
    k: int,
    exclude_ids: Sequence[str | None] | None = None,
) -> List[RetrievalResult]:
    if k < 0:
        raise RetrievalError(f"k must be non-negative, got {k}")
    bank = as_bank(source)
    if exclude_ids is None:
        exclude_ids = [None] * queries.shape[0]
    if k == 0:
        return [RetrievalResult(()) for _ in exclude_ids]
    if len(bank) and queries.shape[1:] != bank.text_features.shape[1:]:
        raise DimensionError(
            f"query shape {tuple(queries.shape[1:])} does not match source {tuple(bank.text_features.shape[1:])}"
        )
    with torch.no_grad():
        sims = pairwise_cosine(queries.detach(), bank.text_features)
    return [_rank(sims[row], bank, k, exclude) for row, exclude in enumerate(exclude_ids)]


def stack_hits(results: Sequence[RetrievalResult], d: int, e: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Retrieved text blocks (B, k, d, e) and annotations (B, k, d, 2)."""
    k = len(results[0]) if results else 0
    if k == 0:
        return (
            torch.zeros((len(results), 0, d, e), dtype=DTYPE),
            torch.zeros((len(results), 0, d, 2), dtype=DTYPE),
        )
    texts = torch.stack([torch.stack([h.text_features for h in r.hits]) for r in results])
    annotations = torch.stack([torch.stack([h.annotation for h in r.hits]) for r in results])
    return texts, annotations


def _per_hit_ce(y: torch.Tensor, retrieved: torch.Tensor) -> torch.Tensor:
    # y (..., d, 2) against every retrieved annotation (..., k, d, 2) -> (..., k)
    if retrieved.shape[-3] < 1:
        raise RetrievalError("disease matching needs at least one retrieved hit")
    target = y.unsqueeze(-3).expand_as(retrieved)
    return cross_entropy_rows(target, retrieved)


def disease_match(y: torch.Tensor, retrieved: torch.Tensor) -> torch.Tensor:
    """gamma = (1/k) sum_i CE(y, y_i), averaged over a leading batch axis if present."""
    return _per_hit_ce(y, retrieved).mean(-1).mean()


def disease_match_surrogate(
    y: torch.Tensor,
    retrieved: torch.Tensor,
    similarities: torch.Tensor,
    tau: torch.Tensor,
) -> torch.Tensor:
    """
    Training form of gamma: each hit's cross-entropy weighted by
    softmax(similarity / tau) over the k hits, so gradients reach f_I.
    Equal similarities give back disease_match exactly.
    """
    weights = torch.softmax(similarities / tau.reshape(()), dim=-1)
    return (weights * _per_hit_ce(y, retrieved)).sum(-1).mean()


def hit_similarities(f_I: torch.Tensor, retrieved_texts: torch.Tensor) -> torch.Tensor:
    """Differentiable cosines between f_I (B, d, e) and its hits (B, k, d, e) -> (B, k)."""
    return cosine(f_I.unsqueeze(1).expand_as(retrieved_texts), retrieved_texts)


def match_rate(y: torch.Tensor, retrieved: torch.Tensor) -> float:
    """Fraction of hits whose annotation equals the query's exactly."""
    if retrieved.shape[-3] == 0:
        return 0.0
    equal = (retrieved == y.unsqueeze(-3)).all(-1).all(-1)
    return float(equal.double().mean())
