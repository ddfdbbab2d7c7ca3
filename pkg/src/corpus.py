"""
Paired (image, report, disease annotation) records: the seeded synthetic
generator, JSONL ingestion, the vocabulary/tokenizer and batch collation.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from nltk.tokenize import wordpunct_tokenize
from pydantic import BaseModel, ValidationError

from .config import (
    CORPUS_SIZE,
    DISEASE_PREVALENCE,
    IMAGE_SIZE,
    MAX_NEGATIVE_SENTENCES,
    NUM_DISEASES,
    PATCH_SIZE,
    SPLIT_RATIO,
    TrainConfig,
)
from .errors import ConfigError, IngestionError, InputValidationError
from .numerics import DTYPE

logger = logging.getLogger(__name__)

# Single-word findings; disease i is identified by DISEASE_KEYWORDS[i].
DISEASE_KEYWORDS = [
    "cardiomegaly",
    "edema",
    "consolidation",
    "pneumonia",
    "atelectasis",
    "pneumothorax",
    "effusion",
    "nodule",
    "fracture",
    "emphysema",
    "fibrosis",
    "hernia",
    "infiltrate",
    "opacity",
]

LOCATIONS = ["left base", "right base", "left apex", "right apex", "mid zone", "hilum", "lingula"]

POSITIVE_TEMPLATES = [
    "there is {kw} in the {loc}.",
    "{kw} is seen in the {loc}.",
    "findings are consistent with {kw}.",
    "mild {kw} is present in the {loc}.",
]

NEGATIVE_TEMPLATES = [
    "no evidence of {kw}.",
    "no {kw} is seen.",
    "the lungs are free of {kw}.",
    "heart and lungs without {kw}.",
]

BLOB_NOISE = 0.05

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED_TOKENS = ["<pad>", "<bos>", "<eos>", "<unk>"]


@dataclass(eq=False)
class CorpusRecord:
    id: str
    views: np.ndarray      # (v, h, w) in [0, 1]
    report: str
    diseases: np.ndarray   # (d,) binary, 1 = present

    def annotation(self) -> np.ndarray:
        """d x 2 one-hot rows: column 0 = present, column 1 = absent."""
        present = self.diseases.astype(np.float64)
        return np.stack([present, 1.0 - present], axis=1)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "views": self.views.tolist(),
            "report": self.report,
            "diseases": [int(x) for x in self.diseases],
        }

    def same_as(self, other: "CorpusRecord") -> bool:
        return (
            self.id == other.id
            and self.report == other.report
            and np.array_equal(self.views, other.views)
            and np.array_equal(self.diseases, other.diseases)
        )


def keyword_table(d: int, keywords: Sequence[str] | None = None) -> list[str]:
    if keywords is not None:
        if len(keywords) != d:
            raise ConfigError(f"{len(keywords)} keywords given for d={d} diseases")
        return list(keywords)
    if d > len(DISEASE_KEYWORDS):
        raise ConfigError(f"d={d} exceeds the {len(DISEASE_KEYWORDS)} built-in disease keywords")
    return DISEASE_KEYWORDS[:d]


def blob_cells(d: int, h: int, w: int, patch: int = PATCH_SIZE) -> list[tuple[float, float]]:
    """Centre (row, col) of the grid cell each disease's blob is stamped at."""
    rows, cols = h // patch, w // patch
    cells = rows * cols
    if d > cells:
        raise ConfigError(f"d={d} diseases need more than the {cells} available blob locations")
    centres = []
    for i in range(d):
        cell = (i * cells) // d
        r, c = divmod(cell, cols)
        centres.append((r * patch + patch / 2 - 0.5, c * patch + patch / 2 - 0.5))
    return centres


def _render_view(rng: np.random.Generator, diseases: np.ndarray, centres, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    sigma = PATCH_SIZE / 4
    grid = np.zeros((h, w))
    for i in np.flatnonzero(diseases):
        cy, cx = centres[i]
        intensity = rng.uniform(0.6, 1.0)
        grid += intensity * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
    grid += rng.normal(0.0, BLOB_NOISE, size=(h, w))
    return np.clip(grid, 0.0, 1.0)


def _write_report(rng: np.random.Generator, diseases: np.ndarray, keywords, max_negatives: int) -> str:
    sentences = []
    for i in np.flatnonzero(diseases):
        template = POSITIVE_TEMPLATES[rng.integers(len(POSITIVE_TEMPLATES))]
        sentences.append(template.format(kw=keywords[i], loc=LOCATIONS[i % len(LOCATIONS)]))

    absent = np.flatnonzero(diseases == 0)
    # a record with no findings still gets one negated sentence
    limit = max_negatives if sentences else max(max_negatives, 1)
    if len(absent) and limit:
        count = int(rng.integers(1, min(limit, len(absent)) + 1))
        for i in rng.choice(absent, size=count, replace=False):
            template = NEGATIVE_TEMPLATES[rng.integers(len(NEGATIVE_TEMPLATES))]
            sentences.append(template.format(kw=keywords[i]))

    order = rng.permutation(len(sentences))
    return " ".join(sentences[j] for j in order).capitalize()


def generate_corpus(
    seed: int,
    n: int = CORPUS_SIZE,
    d: int = NUM_DISEASES,
    h: int = IMAGE_SIZE,
    w: int = IMAGE_SIZE,
    prevalence: float = DISEASE_PREVALENCE,
    max_negatives: int = MAX_NEGATIVE_SENTENCES,
    keywords: Sequence[str] | None = None,
) -> list[CorpusRecord]:
    """
    Generate a synthetic corpus that is learnable by construction.

    Each disease is present with probability `prevalence` and shows up as a
    Gaussian blob at its own grid cell. The report has one positive sentence
    (with the disease keyword) per present disease and up to `max_negatives`
    negated sentences about absent ones (at least one when nothing is
    present, so no report is empty), in random order.

    Args:
        seed: the corpus is a pure function of the seed and the sizes.
        n: number of records.
        d: number of diseases.
        h, w: view size in pixels (multiples of the patch size).

    Returns:
        A list of CorpusRecord.
    """
    if n < 1:
        raise ConfigError(f"corpus size must be positive, got {n}")
    if d < 2:
        raise ConfigError(f"need at least 2 diseases, got {d}")
    if h < PATCH_SIZE or w < PATCH_SIZE or h % PATCH_SIZE or w % PATCH_SIZE:
        raise ConfigError(f"view size {h}x{w} must be a positive multiple of {PATCH_SIZE}")
    words = keyword_table(d, keywords)
    centres = blob_cells(d, h, w)
    rng = np.random.default_rng(seed)

    records = []
    for i in range(n):
        diseases = (rng.random(d) < prevalence).astype(np.int64)
        num_views = 1 + int(rng.random() < 0.5)
        views = np.stack([_render_view(rng, diseases, centres, h, w) for _ in range(num_views)])
        report = _write_report(rng, diseases, words, max_negatives)
        records.append(CorpusRecord(id=f"syn{i:06d}", views=views, report=report, diseases=diseases))
    return records


def split_of(record_id: str, ratio: Sequence[int] = SPLIT_RATIO) -> str:
    bucket = int(hashlib.sha256(record_id.encode("utf-8")).hexdigest(), 16) % sum(ratio)
    if bucket < ratio[0]:
        return "train"
    if bucket < ratio[0] + ratio[1]:
        return "val"
    return "test"


def split_records(records: Sequence[CorpusRecord], ratio: Sequence[int] = SPLIT_RATIO) -> dict[str, list[CorpusRecord]]:
    splits: dict[str, list[CorpusRecord]] = {"train": [], "val": [], "test": []}
    for record in records:
        splits[split_of(record.id, ratio)].append(record)
    return splits


# ---- JSONL ingestion ----


class _RecordEnvelope(BaseModel):
    id: str
    views: list
    report: str
    diseases: list[int]


def _record_from_json(payload: dict, line: int, d: int | None) -> CorpusRecord:
    try:
        env = _RecordEnvelope.model_validate(payload)
    except ValidationError as e:
        fields = sorted({".".join(str(p) for p in err["loc"]) for err in e.errors()})
        raise IngestionError(f"missing or invalid field(s): {', '.join(fields)}", line) from e

    try:
        views = np.asarray(env.views, dtype=np.float64)
    except (ValueError, TypeError) as e:
        raise IngestionError(f"ragged or non-numeric view grid ({e})", line) from e
    if views.ndim != 3:
        raise IngestionError(f"views must be a list of 2-D grids, got {views.ndim}-D data", line)
    if not 1 <= views.shape[0] <= 2:
        raise IngestionError(f"expected 1 or 2 views, got {views.shape[0]}", line)
    if views.shape[1] < 8 or views.shape[2] < 8:
        raise IngestionError(f"view grid {views.shape[1]}x{views.shape[2]} is smaller than 8x8", line)
    if not np.isfinite(views).all():
        raise IngestionError("view grid contains non-finite values", line)

    diseases = np.asarray(env.diseases, dtype=np.int64)
    if d is not None and len(diseases) != d:
        raise IngestionError(f"diseases has length {len(diseases)}, expected {d}", line)
    if not np.isin(diseases, (0, 1)).all():
        raise IngestionError("diseases must be binary", line)
    if not env.report.strip():
        raise IngestionError("report is empty", line)
    return CorpusRecord(id=env.id, views=views, report=env.report, diseases=diseases)


def load_jsonl(path: str | Path, d: int | None = None) -> list[CorpusRecord]:
    """
    Load records from a JSONL file (one UTF-8 JSON object per line with
    fields id, views, report, diseases). Blank lines are skipped.
    The first record fixes d unless it is given.
    """
    records = []
    with open(path, encoding="utf-8") as handle:
        for number, raw in enumerate(handle, start=1):
            if not raw.strip():
                continue
            try:
                payload = json.loads(raw)
            except json.JSONDecodeError as e:
                raise IngestionError(f"invalid JSON ({e.msg})", number) from e
            if not isinstance(payload, dict):
                raise IngestionError("expected a JSON object", number)
            record = _record_from_json(payload, number, d)
            d = len(record.diseases)
            records.append(record)
    if not records:
        raise IngestionError(f"{path} contains no records")
    logger.info("Loaded %d records from %s", len(records), path)
    return records


def save_jsonl(records: Sequence[CorpusRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(record.to_json()) + "\n")


# ---- Tokenization ----


def word_tokens(text: str) -> list[str]:
    """Lowercase, split on whitespace and punctuation boundaries."""
    return wordpunct_tokenize(text.lower())


def _is_punct(token: str) -> bool:
    return not any(ch.isalnum() for ch in token)


def join_tokens(tokens: Sequence[str]) -> str:
    out = ""
    for token in tokens:
        if out and not _is_punct(token):
            out += " "
        out += token
    return out


def clean_text(text: str) -> str:
    """The normal form detokenize() reproduces for in-vocabulary text."""
    return join_tokens(word_tokens(text))


@dataclass
class Vocabulary:
    tokens: list[str]
    token_to_id: dict[str, int] = field(init=False)

    def __post_init__(self):
        if self.tokens[:4] != RESERVED_TOKENS:
            raise InputValidationError("vocabulary must start with the reserved tokens")
        self.token_to_id = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.token_to_id) != len(self.tokens):
            raise InputValidationError("vocabulary tokens are not unique")

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)


def build_vocab(records: Sequence[CorpusRecord]) -> Vocabulary:
    seen = set()
    for record in records:
        tokens = word_tokens(record.report)
        if not tokens:
            raise InputValidationError(f"record {record.id} has an empty report")
        seen.update(tokens)
    return Vocabulary(RESERVED_TOKENS + sorted(seen - set(RESERVED_TOKENS)))


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    truncated: bool = False

    def __post_init__(self):
        if len(self.ids) < 2 or self.ids[0] != BOS or self.ids[-1] != EOS:
            raise InputValidationError("token sequence must start with BOS and end with EOS")
        if PAD in self.ids:
            raise InputValidationError("token sequence contains PAD")

    def __len__(self) -> int:
        return len(self.ids)

    def content(self) -> list[int]:
        return list(self.ids[1:-1])


def tokenize(report: str, vocab: Vocabulary, max_len: int | None = None) -> TokenSequence:
    tokens = word_tokens(report) if report else []
    if not tokens:
        raise InputValidationError("cannot tokenize an empty report")
    ids = [BOS] + [vocab.id_of(t) for t in tokens] + [EOS]
    truncated = False
    if max_len is not None and len(ids) > max_len:
        logger.warning("report of %d tokens truncated to max_len=%d", len(ids), max_len)
        ids = ids[: max_len - 1] + [EOS]
        truncated = True
    return TokenSequence(tuple(ids), truncated)


def detokenize(seq: TokenSequence | Sequence[int], vocab: Vocabulary) -> str:
    ids = seq.ids if isinstance(seq, TokenSequence) else seq
    words = [vocab.tokens[i] for i in ids if i not in (PAD, BOS, EOS)]
    return join_tokens(words)


# ---- Batching ----


@dataclass
class Batch:
    ids: list[str]
    views: torch.Tensor        # (B, 2, h, w)
    view_mask: torch.Tensor    # (B, 2) bool, False for a missing second view
    tokens: torch.Tensor       # (B, L) long, PAD after EOS
    annotations: torch.Tensor  # (B, d, 2)

    def __len__(self) -> int:
        return len(self.ids)


def pad_sequences(seqs: Sequence[Sequence[int]]) -> torch.Tensor:
    width = max(len(s) for s in seqs)
    out = torch.full((len(seqs), width), PAD, dtype=torch.long)
    for row, seq in enumerate(seqs):
        out[row, : len(seq)] = torch.as_tensor(list(seq), dtype=torch.long)
    return out


def collate(records: Sequence[CorpusRecord], vocab: Vocabulary, config: TrainConfig) -> Batch:
    views = torch.zeros((len(records), 2, config.h, config.w), dtype=DTYPE)
    view_mask = torch.zeros((len(records), 2), dtype=torch.bool)
    for row, record in enumerate(records):
        if record.views.shape[1:] != (config.h, config.w):
            raise InputValidationError(
                f"record {record.id}: view size {record.views.shape[1:]} != configured {(config.h, config.w)}"
            )
        count = record.views.shape[0]
        views[row, :count] = torch.from_numpy(record.views)
        view_mask[row, :count] = True
    seqs = [tokenize(r.report, vocab, config.max_len).ids for r in records]
    annotations = torch.from_numpy(np.stack([r.annotation() for r in records])).to(DTYPE)
    return Batch(
        ids=[r.id for r in records],
        views=views,
        view_mask=view_mask,
        tokens=pad_sequences(seqs),
        annotations=annotations,
    )


if __name__ == "__main__":
    sample = generate_corpus(seed=7, n=5)
    vocab = build_vocab(sample)
    for record in sample:
        print(record.id, record.diseases.tolist(), "|", record.report)
    print("vocabulary size:", len(vocab))
