"""
Inference plumbing shared by training, evaluation and the CLI: batched
encoding, the frozen index over the training split, stage-1 and stage-2
report generation, disease classification and retrieval lookups.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Sequence

import numpy as np
import torch

from .alignment import FeatureBank
from .config import TrainConfig
from .corpus import PAD, CorpusRecord, TokenSequence, Vocabulary, collate, detokenize, pad_sequences
from .disease import predicted_labels, prediction_scores
from .generator import ConditioningBundle, decode
from .model import DartModel
from .retrieval import FrozenIndex, RetrievalResult, Source, hit_similarities, stack_hits, topk_many
from .selfcorrect import Stage2Inputs, correct

logger = logging.getLogger(__name__)

INFERENCE_BATCH = 32


@dataclass
class EncodedRecords:
    record_ids: list[str]
    image_features: torch.Tensor  # (N, d, e)
    text_features: torch.Tensor   # (N, d, e)
    annotations: torch.Tensor     # (N, d, 2)


@dataclass
class GeneratedReport:
    id: str
    stage1_report: str
    stage2_report: str | None = None
    retrieved_ids: List[str] = field(default_factory=list)
    truncated: bool = False

    @property
    def stage(self) -> int:
        return 1 if self.stage2_report is None else 2

    @property
    def report(self) -> str:
        """The final report: the corrected one when stage 2 ran."""
        return self.stage1_report if self.stage2_report is None else self.stage2_report

    def to_dict(self) -> dict:
        return asdict(self)


def _chunks(records: Sequence[CorpusRecord], size: int):
    for start in range(0, len(records), size):
        yield records[start : start + size]


def encode_records(
    model: DartModel,
    records: Sequence[CorpusRecord],
    vocab: Vocabulary,
    config: TrainConfig,
    batch_size: int = INFERENCE_BATCH,
) -> EncodedRecords:
    """Gradient-free image and text features for every record."""
    ids, images, texts, annotations = [], [], [], []
    with torch.no_grad():
        for chunk in _chunks(records, batch_size):
            batch = collate(chunk, vocab, config)
            ids.extend(batch.ids)
            images.append(model.encode_images(batch))
            texts.append(model.encode_texts(batch.tokens))
            annotations.append(batch.annotations)
    return EncodedRecords(ids, torch.cat(images), torch.cat(texts), torch.cat(annotations))


def build_frozen_index(
    model: DartModel,
    records: Sequence[CorpusRecord],
    vocab: Vocabulary,
    config: TrainConfig,
) -> FrozenIndex:
    """Index the (training) records with the current encoders; entry ids follow record order."""
    encoded = encode_records(model, records, vocab, config)
    bank = FeatureBank(
        entry_ids=tuple(range(len(encoded.record_ids))),
        record_ids=tuple(encoded.record_ids),
        text_features=encoded.text_features,
        image_features=encoded.image_features,
        annotations=encoded.annotations,
    )
    index = FrozenIndex(bank)
    logger.info("Built frozen index over %d records (hash %s)", len(index), index.content_hash[:12])
    return index


def retrieve_blocks(
    f_I: torch.Tensor,
    source: Source,
    k: int,
    config: TrainConfig,
    exclude_ids: Sequence[str | None] | None = None,
) -> tuple[List[RetrievalResult], torch.Tensor, torch.Tensor]:
    """Top-k hits per query plus the stacked (B, k, d, e) blocks and (B, k, d, 2) annotations."""
    results = topk_many(f_I, source, k, exclude_ids)
    texts, annotations = stack_hits(results, config.d, config.e)
    return results, texts, annotations


def draft_reports(model: DartModel, f_D: torch.Tensor, retrieved: torch.Tensor, config: TrainConfig) -> List[TokenSequence]:
    """Stage-1 decoding: the text slot holds the learned null placeholder."""
    with torch.no_grad():
        bundle = ConditioningBundle(f_D, model.null_slot(f_D.shape[0]), retrieved)
        return decode(bundle, model.decoder, config.max_len, config.decode_mode, config.beam_width)


def draft_features(model: DartModel, drafts: Sequence[TokenSequence]) -> torch.Tensor:
    """Frozen text-encoder features of decoded drafts."""
    with torch.no_grad():
        return model.encode_texts(pad_sequences([seq.ids for seq in drafts]))


def corrected_reports(
    model: DartModel,
    f_D: torch.Tensor,
    drafts: Sequence[TokenSequence],
    retrieved: torch.Tensor,
    config: TrainConfig,
) -> List[TokenSequence]:
    """Stage-2 decoding: embed the drafts, correct them through psi, decode again."""
    with torch.no_grad():
        f_T_hat = draft_features(model, drafts)
        corrected = correct(f_T_hat, model.psi, residual=config.corr_residual)
        bundle = ConditioningBundle(f_D, corrected, retrieved)
        return decode(bundle, model.decoder, config.max_len, config.decode_mode, config.beam_width)


def generate_reports(
    model: DartModel,
    records: Sequence[CorpusRecord],
    vocab: Vocabulary,
    source: Source,
    config: TrainConfig,
    stage: int = 1,
    k: int | None = None,
    exclude_self: bool = False,
    batch_size: int = INFERENCE_BATCH,
) -> List[GeneratedReport]:
    """
    Generate one report per record. k defaults to the number of blocks the
    model was trained with (0 without image-to-text retrieval).
    """
    if stage not in (1, 2):
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    k = config.retrieved if k is None else k
    out: List[GeneratedReport] = []
    with torch.no_grad():
        for chunk in _chunks(records, batch_size):
            batch = collate(chunk, vocab, config)
            f_I = model.encode_images(batch)
            _, f_D = model.disease_forward(f_I)
            exclude = batch.ids if exclude_self else None
            results, retrieved, _ = retrieve_blocks(f_I, source, k, config, exclude)
            drafts = draft_reports(model, f_D, retrieved, config)
            finals = drafts if stage == 1 else corrected_reports(model, f_D, drafts, retrieved, config)
            for record_id, draft, final, result in zip(batch.ids, drafts, finals, results):
                out.append(
                    GeneratedReport(
                        id=record_id,
                        stage1_report=detokenize(draft, vocab),
                        stage2_report=detokenize(final, vocab) if stage == 2 else None,
                        retrieved_ids=result.record_ids,
                        truncated=final.truncated,
                    )
                )
    return out


def prepare_stage2(
    model: DartModel,
    records: Sequence[CorpusRecord],
    vocab: Vocabulary,
    index: FrozenIndex,
    config: TrainConfig,
    batch_size: int = INFERENCE_BATCH,
) -> Stage2Inputs:
    """
    Run the frozen stage-1 model once over the training records. Each record
    is excluded from its own retrieval.
    """
    parts: Dict[str, list] = {
        key: []
        for key in ("f_I", "f_D", "f_T_hat", "retrieved", "retrieved_annotations", "similarities", "tokens", "annotations")
    }
    ids: list[str] = []
    with torch.no_grad():
        for chunk in _chunks(records, batch_size):
            batch = collate(chunk, vocab, config)
            f_I = model.encode_images(batch)
            _, f_D = model.disease_forward(f_I)
            _, retrieved, retrieved_annotations = retrieve_blocks(f_I, index, config.retrieved, config, batch.ids)
            drafts = draft_reports(model, f_D, retrieved, config)
            ids.extend(batch.ids)
            parts["f_I"].append(f_I)
            parts["f_D"].append(f_D)
            parts["f_T_hat"].append(draft_features(model, drafts))
            parts["retrieved"].append(retrieved)
            parts["retrieved_annotations"].append(retrieved_annotations)
            parts["similarities"].append(hit_similarities(f_I, retrieved))
            parts["tokens"].append(batch.tokens)
            parts["annotations"].append(batch.annotations)
    tokens = pad_sequences([row[row != PAD].tolist() for t in parts.pop("tokens") for row in t])
    merged = {key: torch.cat(values) for key, values in parts.items()}
    return Stage2Inputs(record_ids=ids, tokens=tokens, **merged)


def redraft(model: DartModel, inputs: Stage2Inputs, config: TrainConfig) -> Stage2Inputs:
    """Decode fresh drafts for a batch (online decoding during stage 2)."""
    drafts = draft_reports(model, inputs.f_D, inputs.retrieved, config)
    return inputs.with_drafts(draft_features(model, drafts))


def classify_records(
    model: DartModel,
    records: Sequence[CorpusRecord],
    vocab: Vocabulary,
    config: TrainConfig,
    keywords: Sequence[str],
    batch_size: int = INFERENCE_BATCH,
) -> List[dict]:
    rows = []
    with torch.no_grad():
        for chunk in _chunks(records, batch_size):
            batch = collate(chunk, vocab, config)
            y_hat, _ = model.disease_forward(model.encode_images(batch))
            labels = predicted_labels(y_hat)
            for row, record_id in enumerate(batch.ids):
                rows.append(
                    {
                        "id": record_id,
                        "labels": labels[row].tolist(),
                        "scores": prediction_scores(y_hat[row], keywords),
                    }
                )
    return rows


def predicted_matrix(rows: Sequence[dict]) -> np.ndarray:
    return np.asarray([row["labels"] for row in rows], dtype=np.int64)


def retrieve_records(
    model: DartModel,
    records: Sequence[CorpusRecord],
    vocab: Vocabulary,
    source: Source,
    config: TrainConfig,
    k: int,
    exclude_self: bool = False,
    batch_size: int = INFERENCE_BATCH,
) -> List[dict]:
    rows = []
    with torch.no_grad():
        for chunk in _chunks(records, batch_size):
            batch = collate(chunk, vocab, config)
            f_I = model.encode_images(batch)
            results = topk_many(f_I, source, k, batch.ids if exclude_self else None)
            for record_id, result in zip(batch.ids, results):
                rows.append(
                    {
                        "id": record_id,
                        "hits": [
                            {"entry_id": h.entry_id, "record_id": h.record_id, "similarity": h.similarity}
                            for h in result.hits
                        ],
                    }
                )
    return rows
