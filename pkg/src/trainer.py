"""
Two-stage training loops.

Stage 1 trains encoders, classifier, null placeholder, temperature and
decoder jointly on the composite loss; stage 2 freezes all of it and fits
the correction embedding psi.
"""
from __future__ import annotations

import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np
import torch
from tqdm import tqdm

from .alignment import TrainingQueue, contrastive_loss
from .checkpoint import Checkpoint, capture, restore_model
from .config import TrainConfig
from .corpus import Batch, CorpusRecord, Vocabulary, build_vocab, collate, keyword_table, split_records, word_tokens
from .disease import classification_loss
from .errors import ConfigError, DataError
from .evalkit import bleu
from .generator import ConditioningBundle, generation_loss
from .model import DartModel, build_model, stage1_groups, stage2_groups
from .optimizer import build_optimizer, optimizer_step
from .pipeline import build_frozen_index, encode_records, generate_reports, prepare_stage2, redraft
from .retrieval import disease_match, disease_match_surrogate, hit_similarities, stack_hits, topk_many
from .selfcorrect import Stage2Log, stage2_step

logger = logging.getLogger(__name__)

# fields a stage-2 run may take from a fresh config instead of the stage-1 checkpoint
STAGE2_FIELDS = (
    "lambda_gen",
    "lambda_cor",
    "epochs_stage2",
    "lr",
    "weight_decay",
    "grad_clip",
    "batch",
    "threads",
    "online_decode",
    "corr_residual",
    "decode_mode",
    "beam_width",
)


@dataclass
class Stage1Loss:
    total: torch.Tensor
    components: Dict[str, float]
    weights: Dict[str, float]
    diagnostics: Dict[str, float] = field(default_factory=dict)
    # detached features for the queue push after the step
    image_features: torch.Tensor | None = None
    text_features: torch.Tensor | None = None

    def to_dict(self) -> dict:
        return {
            "total": float(self.total),
            "components": self.components,
            "weights": self.weights,
            **self.diagnostics,
        }


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: List[dict] = field(default_factory=list)


class MetricsLog:
    """Structured per-step metrics as JSON lines; a None path keeps them in memory only."""

    def __init__(self, path: str | Path | None = None):
        self.records: List[dict] = []
        self._handle = open(path, "a", encoding="utf-8") if path else None

    def write(self, **fields) -> None:
        self.records.append(fields)
        if self._handle is not None:
            self._handle.write(json.dumps(fields, sort_keys=True) + "\n")
            self._handle.flush()

    def close(self) -> None:
        if self._handle is not None:
            self._handle.close()
            self._handle = None


def configure_determinism(config: TrainConfig) -> None:
    torch.manual_seed(config.seed)
    torch.set_num_threads(config.threads)
    torch.use_deterministic_algorithms(True)


def stage1_loss(
    batch: Batch,
    model: DartModel,
    queue: TrainingQueue | None,
    config: TrainConfig,
    slot_mask: torch.Tensor | None = None,
) -> Stage1Loss:
    """
    L = L_con + lambda_cls L_cls + lambda_gen L_gen + lambda_m gamma, with the
    terms switched by the ablation flags. slot_mask (B,) marks records whose
    text slot gets the null placeholder instead of their own report features.
    """
    if config.dm and not config.i2t:
        raise ConfigError("disease matching (dm) needs image-to-text retrieval (i2t)")
    B = len(batch)
    f_I = model.encode_images(batch)
    f_T = model.encode_texts(batch.tokens)
    y_hat, f_D = model.disease_forward(f_I)
    bank = queue.snapshot() if queue is not None else None

    terms: Dict[str, torch.Tensor] = {}
    weights: Dict[str, float] = {}
    diagnostics: Dict[str, float] = {}

    if config.cl:
        terms["con"] = contrastive_loss(f_I, f_T, bank, model.tau, batch.ids)
        weights["con"] = 1.0
    terms["cls"] = classification_loss(y_hat, batch.annotations)
    weights["cls"] = config.lambda_cls

    k = config.retrieved
    if k:
        if bank is None:
            raise DataError("image-to-text retrieval needs a training queue")
        results = topk_many(f_I, bank, k, batch.ids)
        retrieved, retrieved_annotations = stack_hits(results, config.d, config.e)
    else:
        retrieved = f_I.new_zeros((B, 0, config.d, config.e))
        retrieved_annotations = f_I.new_zeros((B, 0, config.d, 2))

    if config.dm:
        exact = disease_match(batch.annotations, retrieved_annotations)
        surrogate = disease_match_surrogate(
            batch.annotations, retrieved_annotations, hit_similarities(f_I, retrieved), model.tau
        )
        diagnostics["gamma_exact"] = float(exact)
        diagnostics["gamma_surrogate"] = float(surrogate)
        terms["gamma"] = surrogate if config.gamma_surrogate else exact
        weights["gamma"] = config.lambda_m

    text = f_T
    if slot_mask is not None:
        text = torch.where(slot_mask[:, None, None], model.null_slot(B), f_T)
    bundle = ConditioningBundle(f_D, text, retrieved)
    terms["gen"] = generation_loss(batch.tokens, bundle, model.decoder)
    weights["gen"] = config.lambda_gen

    total = sum(weights[name] * value for name, value in terms.items())
    return Stage1Loss(
        total=total,
        components={name: float(value) for name, value in terms.items()},
        weights=weights,
        diagnostics=diagnostics,
        image_features=f_I.detach(),
        text_features=f_T.detach(),
    )


def warm_fill(queue: TrainingQueue, model: DartModel, records: Sequence[CorpusRecord], vocab: Vocabulary, config: TrainConfig) -> None:
    """Seed the queue with gradient-free features of the first q training records."""
    encoded = encode_records(model, records[: queue.capacity], vocab, config)
    queue.push(encoded.record_ids, encoded.text_features, encoded.image_features, encoded.annotations)
    logger.info("Queue warm-filled with %d entries", len(queue))


def _batches(order: np.ndarray, size: int):
    for start in range(0, len(order), size):
        yield order[start : start + size].tolist()


def validation_bleu4(model, records, vocab, index, config, stage: int) -> float | None:
    if not records:
        return None
    reports = generate_reports(model, records, vocab, index, config, stage=stage)
    return bleu([word_tokens(r.report) for r in reports], [word_tokens(r.report) for r in records], 4)


def run_stage1(
    config: TrainConfig,
    records: Sequence[CorpusRecord],
    log_path: str | Path | None = None,
    progress: bool = True,
) -> TrainResult:
    """
    Train stage 1 from scratch. The returned checkpoint is the epoch with the
    best validation BLEU-4 (first epoch wins ties).
    """
    configure_determinism(config)
    splits = split_records(records, config.split)
    train = splits["train"]
    if not train:
        raise DataError("the training split is empty")
    if config.retrieved and min(config.q, len(train)) <= config.retrieved:
        raise ConfigError(
            f"top-{config.retrieved} retrieval needs more than {config.retrieved} queued records, "
            f"have min(q={config.q}, train={len(train)})"
        )
    vocab = build_vocab(train)
    keywords = keyword_table(config.d, config.keywords)
    model = build_model(config, len(vocab))
    store = model.store()
    store.set_trainable(stage1_groups(config))
    optimizer = build_optimizer(store, config)
    logger.info(
        "Stage 1: %d train / %d val records, vocabulary %d, groups %s",
        len(train), len(splits["val"]), len(vocab), store.trainable_groups(),
    )

    queue = None
    if config.cl or config.i2t:
        queue = TrainingQueue(config.q, config.d, config.e)
        warm_fill(queue, model, train, vocab, config)

    rng = np.random.default_rng(config.seed)
    metrics = MetricsLog(log_path)
    best: Checkpoint | None = None
    best_score = None
    step = 0
    try:
        for epoch in range(config.epochs_stage1):
            model.train()
            order = rng.permutation(len(train))
            bar = tqdm(
                list(_batches(order, config.batch)),
                desc=f"stage 1 epoch {epoch + 1}",
                leave=False,
                disable=not progress,
                file=sys.stderr,
            )
            for rows in bar:
                batch = collate([train[i] for i in rows], vocab, config)
                slot_mask = torch.from_numpy(rng.random(len(rows)) < config.null_slot_prob)
                loss = stage1_loss(batch, model, queue, config, slot_mask)
                loss.total.backward()
                optimizer_step(store, optimizer, config)
                if queue is not None:
                    queue.push(batch.ids, loss.text_features, loss.image_features, batch.annotations)
                step += 1
                metrics.write(stage=1, epoch=epoch + 1, step=step, **loss.to_dict())
                bar.set_postfix(loss=f"{float(loss.total):.4f}")

            model.eval()
            index = build_frozen_index(model, train, vocab, config)
            score = validation_bleu4(model, splits["val"], vocab, index, config, stage=1)
            improved = best is None or (score is not None and score > best_score)
            if improved:
                best_score = score
                summary = {"epoch": epoch + 1, "step": step, "val_bleu4": score}
                best = capture(model, optimizer, vocab, keywords, stage=1, summary=summary)
            metrics.write(stage=1, epoch=epoch + 1, val_bleu4=score, best=improved)
            logger.info("Stage 1 epoch %d: val BLEU-4 %s%s", epoch + 1, score, " (best)" if improved else "")
    finally:
        metrics.close()

    if best is None:
        best = capture(model, optimizer, vocab, keywords, stage=1, summary={"epoch": 0, "step": 0, "val_bleu4": None})
    return TrainResult(best, metrics.records)


def stage2_config(checkpoint: Checkpoint, config: TrainConfig | None = None) -> TrainConfig:
    if config is None:
        return checkpoint.config
    return checkpoint.config.with_overrides(**{name: getattr(config, name) for name in STAGE2_FIELDS})


def run_stage2(
    checkpoint: Checkpoint,
    records: Sequence[CorpusRecord],
    config: TrainConfig | None = None,
    log_path: str | Path | None = None,
    progress: bool = True,
) -> TrainResult:
    """
    Fit psi on top of a frozen stage-1 checkpoint. The frozen index is built
    from the training split first; every step then checks that nothing but
    psi moved.
    """
    if checkpoint.stage != 1:
        raise ConfigError(f"stage 2 starts from a stage-1 checkpoint, got stage {checkpoint.stage}")
    config = stage2_config(checkpoint, config)
    configure_determinism(config)
    splits = split_records(records, config.split)
    train = splits["train"]
    if not train:
        raise DataError("the training split is empty")

    model = restore_model(checkpoint)
    model.eval()
    model.reset_correction()
    vocab = Vocabulary(list(checkpoint.vocab))
    store = model.store()
    store.set_trainable(stage2_groups(config))
    frozen_groups = [g for g in store.groups() if g not in stage2_groups(config)]
    frozen = store.snapshot(frozen_groups)
    optimizer = build_optimizer(store, config)

    index = build_frozen_index(model, train, vocab, config)
    inputs = prepare_stage2(model, train, vocab, index, config)
    logger.info("Stage 2: %d precomputed drafts, k=%d", len(inputs), config.retrieved)

    rng = np.random.default_rng(config.seed)
    metrics = MetricsLog(log_path)
    best: Checkpoint | None = None
    best_score = None
    step = 0
    try:
        for epoch in range(config.epochs_stage2):
            order = rng.permutation(len(inputs))
            bar = tqdm(
                list(_batches(order, config.batch)),
                desc=f"stage 2 epoch {epoch + 1}",
                leave=False,
                disable=not progress,
                file=sys.stderr,
            )
            for rows in bar:
                batch = inputs.select(rows)
                if config.online_decode:
                    batch = redraft(model, batch, config)
                log: Stage2Log = stage2_step(batch, model, optimizer, config, frozen)
                step += 1
                metrics.write(stage=2, epoch=epoch + 1, step=step, **log.to_dict())
                bar.set_postfix(loss=f"{log.total:.4f}")

            score = validation_bleu4(model, splits["val"], vocab, index, config, stage=2)
            improved = best is None or (score is not None and score > best_score)
            if improved:
                best_score = score
                summary = {"epoch": epoch + 1, "step": step, "val_bleu4": score, "index_hash": index.content_hash}
                best = capture(model, optimizer, vocab, checkpoint.keywords, stage=2, summary=summary)
            metrics.write(stage=2, epoch=epoch + 1, val_bleu4=score, best=improved)
            logger.info("Stage 2 epoch %d: val BLEU-4 %s%s", epoch + 1, score, " (best)" if improved else "")
    finally:
        metrics.close()

    if best is None:
        summary = {"epoch": 0, "step": 0, "val_bleu4": None, "index_hash": index.content_hash}
        best = capture(model, optimizer, vocab, checkpoint.keywords, stage=2, summary=summary)
    return TrainResult(best, metrics.records)
