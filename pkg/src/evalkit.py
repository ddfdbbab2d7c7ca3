"""
Report metrics: corpus BLEU-1..4, ROUGE-L, and clinical-efficacy scores from
a keyword labeler run over generated text. Also the k-sweep harness.
"""
from __future__ import annotations

import csv
import io
import logging
import warnings
from typing import Dict, List, Sequence, Union

import numpy as np
from nltk.translate.bleu_score import corpus_bleu
from pydantic import BaseModel, Field
from rouge_score import rouge_scorer, tokenizers
from sklearn.metrics import precision_recall_fscore_support

from .corpus import CorpusRecord, TokenSequence, word_tokens
from .errors import InputValidationError, RetrievalError

logger = logging.getLogger(__name__)

ROUGE_BETA = 1.2
NEGATION_CUES = [("no",), ("without",), ("free", "of")]
SENTENCE_END = {".", "!", "?"}

Tokens = Union[TokenSequence, Sequence[str], Sequence[int]]


class MetricReport(BaseModel):
    bleu1: float = Field(ge=0.0, le=1.0)
    bleu2: float = Field(ge=0.0, le=1.0)
    bleu3: float = Field(ge=0.0, le=1.0)
    bleu4: float = Field(ge=0.0, le=1.0)
    rouge_l: float = Field(ge=0.0, le=1.0)
    ce_f1: float = Field(ge=0.0, le=1.0)
    ce_precision: float = Field(ge=0.0, le=1.0)
    ce_recall: float = Field(ge=0.0, le=1.0)
    per_disease: Dict[str, Dict[str, float]] = Field(default_factory=dict)
    records: int = Field(gt=0)


def _as_tokens(seq: Tokens) -> List[str]:
    """Content tokens as strings; BOS/EOS are dropped from TokenSequence input."""
    if isinstance(seq, TokenSequence):
        return [str(t) for t in seq.content()]
    return [str(t) for t in seq]


def _check_pairs(candidates: Sequence[Tokens], references: Sequence[Tokens]) -> None:
    if not candidates:
        raise InputValidationError("no candidates to score")
    if len(candidates) != len(references):
        raise InputValidationError(f"{len(candidates)} candidates but {len(references)} references")


def bleu(candidates: Sequence[Tokens], references: Sequence[Tokens], n: int = 4) -> float:
    """Corpus BLEU-n with uniform weights and the standard brevity penalty."""
    if not 1 <= n <= 4:
        raise ValueError(f"BLEU order must be in 1..4, got {n}")
    _check_pairs(candidates, references)
    hyps = [_as_tokens(c) for c in candidates]
    refs = [[_as_tokens(r)] for r in references]
    with warnings.catch_warnings():
        # nltk warns when some order has no overlap; the score is then 0
        warnings.simplefilter("ignore")
        return float(corpus_bleu(refs, hyps, weights=(1.0 / n,) * n))


class _WhitespaceTokenizer(tokenizers.Tokenizer):
    """Inputs are already tokenized; keep every token as-is."""

    def tokenize(self, text):
        return text.split()


_ROUGE = rouge_scorer.RougeScorer(["rougeL"], tokenizer=_WhitespaceTokenizer())


def rouge_l_pair(candidate: Tokens, reference: Tokens, beta: float = ROUGE_BETA) -> float:
    score = _ROUGE.score(" ".join(_as_tokens(reference)), " ".join(_as_tokens(candidate)))["rougeL"]
    p, r = score.precision, score.recall
    if p == 0 or r == 0:
        return 0.0
    return (1 + beta**2) * p * r / (r + beta**2 * p)


def rouge_l(candidates: Sequence[Tokens], references: Sequence[Tokens], beta: float = ROUGE_BETA) -> float:
    """LCS F-measure per record, averaged."""
    _check_pairs(candidates, references)
    return float(np.mean([rouge_l_pair(c, r, beta) for c, r in zip(candidates, references)]))


def _sentences(tokens: List[str]) -> List[List[str]]:
    sentences, current = [], []
    for token in tokens:
        if token and set(token) <= SENTENCE_END:
            if current:
                sentences.append(current)
            current = []
        else:
            current.append(token)
    if current:
        sentences.append(current)
    return sentences


def _negated(sentence: List[str], position: int) -> bool:
    for cue in NEGATION_CUES:
        for start in range(position - len(cue) + 1):
            if tuple(sentence[start : start + len(cue)]) == cue:
                return True
    return False


def label_report(report: str, keywords: Sequence[str]) -> np.ndarray:
    """
    Binary present-vector for a report. A disease is present when its
    keyword occurs in some sentence with no negation cue before it.
    """
    labels = np.zeros(len(keywords), dtype=np.int64)
    tokens = word_tokens(report or "")
    if not tokens:
        logger.warning("empty or unparseable report; labelled all-absent")
        return labels
    column = {kw.lower(): i for i, kw in enumerate(keywords)}
    for sentence in _sentences(tokens):
        for position, token in enumerate(sentence):
            i = column.get(token)
            if i is not None and not _negated(sentence, position):
                labels[i] = 1
    return labels


def ce_metrics(predicted, truth) -> tuple[float, float, float]:
    """Micro-averaged (f1, precision, recall) over every (record, disease) decision."""
    pred = np.asarray(predicted, dtype=np.int64)
    true = np.asarray(truth, dtype=np.int64)
    if pred.size == 0:
        raise InputValidationError("no labels to score")
    if pred.shape != true.shape:
        raise InputValidationError(f"predicted labels {pred.shape} and true labels {true.shape} differ")
    p, r, f, _ = precision_recall_fscore_support(
        true.reshape(len(true), -1), pred.reshape(len(pred), -1), average="micro", zero_division=0
    )
    return float(f), float(p), float(r)


def per_disease_metrics(predicted, truth, keywords: Sequence[str]) -> Dict[str, Dict[str, float]]:
    p, r, f, support = precision_recall_fscore_support(
        np.asarray(truth), np.asarray(predicted), average=None, labels=list(range(len(keywords))), zero_division=0
    )
    return {
        kw: {"precision": float(p[i]), "recall": float(r[i]), "f1": float(f[i]), "support": float(support[i])}
        for i, kw in enumerate(keywords)
    }


def evaluate_reports(
    candidates: Sequence[str],
    references: Sequence[str],
    true_labels,
    keywords: Sequence[str],
) -> MetricReport:
    """Score generated report texts against reference texts and ground-truth labels."""
    _check_pairs(candidates, references)
    cand_tokens = [word_tokens(c) for c in candidates]
    ref_tokens = [word_tokens(r) for r in references]
    predicted = np.stack([label_report(c, keywords) for c in candidates])
    truth = np.asarray(true_labels, dtype=np.int64)
    f1, precision, recall = ce_metrics(predicted, truth)
    return MetricReport(
        bleu1=bleu(cand_tokens, ref_tokens, 1),
        bleu2=bleu(cand_tokens, ref_tokens, 2),
        bleu3=bleu(cand_tokens, ref_tokens, 3),
        bleu4=bleu(cand_tokens, ref_tokens, 4),
        rouge_l=rouge_l(cand_tokens, ref_tokens),
        ce_f1=f1,
        ce_precision=precision,
        ce_recall=recall,
        per_disease=per_disease_metrics(predicted, truth, keywords),
        records=len(candidates),
    )


def labeler_agreement(records: Sequence[CorpusRecord], keywords: Sequence[str]) -> float:
    """Fraction of records whose labelled report matches the annotation exactly."""
    if not records:
        raise InputValidationError("no records to label")
    hits = sum(np.array_equal(label_report(r.report, keywords), r.diseases) for r in records)
    return hits / len(records)


def parse_k_values(text: str) -> List[int]:
    """'0..5' or '0,1,3' -> list of k."""
    text = text.strip()
    try:
        if ".." in text:
            low, high = (int(part) for part in text.split("..", 1))
            values = list(range(low, high + 1))
        else:
            values = [int(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise InputValidationError(f"cannot parse k values {text!r}") from e
    if not values or min(values) < 0:
        raise InputValidationError(f"k values must be non-negative, got {text!r}")
    return values


def sweep_k(model, records, vocab, index, config, k_values: Sequence[int], stage: int = 1) -> List[dict]:
    """BLEU-4 (and ROUGE-L) of inference re-run with each k; no retraining."""
    from .pipeline import generate_reports

    too_big = [k for k in k_values if k > len(index)]
    if too_big:
        raise RetrievalError(f"k={max(too_big)} exceeds the index size {len(index)}")
    references = [word_tokens(r.report) for r in records]
    rows = []
    for k in k_values:
        reports = generate_reports(model, records, vocab, index, config, stage=stage, k=k)
        candidates = [word_tokens(r.report) for r in reports]
        rows.append(
            {
                "k": k,
                "bleu4": bleu(candidates, references, 4),
                "rouge_l": rouge_l(candidates, references),
            }
        )
        logger.info("k=%d BLEU-4 %.4f", k, rows[-1]["bleu4"])
    return rows


def rows_to_csv(rows: Sequence[dict]) -> str:
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buffer.getvalue()
