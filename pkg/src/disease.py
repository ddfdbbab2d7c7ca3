from typing import Dict, List, Sequence

import torch

from .numerics import cross_entropy_rows, matmul, row_softmax

# Column order of every d x 2 annotation / prediction
CLASS_LABELS = ["present", "absent"]


def classify(f_I: torch.Tensor, phi: torch.Tensor) -> torch.Tensor:
    """
    Disease prediction y_hat = softmax(f_I . phi^T / sqrt(e)), row-wise over
    the two classes. Works on (d, e) or batched (B, d, e) features.
    """
    return row_softmax(matmul(f_I, phi.transpose(0, 1)), phi.shape[-1] ** 0.5)


def classification_loss(y_hat: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Row cross-entropy, averaged over diseases and then over the batch."""
    return cross_entropy_rows(y, y_hat).mean()


def disease_features(y_hat: torch.Tensor, phi: torch.Tensor, f_I: torch.Tensor) -> torch.Tensor:
    """f_D = y_hat . phi + f_I"""
    return matmul(y_hat, phi) + f_I


def predicted_labels(y_hat: torch.Tensor) -> torch.Tensor:
    """Argmax decision per disease as a binary present vector."""
    return (y_hat[..., 0] >= y_hat[..., 1]).long()


def prediction_scores(y_hat: torch.Tensor, keywords: Sequence[str]) -> Dict[str, Dict[str, float]]:
    """
    One record's prediction as {disease: {"present": p, "absent": 1 - p}}.
    """
    rows: List[List[float]] = y_hat.detach().tolist()
    return {
        keyword: {label: float(score) for label, score in zip(CLASS_LABELS, row)}
        for keyword, row in zip(keywords, rows)
    }
