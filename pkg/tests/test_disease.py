import math

import pytest
import torch

from src.disease import (
    CLASS_LABELS,
    classification_loss,
    classify,
    disease_features,
    predicted_labels,
    prediction_scores,
)
from src.numerics import DTYPE, as_matrix


def test_classify_rows_are_distributions():
    gen = torch.Generator().manual_seed(2)
    f_I = torch.randn((3, 4, 8), generator=gen, dtype=DTYPE)
    phi = torch.randn((2, 8), generator=gen, dtype=DTYPE)
    y_hat = classify(f_I, phi)
    assert y_hat.shape == (3, 4, 2)
    assert torch.allclose(y_hat.sum(-1), torch.ones((3, 4), dtype=DTYPE))


def test_zero_features_give_even_odds_and_log2_loss():
    y_hat = classify(torch.zeros((2, 4), dtype=DTYPE), torch.ones((2, 4), dtype=DTYPE))
    assert torch.allclose(y_hat, torch.full((2, 2), 0.5, dtype=DTYPE))
    y = as_matrix([[1.0, 0.0], [0.0, 1.0]])
    assert float(classification_loss(y_hat, y)) == pytest.approx(math.log(2))


def test_scalar_classification_example():
    # e = 1: scores [1, 0] -> softmax [e/(1+e), 1/(1+e)]
    y_hat = classify(as_matrix([[1.0]]), as_matrix([[1.0], [0.0]]))
    assert float(y_hat[0, 0]) == pytest.approx(math.e / (1 + math.e))


def test_disease_features_formula():
    gen = torch.Generator().manual_seed(3)
    f_I = torch.randn((4, 8), generator=gen, dtype=DTYPE)
    phi = torch.randn((2, 8), generator=gen, dtype=DTYPE)
    y_hat = classify(f_I, phi)
    assert torch.allclose(disease_features(y_hat, phi, f_I), y_hat @ phi + f_I)


def test_labels_and_scores():
    y_hat = as_matrix([[0.9, 0.1], [0.2, 0.8]])
    assert predicted_labels(y_hat).tolist() == [1, 0]
    scores = prediction_scores(y_hat, ["edema", "nodule"])
    assert list(scores) == ["edema", "nodule"]
    assert list(scores["edema"]) == CLASS_LABELS
    assert scores["nodule"]["absent"] == pytest.approx(0.8)
