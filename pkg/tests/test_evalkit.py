import math
import random
from itertools import combinations

import numpy as np
import pytest
from pydantic import ValidationError

from src.corpus import generate_corpus, keyword_table, word_tokens
from src.errors import InputValidationError
from src.evalkit import (
    ROUGE_BETA,
    MetricReport,
    bleu,
    ce_metrics,
    evaluate_reports,
    label_report,
    parse_k_values,
    rouge_l,
    rouge_l_pair,
    rows_to_csv,
)

SENTENCES = [
    "mild cardiomegaly with clear lungs bilaterally".split(),
    "no pleural effusion or pneumothorax is seen".split(),
    "small nodule in the right upper lobe".split(),
]


def test_bleu_identity_and_disjoint():
    assert bleu(SENTENCES, SENTENCES) == pytest.approx(1.0)
    other = [["x", "y", "z", "w"]] * 3
    assert bleu(other, SENTENCES) == 0.0


def test_bleu_brevity_penalty_example():
    value = bleu([["the", "cat", "sat"]], [["the", "cat", "sat", "down"]], n=1)
    assert value == pytest.approx(math.exp(1 - 4 / 3), abs=1e-6)
    assert value == pytest.approx(0.7165, abs=1e-4)


def test_bleu_is_invariant_to_record_order():
    candidates = [s[:-1] for s in SENTENCES]
    order = [2, 0, 1]
    shuffled = bleu([candidates[i] for i in order], [SENTENCES[i] for i in order])
    assert shuffled == pytest.approx(bleu(candidates, SENTENCES), abs=1e-12)


def test_metric_inputs_are_validated():
    with pytest.raises(InputValidationError):
        bleu([], [])
    with pytest.raises(InputValidationError):
        rouge_l([["a"]], [["a"], ["b"]])
    with pytest.raises(ValueError):
        bleu(SENTENCES, SENTENCES, n=5)


def test_rouge_identity_disjoint_and_example():
    assert rouge_l(SENTENCES, SENTENCES) == pytest.approx(1.0)
    assert rouge_l([["x", "y"]], [["a", "b"]]) == 0.0
    assert rouge_l_pair(["a", "b", "c"], ["a", "c"]) == pytest.approx(2.44 * (2 / 3) / (1 + 1.44 * 2 / 3))
    assert rouge_l_pair(["a", "b", "c"], ["a", "c"]) == pytest.approx(0.8299, abs=1e-4)


def _lcs_brute_force(a, b):
    def is_subsequence(sub, seq):
        it = iter(seq)
        return all(tok in it for tok in sub)

    for size in range(len(a), 0, -1):
        if any(is_subsequence(sub, b) for sub in combinations(a, size)):
            return size
    return 0


def test_rouge_matches_brute_force_lcs():
    picker = random.Random(0)
    for _ in range(500):
        a = [picker.choice("abcd") for _ in range(picker.randint(1, 8))]
        b = [picker.choice("abcd") for _ in range(picker.randint(1, 8))]
        lcs = _lcs_brute_force(a, b)
        if lcs == 0:
            expected = 0.0
        else:
            p, r = lcs / len(a), lcs / len(b)
            expected = (1 + ROUGE_BETA**2) * p * r / (r + ROUGE_BETA**2 * p)
        assert rouge_l_pair(a, b) == pytest.approx(expected, abs=1e-12), (a, b)


@pytest.mark.parametrize(
    "report, expected",
    [
        ("Consolidation in the left base.", [1, 0]),
        ("No evidence of consolidation.", [0, 0]),
        ("Lungs are free of edema. Consolidation is seen.", [1, 0]),
        ("Consolidation without edema.", [1, 0]),
        ("No consolidation. Mild edema.", [0, 1]),
        ("Edema, no change since prior.", [0, 1]),
    ],
)
def test_keyword_labeler(report, expected):
    assert label_report(report, ["consolidation", "edema"]).tolist() == expected


def test_labeler_warns_on_empty_text(caplog):
    assert label_report("", ["edema"]).tolist() == [0]
    assert "empty" in caplog.text


def test_ce_metrics_example():
    pred = [[1, 1, 1, 1, 0, 0]]
    truth = [[1, 1, 1, 0, 1, 1]]
    f1, p, r = ce_metrics(pred, truth)
    assert p == pytest.approx(0.75)
    assert r == pytest.approx(0.6)
    assert f1 == pytest.approx(2 * p * r / (p + r))
    assert f1 == pytest.approx(0.6667, abs=1e-4)


def test_ce_metrics_degenerate_cases():
    truth = np.array([[1, 0], [0, 1]])
    assert ce_metrics(truth, truth) == pytest.approx((1.0, 1.0, 1.0))
    assert ce_metrics(np.zeros_like(truth), truth)[2] == 0.0
    with pytest.raises(InputValidationError):
        ce_metrics(np.zeros((0, 2)), np.zeros((0, 2)))
    with pytest.raises(InputValidationError):
        ce_metrics(truth, truth[:1])


def test_evaluate_reports_on_references():
    records = generate_corpus(5, 20, 4, 16, 16)
    keywords = keyword_table(4)
    reports = [r.report for r in records]
    truth = [label_report(r, keywords) for r in reports]
    report = evaluate_reports(reports, reports, truth, keywords)
    assert report.bleu4 == pytest.approx(1.0)
    assert report.rouge_l == pytest.approx(1.0)
    assert (report.ce_f1, report.ce_precision, report.ce_recall) == pytest.approx((1.0, 1.0, 1.0))
    assert set(report.per_disease) == set(keywords)
    assert report.records == 20


def test_metric_report_bounds():
    with pytest.raises(ValidationError):
        MetricReport(bleu1=1.5, bleu2=0, bleu3=0, bleu4=0, rouge_l=0, ce_f1=0, ce_precision=0, ce_recall=0, records=1)
    with pytest.raises(ValidationError):
        MetricReport(bleu1=0, bleu2=0, bleu3=0, bleu4=0, rouge_l=0, ce_f1=0, ce_precision=0, ce_recall=0, records=0)


def test_parse_k_values():
    assert parse_k_values("0..5") == [0, 1, 2, 3, 4, 5]
    assert parse_k_values("0, 1,3") == [0, 1, 3]
    for bad in ("x", "", "-1,2"):
        with pytest.raises(InputValidationError):
            parse_k_values(bad)


def test_rows_to_csv():
    text = rows_to_csv([{"k": 0, "bleu4": 0.5}, {"k": 3, "bleu4": 0.25}])
    assert text == "k,bleu4\n0,0.5\n3,0.25\n"


def test_word_tokens_feed_metrics():
    tokens = word_tokens("No pleural effusion.")
    assert tokens == ["no", "pleural", "effusion", "."]
