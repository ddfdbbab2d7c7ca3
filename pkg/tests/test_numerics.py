import math

import pytest
import torch
from torch import nn

from src.errors import DimensionError, InputValidationError, InvariantViolation
from src.numerics import (
    DTYPE,
    ParamStore,
    as_matrix,
    cosine,
    cross_entropy_rows,
    finite_diff_check,
    matmul,
    pairwise_cosine,
    row_softmax,
)


class Quadratic(nn.Module):
    def __init__(self):
        super().__init__()
        self.w = nn.Parameter(torch.tensor([1.0, -2.0, 0.5], dtype=DTYPE))
        self.spare = nn.Parameter(torch.zeros(2, dtype=DTYPE))

    def loss(self):
        return (torch.tensor([1.0, 2.0, 3.0], dtype=DTYPE) * self.w**2).sum() + torch.sin(self.w).sum()


def test_matmul_rejects_mismatched_shapes():
    with pytest.raises(DimensionError, match="cannot multiply"):
        matmul(torch.zeros(2, 3, dtype=DTYPE), torch.zeros(2, 3, dtype=DTYPE))


def test_row_softmax_rows_sum_to_one():
    out = row_softmax(as_matrix([[1.0, 2.0], [3.0, -1.0]]), 2.0)
    assert torch.allclose(out.sum(-1), torch.ones(2, dtype=DTYPE))


def test_cosine_identity_negation_and_zero_guard():
    a = as_matrix([[1.0, 2.0], [3.0, 4.0]])
    assert float(cosine(a, a)) == pytest.approx(1.0)
    assert float(cosine(a, -a)) == pytest.approx(-1.0)
    value, degenerate = cosine(a, torch.zeros_like(a), return_flag=True)
    assert float(value) == 0.0
    assert degenerate


def test_pairwise_cosine_matches_single_cosine():
    gen = torch.Generator().manual_seed(1)
    q = torch.randn(3, 2, 4, generator=gen, dtype=DTYPE)
    k = torch.randn(5, 2, 4, generator=gen, dtype=DTYPE)
    sims = pairwise_cosine(q, k)
    assert sims.shape == (3, 5)
    assert float(sims[1, 3]) == pytest.approx(float(cosine(q[1], k[3])))


def test_cross_entropy_rows_uniform_prediction():
    target = as_matrix([[1.0, 0.0], [0.0, 1.0]])
    pred = as_matrix([[0.5, 0.5], [0.5, 0.5]])
    assert float(cross_entropy_rows(target, pred)) == pytest.approx(math.log(2))


def test_cross_entropy_rows_requires_one_hot_targets():
    with pytest.raises(InputValidationError):
        cross_entropy_rows(as_matrix([[0.5, 0.5]]), as_matrix([[0.5, 0.5]]))


def test_param_store_groups_and_freeze_check():
    model = Quadratic()
    store = ParamStore(model)
    assert set(store.groups()) == {"w", "spare"}
    store.set_trainable(["w"])
    assert store.trainable_groups() == ["w"]
    with pytest.raises(KeyError):
        store.set_trainable(["nope"])

    snapshot = store.snapshot(["spare"])
    store.assert_unchanged(snapshot)
    with torch.no_grad():
        model.spare.add_(1e-9)
    with pytest.raises(InvariantViolation, match="spare"):
        store.assert_unchanged(snapshot)


def test_finite_diff_check_agrees_with_autograd():
    model = Quadratic()
    store = ParamStore(model)
    report = finite_diff_check(model.loss, store)
    assert report.passed()
    assert report.max_error < 1e-6
    assert report.unused == ["spare"]


def test_finite_diff_check_sampled_entries():
    model = Quadratic()
    report = finite_diff_check(model.loss, ParamStore(model), entries_per_param=1, seed=4)
    assert set(report.errors) == {"w"}
    assert report.passed()


def test_finite_diff_check_step_range():
    model = Quadratic()
    with pytest.raises(ValueError):
        finite_diff_check(model.loss, ParamStore(model), step=1e-2)


def test_worked_values():
    assert float(cross_entropy_rows(as_matrix([[1.0, 0.0]]), as_matrix([[0.0, 1.0]]))) == pytest.approx(16.1181, abs=1e-4)
    assert float(cosine(as_matrix([[1.0, 2.0]]), as_matrix([[2.0, 1.0]]))) == pytest.approx(0.8, abs=1e-12)
    out = row_softmax(as_matrix([[math.log(2), 0.0]]), 1.0)
    assert torch.allclose(out, as_matrix([[2 / 3, 1 / 3]]), atol=1e-12)


def test_row_softmax_is_shift_invariant():
    gen = torch.Generator().manual_seed(2)
    m = torch.randn(4, 5, generator=gen, dtype=DTYPE)
    for shift in (-30.0, 0.5, 100.0):
        assert torch.allclose(row_softmax(m + shift, 1.5), row_softmax(m, 1.5), atol=1e-12)


def test_finite_diff_check_on_half_squared_norm():
    theta = nn.Parameter(torch.tensor([0.3, -1.7, 2.5, 4.0], dtype=DTYPE))
    holder = nn.Module()
    holder.theta = theta
    report = finite_diff_check(lambda: 0.5 * (theta**2).sum(), ParamStore(holder))
    assert report.max_error <= 1e-8


def test_constant_loss_has_zero_gradient():
    theta = nn.Parameter(torch.tensor([0.3, -1.7], dtype=DTYPE))
    holder = nn.Module()
    holder.theta = theta

    def loss():
        return 0.0 * theta.sum() + 3.0

    (grad,) = torch.autograd.grad(loss(), [theta])
    assert torch.equal(grad, torch.zeros_like(theta))
    report = finite_diff_check(loss, ParamStore(holder))
    assert report.errors == {"theta": 0.0}
    assert report.passed()


class _SkewedBackward(torch.autograd.Function):
    """x0 + 1e-6 * x1, with a backward that is off by 1e-9 on x1."""

    @staticmethod
    def forward(ctx, x):
        return x[0] + 1e-6 * x[1]

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output * torch.tensor([1.0, 1e-6 + 1e-9], dtype=DTYPE)


def test_finite_diff_check_scores_each_entry_against_its_own_gradient():
    theta = nn.Parameter(torch.tensor([0.2, 0.4], dtype=DTYPE))
    holder = nn.Module()
    holder.theta = theta
    report = finite_diff_check(lambda: _SkewedBackward.apply(theta), ParamStore(holder))
    assert report.errors["theta"] == pytest.approx(1e-3, rel=0.05)
    assert not report.passed()
