import math

import pytest
import torch

from src.corpus import PAD
from src.errors import DimensionError, InvariantViolation
from src.model import stage2_groups
from src.numerics import DTYPE, as_matrix
from src.optimizer import build_optimizer
from src.pipeline import build_frozen_index, prepare_stage2
from src.selfcorrect import correct, correction_loss, stage2_loss, stage2_step


def test_scalar_correction_example():
    out = correct(as_matrix([[1.0]]), as_matrix([[math.log(2)], [0.0]]))
    assert float(out[0, 0]) == pytest.approx(2 / 3 * math.log(2))
    assert float(out[0, 0]) == pytest.approx(0.4621, abs=1e-4)


def test_orthogonal_rows_average_psi():
    psi = as_matrix([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    out = correct(as_matrix([[0.0, 0.0, 5.0]]), psi)
    assert torch.allclose(out[0], 0.5 * (psi[0] + psi[1]))


def test_outputs_lie_in_convex_hull_of_psi(rng):
    psi = torch.randn((2, 6), generator=rng, dtype=DTYPE)
    out = correct(torch.randn((3, 4, 6), generator=rng, dtype=DTYPE), psi)
    direction = psi[0] - psi[1]
    # out = a*psi0 + (1-a)*psi1 with a in [0, 1]
    a = ((out - psi[1]) @ direction) / (direction @ direction)
    assert torch.allclose(a.unsqueeze(-1) * psi[0] + (1 - a).unsqueeze(-1) * psi[1], out, atol=1e-10)
    assert bool((a >= 0).all()) and bool((a <= 1).all())


def test_residual_adds_input_back(rng):
    psi = torch.randn((2, 4), generator=rng, dtype=DTYPE)
    f = torch.randn((2, 3, 4), generator=rng, dtype=DTYPE)
    assert torch.allclose(correct(f, psi, residual=True), correct(f, psi) + f)


def test_correct_rejects_bad_psi():
    with pytest.raises(DimensionError):
        correct(as_matrix([[1.0, 2.0]]), as_matrix([[1.0, 2.0], [0.0, 1.0], [1.0, 1.0]]))


def test_correction_loss_values():
    a = as_matrix([[1.0, 0.0], [0.0, 1.0]]).unsqueeze(0)
    assert float(correction_loss(a, a)) == pytest.approx(0.0, abs=1e-12)
    assert float(correction_loss(a, -a)) == pytest.approx(2.0)
    assert float(correction_loss(a, a.flip(-1))) == pytest.approx(1.0)


def test_stage2_loss_arithmetic():
    value = stage2_loss(torch.tensor(0.7, dtype=DTYPE), torch.tensor(0.1, dtype=DTYPE), 5.0)
    assert float(value) == pytest.approx(1.2)
    with pytest.raises(ValueError):
        stage2_loss(torch.tensor(0.7), torch.tensor(0.1), -1.0)


@pytest.fixture
def stage2_setup(tiny_model, tiny_config, tiny_splits, tiny_vocab):
    train = tiny_splits["train"]
    index = build_frozen_index(tiny_model, train, tiny_vocab, tiny_config)
    inputs = prepare_stage2(tiny_model, train[:4], tiny_vocab, index, tiny_config)
    tiny_model.reset_correction()
    store = tiny_model.store()
    store.set_trainable(stage2_groups(tiny_config))
    frozen = store.snapshot([g for g in store.groups() if g != "psi"])
    optimizer = build_optimizer(store, tiny_config)
    return inputs, optimizer, frozen


def test_stage2_leaves_frozen_groups_bitwise_equal(stage2_setup, tiny_model, tiny_config):
    inputs, optimizer, frozen = stage2_setup
    psi_before = tiny_model.psi.detach().clone()
    for _ in range(100):
        log = stage2_step(inputs, tiny_model, optimizer, tiny_config, frozen)
    assert log.stepped
    assert log.gamma is not None and log.gamma_surrogate is not None
    assert not torch.equal(tiny_model.psi.detach(), psi_before)
    for name, before in frozen.items():
        assert torch.equal(tiny_model.store()[name].detach(), before), name


def test_zero_weights_skip_the_update(stage2_setup, tiny_model, tiny_config):
    inputs, optimizer, frozen = stage2_setup
    config = tiny_config.with_overrides(lambda_gen=0.0, lambda_cor=0.0)
    psi_before = tiny_model.psi.detach().clone()
    log = stage2_step(inputs, tiny_model, optimizer, config, frozen)
    assert not log.stepped
    assert log.total == 0.0
    assert torch.equal(tiny_model.psi.detach(), psi_before)


def test_tampered_frozen_parameter_is_detected(stage2_setup, tiny_model, tiny_config):
    inputs, optimizer, frozen = stage2_setup
    with torch.no_grad():
        tiny_model.phi.add_(1e-3)
    with pytest.raises(InvariantViolation, match="phi"):
        stage2_step(inputs, tiny_model, optimizer, tiny_config, frozen)


def test_batch_selection_trims_padding(stage2_setup):
    inputs, _, _ = stage2_setup
    part = inputs.select([1, 2])
    assert part.record_ids == inputs.record_ids[1:3]
    assert part.f_I.shape[0] == 2
    assert bool((part.tokens[:, -1] != PAD).any())
