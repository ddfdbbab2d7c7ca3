import hashlib
import struct

import pytest
import torch

from src.checkpoint import (
    Checkpoint,
    capture,
    load_checkpoint,
    restore_model,
    save_checkpoint,
)
from src.corpus import keyword_table
from src.errors import CheckpointError
from src.model import stage1_groups
from src.optimizer import build_optimizer


@pytest.fixture
def trained(tiny_model, tiny_config):
    """A model after one optimizer step, so the AdamW state is populated."""
    store = tiny_model.store()
    store.set_trainable(stage1_groups(tiny_config))
    optimizer = build_optimizer(store, tiny_config)
    for _, param in store.trainable_items():
        param.grad = torch.full_like(param, 0.01)
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)
    return tiny_model, optimizer


def _capture(trained, vocab, config, stage=1):
    model, optimizer = trained
    return capture(model, optimizer, vocab, keyword_table(config.d), stage, {"best_epoch": 0})


def test_save_load_save_is_byte_identical(trained, tiny_vocab, tiny_config, tmp_path):
    ckpt = _capture(trained, tiny_vocab, tiny_config)
    first, second = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(ckpt, first)
    save_checkpoint(load_checkpoint(first), second)
    assert first.read_bytes() == second.read_bytes()
    assert not (tmp_path / "a.ckpt.tmp").exists()


def test_stage1_checkpoint_has_no_correction_embedding(trained, tiny_vocab, tiny_config):
    assert "psi" not in _capture(trained, tiny_vocab, tiny_config, stage=1).groups()
    assert "psi" in _capture(trained, tiny_vocab, tiny_config, stage=2).groups()


def test_corrupted_bytes_are_rejected(trained, tiny_vocab, tiny_config):
    blob = bytearray(_capture(trained, tiny_vocab, tiny_config).to_bytes())
    blob[len(blob) // 2] ^= 0x01
    with pytest.raises(CheckpointError, match="hash"):
        Checkpoint.from_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="truncated"):
        Checkpoint.from_bytes(bytes(blob[:20]))


def test_unsupported_version_is_rejected(trained, tiny_vocab, tiny_config):
    blob = _capture(trained, tiny_vocab, tiny_config).to_bytes()
    payload = bytearray(blob[:-32])
    struct.pack_into("<I", payload, 8, 99)
    rehashed = bytes(payload) + hashlib.sha256(payload).digest()
    with pytest.raises(CheckpointError, match="version 99"):
        Checkpoint.from_bytes(rehashed)


def test_rehashed_short_payload_is_rejected(trained, tiny_vocab, tiny_config):
    payload = _capture(trained, tiny_vocab, tiny_config).to_bytes()[:-32][:-8]
    with pytest.raises(CheckpointError, match="shorter"):
        Checkpoint.from_bytes(payload + hashlib.sha256(payload).digest())


def test_missing_file_is_a_checkpoint_error(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_restored_model_has_equal_parameters(trained, tiny_vocab, tiny_config):
    model, _ = trained
    restored = restore_model(_capture(trained, tiny_vocab, tiny_config, stage=2))
    original = dict(model.named_parameters())
    for name, param in restored.named_parameters():
        assert torch.equal(param.detach(), original[name].detach()), name


def test_shape_mismatch_is_rejected(trained, tiny_vocab, tiny_config):
    ckpt = _capture(trained, tiny_vocab, tiny_config)
    ckpt.params["phi"] = ckpt.params["phi"][:1]
    with pytest.raises(CheckpointError, match="phi"):
        restore_model(ckpt)


def test_optimizer_state_round_trips(trained, tiny_vocab, tiny_config):
    model, optimizer = trained
    ckpt = Checkpoint.from_bytes(_capture(trained, tiny_vocab, tiny_config).to_bytes())
    original = {name: optimizer.state[p] for name, p in model.named_parameters() if p in optimizer.state}
    assert set(ckpt.optimizer) == set(original)
    for name, state in ckpt.optimizer.items():
        assert state["step"] == float(original[name]["step"])
        assert torch.equal(torch.from_numpy(state["exp_avg"]), original[name]["exp_avg"])
        assert torch.equal(torch.from_numpy(state["exp_avg_sq"]), original[name]["exp_avg_sq"])
