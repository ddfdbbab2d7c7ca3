import hashlib
import random

import pytest
import torch

from src.alignment import TrainingQueue
from src.errors import CheckpointError, RetrievalError
from src.numerics import DTYPE, cross_entropy_rows, pairwise_cosine
from src.retrieval import (
    FrozenIndex,
    disease_match,
    disease_match_surrogate,
    match_rate,
    stack_hits,
    topk,
    topk_many,
)


def _one_hot(gen, *shape):
    present = torch.randint(0, 2, shape, generator=gen)
    return torch.stack([present, 1 - present], dim=-1).to(DTYPE)


def _random_queue(seed: int, size: int, d=2, e=3):
    gen = torch.Generator().manual_seed(seed)
    picker = random.Random(seed)
    # small integer grids make exact similarity ties common
    texts = torch.randint(-2, 3, (size, d, e), generator=gen).to(DTYPE)
    for i in range(size):
        if picker.random() < 0.3 and i:
            texts[i] = texts[picker.randrange(i)]
    ids = [f"r{picker.randrange(max(1, size // 2))}" for _ in range(size)]
    queue = TrainingQueue(size + 2, d, e)
    queue.push(ids, texts, texts.clone(), _one_hot(gen, size, d))
    return queue, gen, picker


def _oracle(query, queue, k, exclude):
    entries = queue.entries()
    sims = pairwise_cosine(query.unsqueeze(0), torch.stack([x.text_features for x in entries]))[0].tolist()
    candidates = [(-sim, x.entry_id) for sim, x in zip(sims, entries) if x.record_id != exclude]
    candidates.sort()
    return [entry_id for _, entry_id in candidates[:k]]


def test_topk_matches_brute_force_oracle():
    for seed in range(1000):
        queue, gen, picker = _random_queue(seed, size=random.Random(seed).randint(4, 12))
        query = torch.randint(-2, 3, (2, 3), generator=gen).to(DTYPE)
        exclude = picker.choice([None, "r0", "r1"])
        available = sum(1 for x in queue.entries() if x.record_id != exclude)
        k = picker.randint(0, available)
        result = topk(query, queue, k, exclude_id=exclude)
        assert result.ids == _oracle(query, queue, k, exclude), f"seed {seed}"


def test_ties_break_by_ascending_entry_id():
    queue = TrainingQueue(4, 1, 2)
    same = torch.tensor([[[1.0, 0.0]]] * 3, dtype=DTYPE)
    queue.push(["a", "b", "c"], same, same, torch.tensor([[[1.0, 0.0]]] * 3, dtype=DTYPE))
    result = topk(torch.tensor([[1.0, 0.0]], dtype=DTYPE), queue, 2)
    assert result.ids == [0, 1]
    assert result.similarities == pytest.approx([1.0, 1.0])


def test_self_exclusion_and_insufficient_candidates():
    gen = torch.Generator().manual_seed(3)
    texts = torch.randn((4, 2, 3), generator=gen, dtype=DTYPE)
    queue = TrainingQueue(4, 2, 3)
    queue.push(["a", "b", "a", "c"], texts, texts, _one_hot(gen, 4, 2))
    own = "a"
    result = topk(queue.entries()[0].text_features, queue, 2, exclude_id=own)
    assert own not in result.record_ids
    with pytest.raises(RetrievalError, match="candidates"):
        topk(queue.entries()[0].text_features, queue, 5)


def test_k_zero_returns_no_hits():
    queue, _, _ = _random_queue(1, size=4)
    results = topk_many(torch.zeros((2, 2, 3), dtype=DTYPE), queue, 0)
    assert [len(r) for r in results] == [0, 0]
    texts, annotations = stack_hits(results, 2, 3)
    assert texts.shape == (2, 0, 2, 3)
    assert annotations.shape == (2, 0, 2, 2)


def test_frozen_index_round_trip(tmp_path):
    queue, _, _ = _random_queue(5, size=6)
    index = FrozenIndex(queue.snapshot())
    path = tmp_path / "index.bin"
    index.save(path)
    loaded = FrozenIndex.load(path)
    assert loaded.content_hash == index.content_hash
    assert loaded.bank.record_ids == index.bank.record_ids
    assert torch.equal(loaded.bank.text_features, index.bank.text_features)
    assert loaded.to_bytes() == path.read_bytes()


def test_frozen_index_detects_corruption(tmp_path):
    queue, _, _ = _random_queue(5, size=6)
    blob = bytearray(FrozenIndex(queue.snapshot()).to_bytes())
    blob[40] ^= 0xFF
    with pytest.raises(CheckpointError, match="hash"):
        FrozenIndex.from_bytes(bytes(blob))
    with pytest.raises(CheckpointError):
        FrozenIndex.from_bytes(b"short")


def test_frozen_index_rejects_a_rehashed_truncated_payload():
    queue, _, _ = _random_queue(5, size=6)
    payload = FrozenIndex(queue.snapshot()).to_bytes()[:-32]
    short = payload[:-16]
    with pytest.raises(CheckpointError, match="size"):
        FrozenIndex.from_bytes(short + hashlib.sha256(short).digest())


def test_frozen_index_retrieval_equals_queue_retrieval():
    queue, gen, _ = _random_queue(9, size=10)
    index = FrozenIndex(queue.snapshot())
    query = torch.randn((2, 3), generator=gen, dtype=DTYPE)
    assert topk(query, index, 3).record_ids == topk(query, queue, 3).record_ids


def test_disease_match_values():
    y = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=DTYPE)
    same = y.unsqueeze(0).expand(3, 2, 2)
    assert float(disease_match(y, same)) == pytest.approx(0.0, abs=1e-6)
    flipped = y.flip(-1).unsqueeze(0)
    mixed = torch.cat([same[:1], flipped])
    expected = float(cross_entropy_rows(y, flipped[0])) / 2
    assert float(disease_match(y, mixed)) == pytest.approx(expected)
    with pytest.raises(RetrievalError):
        disease_match(y, same[:0])


def test_surrogate_equals_exact_for_equal_similarities():
    gen = torch.Generator().manual_seed(4)
    y = _one_hot(gen, 3, 4)
    hits = _one_hot(gen, 3, 5, 4)
    sims = torch.full((3, 5), 0.3, dtype=DTYPE)
    tau = torch.tensor([[0.07]], dtype=DTYPE)
    assert float(disease_match_surrogate(y, hits, sims, tau)) == pytest.approx(float(disease_match(y, hits)))


def test_match_rate():
    y = torch.tensor([[[1.0, 0.0]]], dtype=DTYPE)
    hits = torch.tensor([[[[1.0, 0.0]], [[0.0, 1.0]]]], dtype=DTYPE)
    assert match_rate(y, hits) == 0.5
