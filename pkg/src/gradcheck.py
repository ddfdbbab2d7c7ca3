"""
Finite-difference verification of every training loss on a tiny random
model (d=4, e=8, 20-token vocabulary).
"""
from __future__ import annotations

import logging
from typing import Callable, Dict, List

import torch

from .alignment import TrainingQueue, contrastive_loss
from .config import TrainConfig, make_config
from .corpus import BOS, EOS, PAD, RESERVED_TOKENS, Batch, Vocabulary
from .disease import classification_loss
from .generator import ConditioningBundle, generation_loss
from .model import DartModel, build_model, stage1_groups, stage2_groups
from .numerics import DTYPE, GradCheckReport, finite_diff_check
from .retrieval import disease_match_surrogate, hit_similarities
from .selfcorrect import Stage2Inputs, correct, correction_loss, stage2_objective
from .trainer import stage1_loss

logger = logging.getLogger(__name__)

TINY = dict(d=4, e=8, heads=2, layers=1, ff_mult=2, h=16, w=16, max_len=10, k=2, q=6, batch=3)
VOCAB_SIZE = 20
BATCH = 3
QUEUE = 6
ENTRIES_PER_PARAM = 4
TOLERANCE = 1e-4

LOSS_NAMES = ["con", "cls", "gen", "gamma_surrogate", "cor", "stage1", "stage2"]


def tiny_config(seed: int) -> TrainConfig:
    return make_config(seed=seed, **TINY)


def tiny_vocab() -> Vocabulary:
    return Vocabulary(RESERVED_TOKENS + [f"w{i}" for i in range(VOCAB_SIZE - len(RESERVED_TOKENS))])


def _one_hot(gen: torch.Generator, *shape: int) -> torch.Tensor:
    present = torch.randint(0, 2, shape, generator=gen)
    return torch.stack([present, 1 - present], dim=-1).to(DTYPE)


def _random_tokens(gen: torch.Generator, count: int, max_len: int) -> torch.Tensor:
    tokens = torch.full((count, max_len), PAD, dtype=torch.long)
    for row in range(count):
        length = int(torch.randint(3, max_len + 1, (1,), generator=gen))
        tokens[row, 0] = BOS
        tokens[row, 1 : length - 1] = torch.randint(len(RESERVED_TOKENS), VOCAB_SIZE, (length - 2,), generator=gen)
        tokens[row, length - 1] = EOS
    return tokens


class TinySetup:
    """A seeded random batch, queue and model; the losses are closures over it."""

    def __init__(self, seed: int):
        self.config = tiny_config(seed)
        c = self.config
        self.model: DartModel = build_model(c, VOCAB_SIZE)
        gen = torch.Generator().manual_seed(seed)
        views = torch.rand((BATCH, 2, c.h, c.w), generator=gen, dtype=DTYPE)
        view_mask = torch.ones((BATCH, 2), dtype=torch.bool)
        view_mask[0, 1] = False
        views[0, 1] = 0.0
        self.batch = Batch(
            ids=[f"rec{i}" for i in range(BATCH)],
            views=views,
            view_mask=view_mask,
            tokens=_random_tokens(gen, BATCH, c.max_len),
            annotations=_one_hot(gen, BATCH, c.d),
        )
        self.queue = TrainingQueue(QUEUE, c.d, c.e)
        self.queue.push(
            [f"q{i}" for i in range(QUEUE - 1)] + ["rec1"],
            torch.randn((QUEUE, c.d, c.e), generator=gen, dtype=DTYPE),
            torch.randn((QUEUE, c.d, c.e), generator=gen, dtype=DTYPE),
            _one_hot(gen, QUEUE, c.d),
        )
        self.slot_mask = torch.tensor([True, False, False])
        self.retrieved = torch.randn((BATCH, c.k, c.d, c.e), generator=gen, dtype=DTYPE)
        self.retrieved_annotations = _one_hot(gen, BATCH, c.k, c.d)
        self.f_T_hat = torch.randn((BATCH, c.d, c.e), generator=gen, dtype=DTYPE)
        self.f_I_target = torch.randn((BATCH, c.d, c.e), generator=gen, dtype=DTYPE)

    def _features(self):
        f_I = self.model.encode_images(self.batch)
        f_T = self.model.encode_texts(self.batch.tokens)
        return f_I, f_T

    def con(self) -> torch.Tensor:
        f_I, f_T = self._features()
        return contrastive_loss(f_I, f_T, self.queue.snapshot(), self.model.tau, self.batch.ids)

    def cls(self) -> torch.Tensor:
        y_hat, _ = self.model.disease_forward(self.model.encode_images(self.batch))
        return classification_loss(y_hat, self.batch.annotations)

    def gen(self) -> torch.Tensor:
        f_I, f_T = self._features()
        _, f_D = self.model.disease_forward(f_I)
        return generation_loss(self.batch.tokens, ConditioningBundle(f_D, f_T, self.retrieved), self.model.decoder)

    def gamma_surrogate(self) -> torch.Tensor:
        f_I = self.model.encode_images(self.batch)
        sims = hit_similarities(f_I, self.retrieved)
        return disease_match_surrogate(self.batch.annotations, self.retrieved_annotations, sims, self.model.tau)

    def cor(self) -> torch.Tensor:
        return correction_loss(correct(self.f_T_hat, self.model.psi), self.f_I_target)

    def stage1(self) -> torch.Tensor:
        return stage1_loss(self.batch, self.model, self.queue, self.config, self.slot_mask).total

    def stage2(self) -> torch.Tensor:
        with torch.no_grad():
            f_I = self.model.encode_images(self.batch)
            _, f_D = self.model.disease_forward(f_I)
        inputs = Stage2Inputs(
            record_ids=list(self.batch.ids),
            f_I=f_I,
            f_D=f_D,
            f_T_hat=self.f_T_hat,
            retrieved=self.retrieved,
            retrieved_annotations=self.retrieved_annotations,
            similarities=torch.zeros((BATCH, self.config.k), dtype=DTYPE),
            tokens=self.batch.tokens,
            annotations=self.batch.annotations,
        )
        return stage2_objective(inputs, self.model, self.config)[0]

    def groups_for(self, name: str) -> List[str]:
        if name in ("cor", "stage2"):
            return stage2_groups(self.config)
        groups = stage1_groups(self.config)
        return groups + ["tau"] if "tau" not in groups else groups

    def loss(self, name: str) -> Callable[[], torch.Tensor]:
        if name not in LOSS_NAMES:
            raise KeyError(f"unknown loss {name!r}; expected one of {LOSS_NAMES}")
        return getattr(self, name)


def check_loss(name: str, seed: int, step: float = 1e-5, entries: int | None = ENTRIES_PER_PARAM) -> GradCheckReport:
    setup = TinySetup(seed)
    store = setup.model.store()
    store.set_trainable(setup.groups_for(name))
    return finite_diff_check(setup.loss(name), store, step=step, entries_per_param=entries, seed=seed)


def run_gradcheck(seed: int, losses: List[str] | None = None, tolerance: float = TOLERANCE) -> Dict:
    """Check every loss for one seed; the result is the CLI's JSON report."""
    reports = {name: check_loss(name, seed) for name in (losses or LOSS_NAMES)}
    worst = max(r.max_error for r in reports.values())
    for name, report in reports.items():
        logger.info("gradcheck %s: max relative error %.3e", name, report.max_error)
    return {
        "seed": seed,
        "max_relative_error": worst,
        "tolerance": tolerance,
        "passed": all(r.passed(tolerance) for r in reports.values()),
        "losses": {name: r.to_dict() for name, r in reports.items()},
    }
