"""
Stage 2: re-align generated-report features with image features through
the correction embedding psi, the only parameter group trained here.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Sequence

import torch

from .config import TrainConfig
from .corpus import PAD
from .errors import DimensionError
from .generator import ConditioningBundle, generation_loss
from .model import DartModel
from .numerics import cosine, matmul, row_softmax
from .optimizer import optimizer_step
from .retrieval import disease_match, disease_match_surrogate

logger = logging.getLogger(__name__)


def correct(f_T_hat: torch.Tensor, psi: torch.Tensor, residual: bool = False) -> torch.Tensor:
    """
    f*_T_hat = softmax(f_T_hat . psi^T / sqrt(e)) . psi

    Every output row is a convex combination of psi's two rows. With
    residual=True the input is added back (off by default).
    """
    if psi.dim() != 2 or psi.shape[0] != 2 or f_T_hat.shape[-1] != psi.shape[1]:
        raise DimensionError(f"cannot correct {tuple(f_T_hat.shape)} features with psi {tuple(psi.shape)}")
    weights = row_softmax(matmul(f_T_hat, psi.transpose(0, 1)), psi.shape[1] ** 0.5)
    corrected = matmul(weights, psi)
    return corrected + f_T_hat if residual else corrected


def correction_loss(corrected: torch.Tensor, f_I: torch.Tensor) -> torch.Tensor:
    """1 - cosine(f*_T_hat, f_I), batch mean; f_I is a constant target."""
    value, degenerate = cosine(corrected, f_I.detach(), return_flag=True)
    if degenerate:
        logger.warning("zero-norm corrected features; correction loss falls back to 1")
    return (1.0 - value).mean()


def stage2_loss(gen_loss: torch.Tensor, cor_loss: torch.Tensor, lambda_cor: float, lambda_gen: float = 1.0) -> torch.Tensor:
    if lambda_cor < 0 or lambda_gen < 0:
        raise ValueError("stage-2 loss weights must be non-negative")
    return lambda_gen * gen_loss + lambda_cor * cor_loss


@dataclass
class Stage2Log:
    total: float
    generation: float
    correction: float
    gamma: float | None = None
    gamma_surrogate: float | None = None
    stepped: bool = True

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "components": {
                "gen": self.generation,
                "cor": self.correction,
                "gamma": self.gamma,
                "gamma_surrogate": self.gamma_surrogate,
            },
            "stepped": self.stepped,
        }


@dataclass
class Stage2Inputs:
    """
    Per-record tensors fixed by the frozen stage-1 model: image features,
    disease features, the retrieved blocks (with their annotations and
    similarities) and the features of the stage-1 draft report.
    """

    record_ids: list[str]
    f_I: torch.Tensor                    # (B, d, e)
    f_D: torch.Tensor                    # (B, d, e)
    f_T_hat: torch.Tensor                # (B, d, e)
    retrieved: torch.Tensor              # (B, k, d, e)
    retrieved_annotations: torch.Tensor  # (B, k, d, 2)
    similarities: torch.Tensor           # (B, k)
    tokens: torch.Tensor                 # (B, L) ground-truth reports
    annotations: torch.Tensor            # (B, d, 2)

    def __len__(self) -> int:
        return len(self.record_ids)

    def select(self, rows: Sequence[int]) -> "Stage2Inputs":
        index = torch.as_tensor(list(rows), dtype=torch.long)
        tokens = self.tokens[index]
        # drop columns that are PAD in every selected row
        width = int((tokens != PAD).sum(dim=1).max())
        return Stage2Inputs(
            record_ids=[self.record_ids[i] for i in rows],
            f_I=self.f_I[index],
            f_D=self.f_D[index],
            f_T_hat=self.f_T_hat[index],
            retrieved=self.retrieved[index],
            retrieved_annotations=self.retrieved_annotations[index],
            similarities=self.similarities[index],
            tokens=tokens[:, :width],
            annotations=self.annotations[index],
        )

    def with_drafts(self, f_T_hat: torch.Tensor) -> "Stage2Inputs":
        return replace(self, f_T_hat=f_T_hat)


def stage2_objective(inputs: Stage2Inputs, model: DartModel, config: TrainConfig):
    """(total, generation, correction) for one batch; only psi carries gradient."""
    corrected = correct(inputs.f_T_hat, model.psi, residual=config.corr_residual)
    bundle = ConditioningBundle(inputs.f_D, corrected, inputs.retrieved)
    gen = generation_loss(inputs.tokens, bundle, model.decoder)
    cor = correction_loss(corrected, inputs.f_I)
    return stage2_loss(gen, cor, config.lambda_cor, config.lambda_gen), gen, cor


def stage2_step(
    inputs: Stage2Inputs,
    model: DartModel,
    optimizer: torch.optim.Optimizer,
    config: TrainConfig,
    frozen: dict[str, torch.Tensor],
) -> Stage2Log:
    """
    One self-correction update. Every group but psi must match the frozen
    snapshot bitwise afterwards, otherwise InvariantViolation is raised.
    """
    store = model.store()
    total, gen, cor = stage2_objective(inputs, model, config)
    stepped = config.lambda_gen > 0 or config.lambda_cor > 0
    if stepped:
        total.backward()
        optimizer_step(store, optimizer, config)
    store.assert_unchanged(frozen)

    log = Stage2Log(total=float(total), generation=float(gen), correction=float(cor), stepped=stepped)
    if inputs.retrieved_annotations.shape[1] > 0:
        with torch.no_grad():
            log.gamma = float(disease_match(inputs.annotations, inputs.retrieved_annotations))
            log.gamma_surrogate = float(
                disease_match_surrogate(
                    inputs.annotations, inputs.retrieved_annotations, inputs.similarities, model.tau
                )
            )
    return log
