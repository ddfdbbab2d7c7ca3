"""All trainable parameter groups of the two-stage model in one module."""
from __future__ import annotations

import torch
from torch import nn

from .config import TrainConfig
from .corpus import Batch
from .disease import classify, disease_features
from .encoders import ImageEncoder, TextEncoder
from .generator import ReportDecoder
from .numerics import DTYPE, ParamStore

# Parameter groups (first component of every parameter path)
IMAGE_ENCODER = "image_encoder"
TEXT_ENCODER = "text_encoder"
PHI = "phi"
NULL_TEXT = "null_text"
TAU = "tau"
DECODER = "decoder"
PSI = "psi"


class DartModel(nn.Module):
    def __init__(self, config: TrainConfig, vocab_size: int):
        super().__init__()
        self.config = config
        self.vocab_size = vocab_size
        self.image_encoder = ImageEncoder(config)
        self.text_encoder = TextEncoder(config, vocab_size)
        self.phi = nn.Parameter(torch.randn(2, config.e, dtype=DTYPE) * 0.5)
        # fills the text slot when no report features exist (stage-1 inference)
        self.null_text = nn.Parameter(torch.randn(config.d, config.e, dtype=DTYPE) * 0.5)
        self.tau = nn.Parameter(torch.full((1, 1), config.tau_init, dtype=DTYPE))
        self.decoder = ReportDecoder(config, vocab_size)
        self.psi = nn.Parameter(torch.randn(2, config.e, dtype=DTYPE) * 0.5)

    def store(self) -> ParamStore:
        return ParamStore(self)

    def encode_images(self, batch: Batch) -> torch.Tensor:
        return self.image_encoder(batch.views, batch.view_mask)

    def encode_texts(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.text_encoder(tokens)

    def disease_forward(self, f_I: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(y_hat, f_D) for batched image features."""
        y_hat = classify(f_I, self.phi)
        return y_hat, disease_features(y_hat, self.phi, f_I)

    def null_slot(self, batch_size: int) -> torch.Tensor:
        return self.null_text.unsqueeze(0).expand(batch_size, -1, -1)

    def reset_correction(self) -> None:
        """Start psi from two distinct rows of the trained null placeholder."""
        with torch.no_grad():
            self.psi.copy_(self.null_text[:2])


def build_model(config: TrainConfig, vocab_size: int) -> DartModel:
    torch.manual_seed(config.seed)
    return DartModel(config, vocab_size)


def stage1_groups(config: TrainConfig) -> list[str]:
    groups = [IMAGE_ENCODER, TEXT_ENCODER, PHI, NULL_TEXT, DECODER]
    if config.cl or (config.dm and config.gamma_surrogate):
        groups.append(TAU)
    return groups


def stage2_groups(config: TrainConfig) -> list[str]:
    return [PSI]
