"""AdamW construction and the guarded optimizer step."""
from __future__ import annotations

import torch

from .alignment import clamp_temperature
from .config import TrainConfig
from .errors import NonFiniteGradientError
from .numerics import ParamStore, group_of

BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
NO_DECAY_GROUPS = {"tau"}


def build_optimizer(store: ParamStore, config: TrainConfig) -> torch.optim.AdamW:
    """AdamW over the trainable parameters; the temperature gets no weight decay."""
    decay, no_decay = [], []
    for name, param in store.trainable_items():
        (no_decay if group_of(name) in NO_DECAY_GROUPS else decay).append(param)
    groups = []
    if decay:
        groups.append({"params": decay, "weight_decay": config.weight_decay})
    if no_decay:
        groups.append({"params": no_decay, "weight_decay": 0.0})
    if not groups:
        raise ValueError("no trainable parameters to optimize")
    return torch.optim.AdamW(groups, lr=config.lr, betas=BETAS, eps=ADAM_EPS, foreach=False)


def optimizer_step(store: ParamStore, optimizer: torch.optim.Optimizer, config: TrainConfig) -> None:
    """
    One update: frozen parameters drop their gradients, any non-finite
    gradient aborts the step, then global-norm clipping, AdamW, and the
    temperature clamp.
    """
    live = []
    for name, param in store.items():
        if param.grad is None:
            continue
        if not param.requires_grad:
            param.grad = None
            continue
        if not bool(torch.isfinite(param.grad).all()):
            optimizer.zero_grad(set_to_none=True)
            raise NonFiniteGradientError(
                f"non-finite gradient in parameter group '{group_of(name)}' ({name}); step aborted"
            )
        live.append(param)

    if live:
        torch.nn.utils.clip_grad_norm_(live, config.grad_clip)
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)
    if "tau" in store:
        clamp_temperature(store["tau"], config.tau_min, config.tau_max)
