"""
Differentiable kernel shared by every loss.

Matrices are float64 torch tensors. torch's autograd graph plays the role of
the gradient tape; ParamStore gives named, group-aware access to parameters
and freeze checks, and finite_diff_check is the independent
oracle the tape is verified against.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import torch
from torch import nn

from .errors import DimensionError, InputValidationError, InvariantViolation

logger = logging.getLogger(__name__)

DTYPE = torch.float64
EPS = 1e-7           # probability clipping wherever a log is taken
NORM_FLOOR = 1e-12   # below this a matrix counts as all-zero for cosine


def as_matrix(values) -> torch.Tensor:
    return torch.as_tensor(values, dtype=DTYPE)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Matrix product over the last two axes (leading batch axes broadcast)."""
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"cannot multiply {tuple(a.shape)} by {tuple(b.shape)}")
    return a @ b


def row_softmax(m: torch.Tensor, scale: float) -> torch.Tensor:
    """Softmax of each row of m / scale (torch subtracts the row max)."""
    if scale <= 0:
        raise ValueError(f"softmax scale must be positive, got {scale}")
    return torch.softmax(m / scale, dim=-1)


def _flatten_pair(a: torch.Tensor, b: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    if a.shape[-2:] != b.shape[-2:]:
        raise DimensionError(f"cosine needs equal shapes, got {tuple(a.shape)} and {tuple(b.shape)}")
    return a.flatten(-2), b.flatten(-2)


def cosine(a: torch.Tensor, b: torch.Tensor, *, return_flag: bool = False):
    """
    Frobenius cosine of two matrices (batched over leading axes).

    A zero-norm operand gives similarity 0; with return_flag the second
    value reports whether that guard fired.
    """
    fa, fb = _flatten_pair(a, b)
    na = torch.linalg.vector_norm(fa, dim=-1)
    nb = torch.linalg.vector_norm(fb, dim=-1)
    degenerate = bool(((na < NORM_FLOOR) | (nb < NORM_FLOOR)).any())
    if degenerate:
        logger.warning("cosine of a zero-norm matrix; similarity set to 0")
    value = (fa * fb).sum(-1) / (na.clamp_min(NORM_FLOOR) * nb.clamp_min(NORM_FLOOR))
    if return_flag:
        return value, degenerate
    return value


def pairwise_cosine(queries: torch.Tensor, keys: torch.Tensor) -> torch.Tensor:
    """(n, d, e) x (m, d, e) -> (n, m) Frobenius cosines."""
    fq, fk = _flatten_pair(queries, keys)
    fq = fq / torch.linalg.vector_norm(fq, dim=-1, keepdim=True).clamp_min(NORM_FLOOR)
    fk = fk / torch.linalg.vector_norm(fk, dim=-1, keepdim=True).clamp_min(NORM_FLOOR)
    return fq @ fk.transpose(0, 1)


def check_one_hot(target: torch.Tensor) -> None:
    binary = (target == 0) | (target == 1)
    if not bool(binary.all()) or not bool((target.sum(-1) == 1).all()):
        raise InputValidationError("target rows must be one-hot")


def cross_entropy_rows(target: torch.Tensor, pred: torch.Tensor) -> torch.Tensor:
    """Mean over rows of -sum(target * log(clip(pred))); leading axes are kept."""
    if target.shape != pred.shape:
        raise DimensionError(f"target {tuple(target.shape)} and prediction {tuple(pred.shape)} differ")
    check_one_hot(target)
    clipped = pred.clamp(EPS, 1.0 - EPS)
    return -(target * torch.log(clipped)).sum(-1).mean(-1)


def group_of(path: str) -> str:
    return path.split(".", 1)[0]


class ParamStore:
    """
    Named view over a module's parameters. A parameter's group is the first
    component of its dotted path; the trainable flag is requires_grad.
    """

    def __init__(self, module: nn.Module):
        self._params: dict[str, nn.Parameter] = dict(module.named_parameters())

    def __getitem__(self, path: str) -> nn.Parameter:
        return self._params[path]

    def __contains__(self, path: str) -> bool:
        return path in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def groups(self) -> dict[str, list[str]]:
        grouped: dict[str, list[str]] = {}
        for name in self._params:
            grouped.setdefault(group_of(name), []).append(name)
        return grouped

    def set_trainable(self, groups: Iterable[str]) -> None:
        """Make exactly the given groups trainable; everything else is frozen."""
        wanted = set(groups)
        unknown = wanted - set(self.groups())
        if unknown:
            raise KeyError(f"unknown parameter groups: {sorted(unknown)}")
        for name, param in self._params.items():
            param.requires_grad_(group_of(name) in wanted)

    def trainable_groups(self) -> list[str]:
        return sorted({group_of(n) for n, p in self._params.items() if p.requires_grad})

    def trainable_items(self) -> list[tuple[str, nn.Parameter]]:
        return [(n, p) for n, p in self._params.items() if p.requires_grad]

    def snapshot(self, groups: Iterable[str] | None = None) -> dict[str, torch.Tensor]:
        wanted = set(groups) if groups is not None else None
        return {
            n: p.detach().clone()
            for n, p in self._params.items()
            if wanted is None or group_of(n) in wanted
        }

    def assert_unchanged(self, snapshot: dict[str, torch.Tensor]) -> None:
        for name, before in snapshot.items():
            if not torch.equal(self._params[name].detach(), before):
                raise InvariantViolation(
                    f"frozen parameter '{name}' (group '{group_of(name)}') changed"
                )


@dataclass
class GradCheckReport:
    """Per-parameter relative errors of the tape against central differences."""

    step: float
    errors: dict[str, float] = field(default_factory=dict)
    unused: list[str] = field(default_factory=list)
    flagged: list[str] = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def passed(self, tolerance: float = 1e-4) -> bool:
        return not self.flagged and self.max_error <= tolerance

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "max_relative_error": self.max_error,
            "errors": self.errors,
            "unused": self.unused,
            "flagged": self.flagged,
        }


def finite_diff_check(
    loss: Callable[[], torch.Tensor],
    params: ParamStore,
    step: float = 1e-5,
    entries_per_param: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """
    Compare autograd gradients of loss() with central differences
    (L(θ+h) - L(θ-h)) / 2h for every trainable parameter.

    The error of a parameter is the max over its checked entries of
    |g_fd - g| / max(|g|, 1e-8). With entries_per_param set, a seeded sample
    of that many entries is checked per parameter.
    """
    if not 1e-7 <= step <= 1e-3:
        raise ValueError(f"finite-difference step {step} outside [1e-7, 1e-3]")

    named = params.trainable_items()
    report = GradCheckReport(step=step)
    value = loss()
    grads = torch.autograd.grad(value, [p for _, p in named], allow_unused=True)
    generator = torch.Generator().manual_seed(seed)

    for (name, param), grad in zip(named, grads):
        if grad is None:
            report.unused.append(name)
            continue
        flat_grad = grad.detach().reshape(-1)
        count = flat_grad.numel()
        if entries_per_param is not None and entries_per_param < count:
            indices = torch.randperm(count, generator=generator)[:entries_per_param].tolist()
        else:
            indices = range(count)

        flat = param.data.view(-1)
        worst = 0.0
        with torch.no_grad():
            for i in indices:
                original = flat[i].item()
                flat[i] = original + step
                plus = float(loss())
                flat[i] = original - step
                minus = float(loss())
                flat[i] = original
                numeric = (plus - minus) / (2 * step)
                if not math.isfinite(numeric):
                    report.flagged.append(f"{name}[{i}]")
                    continue
                analytic = flat_grad[i].item()
                worst = max(worst, abs(numeric - analytic) / max(abs(analytic), 1e-8))
        report.errors[name] = worst
    return report
