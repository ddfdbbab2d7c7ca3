"""
Versioned binary checkpoints.

Layout: magic, uint32 version, uint64 header length, canonical JSON header,
little-endian float64 payloads in header order, SHA-256 of everything before.
Saving the same checkpoint twice yields identical bytes.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig, make_config
from .corpus import Vocabulary
from .errors import CheckpointError
from .model import PSI, DartModel, build_model
from .numerics import DTYPE, group_of

CHECKPOINT_MAGIC = b"DARTCKPT"
CHECKPOINT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


@dataclass
class Checkpoint:
    config: TrainConfig
    stage: int
    vocab: list[str]
    keywords: list[str]
    params: dict[str, np.ndarray]
    # per parameter path: {"step": float, "exp_avg": array, "exp_avg_sq": array}
    optimizer: dict[str, dict] = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    def groups(self) -> list[str]:
        return sorted({group_of(name) for name in self.params})

    def to_bytes(self) -> bytes:
        header = {
            "config": self.config.model_dump(mode="json"),
            "stage": self.stage,
            "vocab": self.vocab,
            "keywords": self.keywords,
            "params": [[name, list(arr.shape)] for name, arr in self.params.items()],
            "optimizer": [
                [name, float(state["step"]), list(state["exp_avg"].shape)]
                for name, state in self.optimizer.items()
            ],
            "summary": self.summary,
        }
        header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        parts = [_PREFIX.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header_bytes)), header_bytes]
        for arr in self.params.values():
            parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        for state in self.optimizer.values():
            parts.append(np.ascontiguousarray(state["exp_avg"], dtype="<f8").tobytes())
            parts.append(np.ascontiguousarray(state["exp_avg_sq"], dtype="<f8").tobytes())
        payload = b"".join(parts)
        return payload + hashlib.sha256(payload).digest()

    @property
    def content_hash(self) -> str:
        return self.to_bytes()[-32:].hex()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if len(blob) < _PREFIX.size + 32:
            raise CheckpointError("checkpoint is truncated")
        payload, digest = blob[:-32], blob[-32:]
        if hashlib.sha256(payload).digest() != digest:
            raise CheckpointError("checkpoint content hash mismatch")
        magic, version, header_len = _PREFIX.unpack_from(payload, 0)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError("not a checkpoint file")
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})")
        offset = _PREFIX.size
        header = json.loads(payload[offset : offset + header_len].decode("utf-8"))
        offset += header_len

        def take(shape):
            nonlocal offset
            count = int(np.prod(shape)) if shape else 1
            if offset + 8 * count > len(payload):
                raise CheckpointError("checkpoint payload is shorter than its header says")
            arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
            offset += 8 * count
            return arr

        params = {name: take(shape) for name, shape in header["params"]}
        optimizer = {}
        for name, step, shape in header["optimizer"]:
            exp_avg = take(shape)
            exp_avg_sq = take(shape)
            optimizer[name] = {"step": step, "exp_avg": exp_avg, "exp_avg_sq": exp_avg_sq}
        if offset != len(payload):
            raise CheckpointError("checkpoint payload size does not match its header")
        return cls(
            config=make_config(**header["config"]),
            stage=header["stage"],
            vocab=header["vocab"],
            keywords=header["keywords"],
            params=params,
            optimizer=optimizer,
            summary=header["summary"],
        )


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Atomic write: temp file then rename."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(ckpt.to_bytes())
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    return Checkpoint.from_bytes(blob)


def capture(
    model: DartModel,
    optimizer: torch.optim.Optimizer | None,
    vocab: Vocabulary,
    keywords: list[str],
    stage: int,
    summary: dict | None = None,
) -> Checkpoint:
    """Snapshot a model (and optimizer state) as a checkpoint for the given stage."""
    named = dict(model.named_parameters())
    params = {
        name: p.detach().numpy().copy()
        for name, p in named.items()
        if stage == 2 or group_of(name) != PSI
    }
    state = {}
    if optimizer is not None:
        by_param = {id(p): name for name, p in named.items()}
        for param, values in optimizer.state.items():
            name = by_param[id(param)]
            if name not in params or not values:
                continue
            state[name] = {
                "step": float(values["step"]),
                "exp_avg": values["exp_avg"].detach().numpy().copy(),
                "exp_avg_sq": values["exp_avg_sq"].detach().numpy().copy(),
            }
        state = dict(sorted(state.items()))
    return Checkpoint(
        config=model.config,
        stage=stage,
        vocab=list(vocab.tokens),
        keywords=list(keywords),
        params=params,
        optimizer=state,
        summary=summary or {},
    )


def restore_model(ckpt: Checkpoint) -> DartModel:
    """Rebuild the model; parameters missing from a stage-1 checkpoint keep their seeded init."""
    model = build_model(ckpt.config, len(ckpt.vocab))
    named = dict(model.named_parameters())
    unknown = set(ckpt.params) - set(named)
    if unknown:
        raise CheckpointError(f"checkpoint has unknown parameters: {sorted(unknown)}")
    with torch.no_grad():
        for name, arr in ckpt.params.items():
            if tuple(arr.shape) != tuple(named[name].shape):
                raise CheckpointError(
                    f"parameter {name} has shape {arr.shape} in the checkpoint, model expects {tuple(named[name].shape)}"
                )
            named[name].copy_(torch.from_numpy(arr).to(DTYPE))
    return model

