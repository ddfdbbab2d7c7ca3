import logging
import os
import sys
from pathlib import Path
from typing import Literal

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError

load_dotenv()  # lets DART_LOG live in a local .env

# ---- Corpus settings ----

NUM_DISEASES = 8          # d
IMAGE_SIZE = 32           # h = w
PATCH_SIZE = 8            # non-overlapping patches, also the blob grid cell
CORPUS_SIZE = 2000        # total records before the 7:1:2 split
DISEASE_PREVALENCE = 0.3
MAX_NEGATIVE_SENTENCES = 3
SPLIT_RATIO = (7, 1, 2)   # train / val / test

# ---- Model settings ----

EMBED_DIM = 32            # e (256 at paper scale)
NUM_HEADS = 4
NUM_LAYERS = 2
FF_MULT = 4
MAX_LEN = 64              # tokens including BOS/EOS

# ---- Training settings ----

LAMBDA_CLS = 1.0
LAMBDA_GEN = 1.0
LAMBDA_M = 10.0           # disease-matching weight
LAMBDA_COR = 5.0          # self-correction weight
BATCH_SIZE = 8
LEARNING_RATE = 3e-4
WEIGHT_DECAY = 0.01
GRAD_CLIP = 5.0
EPOCHS_STAGE1 = 30
EPOCHS_STAGE2 = 10
SEED = 7

# ---- Alignment / retrieval settings ----

TOP_K = 3
QUEUE_SIZE = 512
TAU_INIT = 0.07
TAU_MIN = 0.01
TAU_MAX = 1.0
NULL_SLOT_PROB = 0.5      # chance the text slot holds the null placeholder in stage 1

# ---- Ablation presets (contrastive, retrieval, disease matching, self-correction) ----

ABLATIONS = {
    "base": {"cl": False, "i2t": False, "dm": False, "sc": False},
    "a": {"cl": True, "i2t": False, "dm": False, "sc": False},
    "b": {"cl": True, "i2t": True, "dm": False, "sc": False},
    "c": {"cl": True, "i2t": True, "dm": True, "sc": False},
    "d": {"cl": True, "i2t": True, "dm": True, "sc": True},
}


class TrainConfig(BaseModel):
    """
    Every hyperparameter of a run. Serialized into each checkpoint, so two
    runs with equal configs (and equal corpora) are reproducible bit for bit.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    # corpus
    d: int = Field(NUM_DISEASES, ge=2)
    h: int = Field(IMAGE_SIZE, ge=8)
    w: int = Field(IMAGE_SIZE, ge=8)
    patch: int = PATCH_SIZE
    n: int = Field(CORPUS_SIZE, ge=1)
    prevalence: float = Field(DISEASE_PREVALENCE, ge=0.0, le=1.0)
    max_negatives: int = Field(MAX_NEGATIVE_SENTENCES, ge=0)
    split: tuple[int, int, int] = SPLIT_RATIO
    keywords: list[str] | None = None

    # model
    e: int = Field(EMBED_DIM, ge=1)
    heads: int = Field(NUM_HEADS, ge=1)
    layers: int = Field(NUM_LAYERS, ge=1)
    ff_mult: int = Field(FF_MULT, ge=1)
    max_len: int = Field(MAX_LEN, ge=2)

    # losses
    lambda_cls: float = Field(LAMBDA_CLS, ge=0.0)
    lambda_gen: float = Field(LAMBDA_GEN, ge=0.0)
    lambda_m: float = Field(LAMBDA_M, ge=0.0)
    lambda_cor: float = Field(LAMBDA_COR, ge=0.0)

    # retrieval / alignment
    k: int = Field(TOP_K, ge=0)
    q: int = Field(QUEUE_SIZE, ge=1)
    tau_init: float = Field(TAU_INIT, gt=0.0)
    tau_min: float = Field(TAU_MIN, gt=0.0)
    tau_max: float = Field(TAU_MAX, gt=0.0)
    gamma_surrogate: bool = True
    null_slot_prob: float = Field(NULL_SLOT_PROB, ge=0.0, le=1.0)

    # optimization
    batch: int = Field(BATCH_SIZE, ge=1)
    lr: float = Field(LEARNING_RATE, gt=0.0)
    weight_decay: float = Field(WEIGHT_DECAY, ge=0.0)
    grad_clip: float = Field(GRAD_CLIP, gt=0.0)
    epochs_stage1: int = Field(EPOCHS_STAGE1, ge=0)
    epochs_stage2: int = Field(EPOCHS_STAGE2, ge=0)
    seed: int = SEED
    threads: int = Field(1, ge=1)

    # ablation switches
    cl: bool = True
    i2t: bool = True
    dm: bool = True
    sc: bool = True

    # stage 2 / decoding
    online_decode: bool = False
    corr_residual: bool = False
    decode_mode: Literal["greedy", "beam"] = "greedy"
    beam_width: int = Field(1, ge=1)

    @field_validator("split", mode="before")
    @classmethod
    def _split_from_text(cls, value):
        if isinstance(value, str):
            value = [part.strip() for part in value.replace(":", ",").split(",")]
        return value

    @field_validator("keywords", mode="before")
    @classmethod
    def _keywords_from_text(cls, value):
        if isinstance(value, str):
            value = [part.strip() for part in value.split(",") if part.strip()]
        return value

    @model_validator(mode="after")
    def _check_consistency(self):
        if self.k > self.q:
            raise ValueError(f"k={self.k} exceeds queue capacity q={self.q}")
        if self.e % self.heads:
            raise ValueError(f"heads={self.heads} must divide e={self.e}")
        if self.dm and not self.i2t:
            raise ValueError("disease matching (dm) needs image-to-text retrieval (i2t)")
        if self.h % self.patch or self.w % self.patch:
            raise ValueError(f"image size {self.h}x{self.w} is not a multiple of patch {self.patch}")
        if self.tau_min > self.tau_max:
            raise ValueError("tau_min must not exceed tau_max")
        if self.keywords is not None and len(self.keywords) != self.d:
            raise ValueError(f"{len(self.keywords)} keywords given for d={self.d} diseases")
        if sum(self.split) <= 0 or min(self.split) < 0:
            raise ValueError(f"invalid split ratio {self.split}")
        return self

    @property
    def retrieved(self) -> int:
        """Number of retrieved blocks the generator is conditioned on."""
        return self.k if self.i2t else 0

    def with_overrides(self, **overrides) -> "TrainConfig":
        return make_config(**{**self.model_dump(), **overrides})


def make_config(**values) -> TrainConfig:
    try:
        return TrainConfig(**values)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {e}") from e


def parse_config_text(text: str) -> dict[str, str]:
    """
    Parse the flat config grammar:

        # comment
        key = value

    Lists are comma separated. Later keys win.
    """
    values = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {number}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"config line {number}: empty key")
        values[key.replace("-", "_")] = value
    return values


def load_config(path: str | Path | None = None, **overrides) -> TrainConfig:
    """
    Load a config file (if given) and apply overrides on top.
    Overrides set to None are ignored so argparse defaults pass straight through.
    """
    values: dict[str, object] = {}
    if path is not None:
        try:
            values.update(parse_config_text(Path(path).read_text(encoding="utf-8")))
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
    values.update({k: v for k, v in overrides.items() if v is not None})
    return make_config(**values)


LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def setup_logging(level: str | None = None) -> None:
    """Human-readable logs go to stderr; stdout is reserved for results."""
    name = (level or os.getenv("DART_LOG", "info")).lower()
    logging.basicConfig(
        stream=sys.stderr,
        level=LOG_LEVELS.get(name, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )
