"""
Command-line entry point: python -m app.main <command> [options]

Results go to stdout as JSON (JSON lines for per-record commands, CSV for
sweep-k); logs and progress bars go to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from pydantic import BaseModel

from src.checkpoint import Checkpoint, load_checkpoint, restore_model, save_checkpoint
from src.config import ABLATIONS, TrainConfig, load_config, setup_logging
from src.corpus import CorpusRecord, Vocabulary, generate_corpus, keyword_table, load_jsonl, save_jsonl, split_records
from src.errors import ConfigError, DartError, InputValidationError
from src.evalkit import evaluate_reports, parse_k_values, rows_to_csv, sweep_k
from src.gradcheck import run_gradcheck
from src.pipeline import build_frozen_index, classify_records, generate_reports, retrieve_records
from src.retrieval import FrozenIndex
from src.trainer import run_stage1, run_stage2

logger = logging.getLogger("dart")

SPLITS = ("train", "val", "test")


class UsageError(ConfigError):
    pass


class DartArgumentParser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so usage errors map to exit code 1."""

    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


class CorpusSummary(BaseModel):
    path: str
    records: int
    splits: dict[str, int]


class TrainSummary(BaseModel):
    stage: int
    out: str
    content_hash: str
    groups: list[str]
    summary: dict
    steps: int


class IndexSummary(BaseModel):
    out: str
    count: int
    content_hash: str


# ---- shared helpers ----


def _emit(payload) -> None:
    if isinstance(payload, BaseModel):
        payload = payload.model_dump(mode="json")
    sys.stdout.write(json.dumps(payload, sort_keys=True) + "\n")
    sys.stdout.flush()


def _config(args, **extra) -> TrainConfig:
    overrides = {
        "seed": getattr(args, "seed", None),
        "threads": getattr(args, "threads", None),
        **extra,
    }
    return load_config(getattr(args, "config", None), **overrides)


def _records(args, config: TrainConfig) -> list[CorpusRecord]:
    if getattr(args, "corpus", None):
        return load_jsonl(args.corpus, config.d)
    logger.info("No --corpus given; generating the synthetic corpus (seed %d, n %d)", config.seed, config.n)
    return generate_corpus(
        config.seed, config.n, config.d, config.h, config.w, config.prevalence, config.max_negatives, config.keywords
    )


def _split(records: Sequence[CorpusRecord], config: TrainConfig, name: str) -> list[CorpusRecord]:
    chosen = split_records(records, config.split)[name]
    if not chosen:
        raise InputValidationError(f"the {name} split is empty")
    return chosen


def _load_model(path: str):
    ckpt = load_checkpoint(path)
    return ckpt, restore_model(ckpt), Vocabulary(list(ckpt.vocab))


def _index(args, ckpt: Checkpoint, model, vocab, records) -> FrozenIndex:
    if getattr(args, "index", None):
        return FrozenIndex.load(args.index)
    return build_frozen_index(model, _split(records, ckpt.config, "train"), vocab, ckpt.config)


# ---- commands ----


def cmd_gen_corpus(args) -> int:
    """Write a seeded synthetic corpus as JSONL."""
    config = _config(args, n=args.n, d=args.d)
    records = _records(argparse.Namespace(), config)
    save_jsonl(records, args.out)
    counts = {name: len(part) for name, part in split_records(records, config.split).items()}
    _emit(CorpusSummary(path=str(args.out), records=len(records), splits=counts))
    return 0


def cmd_train(args) -> int:
    """
    Train one stage and save the best-by-validation checkpoint.

    Stage 1 trains from scratch; stage 2 needs --init with a stage-1
    checkpoint and only fits the correction embedding.
    """
    extra = {
        "online_decode": True if args.online_decode else None,
        "corr_residual": True if args.corr_residual else None,
        "gamma_surrogate": False if args.gamma_exact else None,
    }
    if args.epochs is not None:
        extra["epochs_stage1" if args.stage == 1 else "epochs_stage2"] = args.epochs
    config = _config(args, **extra)
    records = _records(args, config)
    if args.stage == 1:
        result = run_stage1(config, records, log_path=args.log)
    else:
        if not args.init:
            raise UsageError("train --stage 2 needs --init <stage-1 checkpoint>")
        result = run_stage2(load_checkpoint(args.init), records, config, log_path=args.log)
    save_checkpoint(result.checkpoint, args.out)
    _emit(
        TrainSummary(
            stage=args.stage,
            out=str(args.out),
            content_hash=result.checkpoint.content_hash,
            groups=result.checkpoint.groups(),
            summary=result.checkpoint.summary,
            steps=sum(1 for line in result.history if "step" in line),
        )
    )
    return 0


def cmd_index(args) -> int:
    """Build the frozen retrieval index over the training split."""
    ckpt, model, vocab = _load_model(args.ckpt)
    records = _records(args, ckpt.config)
    index = build_frozen_index(model, _split(records, ckpt.config, "train"), vocab, ckpt.config)
    index.save(args.out)
    _emit(IndexSummary(out=str(args.out), count=len(index), content_hash=index.content_hash))
    return 0


def cmd_generate(args) -> int:
    """One JSON line per record: id, stage1_report, stage2_report, retrieved_ids, truncated."""
    ckpt, model, vocab = _load_model(args.ckpt)
    config = ckpt.config
    if args.decode_mode or args.beam_width:
        config = config.with_overrides(
            decode_mode=args.decode_mode or config.decode_mode, beam_width=args.beam_width or config.beam_width
        )
    records = _records(args, config)
    index = _index(args, ckpt, model, vocab, records)
    stage = args.stage or ckpt.stage
    if stage == 2 and ckpt.stage != 2:
        raise UsageError("stage-2 generation needs a stage-2 checkpoint")
    reports = generate_reports(
        model,
        _split(records, config, args.split),
        vocab,
        index,
        config,
        stage=stage,
        k=args.k,
        exclude_self=args.split == "train",
    )
    for report in reports:
        _emit(report.to_dict())
    return 0


def cmd_retrieve(args) -> int:
    ckpt, model, vocab = _load_model(args.ckpt)
    records = _records(args, ckpt.config)
    index = _index(args, ckpt, model, vocab, records)
    k = ckpt.config.k if args.k is None else args.k
    rows = retrieve_records(
        model, _split(records, ckpt.config, args.split), vocab, index, ckpt.config, k, exclude_self=args.split == "train"
    )
    for row in rows:
        _emit(row)
    return 0


def cmd_classify(args) -> int:
    ckpt, model, vocab = _load_model(args.ckpt)
    records = _records(args, ckpt.config)
    for row in classify_records(model, _split(records, ckpt.config, args.split), vocab, ckpt.config, ckpt.keywords):
        _emit(row)
    return 0


def _final_report(row: dict) -> str:
    """Accept `generate` output (stage1_report/stage2_report) or plain {id, report} lines."""
    if "report" in row:
        return row["report"]
    if row.get("stage2_report") is not None:
        return row["stage2_report"]
    return row["stage1_report"]


def _read_predictions(path: str) -> dict[str, str]:
    predictions = {}
    with open(path, encoding="utf-8") as handle:
        for number, raw in enumerate(handle, start=1):
            if not raw.strip():
                continue
            try:
                row = json.loads(raw)
                predictions[row["id"]] = _final_report(row)
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise InputValidationError(f"{path} line {number}: expected an id and a report ({e})") from e
    return predictions


def cmd_eval(args) -> int:
    """
    Score predicted reports against reference records.

    Both files must cover exactly the same record ids.
    """
    predictions = _read_predictions(args.pred)
    references = load_jsonl(args.ref)
    ref_ids = {r.id for r in references}
    if set(predictions) != ref_ids:
        missing = sorted(ref_ids - set(predictions))[:5]
        extra = sorted(set(predictions) - ref_ids)[:5]
        raise InputValidationError(f"prediction and reference ids differ (missing {missing}, unexpected {extra})")
    keywords = args.keywords.split(",") if args.keywords else keyword_table(len(references[0].diseases))
    report = evaluate_reports(
        [predictions[r.id] for r in references],
        [r.report for r in references],
        [r.diseases for r in references],
        keywords,
    )
    if args.out:
        Path(args.out).write_text(report.model_dump_json(indent=2), encoding="utf-8")
    _emit(report)
    return 0


def cmd_ablate(args) -> int:
    """
    Train one ablation preset and report its test metrics.

    Steps:
      - stage 1 with the preset's {cl, i2t, dm, sc} switches
      - stage 2 when the preset enables self-correction
      - generate and score the test split
    """
    config = _config(args, **ABLATIONS[args.setting])
    records = _records(args, config)
    ckpt = run_stage1(config, records, log_path=args.log).checkpoint
    if config.sc:
        ckpt = run_stage2(ckpt, records, config, log_path=args.log).checkpoint
    if args.out:
        save_checkpoint(ckpt, args.out)
    model, vocab = restore_model(ckpt), Vocabulary(list(ckpt.vocab))
    index = build_frozen_index(model, _split(records, config, "train"), vocab, config)
    test = _split(records, config, "test")
    reports = generate_reports(model, test, vocab, index, config, stage=ckpt.stage)
    metrics = evaluate_reports([r.report for r in reports], [r.report for r in test], [r.diseases for r in test], ckpt.keywords)
    _emit({"setting": args.setting, "stage": ckpt.stage, "groups": ckpt.groups(), "metrics": metrics.model_dump(mode="json")})
    return 0


def cmd_sweep_k(args) -> int:
    """Re-run inference for each k over the test split; CSV to --out and stdout."""
    ckpt, model, vocab = _load_model(args.ckpt)
    records = _records(args, ckpt.config)
    index = _index(args, ckpt, model, vocab, records)
    rows = sweep_k(model, _split(records, ckpt.config, "test"), vocab, index, ckpt.config, parse_k_values(args.k), stage=ckpt.stage)
    text = rows_to_csv(rows)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def cmd_gradcheck(args) -> int:
    """Finite-difference check of every loss on a tiny model; exit 3 on failure."""
    report = run_gradcheck(args.seed)
    _emit(report)
    return 0 if report["passed"] else 3


# ---- parser ----


def build_parser() -> argparse.ArgumentParser:
    parser = DartArgumentParser(prog="dart", description="Two-stage retrieval-augmented radiology report generation.")
    parser.add_argument("--log-level", choices=["error", "info", "debug"], help="overrides DART_LOG")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=DartArgumentParser)

    def common(p, corpus=True, seed=True, config=True):
        if config:
            p.add_argument("--config", help="flat 'key = value' config file")
        if corpus:
            p.add_argument("--corpus", help="JSONL corpus (default: generate the synthetic corpus)")
        if seed:
            p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--threads", type=int, help="torch worker threads (default 1)")

    p = sub.add_parser("gen-corpus", help="write a synthetic corpus")
    common(p, corpus=False)
    p.add_argument("--n", type=int, help="number of records")
    p.add_argument("--d", type=int, help="number of diseases")
    p.add_argument("--out", required=True, help="output JSONL path")
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train", help="train stage 1 or stage 2")
    common(p)
    p.add_argument("--stage", type=int, choices=[1, 2], required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--init", help="stage-1 checkpoint (stage 2 only)")
    p.add_argument("--log", help="JSON-lines metrics path")
    p.add_argument("--epochs", type=int, help="epochs for the chosen stage")
    p.add_argument("--gamma-exact", action="store_true", help="train on exact gamma instead of the surrogate")
    p.add_argument("--online-decode", action="store_true", help="re-decode stage-1 drafts every stage-2 step")
    p.add_argument("--corr-residual", action="store_true", help="add the draft features back after correction")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("index", help="build the frozen retrieval index")
    common(p, seed=False, config=False)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("generate", help="generate reports as JSON lines")
    common(p, seed=False, config=False)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--index", help="frozen index (default: rebuild from the training split)")
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--stage", type=int, choices=[1, 2], help="default: the checkpoint's stage")
    p.add_argument("--k", type=int, help="retrieved blocks (default: as trained)")
    p.add_argument("--decode-mode", choices=["greedy", "beam"])
    p.add_argument("--beam-width", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("retrieve", help="top-k retrieval hits as JSON lines")
    common(p, seed=False, config=False)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--index")
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--k", type=int)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("classify", help="disease predictions as JSON lines")
    common(p, seed=False, config=False)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("eval", help="score predicted reports")
    p.add_argument("--pred", required=True, help="JSON lines with id and report")
    p.add_argument("--ref", required=True, help="reference corpus JSONL")
    p.add_argument("--keywords", help="comma-separated disease keywords (default: built-in table)")
    p.add_argument("--out", help="metrics JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate an ablation preset")
    common(p)
    p.add_argument("--setting", choices=sorted(ABLATIONS), required=True)
    p.add_argument("--out", help="final checkpoint path")
    p.add_argument("--log", help="JSON-lines metrics path")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-k", help="BLEU-4 per number of retrieved reports")
    common(p, seed=False, config=False)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--index")
    p.add_argument("--k", default="0..5", help="'0..5' or a comma list")
    p.add_argument("--out", help="CSV path")
    p.set_defaults(func=cmd_sweep_k)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        sys.stderr.write(f"{e}\n")
        return e.exit_code
    setup_logging(args.log_level)
    try:
        return args.func(args)
    except DartError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return e.exit_code
    except OSError as e:
        logger.error("I/O error: %s", e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
