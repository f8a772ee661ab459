"""Command-line entry point: synth, forge-stage1, forge-stage2, train, eval, report."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import Any, Sequence

from .config import ConfigError, RunConfig, load_config
from .io import (
    DataError,
    atomic_write_text,
    dumps,
    load_manifest,
    read_conversations,
    read_records,
    write_conversations,
    write_jsonl,
)

log = logging.getLogger("nutriseg")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
STAGE2_SHARDS = {"dialogue": "fooddialogues", "reason_seg": "foodreasonseg"}


def _corpus_records(cfg: RunConfig):
    root = Path(cfg.paths.corpus)
    manifest = load_manifest(root)
    out = {}
    for name, entry in sorted(manifest["datasets"].items()):
        path = root / entry["records"]
        if not path.exists():
            raise DataError(f"records file for {name} not found: {path}")
        out[name] = (entry, [r for _, r in read_records(path, root)])
    return out


def _stage1_dir(cfg: RunConfig) -> Path:
    return Path(cfg.paths.shards) / "stage1"


def _stage2_dir(cfg: RunConfig) -> Path:
    return Path(cfg.paths.shards) / "stage2"


def cmd_synth(cfg: RunConfig) -> dict[str, Any]:
    from .synth import write_corpus

    s = cfg.synth
    root = write_corpus(cfg.paths.corpus, s.per_dataset, cfg.seed, s.image_size, tuple(s.ingredient_range), s.test_fraction)
    return {"corpus": str(root)}


def cmd_forge_stage1(cfg: RunConfig) -> dict[str, Any]:
    from .instruction_forge import forge_record, forge_stats, pooled_absent_vocabulary
    from .datamodel import Conversation

    corpora = _corpus_records(cfg)
    every = [r for _, recs in corpora.values() for r in recs]
    out_dir = _stage1_dir(cfg)
    stats: dict[str, Any] = {}
    all_convs = []
    for name, (entry, records) in corpora.items():
        policy = cfg.refer_policy(bool(entry.get("mask_complete", True)))
        convs = []
        for rec in records:
            absent = pooled_absent_vocabulary(every, rec) if "segmentation" in entry["tasks"] else []
            for c in forge_record(rec, entry["tasks"], cfg.seed, policy, absent, max_indices=cfg.forge.max_indices):
                convs.append(Conversation(c.turns, c.task_tag, c.source_record, {**c.meta, "split": rec.split, "dataset": name}))
        write_conversations(out_dir / f"{name}.jsonl", convs)
        stats[name] = forge_stats(convs)
        all_convs += convs
    stats["all"] = forge_stats(all_convs)
    atomic_write_text(out_dir / "stats.json", json.dumps(stats, indent=1, sort_keys=True) + "\n")
    return {"shards": str(out_dir), "conversations": len(all_convs), "one_to_zero_rate": stats["all"]["one_to_zero_rate"]}


def _backend(cfg: RunConfig):
    from .dialogue_forge import http_backend, mock_backend

    if cfg.forge.backend == "mock":
        return mock_backend
    if cfg.forge.backend == "http":
        return http_backend
    raise ConfigError(f"unknown forge backend {cfg.forge.backend!r}")


def cmd_forge_stage2(cfg: RunConfig) -> dict[str, Any]:
    from .dialogue_forge import forge_stage2
    from .datamodel import Conversation

    backend = _backend(cfg)
    corpora = _corpus_records(cfg)
    out_dir = _stage2_dir(cfg)
    rejections: list[dict[str, Any]] = []
    counts = {}
    for mode, shard in STAGE2_SHARDS.items():
        convs = []
        for name, (entry, records) in corpora.items():
            if mode not in entry.get("stage2", ()):
                continue
            res = forge_stage2(records, mode, cfg.seed, backend, cfg.forge.retries)
            split = {r.record_id: r.split for r in records}
            convs += [
                Conversation(c.turns, c.task_tag, c.source_record, {**c.meta, "split": split[c.source_record], "dataset": name})
                for c in res.conversations
            ]
            rejections += [{**r, "dataset": name} for r in res.rejections]
        write_conversations(out_dir / f"{shard}.jsonl", convs)
        counts[shard] = len(convs)
    write_jsonl(out_dir / "rejections.jsonl", rejections)
    return {"shards": str(out_dir), "conversations": counts, "rejections": len(rejections)}


def _load_shards(directory: Path) -> dict[str, list]:
    if not directory.exists():
        return {}
    return {p.stem: read_conversations(p) for p in sorted(directory.glob("*.jsonl")) if p.stem != "rejections"}


def _split(convs, split: str) -> list:
    return [c for c in convs if c.meta.get("split", "train") == split]


def _stage_out(cfg: RunConfig, stage: int | None = None) -> Path:
    return Path(cfg.paths.out) / f"stage{stage or cfg.stage}"


def cmd_train(cfg: RunConfig) -> dict[str, Any]:
    import torch

    from .model import build_model, load_checkpoint
    from .tokenizer import Tokenizer, build_base_vocab
    from .training import run_stage

    shards1 = _load_shards(_stage1_dir(cfg))
    shards2 = _load_shards(_stage2_dir(cfg)) if cfg.stage == 2 else {}
    plan = cfg.stage_plan()
    registry = {k: _split(v, "train") for k, v in {**shards1, **shards2}.items() if k in plan.datasets}
    missing = sorted(set(plan.datasets) - {k for k, v in registry.items() if v})
    if missing:
        raise DataError(f"no training conversations for dataset(s): {', '.join(missing)}")

    if cfg.stage == 1:
        texts = [t.text for convs in shards1.values() for c in convs for t in c.turns]
        texts += [t.text for convs in _load_shards(_stage2_dir(cfg)).values() for c in convs for t in c.turns]
        tok = Tokenizer(build_base_vocab(texts + ["USER: ", "ASSISTANT: ", "\n"]), cfg.forge.max_indices)
        model = build_model(cfg.model_config(tok.vocab_size), tok)
    else:
        init = Path(cfg.paths.init_checkpoint or _stage_out(cfg, 1) / "model.ckpt")
        if not init.exists():
            raise DataError(f"stage-2 needs a stage-1 checkpoint: {init} not found")
        model, tok, _ = load_checkpoint(init)

    out = _stage_out(cfg)
    torch.manual_seed(cfg.seed)
    res = run_stage(plan, model, tok, registry, cfg.loss_weights(), cfg.seed, cfg.paths.corpus, out)
    last = res.log_lines[-1].split("\t") if len(res.log_lines) > 1 else None
    return {"checkpoint": str(res.checkpoint), "log": str(out / "train.log"), "steps": plan.steps, "final_total": float(last[4]) if last else None}


def cmd_eval(cfg: RunConfig, checkpoint: str | None = None) -> dict[str, Any]:
    from .evalkit import emit_report
    from .evaluation import evaluate_conversations, report_summary
    from .model import load_checkpoint
    from .training import ImageCache

    ckpt = Path(checkpoint or _stage_out(cfg) / "model.ckpt")
    if not ckpt.exists():
        raise DataError(f"checkpoint not found: {ckpt}")
    model, tok, _ = load_checkpoint(ckpt)
    shards = _load_shards(_stage1_dir(cfg))
    if cfg.stage == 2:
        shards.update(_load_shards(_stage2_dir(cfg)))
    convs = []
    for name in sorted(shards):
        picked = _split(shards[name], cfg.eval.split)
        convs += picked[: cfg.eval.max_per_task] if cfg.eval.max_per_task else picked
    report = evaluate_conversations(model, tok, convs, ImageCache(cfg.paths.corpus, model.cfg.image_size))
    out = _stage_out(cfg) / "eval"
    atomic_write_text(out / "report.json", emit_report(report, "json").decode())
    atomic_write_text(out / "report.tsv", emit_report(report, "table").decode())
    sys.stdout.write(emit_report(report, "table").decode())
    return {"report": str(out / "report.json"), **report_summary(report)}


def cmd_report(cfg: RunConfig, report_path: str | None = None, log_path: str | None = None) -> dict[str, Any]:
    from .report import load_report, render

    rp = Path(report_path or _stage_out(cfg) / "eval" / "report.json")
    if not rp.exists():
        raise DataError(f"report not found: {rp}")
    lp = Path(log_path) if log_path else _stage_out(cfg) / "train.log"
    lines = lp.read_text().splitlines() if lp.exists() else None
    out = Path(cfg.paths.out) / "report" if report_path is None and cfg.paths.out else rp.parent
    written = render(load_report(rp), out, lines)
    sys.stdout.write(Path(out / "report.tsv").read_text())
    return {"files": [str(p) for p in written]}


COMMANDS = {
    "synth": cmd_synth,
    "forge-stage1": cmd_forge_stage1,
    "forge-stage2": cmd_forge_stage2,
    "train": cmd_train,
    "eval": cmd_eval,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nutriseg", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="YAML run config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output root (overrides paths.out)")
        sp.add_argument("--stage", type=int, choices=(1, 2))
        sp.add_argument("--profile", choices=("main-text-lambdas", "table9-lambdas"))
        sp.add_argument("--steps", type=int)
        sp.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "eval":
            sp.add_argument("--checkpoint")
        if name == "report":
            sp.add_argument("--report", help="report.json to render")
            sp.add_argument("--log", help="train.log to plot")
    return p


def _fail(code: int, exc: BaseException) -> int:
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit": code}) + "\n")
    return code


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, {"seed": args.seed, "stage": args.stage, "profile": args.profile, "steps": args.steps, "out": args.out})
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    if args.print_config:
        sys.stdout.write(cfg.dump())
        return EXIT_OK

    import torch

    from .training import NumericError

    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)
    kwargs: dict[str, Any] = {}
    if args.command == "eval":
        kwargs["checkpoint"] = args.checkpoint
    if args.command == "report":
        kwargs = {"report_path": args.report, "log_path": args.log}
    try:
        summary = COMMANDS[args.command](cfg, **kwargs)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    except NumericError as exc:
        return _fail(EXIT_NUMERIC, exc)
    except (DataError, OSError, KeyError, ValueError) as exc:
        return _fail(EXIT_DATA, exc)
    clean = {k: None if isinstance(v, float) and not math.isfinite(v) else v for k, v in summary.items()}
    sys.stderr.write(dumps({"ok": args.command, **clean}) + "\n")
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
