"""Overfit harness: memorize a tiny mixed corpus and measure every output path."""

from __future__ import annotations

import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import torch

from .datamodel import Conversation, LossWeights
from .evalkit import SegEvalSample, mask_iou, parse_prediction, refusal_flags, response_accuracy
from .instruction_forge import (
    ReferMixPolicy,
    build_classification,
    build_ingredient,
    build_nutrition,
    build_segmentation,
    generation_prompt,
    render_for_training,
    supported_patterns,
)
from .model import ModelConfig, ToyLMM, build_model, generate, head_key
from .synth import INGREDIENT_NAMES, make_record
from .tokenizer import Tokenizer, build_base_vocab
from .training import ImageCache, RunResult, collate, run_stage, single_task_plan

HARNESS_DATASET = "harness"
# conversations per kind; 32 in total
HARNESS_MIX = {"classification": 4, "ingredient": 4, "nutrition": 8, "refer": 10, "zero": 6}


def harness_corpus(seed: int = 0, size: int = 64) -> tuple[list[Conversation], dict[str, np.ndarray]]:
    """32 single-turn conversations over synthetic dishes, plus their pixels."""
    convs: list[Conversation] = []
    images: dict[str, np.ndarray] = {}
    rng = np.random.default_rng(seed)

    def record(kind: str, j: int, dataset: str, lo: int, hi: int):
        rec, pix = make_record(f"{kind}-{j:02d}", dataset, int(rng.integers(lo, hi + 1)), seed, size)
        images.update(pix)
        return rec

    for j in range(HARNESS_MIX["classification"]):
        convs.append(build_classification(record("cls", j, "vireo172", 2, 4), seed))
    for j in range(HARNESS_MIX["ingredient"]):
        convs.append(build_ingredient(record("ing", j, "vireo172", 2, 4), seed))
    for j in range(HARNESS_MIX["nutrition"]):
        rec = record("nut", j, "nutrition5k", 1, 3)
        pats = supported_patterns(rec)
        convs.append(build_nutrition(rec, pats[j % len(pats)], seed))

    refer = ReferMixPolicy(one_to_zero_rate=0.0, segall_template_prob=0.0)
    zero = ReferMixPolicy(one_to_zero_rate=1.0)
    for kind, policy in (("refer", refer), ("zero", zero)):
        for j in range(HARNESS_MIX[kind]):
            rec = record(kind, j, "foodseg103", 2, 4)
            own = {i.name for i in rec.ingredients}
            absent = [n for n in INGREDIENT_NAMES if n not in own]
            convs.append(build_segmentation(rec, policy, absent, seed))
    return convs, images


def harness_tokenizer(convs: Sequence[Conversation], max_indices: int = 20) -> Tokenizer:
    texts = [t.text for c in convs for t in c.turns] + ["USER: ", "ASSISTANT: ", "\n"]
    return Tokenizer(build_base_vocab(texts), max_indices=max_indices)


@dataclass
class FitReport:
    steps: int
    mask_iou: float
    nutrition_mae_pct: dict[str, float]
    nutrition_mae_pct_max: float
    exact_match: float
    acc_existent: float
    acc_absent: float
    n_answers: int
    n_masks: int
    n_nutrition: int
    seconds: float = 0.0
    final_losses: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        return asdict(self)


@torch.no_grad()
def evaluate_fit(
    model: ToyLMM,
    tokenizer: Tokenizer,
    convs: Sequence[Conversation],
    images: Mapping[str, np.ndarray],
) -> FitReport:
    """Training-set metrics: teacher-forced masks and values, greedy answers."""
    was_training = model.training
    model.eval()
    cache = ImageCache(None, model.cfg.image_size, images)
    ious: list[float] = []
    err: dict[str, list[float]] = defaultdict(list)
    tgt: dict[str, list[float]] = defaultdict(list)
    for conv in convs:
        r = render_for_training(conv, tokenizer)
        batch = collate([r], [cache.get(r.image)], tokenizer.pad_id)
        _, hidden, visual = model(batch.images, batch.ids)
        nut, nut_tok, mlog, _ = model.task_outputs(hidden, visual, batch.ids, batch.nutrition_taps + batch.seg_taps, batch.images)
        for v, tok, y in zip(torch.expm1(nut).tolist(), nut_tok, batch.nutrition_targets.tolist()):
            err[head_key(tok)].append(abs(v - y))
            tgt[head_key(tok)].append(y)
        for m, y in zip(torch.sigmoid(mlog), batch.seg_targets):
            ious.append(mask_iou((m > 0.5).numpy(), y.numpy() > 0.5))

    exact = n_answers = 0
    seg_samples = []
    for conv in convs:
        img = cache.get(conv.image)
        for k, turn in enumerate(conv.assistant_turns):
            ref = tokenizer.encode(turn.text)
            gen = generate(model, img, generation_prompt(conv, tokenizer, k), len(ref) + 8, tokenizer)
            n_answers += 1
            exact += gen.stopped and gen.ids == ref
            if conv.task_tag == "segmentation" and conv.meta.get("referred"):
                pred = parse_prediction(tokenizer.decode(gen.ids), "segmentation")
                p, e = refusal_flags(pred, conv.meta["referred"], conv.meta.get("absent", ()))
                seg_samples.append(SegEvalSample([], [], p, e))
    acc_ex, acc_ab = response_accuracy(seg_samples)

    pct = {k: 100.0 * float(np.mean(err[k])) / float(np.mean(tgt[k])) for k in sorted(err) if np.mean(tgt[k]) > 0}
    model.train(was_training)
    return FitReport(
        steps=0,
        mask_iou=float(np.mean(ious)) if ious else float("nan"),
        nutrition_mae_pct=pct,
        nutrition_mae_pct_max=max(pct.values()) if pct else float("nan"),
        exact_match=exact / n_answers if n_answers else float("nan"),
        acc_existent=acc_ex,
        acc_absent=acc_ab,
        n_answers=n_answers,
        n_masks=len(ious),
        n_nutrition=sum(len(v) for v in err.values()),
    )


def overfit_harness(
    model: ToyLMM,
    tokenizer: Tokenizer,
    convs: Sequence[Conversation],
    images: Mapping[str, np.ndarray],
    budget: int,
    weights: LossWeights | None = None,
    seed: int = 0,
    batch_size: int = 8,
    out_dir: str | Path | None = None,
) -> tuple[FitReport, RunResult]:
    """Train on ``convs`` for ``budget`` steps, then report training-set metrics."""
    weights = weights or LossWeights()
    plan = single_task_plan(HARNESS_DATASET, steps=budget, batch_size=batch_size)
    t0 = time.perf_counter()
    result = run_stage(plan, model, tokenizer, {HARNESS_DATASET: list(convs)}, weights, seed, out_dir=out_dir, images=images)
    report = evaluate_fit(model, tokenizer, convs, images)
    report.steps = budget
    report.seconds = time.perf_counter() - t0
    if budget:
        last = result.log_lines[-1].split("\t")
        report.final_losses = dict(zip(("l_txt", "l_nutrition", "l_mask", "total"), map(float, last[1:5])))
    return report, result


def default_harness(seed: int = 0, cfg: ModelConfig | None = None) -> tuple[ToyLMM, Tokenizer, list[Conversation], dict[str, np.ndarray]]:
    convs, images = harness_corpus(seed)
    tok = harness_tokenizer(convs)
    model = build_model(cfg or ModelConfig(vocab_size=tok.vocab_size, init_seed=seed), tok)
    return model, tok, convs, images
