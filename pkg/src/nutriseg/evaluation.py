"""Score a model on forged conversations by greedy decoding every answer."""

from __future__ import annotations

import math
import re
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
import torch

from .datamodel import Conversation, MaskImage, TaskToken
from .evalkit import (
    MetricReport,
    SegEvalSample,
    ciou,
    giou,
    mask_iou,
    macro_set_metrics,
    nutrition_metrics,
    parse_prediction,
    recipe_metrics,
    refusal_flags,
    response_accuracy,
)
from .instruction_forge import generation_prompt
from .model import ToyLMM, generate, head_key
from .tokenizer import Tokenizer
from .training import ImageCache

_CLASS_RE = re.compile(r"(?:is|like) (.+?)\.?$")
# refer@k rows; larger referral counts share the last bucket
REFER_BUCKETS = ("1", "2", "3", "4", "5+")


@dataclass
class AnswerOutput:
    text: str
    ids: list[int]
    exact: bool
    values: dict[TaskToken, float] = field(default_factory=dict)
    masks: dict[TaskToken, MaskImage] = field(default_factory=dict)


@torch.no_grad()
def answer(model: ToyLMM, tokenizer: Tokenizer, image: torch.Tensor, conv: Conversation, k: int) -> AnswerOutput:
    """Greedy answer ``k`` under teacher-forced history, with task outputs decoded."""
    ref = tokenizer.encode(conv.assistant_turns[k].text)
    prompt = generation_prompt(conv, tokenizer, k)
    budget = min(len(ref) + 16, model.cfg.max_text_len - len(prompt))
    gen = generate(model, image, prompt, max(budget, 0), tokenizer)
    out = AnswerOutput(tokenizer.decode(gen.ids), gen.ids, gen.stopped and gen.ids == ref)
    seen: set[TaskToken] = set()
    taps = []
    for off, tok in gen.task_positions:
        if tok not in seen:
            seen.add(tok)
            taps.append((0, len(prompt) + off, tok))
    if taps:
        ids = torch.tensor([prompt + gen.ids])
        _, hidden, visual = model(image[None], ids)
        nut, nut_tok, mlog, seg_tok = model.task_outputs(hidden, visual, ids, taps, image[None])
        for tok, v in zip(nut_tok, torch.expm1(nut).tolist()):
            out.values[tok] = v
        for tok, m in zip(seg_tok, mlog):
            out.masks[tok] = MaskImage((m > 0).numpy().astype(np.uint8))
    return out


def _class_name(text: str) -> str | None:
    m = _CLASS_RE.search(text.strip())
    return m.group(1).strip().lower() if m else None


def _bucket(n: int) -> str:
    return REFER_BUCKETS[min(n, len(REFER_BUCKETS)) - 1]


def _nan_mean(xs: Sequence[float]) -> float:
    return float(np.mean(xs)) if xs else float("nan")


def evaluate_conversations(
    model: ToyLMM,
    tokenizer: Tokenizer,
    convs: Sequence[Conversation],
    images: ImageCache,
) -> MetricReport:
    was_training = model.training
    model.eval()
    exact: dict[str, list[bool]] = defaultdict(list)
    cls_pairs, ing_pairs, recipes = [], [], ([], [])
    nut_pred: dict[str, list[float]] = defaultdict(list)
    nut_true: dict[str, list[float]] = defaultdict(list)
    seg_rows: dict[str, list[SegEvalSample]] = defaultdict(list)
    reason: list[SegEvalSample] = []
    pair_ious: list[float] = []

    for conv in convs:
        image = images.get(conv.image)
        for k, turn in enumerate(conv.assistant_turns):
            out = answer(model, tokenizer, image, conv, k)
            tag = conv.task_tag
            exact[tag].append(out.exact)
            if tag == "classification":
                cls_pairs.append((_class_name(out.text), _class_name(turn.text)))
            elif tag == "ingredient":
                ing_pairs.append((parse_prediction(out.text, tag).ingredients, parse_prediction(turn.text, tag).ingredients))
            elif tag == "recipe":
                recipes[0].append(out.text)
                recipes[1].append(turn.text)
            for tok, label in turn.token_labels.items():
                if tok.is_nutrition:
                    row = head_key(tok).replace("dish_", "total_").replace("ing_", "ingredient_")
                    # a value the model never emitted counts as a prediction of 0
                    nut_pred[row].append(out.values.get(tok, 0.0))
                    nut_true[row].append(float(label))
            if tag == "segmentation":
                pred = parse_prediction(out.text, tag)
                ref = parse_prediction(turn.text, tag)
                pred_by_name = {n: out.masks.get(t) for n, t in pred.seg_slots}
                targets, preds = [], []
                for name, tok in ref.seg_slots:
                    tgt = turn.token_labels[tok]
                    p = pred_by_name.get(name) or MaskImage(np.zeros_like(tgt.values))
                    targets.append(tgt)
                    preds.append(p)
                    pair_ious.append(mask_iou(p, tgt))
                referred = conv.meta.get("referred") or conv.meta.get("present", [])
                flags = refusal_flags(pred, referred, conv.meta.get("absent", ()))
                sample = SegEvalSample(preds, targets, *flags)
                key = "zero" if conv.meta.get("form") == "zero" else _bucket(max(1, conv.meta.get("refer_count", len(targets))))
                seg_rows[key].append(sample)
            elif tag == "reason_seg":
                ref_toks = [t for t in turn.token_labels if not t.is_nutrition]
                gen_toks = [t for t in out.masks]
                targets = [turn.token_labels[t] for t in ref_toks]
                preds = [
                    out.masks[gen_toks[i]] if i < len(gen_toks) else MaskImage(np.zeros_like(targets[i].values))
                    for i in range(len(targets))
                ]
                pair_ious += [mask_iou(p, t) for p, t in zip(preds, targets)]
                if targets:
                    reason.append(SegEvalSample(preds, targets))

    report = MetricReport()
    if cls_pairs:
        report.vqa["top1"] = float(np.mean([p is not None and p == r for p, r in cls_pairs]))
    if ing_pairs:
        report.vqa["ingredient_iou"], report.vqa["ingredient_f1"] = macro_set_metrics(ing_pairs)
    if recipes[0]:
        report.vqa["bleu"], report.vqa["rouge_l"] = recipe_metrics(recipes[0], recipes[1])
    for row in sorted(nut_true):
        try:
            mae, pct = nutrition_metrics(nut_pred[row], nut_true[row], row)
        except ValueError:
            mae, pct = float(np.mean(np.abs(np.subtract(nut_pred[row], nut_true[row])))), float("nan")
        report.nutrition.append({"field": row, "mae": mae, "mae_pct": pct, "n": len(nut_true[row])})
    for key in [*REFER_BUCKETS, "zero"]:
        samples = seg_rows.get(key)
        if not samples:
            continue
        acc_ex, acc_ab = response_accuracy(samples)
        with_masks = [s for s in samples if s.target]
        report.segmentation.append(
            {
                "refer_k": key,
                "ciou": ciou(with_masks) if with_masks else float("nan"),
                "acc": acc_ab if key == "zero" else acc_ex,
                "n": len(samples),
            }
        )
    if reason:
        report.reasoning.append({"split": "all", "giou": giou(reason), "ciou": ciou(reason), "n": len(reason)})

    all_exact = [e for v in exact.values() for e in v]
    pcts = [r["mae_pct"] for r in report.nutrition if not math.isnan(r["mae_pct"])]
    all_seg = [s for v in seg_rows.values() for s in v]
    acc_ex, acc_ab = response_accuracy(all_seg) if all_seg else (float("nan"), float("nan"))
    report.extra = {
        "answers": len(all_exact),
        "exact_match": _nan_mean([float(e) for e in all_exact]),
        "mask_iou": _nan_mean(pair_ious),
        "nutrition_mae_pct_max": max(pcts) if pcts else float("nan"),
        "acc_existent": acc_ex,
        "acc_absent": acc_ab,
        **{f"exact_match_{t}": _nan_mean([float(e) for e in v]) for t, v in sorted(exact.items())},
    }
    model.train(was_training)
    return report


def report_summary(report: MetricReport) -> dict[str, Any]:
    return {k: report.extra.get(k) for k in ("exact_match", "mask_iou", "nutrition_mae_pct_max", "acc_existent", "acc_absent")}
