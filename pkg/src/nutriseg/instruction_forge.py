"""Stage-1 instruction-following conversations built from food records.

Every builder is a pure function of ``(record, seed)`` (plus policy): the
random stream is derived from the seed and the record id, never from call
order.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Any, Mapping, Sequence

import numpy as np

from .datamodel import (
    NUTRITION_FIELDS,
    Conversation,
    FoodRecord,
    ImageHandle,
    IngredientEntry,
    Label,
    TaskToken,
    Turn,
    UnsupportedRecordError,
    canonical_name,
    join_names,
)
from .tokenizer import Tokenizer

SYSTEM_MESSAGE = "You are a helpful food assistant."
MACRONUTRIENTS = (("fat", "fat"), ("carbohydrate", "carbohydrate"), ("protein", "protein"))
OVERHEAD_PROB = 0.7


def derive_rng(seed: int, *keys: Any) -> np.random.Generator:
    """Independent stream per (seed, keys); stable across processes and platforms."""
    digest = hashlib.sha256(json.dumps([int(seed), *map(str, keys)]).encode()).digest()
    return np.random.default_rng(np.frombuffer(digest, dtype=np.uint32))


@lru_cache(maxsize=None)
def _default_bank() -> Mapping[str, Any]:
    return json.loads(resources.files("nutriseg.data").joinpath("templates.json").read_text("utf-8"))


class TemplateBank:
    """Query/answer templates keyed by task. Loaded from a JSON data file."""

    def __init__(self, data: Mapping[str, Any] | None = None):
        self.data = data if data is not None else _default_bank()

    @classmethod
    def from_file(cls, path) -> "TemplateBank":
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh))

    def queries(self, task: str) -> list[str]:
        return self.data[task]["queries"]

    def answers(self, task: str) -> list[str]:
        return self.data[task]["answers"]

    def nutrition(self, pattern: int) -> Mapping[str, list[str]]:
        return self.data["nutrition"]["patterns"][str(pattern)]

    @property
    def sub(self) -> Mapping[str, str]:
        return self.data["nutrition"]["subtemplates"]

    @property
    def seg(self) -> Mapping[str, list[str]]:
        return self.data["segmentation"]

    def counts(self) -> dict[str, int]:
        pats = self.data["nutrition"]["patterns"].values()
        return {
            "classification": len(self.queries("classification")),
            "ingredient": len(self.queries("ingredient")),
            "recipe": len(self.queries("recipe")),
            "nutrition_queries": sum(len(p["queries"]) for p in pats),
            "nutrition_answers": sum(len(p["answers"]) for p in pats),
            "segmentation_queries": len(self.seg["queries_all"]) + len(self.seg["queries_refer"]),
            "segmentation_answers": sum(len(self.seg[k]) for k in ("answers_all", "answers_refer", "answers_absent")),
        }


@dataclass(frozen=True)
class ReferMixPolicy:
    one_to_zero_rate: float = 0.02
    absent_count_ratio: tuple[float, ...] = (2.0, 1.0, 1.0)
    max_refer: int = 20
    max_absent: int = 3
    allow_hybrid: bool = True
    hybrid_prob: float = 0.5
    segall_template_prob: float = 0.4
    # UEC-style corpora annotate only some ingredients: never use segment-all there
    mask_complete: bool = True

    def __post_init__(self):
        for name in ("one_to_zero_rate", "hybrid_prob", "segall_template_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be a probability, got {v}")
        if len(self.absent_count_ratio) < self.max_absent or any(r <= 0 for r in self.absent_count_ratio):
            raise ValueError("absent_count_ratio needs one positive weight per absent count")
        if self.max_refer < 1 or self.max_absent < 1:
            raise ValueError("max_refer and max_absent must be ≥ 1")


def _fill(template: str, values: Mapping[str, str]) -> str:
    """str.format with automatic Capitalized variants of every placeholder."""
    full = dict(values)
    for k, v in values.items():
        cap = v[:1].upper() + v[1:]
        full.setdefault(k[:1].upper() + k[1:], cap)
        full.setdefault("_".join(p[:1].upper() + p[1:] for p in k.split("_")), cap)
    return template.format_map(full)


def _grammar(n: int) -> dict[str, str]:
    one = n == 1
    return {
        "is_are": "is" if one else "are",
        "has_have": "has" if one else "have",
        "does_do": "does" if one else "do",
        "it_they": "it" if one else "they",
        "it_them": "it" if one else "them",
    }


def _conversation(
    query: str,
    answer: str,
    labels: Mapping[TaskToken, Label],
    task_tag: str,
    record: FoodRecord,
    image: ImageHandle,
    meta: Mapping[str, Any],
) -> Conversation:
    return Conversation(
        turns=(
            Turn("system", SYSTEM_MESSAGE),
            Turn("user", query, (image,)),
            Turn("assistant", answer, token_labels=dict(labels)),
        ),
        task_tag=task_tag,
        source_record=record.record_id,
        meta=dict(meta),
    )


def _pick(rng: np.random.Generator, items: Sequence[str]) -> tuple[int, str]:
    i = int(rng.integers(len(items)))
    return i + 1, items[i]


def select_visual(record: FoodRecord, rng_seed: int) -> ImageHandle:
    if not record.image:
        raise UnsupportedRecordError(f"{record.record_id}: no image handles")
    rng = derive_rng(rng_seed, record.record_id, "visual")
    frames = record.frames
    if rng.random() < OVERHEAD_PROB or not frames:
        return record.overhead
    return frames[int(rng.integers(len(frames)))]


def build_classification(record: FoodRecord, rng_seed: int, bank: TemplateBank | None = None) -> Conversation:
    bank = bank or TemplateBank()
    if not record.class_label:
        raise UnsupportedRecordError(f"{record.record_id}: no class label")
    rng = derive_rng(rng_seed, record.record_id, "classification")
    qi, q = _pick(rng, bank.queries("classification"))
    ai, a = _pick(rng, bank.answers("classification"))
    answer = _fill(a, {"class_name": record.class_label})
    return _conversation(q, answer, {}, "classification", record, record.overhead, {"query_template": qi, "answer_template": ai})


def build_ingredient(record: FoodRecord, rng_seed: int, bank: TemplateBank | None = None) -> Conversation:
    bank = bank or TemplateBank()
    if not record.ingredients:
        raise UnsupportedRecordError(f"{record.record_id}: empty ingredient list")
    rng = derive_rng(rng_seed, record.record_id, "ingredient")
    qi, q = _pick(rng, bank.queries("ingredient"))
    ai, a = _pick(rng, bank.answers("ingredient"))
    answer = _fill(a, {"ingredient_list": ", ".join(i.name for i in record.ingredients)})
    return _conversation(q, answer, {}, "ingredient", record, record.overhead, {"query_template": qi, "answer_template": ai})


def build_recipe(record: FoodRecord, rng_seed: int, bank: TemplateBank | None = None) -> Conversation:
    bank = bank or TemplateBank()
    if not record.recipe:
        raise UnsupportedRecordError(f"{record.record_id}: no recipe")
    rng = derive_rng(rng_seed, record.record_id, "recipe")
    qi, q = _pick(rng, bank.queries("recipe"))
    return _conversation(q, record.recipe, {}, "recipe", record, record.overhead, {"query_template": qi, "answer_template": 1})


# -- nutrition ---------------------------------------------------------------

NUTRITION_PATTERNS = range(1, 8)


def nutrition_requirements(pattern: int) -> tuple[bool, bool]:
    """(needs per-ingredient facts, needs totals) for a question-answer pattern."""
    if pattern not in NUTRITION_PATTERNS:
        raise ValueError(f"nutrition pattern must be 1..7, got {pattern}")
    return pattern <= 4, pattern in (1, 3, 5, 6, 7)


def supported_patterns(record: FoodRecord, max_indices: int = 20) -> list[int]:
    have_ing = bool(record.ingredients) and all(i.facts is not None for i in record.ingredients)
    out = []
    for p in NUTRITION_PATTERNS:
        need_ing, need_total = nutrition_requirements(p)
        if need_ing and not have_ing:
            continue
        if need_total and record.total is None:
            continue
        if p in (1, 3) and len(record.ingredients) > max_indices:
            continue
        out.append(p)
    return out


def macronutrient_ranking(record: FoodRecord) -> list[str]:
    """Macro-nutrient names by descending mass; ties keep fat, carbohydrate, protein order."""
    t = record.total
    values = [t.fat, t.carbohydrate, t.protein]
    order = sorted(range(3), key=lambda k: -values[k])
    return [MACRONUTRIENTS[k][0] for k in order]


def _ingredient_tokens(
    sub: str, chosen: Sequence[IngredientEntry], fields: Sequence[str], labels: dict[TaskToken, Label]
) -> str:
    parts = []
    for idx, ing in enumerate(chosen, 1):
        parts.append(sub.format(name=ing.name, i=idx))
        for f in fields:
            labels[TaskToken("nutrition_ingredient", f, idx)] = float(ing.facts.get(f))
    return "; ".join(parts)


def _total_tokens(sub: str, record: FoodRecord, fields: Sequence[str], labels: dict[TaskToken, Label]) -> str:
    for f in fields:
        labels[TaskToken("nutrition_dish", f)] = float(record.total.get(f))
    return sub


def build_nutrition(
    record: FoodRecord,
    pattern: int,
    rng_seed: int,
    bank: TemplateBank | None = None,
    image: ImageHandle | None = None,
    max_refer: int = 20,
) -> Conversation:
    bank = bank or TemplateBank()
    need_ing, need_total = nutrition_requirements(pattern)
    if need_ing and (not record.ingredients or any(i.facts is None for i in record.ingredients)):
        raise UnsupportedRecordError(f"{record.record_id}: pattern {pattern} needs per-ingredient facts")
    if need_total and record.total is None:
        raise UnsupportedRecordError(f"{record.record_id}: pattern {pattern} needs dish totals")

    rng = derive_rng(rng_seed, record.record_id, "nutrition", pattern)
    tpl = bank.nutrition(pattern)
    qi, q = _pick(rng, tpl["queries"])
    ai, a = _pick(rng, tpl["answers"])
    labels: dict[TaskToken, Label] = {}
    values: dict[str, str] = {}
    meta: dict[str, Any] = {"pattern": pattern, "query_template": qi, "answer_template": ai}
    sub = bank.sub
    all_fields = list(NUTRITION_FIELDS)

    if pattern in (2, 4):
        n = len(record.ingredients)
        k = int(rng.integers(1, min(n, max_refer) + 1))
        picks = rng.choice(n, size=k, replace=False)
        chosen = [record.ingredients[int(j)] for j in picks]
        values.update(_grammar(k), ing_names=join_names([c.name for c in chosen]))
        meta["referred"] = [c.name for c in chosen]
    else:
        chosen = list(record.ingredients)

    if pattern in (1, 2):
        values["ingredient_calories"] = _ingredient_tokens(sub["ingredient_calories"], chosen, ("mass", "cal"), labels)
    if pattern in (3, 4):
        values["ingredient_nutrition"] = _ingredient_tokens(sub["ingredient_nutrition"], chosen, all_fields, labels)
    if pattern == 1:
        values["total_calories"] = _total_tokens(sub["total_calories"], record, ("cal",), labels)
    if pattern in (3, 5):
        values["total_nutrition"] = _total_tokens(sub["total_nutrition"], record, all_fields, labels)
    if pattern in (6, 7):
        ranking = macronutrient_ranking(record)
        values["macronutrient"] = ranking[0]
        for r, name in enumerate(ranking, 1):
            values[f"macronutrient{r}"] = name

    query = _fill(q, values)
    answer = _fill(a, values)
    if image is None:
        image = select_visual(record, rng_seed)
    return _conversation(query, answer, labels, "nutrition", record, image, meta)


# -- referring segmentation -------------------------------------------------

def _assignments(names: Sequence[str]) -> str:
    parts = [f"the {names[0]} is masked as <seg_1>"]
    parts += [f"the {n} as <seg_{i}>" for i, n in enumerate(names[1:], 2)]
    return join_names(parts)


def _sample_present(rng: np.random.Generator, masked: Sequence[IngredientEntry], cap: int) -> list[IngredientEntry]:
    k = int(rng.integers(1, min(len(masked), cap) + 1))
    return [masked[int(j)] for j in rng.choice(len(masked), size=k, replace=False)]


def build_segmentation(
    record: FoodRecord,
    policy: ReferMixPolicy,
    absent_vocabulary: Sequence[str],
    rng_seed: int,
    bank: TemplateBank | None = None,
) -> Conversation:
    bank = bank or TemplateBank()
    masked = record.masked_ingredients
    if not masked:
        raise UnsupportedRecordError(f"{record.record_id}: no ingredient masks")
    own = {canonical_name(i.name) for i in record.ingredients}
    overlap = sorted(n for n in absent_vocabulary if canonical_name(n) in own)
    if overlap:
        raise ValueError(f"{record.record_id}: absent vocabulary names present ingredients {overlap[:3]}")

    rng = derive_rng(rng_seed, record.record_id, "segmentation")
    seg = bank.seg
    zero = rng.random() < policy.one_to_zero_rate and len(absent_vocabulary) > 0
    absent: list[str] = []
    if zero:
        counts = np.arange(1, policy.max_absent + 1)
        w = np.asarray(policy.absent_count_ratio[: policy.max_absent], dtype=float)
        m = int(rng.choice(counts, p=w / w.sum()))
        m = min(m, len(absent_vocabulary))
        absent = [absent_vocabulary[int(j)] for j in rng.choice(len(absent_vocabulary), size=m, replace=False)]
        hybrid = policy.allow_hybrid and rng.random() < policy.hybrid_prob
        present = _sample_present(rng, masked, policy.max_refer) if hybrid else []
        form = "zero"
    elif policy.mask_complete and rng.random() < policy.segall_template_prob:
        present = list(masked)
        form = "all"
    else:
        present = _sample_present(rng, masked, policy.max_refer)
        form = "refer"

    present_names = [p.name for p in present]
    if form == "all":
        qi, query = _pick(rng, seg["queries_all"])
        ai, a = _pick(rng, seg["answers_all"])
        referred: list[str] = []
        answer = _fill(a, {"assignments": _assignments(present_names)})
    else:
        referred = absent + present_names
        if absent and present_names:
            referred = [referred[int(j)] for j in rng.permutation(len(referred))]
        qi, q = _pick(rng, seg["queries_refer"])
        query = _fill(q, {**_grammar(len(referred)), "ingredient_name": join_names(referred)})
        pieces = []
        if absent:
            ri, r = _pick(rng, seg["answers_absent"])
            pieces.append(_fill(r, {**_grammar(len(absent)), "absent_names": join_names(absent)}))
        if present_names:
            ai, a = _pick(rng, seg["answers_refer"])
            pieces.append(_fill(a, {"assignments": _assignments(present_names)}))
        else:
            ai = ri
        answer = " ".join(pieces)

    labels: dict[TaskToken, Label] = {
        TaskToken("segmentation", None, i): p.mask for i, p in enumerate(present, 1)
    }
    meta = {
        "form": form,
        "query_template": qi,
        "answer_template": ai,
        "referred": referred,
        "present": present_names,
        "absent": absent,
        "refer_count": len(referred) if referred else len(present_names),
    }
    return _conversation(query, answer, labels, "segmentation", record, record.overhead, meta)


def pooled_absent_vocabulary(records: Sequence[FoodRecord], record: FoodRecord) -> list[str]:
    """Ingredient names across the corpus minus the record's own, sorted."""
    own = {canonical_name(i.name) for i in record.ingredients}
    pool = {canonical_name(i.name) for r in records for i in r.ingredients}
    return sorted(pool - own)


# -- training render -----------------------------------------------------------

@dataclass
class RenderedConversation:
    ids: list[int]
    # [start, end) index ranges over ``ids`` that carry the autoregressive loss
    loss_spans: list[tuple[int, int]]
    # (position in ids, token, label) for each task token in an assistant turn
    task_positions: list[tuple[int, TaskToken, Label]]
    image: ImageHandle | None
    task_tag: str


def render_for_training(conv: Conversation, tokenizer: Tokenizer) -> RenderedConversation:
    """Flatten a conversation into ids; only answers and their stop tokens are supervised."""
    ids: list[int] = []
    spans: list[tuple[int, int]] = []
    positions: list[tuple[int, TaskToken, Label]] = []
    stop, newline = tokenizer.stop_id, tokenizer.encode("\n")

    for turn in conv.turns:
        if turn.speaker == "system":
            ids += tokenizer.encode(turn.text) + [stop] + newline
        elif turn.speaker == "user":
            ids += tokenizer.encode("USER: " + turn.text) + [stop] + newline
        else:
            ids += tokenizer.encode("ASSISTANT: ")
            start = len(ids)
            body = tokenizer.encode(turn.text)
            for off, tid in enumerate(body):
                if tokenizer.is_task_id(tid):
                    tok = tokenizer.task_token(tid)
                    if tok in turn.token_labels:
                        positions.append((start + off, tok, turn.token_labels[tok]))
            ids += body + [stop]
            spans.append((start, len(ids)))
            ids += newline
    return RenderedConversation(ids, spans, positions, conv.image, conv.task_tag)


def generation_prompt(conv: Conversation, tokenizer: Tokenizer, upto_answer: int = 0) -> list[int]:
    """Ids of everything before the ``upto_answer``-th assistant answer (teacher-forced history)."""
    ids: list[int] = []
    seen = 0
    stop, newline = tokenizer.stop_id, tokenizer.encode("\n")
    for turn in conv.turns:
        if turn.speaker == "system":
            ids += tokenizer.encode(turn.text) + [stop] + newline
        elif turn.speaker == "user":
            ids += tokenizer.encode("USER: " + turn.text) + [stop] + newline
        else:
            ids += tokenizer.encode("ASSISTANT: ")
            if seen == upto_answer:
                return ids
            ids += tokenizer.encode(turn.text) + [stop] + newline
            seen += 1
    raise IndexError(f"conversation has only {seen} answers")


# -- corpus-level forging ------------------------------------------------------

STAGE1_TASKS = {
    "classification": build_classification,
    "ingredient": build_ingredient,
    "recipe": build_recipe,
}


def forge_record(
    record: FoodRecord,
    tasks: Sequence[str],
    seed: int,
    policy: ReferMixPolicy,
    absent_vocabulary: Sequence[str] = (),
    bank: TemplateBank | None = None,
    max_indices: int = 20,
) -> list[Conversation]:
    bank = bank or TemplateBank()
    out = []
    for task in tasks:
        if task in STAGE1_TASKS:
            out.append(STAGE1_TASKS[task](record, seed, bank))
        elif task == "nutrition":
            pats = supported_patterns(record, max_indices)
            if not pats:
                raise UnsupportedRecordError(f"{record.record_id}: no nutrition pattern is supported")
            rng = derive_rng(seed, record.record_id, "nutrition-pattern")
            pattern = pats[int(rng.integers(len(pats)))]
            out.append(build_nutrition(record, pattern, seed, bank, max_refer=min(policy.max_refer, max_indices)))
        elif task == "segmentation":
            out.append(build_segmentation(record, policy, absent_vocabulary, seed, bank))
        else:
            raise ValueError(f"unknown stage-1 task {task!r}")
    return out


def forge_stats(convs: Sequence[Conversation]) -> dict[str, Any]:
    usage: Counter[str] = Counter()
    tasks: Counter[str] = Counter()
    refer_counts: Counter[str] = Counter()
    absent_counts: Counter[str] = Counter()
    forms: Counter[str] = Counter()
    for c in convs:
        tasks[c.task_tag] += 1
        key = c.task_tag + (f"/p{c.meta['pattern']}" if "pattern" in c.meta else "")
        if "query_template" in c.meta:
            usage[f"{key}:q{c.meta['query_template']}"] += 1
        if c.task_tag == "segmentation":
            forms[c.meta["form"]] += 1
            refer_counts[str(c.meta["refer_count"])] += 1
            if c.meta["absent"]:
                absent_counts[str(len(c.meta["absent"]))] += 1
    n_seg = sum(forms.values())
    return {
        "conversations": len(convs),
        "tasks": dict(sorted(tasks.items())),
        "template_usage": dict(sorted(usage.items())),
        "segmentation_forms": dict(sorted(forms.items())),
        "one_to_zero_rate": forms["zero"] / n_seg if n_seg else 0.0,
        "refer_count_histogram": dict(sorted(refer_counts.items(), key=lambda kv: int(kv[0]))),
        "absent_count_histogram": dict(sorted(absent_counts.items(), key=lambda kv: int(kv[0]))),
    }
