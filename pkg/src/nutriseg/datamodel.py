"""Domain types shared by the forges, the model, the trainer and the evaluator.

Everything here is immutable after construction. Validation is report-based:
``validate_record`` and ``validate_conversation`` return a list of
:class:`Violation` entries instead of raising.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence, Union

import numpy as np

NUTRITION_FIELDS = ("mass", "cal", "carb", "fat", "pro")
# token field -> NutritionFacts attribute
FACT_ATTR = {
    "mass": "mass",
    "cal": "calories",
    "carb": "carbohydrate",
    "fat": "fat",
    "pro": "protein",
}
FIELD_UNITS = {"mass": "g", "cal": "kcal", "carb": "g", "fat": "g", "pro": "g"}

TASK_KINDS = ("nutrition_ingredient", "nutrition_dish", "segmentation")
TASK_TAGS = (
    "classification",
    "ingredient",
    "recipe",
    "nutrition",
    "segmentation",
    "dialogue",
    "reason_seg",
)
SPEAKERS = ("system", "user", "assistant")


class InvalidTokenError(ValueError):
    pass


class UnsupportedRecordError(ValueError):
    """A record lacks what a generator needs (class label, facts, masks...)."""


@dataclass(frozen=True)
class Violation:
    field: str
    rule: str
    detail: str = ""

    def __str__(self) -> str:
        return f"{self.field}: {self.rule}" + (f" ({self.detail})" if self.detail else "")


def canonical_name(name: str) -> str:
    """Case-insensitive, whitespace-collapsed key used for all ingredient matching."""
    return " ".join(name.split()).lower()


@dataclass(frozen=True)
class NutritionFacts:
    mass: float
    calories: float
    fat: float
    carbohydrate: float
    protein: float

    def get(self, token_field: str) -> float:
        return getattr(self, FACT_ATTR[token_field])

    def as_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in ("mass", "calories", "fat", "carbohydrate", "protein")}

    def violations(self, prefix: str) -> list[Violation]:
        out = []
        for k, v in self.as_dict().items():
            if not isinstance(v, (int, float)) or not math.isfinite(v):
                out.append(Violation(f"{prefix}.{k}", f"{k} finite", repr(v)))
            elif v < 0:
                out.append(Violation(f"{prefix}.{k}", f"{k} ≥ 0", repr(v)))
        return out


class MaskImage:
    """Binary mask. ``values`` is a read-only uint8 array of 0/1."""

    __slots__ = ("values",)

    def __init__(self, values: Any):
        arr = np.array(values, dtype=np.uint8, copy=True)
        if arr.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    def __setattr__(self, key, value):
        raise AttributeError("MaskImage is immutable")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def is_binary(self) -> bool:
        return bool(np.isin(self.values, (0, 1)).all())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MaskImage):
            return NotImplemented
        return self.shape == other.shape and bool((self.values == other.values).all())

    def __hash__(self) -> int:
        return hash((self.shape, self.values.tobytes()))

    def __repr__(self) -> str:
        return f"MaskImage({self.height}x{self.width}, fg={int(self.values.sum())})"

    # Run-length form: alternating run lengths over the row-major raster,
    # starting with a (possibly empty) run of zeros.
    def to_rle(self) -> dict[str, Any]:
        flat = self.values.ravel()
        runs: list[int] = []
        current, count = 0, 0
        for v in flat:
            if v == current:
                count += 1
            else:
                runs.append(count)
                current, count = int(v), 1
        runs.append(count)
        return {"h": self.height, "w": self.width, "rle": runs}

    @classmethod
    def from_rle(cls, data: Mapping[str, Any]) -> "MaskImage":
        h, w = int(data["h"]), int(data["w"])
        flat = np.zeros(h * w, dtype=np.uint8)
        pos, val = 0, 0
        for run in data["rle"]:
            flat[pos : pos + run] = val
            pos += run
            val ^= 1
        if pos != h * w:
            raise ValueError(f"RLE covers {pos} pixels, expected {h * w}")
        return cls(flat.reshape(h, w))


@dataclass(frozen=True)
class ImageHandle:
    path: str
    kind: str = "overhead"  # "overhead" | "frame"
    height: int = 64
    width: int = 64


@dataclass(frozen=True)
class IngredientEntry:
    name: str
    facts: NutritionFacts | None = None
    mask: MaskImage | None = None


@dataclass(frozen=True)
class FoodRecord:
    record_id: str
    image: tuple[ImageHandle, ...]
    ingredients: tuple[IngredientEntry, ...] = ()
    class_label: str | None = None
    recipe: str | None = None
    total: NutritionFacts | None = None
    split: str = "train"

    @property
    def overhead(self) -> ImageHandle:
        for h in self.image:
            if h.kind == "overhead":
                return h
        return self.image[0]

    @property
    def frames(self) -> list[ImageHandle]:
        return [h for h in self.image if h.kind == "frame"]

    def ingredient(self, name: str) -> IngredientEntry | None:
        key = canonical_name(name)
        for ing in self.ingredients:
            if canonical_name(ing.name) == key:
                return ing
        return None

    @property
    def masked_ingredients(self) -> list[IngredientEntry]:
        return [i for i in self.ingredients if i.mask is not None]


def validate_record(record: FoodRecord) -> list[Violation]:
    out: list[Violation] = []
    if not record.record_id:
        out.append(Violation("record_id", "record_id non-empty"))
    if not record.image:
        out.append(Violation("image", "at least one image handle"))
    elif sum(h.kind == "overhead" for h in record.image) != 1:
        out.append(Violation("image", "exactly one overhead handle"))
    for h in record.image:
        if h.kind not in ("overhead", "frame"):
            out.append(Violation("image.kind", "kind ∈ {overhead, frame}", h.kind))
    if record.split not in ("train", "test"):
        out.append(Violation("split", "split ∈ {train, test}", record.split))

    seen: set[str] = set()
    for i, ing in enumerate(record.ingredients):
        where = f"ingredients[{i}]"
        if not ing.name or not ing.name.strip():
            out.append(Violation(f"{where}.name", "name non-empty"))
        key = canonical_name(ing.name)
        if key in seen:
            out.append(Violation(f"{where}.name", "name unique (case-insensitive)", ing.name))
        seen.add(key)
        if ing.facts is not None:
            out.extend(ing.facts.violations(f"{where}.facts"))
        if ing.mask is not None:
            if ing.mask.height * ing.mask.width <= 0:
                out.append(Violation(f"{where}.mask", "height·width > 0"))
            if not ing.mask.is_binary():
                out.append(Violation(f"{where}.mask", "values ∈ {0,1}"))
            if record.image and ing.mask.shape != (record.overhead.height, record.overhead.width):
                out.append(
                    Violation(
                        f"{where}.mask",
                        "mask dimensions equal image dimensions",
                        f"{ing.mask.shape} vs {(record.overhead.height, record.overhead.width)}",
                    )
                )

    if record.total is not None:
        out.extend(record.total.violations("total"))
        if record.ingredients and all(i.facts is not None for i in record.ingredients):
            for k, total_v in record.total.as_dict().items():
                s = sum(getattr(i.facts, k) for i in record.ingredients)
                if not math.isclose(total_v, s, rel_tol=1e-6, abs_tol=1e-9):
                    out.append(
                        Violation(f"total.{k}", "total equals ingredient sum", f"{total_v} vs {s}")
                    )
    return out


@dataclass(frozen=True)
class TaskToken:
    kind: str
    field: str | None = None
    index: int | None = None

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise InvalidTokenError(f"unknown token kind {self.kind!r}")
        if self.kind == "segmentation":
            if self.field is not None:
                raise InvalidTokenError("segmentation token takes no field")
        elif self.field not in NUTRITION_FIELDS:
            raise InvalidTokenError(f"nutrition token needs a field in {NUTRITION_FIELDS}")
        if self.kind == "nutrition_dish":
            if self.index is not None:
                raise InvalidTokenError("dish-level token takes no index")
        elif not isinstance(self.index, int) or isinstance(self.index, bool) or self.index < 1:
            raise InvalidTokenError(f"{self.kind} token needs a positive index")

    @property
    def surface(self) -> str:
        return token_surface(self)

    @property
    def is_nutrition(self) -> bool:
        return self.kind != "segmentation"

    def __str__(self) -> str:
        return self.surface


def token_surface(token: TaskToken) -> str:
    if token.kind == "nutrition_ingredient":
        return f"<{token.field}_{token.index}>"
    if token.kind == "nutrition_dish":
        return f"<total_{token.field}>"
    return f"<seg_{token.index}>"


_TOKEN_RE = re.compile(r"<(?:(total)_(mass|cal|carb|fat|pro)|(mass|cal|carb|fat|pro|seg)_([1-9][0-9]*))>")
TOKEN_PATTERN = _TOKEN_RE


def parse_token(surface: str) -> TaskToken:
    m = _TOKEN_RE.fullmatch(surface)
    if not m:
        raise InvalidTokenError(f"not a task-token surface: {surface!r}")
    if m.group(1):
        return TaskToken("nutrition_dish", m.group(2))
    name, index = m.group(3), int(m.group(4))
    if name == "seg":
        return TaskToken("segmentation", None, index)
    return TaskToken("nutrition_ingredient", name, index)


def find_tokens(text: str) -> list[tuple[int, TaskToken]]:
    """All task-token occurrences in ``text`` as (char offset, token)."""
    return [(m.start(), parse_token(m.group(0))) for m in _TOKEN_RE.finditer(text)]


Label = Union[float, MaskImage]


@dataclass(frozen=True)
class Turn:
    speaker: str
    text: str
    images: tuple[ImageHandle, ...] = ()
    token_labels: Mapping[TaskToken, Label] = field(default_factory=dict)


@dataclass(frozen=True)
class Conversation:
    turns: tuple[Turn, ...]
    task_tag: str
    source_record: str
    # free-form generator metadata (template ids, referring form, absent objects...)
    meta: Mapping[str, Any] = field(default_factory=dict)

    @property
    def qa_pairs(self) -> list[tuple[Turn, Turn]]:
        body = [t for t in self.turns if t.speaker != "system"]
        return [(body[i], body[i + 1]) for i in range(0, len(body) - 1, 2)]

    @property
    def assistant_turns(self) -> list[Turn]:
        return [t for t in self.turns if t.speaker == "assistant"]

    @property
    def image(self) -> ImageHandle | None:
        for t in self.turns:
            if t.images:
                return t.images[0]
        return None


def validate_conversation(conv: Conversation) -> list[Violation]:
    out: list[Violation] = []
    if conv.task_tag not in TASK_TAGS:
        out.append(Violation("task_tag", "task_tag known", conv.task_tag))
    turns = conv.turns
    if not turns or turns[0].speaker != "system":
        out.append(Violation("turns[0]", "first turn is the system turn"))
        return out
    body = turns[1:]
    for i, t in enumerate(body):
        expect = "user" if i % 2 == 0 else "assistant"
        if t.speaker != expect:
            out.append(Violation(f"turns[{i + 1}].speaker", "alternating user/assistant", t.speaker))
    if len(body) % 2 or not body:
        out.append(Violation("turns", "≥1 assistant turn, ending on an assistant turn"))
    for i, t in enumerate(turns):
        if t.images and not (i == 1 and t.speaker == "user"):
            out.append(Violation(f"turns[{i}].images", "image only on the first user turn"))
        if t.token_labels and t.speaker != "assistant":
            out.append(Violation(f"turns[{i}].token_labels", "only assistant turns carry labels"))
        for tok, label in t.token_labels.items():
            n = t.text.count(tok.surface)
            if n != 1:
                out.append(
                    Violation(f"turns[{i}].token_labels", "label key occurs exactly once", f"{tok}×{n}")
                )
            if tok.is_nutrition != (not isinstance(label, MaskImage)):
                out.append(Violation(f"turns[{i}].token_labels", "label type matches token kind", str(tok)))
        for _, tok in find_tokens(t.text):
            if t.speaker == "assistant" and tok not in t.token_labels:
                out.append(Violation(f"turns[{i}].text", "every task token is labelled", str(tok)))
    # Per-conversation numbering: each newly seen index is one past the largest so far.
    highest = {"nutrition_ingredient": 0, "segmentation": 0}
    for t in turns:
        for _, tok in find_tokens(t.text):
            if tok.index is None:
                continue
            if tok.index > highest[tok.kind] + 1:
                out.append(
                    Violation("turns", "indices consecutive from 1 in order of first appearance", str(tok))
                )
            highest[tok.kind] = max(highest[tok.kind], tok.index)
    return out


@dataclass(frozen=True)
class LossWeights:
    lambda_txt: float = 1.0
    lambda_nutrition: float = 0.1
    lambda_mask: float = 1.0
    lambda_mae: float = 0.1
    lambda_mse: float = 0.0001
    lambda_bce: float = 2.0
    lambda_dice: float = 0.5

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{k} must be finite and ≥ 0, got {v}")


LOSS_PROFILES = {
    "main-text-lambdas": LossWeights(),
    "table9-lambdas": LossWeights(lambda_mae=1e-3, lambda_mse=1.0),
}


def join_names(names: Sequence[str]) -> str:
    """'a' / 'a and b' / 'a, b and c'."""
    names = list(names)
    if len(names) <= 1:
        return "".join(names)
    return ", ".join(names[:-1]) + " and " + names[-1]


def unique(items: Iterable[Any]) -> list[Any]:
    seen, out = set(), []
    for x in items:
        if x not in seen:
            seen.add(x)
            out.append(x)
    return out
