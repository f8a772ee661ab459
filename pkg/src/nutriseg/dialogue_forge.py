"""Stage-2 corpora: generated nutrition dialogues and reasoning-segmentation chats.

A generation backend is any callable ``(prompt, seed) -> str``. The
deterministic :func:`mock_backend` stands in for a hosted LLM; the
:func:`http_backend` adapter is configured from ``BACKEND_URL`` /
``BACKEND_KEY``.

Response grammar, one turn per line::

    USER: <question>
    ASSISTANT: <answer>

Nutrition values in dialogue answers are marked ``<token_name:value>``;
ingredients in reasoning answers are marked ``{name} [SEG]``.
"""

from __future__ import annotations

import json
import logging
import math
import os
import re
import urllib.request
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

from .datamodel import (
    Conversation,
    FoodRecord,
    InvalidTokenError,
    Label,
    TaskToken,
    Turn,
    UnsupportedRecordError,
    parse_token,
)
from .instruction_forge import SYSTEM_MESSAGE, derive_rng, select_visual

log = logging.getLogger(__name__)

TOPICS = (
    "Nutrition and Ingredients",
    "Health and Diseases",
    "Calorie Calculation",
    "Metabolism",
    "Dietary Preferences and Allergies",
    "Dietary Planning",
    "Food Pairing and Substitution",
)

Backend = Callable[[str, int], str]


class DialogueParseError(ValueError):
    """A backend response that does not follow the marker grammar."""

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


@dataclass(frozen=True)
class Rejection:
    reason: str


@dataclass(frozen=True)
class SamplePlan:
    mode: str
    topics: tuple[str, ...]
    rounds: int


@dataclass(frozen=True)
class TopicRoundPolicy:
    # (min ingredients, max ingredients or None, topics, rounds); first match wins
    dialogue: tuple[tuple[int, int | None, int, int], ...] = ((1, 3, 1, 3), (4, 10, 3, 4), (11, None, 7, 5))
    reason_seg: tuple[tuple[int, int | None, int, int], ...] = ((3, 3, 0, 3), (4, 10, 0, 4), (11, None, 0, 5))

    def lookup(self, mode: str, n_ingredients: int) -> tuple[int, int] | Rejection:
        rules = self.dialogue if mode == "dialogue" else self.reason_seg
        for lo, hi, topics, rounds in rules:
            if n_ingredients >= lo and (hi is None or n_ingredients <= hi):
                return topics, rounds
        if mode == "reason_seg" and n_ingredients < 3:
            return Rejection("less than three ingredients")
        return Rejection("no ingredients")


DEFAULT_POLICY = TopicRoundPolicy()


def plan_sample(
    record: FoodRecord, mode: str = "dialogue", seed: int = 0, policy: TopicRoundPolicy = DEFAULT_POLICY
) -> SamplePlan | Rejection:
    if mode not in ("dialogue", "reason_seg"):
        raise ValueError(f"unknown mode {mode!r}")
    n = len(record.masked_ingredients) if mode == "reason_seg" else len(record.ingredients)
    rule = policy.lookup(mode, n)
    if isinstance(rule, Rejection):
        return rule
    n_topics, rounds = rule
    rng = derive_rng(seed, record.record_id, "topics")
    picked = sorted(int(i) for i in rng.choice(len(TOPICS), size=n_topics, replace=False))
    return SamplePlan(mode, tuple(TOPICS[i] for i in picked), rounds)


def _num(v: float) -> str:
    # repr() round-trips exactly through float(), which the parser relies on
    return repr(float(v))


# -- prompt assembly ---------------------------------------------------------

DIALOGUE_TEMPLATE = """You are a professional nutritionist talking with a user about the dish in a photo.
Here is the nutrition information of the dish:
{DESC}
Write a conversation of exactly {N} rounds in which the user asks questions and you answer professionally with explanations. Cover these topics: {TOPIC}.
Mark each nutritional element value in your answers with a task token written as <token_name:value>. Use total_mass, total_cal, total_fat, total_carb or total_pro for the whole dish, and mass_i, cal_i, fat_i, carb_i or pro_i for the i-th ingredient you mention, counting from 1 in order of first mention.
Write each round as two lines, one starting with "USER: " and one starting with "ASSISTANT: ".
Example:
USER: Is this meal high in energy?
ASSISTANT: The whole dish has <total_cal:512.0> kilocalories, and the rice alone weighs <mass_1:180.0> grams with <cal_1:234.0> kilocalories.
"""

REASONSEG_TEMPLATE = """You are a food expert looking at a photo that contains these ingredients:
{LIST}
Write a conversation of exactly {N} rounds in which the user asks questions that need complex reasoning about the ingredients, and you answer with explanations.
In every answer, mark each ingredient you mention by wrapping its name in braces, and generate segmentation tokens ([SEG]) right after it, like {name} [SEG]. Only mention ingredients from the list.
Write each round as two lines, one starting with "USER: " and one starting with "ASSISTANT: ".
Example:
USER: Which part of this dish is the best source of protein?
ASSISTANT: The {grilled chicken} [SEG] is the best source of protein here.
"""


def describe_nutrition(record: FoodRecord) -> str:
    t = record.total
    lines = [
        f"Total: {_num(t.mass)} g, {_num(t.calories)} kcal, {_num(t.fat)} g fat, "
        f"{_num(t.carbohydrate)} g carbohydrate, {_num(t.protein)} g protein"
    ]
    for ing in record.ingredients:
        f = ing.facts
        lines.append(
            f"- {ing.name}: {_num(f.mass)} g, {_num(f.calories)} kcal, {_num(f.fat)} g fat, "
            f"{_num(f.carbohydrate)} g carbohydrate, {_num(f.protein)} g protein"
        )
    return "\n".join(lines)


def assemble_dialogue_prompt(record: FoodRecord, topics: Sequence[str], rounds: int) -> str:
    if record.total is None or not record.ingredients or any(i.facts is None for i in record.ingredients):
        raise UnsupportedRecordError(f"{record.record_id}: dialogue prompts need totals and per-ingredient facts")
    return (
        DIALOGUE_TEMPLATE.replace("{DESC}", describe_nutrition(record))
        .replace("{TOPIC}", "; ".join(topics))
        .replace("{N}", str(rounds))
    )


def assemble_reasonseg_prompt(record: FoodRecord, rounds: int) -> str:
    masked = record.masked_ingredients
    if len(masked) < 3:
        raise UnsupportedRecordError(f"{record.record_id}: reasoning prompts need ≥3 masked ingredients")
    listing = "\n".join(f"- {i.name}" for i in masked)
    return REASONSEG_TEMPLATE.replace("{LIST}", listing).replace("{N}", str(rounds))


# -- mock backend ----------------------------------------------------------------

_ROUNDS_RE = re.compile(r"exactly (\d+) rounds")
_TOPIC_RE = re.compile(r"Cover these topics: (.*)\.\n")
_TOTAL_RE = re.compile(r"^Total: (\S+) g, (\S+) kcal, (\S+) g fat, (\S+) g carbohydrate, (\S+) g protein$", re.M)
_ING_RE = re.compile(r"^- (.+?): (\S+) g, (\S+) kcal, (\S+) g fat, (\S+) g carbohydrate, (\S+) g protein$", re.M)
_LIST_RE = re.compile(r"^- (.+)$", re.M)

_MOCK_QUESTIONS = (
    "What should I know about {topic} for this dish?",
    "Could you explain this meal from the point of view of {topic}?",
    "How does this food relate to {topic}?",
)
_MOCK_REASON_QUESTIONS = (
    "Which ingredient here would be the best choice for someone who wants more fiber?",
    "If I wanted to make this dish lighter, what should I remove?",
    "Which part of this meal gives the most lasting energy?",
    "What would a child most likely pick out of this plate first?",
    "Which ingredients add color and vitamins to the dish?",
)


def mock_backend(prompt: str, seed: int) -> str:
    """Syntactically valid response that only copies values present in the prompt."""
    m = _ROUNDS_RE.search(prompt)
    if not m:
        raise ValueError("unrecognized prompt shape: no round count")
    rounds = int(m.group(1))
    rng = derive_rng(seed, "mock", prompt)
    if prompt.startswith(DIALOGUE_TEMPLATE[:40]):
        return _mock_dialogue(prompt, rounds, rng)
    if prompt.startswith(REASONSEG_TEMPLATE[:40]):
        return _mock_reasonseg(prompt, rounds, rng)
    raise ValueError("unrecognized prompt shape")


def _mock_dialogue(prompt: str, rounds: int, rng) -> str:
    topics = _TOPIC_RE.search(prompt).group(1).split("; ")
    total = _TOTAL_RE.search(prompt).groups()
    ingredients = [(g[0], g[1:]) for g in _ING_RE.findall(prompt)]
    index_of: dict[str, int] = {}
    lines = []
    for r in range(rounds):
        topic = topics[r % len(topics)]
        q = _MOCK_QUESTIONS[int(rng.integers(len(_MOCK_QUESTIONS)))].format(topic=topic.lower())
        kind = int(rng.integers(3)) if ingredients else int(rng.integers(2))
        if kind == 0:
            a = (
                f"Regarding {topic.lower()}, the whole dish weighs <total_mass:{total[0]}> grams "
                f"and provides <total_cal:{total[1]}> kilocalories."
            )
        elif kind == 1:
            a = (
                f"For {topic.lower()}, note that it has <total_fat:{total[2]}> grams of fat, "
                f"<total_carb:{total[3]}> grams of carbohydrate and <total_pro:{total[4]}> grams of protein."
            )
        else:
            name, vals = ingredients[int(rng.integers(len(ingredients)))]
            i = index_of.setdefault(name, len(index_of) + 1)
            a = (
                f"Thinking about {topic.lower()}, the {name} weighs <mass_{i}:{vals[0]}> grams "
                f"and contributes <cal_{i}:{vals[1]}> kilocalories with <pro_{i}:{vals[4]}> grams of protein."
            )
        lines.append(f"USER: {q}\nASSISTANT: {a}\n")
    return "".join(lines)


def _mock_reasonseg(prompt: str, rounds: int, rng) -> str:
    names = _LIST_RE.findall(prompt.split("\nWrite a conversation")[0])
    lines = []
    for _ in range(rounds):
        q = _MOCK_REASON_QUESTIONS[int(rng.integers(len(_MOCK_REASON_QUESTIONS)))]
        k = int(rng.integers(1, min(3, len(names)) + 1))
        chosen = [names[int(j)] for j in rng.choice(len(names), size=k, replace=False)]
        marked = [f"{{{n}}} [SEG]" for n in chosen]
        if k == 1:
            a = f"The {marked[0]} is the one to look at, because of its texture and nutrients."
        else:
            a = "Look at " + ", ".join(f"the {x}" for x in marked[:-1]) + f" and the {marked[-1]}; together they answer it."
        lines.append(f"USER: {q}\nASSISTANT: {a}\n")
    return "".join(lines)


def http_backend(prompt: str, seed: int, timeout: float = 120.0) -> str:
    """POST ``{"prompt", "seed"}`` to ``$BACKEND_URL``; expects ``{"text": ...}`` back."""
    url = os.environ.get("BACKEND_URL")
    if not url:
        raise RuntimeError("BACKEND_URL is not set")
    req = urllib.request.Request(
        url,
        data=json.dumps({"prompt": prompt, "seed": seed}).encode(),
        headers={"Content-Type": "application/json", "Authorization": f"Bearer {os.environ.get('BACKEND_KEY', '')}"},
    )
    with urllib.request.urlopen(req, timeout=timeout) as resp:
        return json.loads(resp.read().decode())["text"]


# -- response parsing ------------------------------------------------------------

def _split_rounds(response: str) -> list[tuple[str, str]]:
    turns: list[list[str]] = []
    for line in response.split("\n"):
        if line.startswith("USER: "):
            turns.append(["user", line[6:]])
        elif line.startswith("ASSISTANT: "):
            turns.append(["assistant", line[11:]])
        elif not line.strip():
            continue
        elif turns:
            turns[-1][1] += "\n" + line
        else:
            raise DialogueParseError("unexpected text", repr(line[:40]))
    if not turns:
        raise DialogueParseError("no turns")
    for i, (speaker, _) in enumerate(turns):
        if speaker != ("user" if i % 2 == 0 else "assistant"):
            raise DialogueParseError("unbalanced Q/A", f"turn {i + 1} is {speaker}")
    if len(turns) % 2:
        raise DialogueParseError("unbalanced Q/A", "trailing question without answer")
    return [(turns[i][1], turns[i + 1][1]) for i in range(0, len(turns), 2)]


def _assemble(
    record: FoodRecord, seed: int, pairs: Sequence[tuple[str, Mapping[TaskToken, Label], str]], task_tag: str, meta
) -> Conversation:
    turns = [Turn("system", SYSTEM_MESSAGE)]
    for r, (q, labels, a) in enumerate(pairs):
        images = (select_visual(record, seed),) if r == 0 and record.image else ()
        turns.append(Turn("user", q, images))
        turns.append(Turn("assistant", a, token_labels=dict(labels)))
    return Conversation(tuple(turns), task_tag, record.record_id, meta)


_MARKER_RE = re.compile(r"<([^<>:\s]*):([^<>]*)>")
_BARE_TOKEN_RE = re.compile(r"<(?:total_[a-z]+|[a-z]+_[0-9]+)>")
_FLOAT_RE = re.compile(r"[+]?(?:[0-9]+(?:\.[0-9]*)?|\.[0-9]+)(?:[eE][-+]?[0-9]+)?")


def _expected_rounds(record: FoodRecord, mode: str, policy: TopicRoundPolicy) -> int:
    n = len(record.masked_ingredients) if mode == "reason_seg" else len(record.ingredients)
    rule = policy.lookup(mode, n)
    if isinstance(rule, Rejection):
        raise DialogueParseError("record rejected by plan", rule.reason)
    return rule[1]


def parse_dialogue_response(
    response: str,
    record: FoodRecord,
    rounds: int | None = None,
    seed: int = 0,
    max_indices: int = 20,
    policy: TopicRoundPolicy = DEFAULT_POLICY,
) -> Conversation:
    """Turn marked-up text into a labelled conversation, or raise DialogueParseError."""
    if rounds is None:
        rounds = _expected_rounds(record, "dialogue", policy)
    pairs = _split_rounds(response)
    if len(pairs) != rounds:
        raise DialogueParseError("round-count mismatch", f"planned {rounds}, got {len(pairs)}")

    highest = 0
    out = []
    for q, a in pairs:
        if _MARKER_RE.search(q) or _BARE_TOKEN_RE.search(q):
            raise DialogueParseError("marker in question", q[:40])
        labels: dict[TaskToken, Label] = {}
        pieces, pos = [], 0
        for m in _MARKER_RE.finditer(a):
            name, value = m.group(1), m.group(2)
            try:
                tok = parse_token(f"<{name}>")
            except InvalidTokenError:
                raise DialogueParseError("unknown token name", name) from None
            if not tok.is_nutrition or (tok.index is not None and tok.index > max_indices):
                raise DialogueParseError("unknown token name", name)
            if not _FLOAT_RE.fullmatch(value) or not math.isfinite(float(value)):
                raise DialogueParseError("non-numeric value", f"{name}:{value}")
            if tok in labels:
                raise DialogueParseError("duplicate token in answer", name)
            if tok.index is not None:
                if tok.index > highest + 1:
                    raise DialogueParseError("non-consecutive index", name)
                highest = max(highest, tok.index)
            labels[tok] = float(value)
            pieces.append(a[pos : m.start()])
            pieces.append(tok.surface)
            pos = m.end()
        pieces.append(a[pos:])
        text = "".join(pieces)
        bare = [s for s in _BARE_TOKEN_RE.findall(text) if s not in {t.surface for t in labels}]
        if bare or len(_BARE_TOKEN_RE.findall(text)) != len(labels):
            raise DialogueParseError("task token without value", (bare or ["duplicate"])[0])
        out.append((q, labels, text))
    return _assemble(record, seed, out, "dialogue", {"rounds": rounds})


def render_dialogue_response(conv: Conversation) -> str:
    """Inverse of :func:`parse_dialogue_response`: reinsert values as markers."""
    lines = []
    for q, a in conv.qa_pairs:
        text = a.text
        for tok, val in a.token_labels.items():
            text = text.replace(tok.surface, f"<{tok.surface[1:-1]}:{_num(val)}>", 1)
        lines.append(f"USER: {q.text}\nASSISTANT: {text}\n")
    return "".join(lines)


_BRACE_RE = re.compile(r"\{([^{}\n]*)\}( \[SEG\])?|\[SEG\]")


def parse_reasonseg_response(
    response: str,
    record: FoodRecord,
    rounds: int | None = None,
    seed: int = 0,
    max_indices: int = 20,
    policy: TopicRoundPolicy = DEFAULT_POLICY,
) -> Conversation:
    """``{name} [SEG]`` becomes ``name <seg_i>``, i counted per answer."""
    if rounds is None:
        rounds = _expected_rounds(record, "reason_seg", policy)
    pairs = _split_rounds(response)
    if len(pairs) != rounds:
        raise DialogueParseError("round-count mismatch", f"planned {rounds}, got {len(pairs)}")

    out = []
    braces: list[list[Any]] = []
    for r, (q, a) in enumerate(pairs):
        if "[SEG]" in q or _BARE_TOKEN_RE.search(q) or _BARE_TOKEN_RE.search(a):
            raise DialogueParseError("unexpected segmentation marker", q[:40])
        labels: dict[TaskToken, Label] = {}
        pieces: list[str] = []
        pos, length = 0, 0
        for m in _BRACE_RE.finditer(a):
            if m.group(0) == "[SEG]":
                raise DialogueParseError("[SEG] without a preceding brace group")
            name = m.group(1)
            ing = record.ingredient(name) if name.strip() else None
            if ing is None:
                raise DialogueParseError("unknown ingredient", name)
            lead = a[pos : m.start()]
            pieces.append(lead)
            length += len(lead)
            start = length
            if m.group(2):
                if ing.mask is None:
                    raise DialogueParseError("ingredient has no mask", name)
                idx = len(labels) + 1
                if idx > max_indices:
                    raise DialogueParseError("too many segmentation tokens")
                tok = TaskToken("segmentation", None, idx)
                labels[tok] = ing.mask
                piece = f"{name} {tok.surface}"
                braces.append([2 * r + 2, start, start + len(name), tok.surface])
            else:
                piece = name
                braces.append([2 * r + 2, start, start + len(name), None])
            pieces.append(piece)
            length += len(piece)
            pos = m.end()
        pieces.append(a[pos:])
        if not labels:
            raise DialogueParseError("answer without segmentation tokens", a[:40])
        out.append((q, labels, "".join(pieces)))
    return _assemble(record, seed, out, "reason_seg", {"rounds": rounds, "braces": braces})


def render_reasonseg_response(conv: Conversation) -> str:
    by_turn: dict[int, list[list[Any]]] = {}
    for entry in conv.meta.get("braces", ()):
        by_turn.setdefault(entry[0], []).append(entry)
    lines = []
    for ti in range(1, len(conv.turns), 2):
        q, a = conv.turns[ti], conv.turns[ti + 1]
        text, pieces, pos = a.text, [], 0
        for _, start, end, tok in by_turn.get(ti + 1, ()):
            pieces.append(text[pos:start])
            pieces.append("{" + text[start:end] + "}")
            pos = end
            if tok is not None:
                pieces.append(" [SEG]")
                pos = end + 1 + len(tok)
        pieces.append(text[pos:])
        lines.append(f"USER: {q.text}\nASSISTANT: {''.join(pieces)}\n")
    return "".join(lines)


# -- corpus driver ------------------------------------------------------------

@dataclass
class Stage2Result:
    conversations: list[Conversation] = field(default_factory=list)
    rejections: list[dict[str, Any]] = field(default_factory=list)


def forge_stage2_record(
    record: FoodRecord,
    mode: str,
    seed: int,
    backend: Backend = mock_backend,
    retries: int = 3,
    policy: TopicRoundPolicy = DEFAULT_POLICY,
) -> Conversation | dict[str, Any]:
    """A parsed conversation, or a rejection-log entry."""
    plan = plan_sample(record, mode, seed, policy)
    if isinstance(plan, Rejection):
        return {"record_id": record.record_id, "mode": mode, "stage": "plan", "reason": plan.reason}
    try:
        if mode == "dialogue":
            prompt = assemble_dialogue_prompt(record, plan.topics, plan.rounds)
        else:
            prompt = assemble_reasonseg_prompt(record, plan.rounds)
    except UnsupportedRecordError as exc:
        return {"record_id": record.record_id, "mode": mode, "stage": "prompt", "reason": str(exc)}
    parse = parse_dialogue_response if mode == "dialogue" else parse_reasonseg_response
    last = ""
    for attempt in range(retries + 1):
        response = backend(prompt, seed + attempt)
        try:
            conv = parse(response, record, plan.rounds, seed)
        except DialogueParseError as exc:
            last = str(exc)
            log.info("record %s attempt %d rejected: %s", record.record_id, attempt, exc)
            continue
        return Conversation(conv.turns, conv.task_tag, conv.source_record, {**conv.meta, "topics": list(plan.topics)})
    return {"record_id": record.record_id, "mode": mode, "stage": "parse", "reason": last}


def forge_stage2(
    records: Sequence[FoodRecord],
    mode: str,
    seed: int,
    backend: Backend = mock_backend,
    retries: int = 3,
) -> Stage2Result:
    result = Stage2Result()
    for rec in records:
        out = forge_stage2_record(rec, mode, seed, backend, retries)
        if isinstance(out, Conversation):
            result.conversations.append(out)
        else:
            result.rejections.append(out)
    return result
