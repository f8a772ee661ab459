"""Evaluation metrics, answer parsing and report rendering."""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .datamodel import TOKEN_PATTERN, MaskImage, TaskToken, canonical_name, parse_token

# -- segmentation ---------------------------------------------------------------


@dataclass
class SegEvalSample:
    predicted: list[MaskImage]
    target: list[MaskImage]
    refusal_predicted: list[bool] = field(default_factory=list)
    refusal_expected: list[bool] = field(default_factory=list)

    def __post_init__(self):
        if len(self.refusal_predicted) != len(self.refusal_expected):
            raise ValueError("refusal flag lists must have equal length")


def _as_bool(m: MaskImage | np.ndarray) -> np.ndarray:
    return (m.values if isinstance(m, MaskImage) else np.asarray(m)).astype(bool)


def _pair_counts(pred, target) -> tuple[int, int]:
    p, t = _as_bool(pred), _as_bool(target)
    if p.shape != t.shape:
        raise ValueError(f"mask shape mismatch: {p.shape} vs {t.shape}")
    return int((p & t).sum()), int((p | t).sum())


def _pairs(sample: SegEvalSample):
    """Pairs predictions with targets; a missing prediction counts as an empty mask."""
    for k, t in enumerate(sample.target):
        p = sample.predicted[k] if k < len(sample.predicted) else np.zeros_like(_as_bool(t))
        yield p, t


def mask_iou(pred, target) -> float:
    i, u = _pair_counts(pred, target)
    return 1.0 if u == 0 else i / u


def ciou(samples: Iterable[SegEvalSample]) -> float:
    """Sum of intersections over sum of unions across every mask pair."""
    inter = union = 0
    for s in samples:
        for p, t in _pairs(s):
            i, u = _pair_counts(p, t)
            inter += i
            union += u
    return 1.0 if union == 0 else inter / union


def giou(samples: Iterable[SegEvalSample]) -> float:
    """Mean per-sample IoU, where each sample pools its own mask pairs."""
    vals = []
    for s in samples:
        if not s.target:
            continue
        inter = union = 0
        for p, t in _pairs(s):
            i, u = _pair_counts(p, t)
            inter += i
            union += u
        vals.append(1.0 if union == 0 else inter / union)
    return float(np.mean(vals)) if vals else float("nan")


def response_accuracy(samples: Iterable[SegEvalSample]) -> tuple[float, float]:
    """(acc_existent, acc_absent), both counted per query.

    A query with existing referred objects is accurate only if none of them
    is refused; a query with absent objects only if all of them are refused.
    """
    n_ex = ok_ex = n_ab = ok_ab = 0
    for s in samples:
        ex = [p for p, e in zip(s.refusal_predicted, s.refusal_expected) if not e]
        ab = [p for p, e in zip(s.refusal_predicted, s.refusal_expected) if e]
        if ex:
            n_ex += 1
            ok_ex += not any(ex)
        if ab:
            n_ab += 1
            ok_ab += all(ab)
    return (ok_ex / n_ex if n_ex else float("nan"), ok_ab / n_ab if n_ab else float("nan"))


# -- nutrition / ingredients ----------------------------------------------------


class UndefinedMetricError(ValueError):
    pass


def nutrition_metrics(predictions: Sequence[float], targets: Sequence[float], field_name: str = "") -> tuple[float, float]:
    """(MAE, MAE as a percentage of the target mean)."""
    p, t = np.asarray(predictions, dtype=float), np.asarray(targets, dtype=float)
    if p.shape != t.shape or p.size == 0:
        raise ValueError(f"need equal, non-empty prediction/target lists for {field_name or 'field'}")
    mean = t.mean()
    if mean == 0:
        raise UndefinedMetricError(f"target mean of {field_name or 'field'} is zero; MAE% undefined")
    mae = float(np.abs(p - t).mean())
    return mae, mae / mean * 100.0


def ingredient_set_metrics(predicted: Iterable[str], target: Iterable[str]) -> tuple[float, float]:
    a = {canonical_name(x) for x in predicted}
    b = {canonical_name(x) for x in target}
    if not a and not b:
        return 1.0, 1.0
    inter = len(a & b)
    return inter / len(a | b), 2 * inter / (len(a) + len(b))


def macro_set_metrics(pairs: Iterable[tuple[Iterable[str], Iterable[str]]]) -> tuple[float, float]:
    vals = [ingredient_set_metrics(p, t) for p, t in pairs]
    if not vals:
        return float("nan"), float("nan")
    return float(np.mean([v[0] for v in vals])), float(np.mean([v[1] for v in vals]))


# -- text generation --------------------------------------------------------------

_WORD = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


def text_tokens(text: str) -> list[str]:
    """Lowercase; words and single punctuation marks."""
    return _WORD.findall(text.lower())


def _ngrams(toks: Sequence[str], n: int) -> Counter:
    return Counter(tuple(toks[i : i + n]) for i in range(len(toks) - n + 1))


def corpus_bleu(candidates: Sequence[str], references: Sequence[str], max_n: int = 4) -> float:
    """Corpus 4-gram BLEU on a 0-100 scale.

    Clipped n-gram precisions are pooled over the corpus; an order with no
    matches gets add-one smoothing (unless nothing matches at all, which is 0).
    """
    if len(candidates) != len(references):
        raise ValueError("candidate/reference count mismatch")
    match = [0] * max_n
    total = [0] * max_n
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        c, r = text_tokens(cand), text_tokens(ref)
        c_len += len(c)
        r_len += len(r)
        for n in range(1, max_n + 1):
            cn, rn = _ngrams(c, n), _ngrams(r, n)
            match[n - 1] += sum(min(v, rn[g]) for g, v in cn.items())
            total[n - 1] += max(len(c) - n + 1, 0)
    if c_len == 0 or match[0] == 0:
        return 0.0
    log_p = 0.0
    for m, t in zip(match, total):
        if m == 0:
            m, t = 1, t + 1
        log_p += math.log(m / t) / max_n
    bp = 1.0 if c_len > r_len else math.exp(1 - r_len / c_len)
    return 100.0 * bp * math.exp(log_p)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: str | Sequence[str], reference: str | Sequence[str]) -> float:
    c = text_tokens(candidate) if isinstance(candidate, str) else list(candidate)
    r = text_tokens(reference) if isinstance(reference, str) else list(reference)
    lcs = lcs_length(c, r)
    if lcs == 0:
        return 0.0
    p, rec = lcs / len(c), lcs / len(r)
    return 2 * p * rec / (p + rec)


def recipe_metrics(candidates: str | Sequence[str], references: str | Sequence[str]) -> tuple[float, float]:
    """(corpus BLEU, mean Rouge-L F)."""
    if isinstance(candidates, str):
        candidates, references = [candidates], [references]
    if any(not text_tokens(r) for r in references):
        raise ValueError("references must be non-empty")
    rl = float(np.mean([rouge_l(c, r) for c, r in zip(candidates, references)]))
    return corpus_bleu(candidates, references), rl


# -- parsing generated answers ------------------------------------------------------

REFUSAL_PATTERNS = (
    re.compile(r"(?:the )?([a-z][a-z ,]*?) (?:is|are) not found in this picture", re.I),
    re.compile(r"there (?:is|are) no ([a-z][a-z ,]*?) in this (?:picture|image)", re.I),
)
_REFUSAL_LEAD = re.compile(r"^(?:(?:sorry|i checked carefully)[,:]?\s*)?(?:the\s+)?", re.I)
_ASSIGN = re.compile(r"(?:the )?([a-z][a-z ]*?) (?:is masked )?as (<seg_\d+>)", re.I)
_LIST_SPLIT = re.compile(r"\s*(?:,\s*and\s+|,\s*|\s+and\s+)\s*")
_LIST_LEAD = re.compile(r"^.*?:\s*")


def split_names(text: str) -> list[str]:
    return [canonical_name(p) for p in _LIST_SPLIT.split(text.strip().rstrip(".")) if p.strip()]


@dataclass
class Prediction:
    task_tag: str
    parsed: bool = True
    class_name: str | None = None
    ingredients: list[str] = field(default_factory=list)
    # token surface -> its position in the generated token stream (filled by callers)
    tokens: list[TaskToken] = field(default_factory=list)
    seg_slots: list[tuple[str, TaskToken]] = field(default_factory=list)
    refused: list[str] = field(default_factory=list)
    text: str = ""


def _tokens_in(text: str) -> list[TaskToken]:
    out = []
    for m in TOKEN_PATTERN.finditer(text):
        try:
            out.append(parse_token(m.group(0)))
        except Exception:
            pass
    return out


def parse_prediction(text: Any, task_tag: str, vocabulary: Sequence[str] = ()) -> Prediction:
    """Structured reading of a generated answer; never raises."""
    if not isinstance(text, str):
        return Prediction(task_tag, parsed=False)
    pred = Prediction(task_tag, text=text)
    try:
        if task_tag == "classification":
            low = text.lower()
            hits = [(low.find(canonical_name(v)), -len(v), canonical_name(v)) for v in vocabulary if canonical_name(v) in low]
            if hits:
                pred.class_name = min(hits)[2]
            else:
                m = re.search(r"(?:is|like) (.+?)\.?$", text.strip())
                pred.class_name = canonical_name(m.group(1)) if m else None
            pred.parsed = pred.class_name is not None
        elif task_tag == "ingredient":
            body = _LIST_LEAD.sub("", text.strip(), count=1) if ":" in text else text
            pred.ingredients = split_names(body)
            pred.parsed = bool(pred.ingredients)
        elif task_tag in ("nutrition", "dialogue"):
            pred.tokens = _tokens_in(text)
            pred.parsed = bool(pred.tokens)
        elif task_tag in ("segmentation", "reason_seg"):
            for pat in REFUSAL_PATTERNS:
                for m in pat.finditer(text):
                    pred.refused += split_names(_REFUSAL_LEAD.sub("", m.group(1)))
            for m in _ASSIGN.finditer(text):
                tok = parse_token(m.group(2))
                pred.seg_slots.append((canonical_name(re.sub(r"^.*\b(?:and|,) the ", "", m.group(1))), tok))
            pred.tokens = [t for t in _tokens_in(text) if t.kind == "segmentation"]
            pred.parsed = bool(pred.refused or pred.tokens)
        else:
            pred.parsed = False
    except Exception:
        return Prediction(task_tag, parsed=False, text=text)
    return pred


def refusal_flags(pred: Prediction, referred: Sequence[str], absent: Sequence[str]) -> tuple[list[bool], list[bool]]:
    """(predicted refusals, expected refusals) per referred object."""
    refused = {canonical_name(x) for x in pred.refused}
    absent_set = {canonical_name(x) for x in absent}
    names = [canonical_name(r) for r in referred]
    return [n in refused for n in names], [n in absent_set for n in names]


# -- reports ----------------------------------------------------------------------


@dataclass
class MetricReport:
    nutrition: list[dict[str, Any]] = field(default_factory=list)  # field, mae, mae_pct
    segmentation: list[dict[str, Any]] = field(default_factory=list)  # refer_k, ciou, acc
    reasoning: list[dict[str, Any]] = field(default_factory=list)  # giou, ciou
    vqa: dict[str, Any] = field(default_factory=dict)  # top1, iou, f1, bleu, rouge_l
    extra: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_json(cls, d: Mapping[str, Any]) -> "MetricReport":
        return cls(**{k: d.get(k, v) for k, v in cls().to_json().items()})


def _fmt(v: Any) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.4f}"
    return str(v)


def nutrition_cell(mae: float, pct: float) -> str:
    """'67.3 / 26.6 %' style cell."""
    return f"{mae:.1f} / {pct:.1f} %"


def emit_report(report: MetricReport, fmt: str = "table") -> bytes:
    if fmt == "json":
        return (json.dumps(report.to_json(), sort_keys=True, indent=1, allow_nan=True) + "\n").encode()
    if fmt != "table":
        raise ValueError(f"unknown report format {fmt!r}")
    out = []
    if report.vqa:
        out.append("[vqa]")
        keys = sorted(report.vqa)
        out.append("\t".join(keys))
        out.append("\t".join(_fmt(report.vqa[k]) for k in keys))
    if report.nutrition:
        out.append("[nutrition]")
        out.append("field\tMAE / MAE%")
        for r in report.nutrition:
            out.append(f"{r['field']}\t{nutrition_cell(r['mae'], r['mae_pct'])}")
    if report.segmentation:
        out.append("[segmentation]")
        out.append("refer@k\tcIoU\tAcc")
        for r in report.segmentation:
            out.append(f"{r['refer_k']}\t{_fmt(r['ciou'])}\t{_fmt(r['acc'])}")
    if report.reasoning:
        out.append("[reasoning]")
        out.append("split\tgIoU\tcIoU")
        for r in report.reasoning:
            out.append(f"{r.get('split', 'all')}\t{_fmt(r['giou'])}\t{_fmt(r['ciou'])}")
    if report.extra:
        out.append("[extra]")
        for k in sorted(report.extra):
            out.append(f"{k}\t{_fmt(report.extra[k])}")
    return ("\n".join(out) + "\n").encode()
