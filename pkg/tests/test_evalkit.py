import itertools
import json
import math
import random
from functools import lru_cache

import numpy as np
import pytest

from nutriseg.datamodel import MaskImage, TaskToken
from nutriseg.evalkit import (
    MetricReport,
    SegEvalSample,
    UndefinedMetricError,
    ciou,
    corpus_bleu,
    emit_report,
    giou,
    ingredient_set_metrics,
    lcs_length,
    macro_set_metrics,
    mask_iou,
    nutrition_cell,
    nutrition_metrics,
    parse_prediction,
    recipe_metrics,
    refusal_flags,
    response_accuracy,
    rouge_l,
)


def _mask(bits, w):
    return np.array(bits, dtype=np.uint8).reshape(-1, w)


def _counts_by_loop(p, t):
    inter = union = 0
    for row_p, row_t in zip(p.tolist(), t.tolist()):
        for a, b in zip(row_p, row_t):
            inter += a and b
            union += a or b
    return inter, union


def test_worked_values():
    # (I, U) = (2, 4) and (3, 3)
    p1, t1 = _mask([1, 1, 1, 0], 2), _mask([1, 1, 0, 1], 2)
    p2 = t2 = _mask([1, 1, 1, 0], 2)
    samples = [SegEvalSample([p1], [t1]), SegEvalSample([p2], [t2])]
    assert ciou(samples) == 5 / 7
    assert giou(samples) == 0.75


def test_identical_and_disjoint():
    m = _mask([1, 0, 1, 1], 2)
    assert ciou([SegEvalSample([m], [m])]) == giou([SegEvalSample([m], [m])]) == 1.0
    assert mask_iou(m, 1 - m) == 0.0
    assert ciou([SegEvalSample([m], [1 - m])]) == 0.0


def test_brute_force_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        samples = []
        for _ in range(int(rng.integers(1, 4))):
            h, w = (int(x) for x in rng.integers(1, 17, size=2))
            k = int(rng.integers(1, 4))
            samples.append(SegEvalSample([rng.random((h, w)) < 0.4 for _ in range(k)], [rng.random((h, w)) < 0.4 for _ in range(k)]))
        tot_i = tot_u = 0
        per = []
        for s in samples:
            si = su = 0
            for p, t in zip(s.predicted, s.target):
                i, u = _counts_by_loop(p, t)
                si, su = si + i, su + u
            tot_i, tot_u = tot_i + si, tot_u + su
            per.append(si / su if su else 1.0)
        assert ciou(samples) == (tot_i / tot_u if tot_u else 1.0)
        assert giou(samples) == pytest.approx(sum(per) / len(per), abs=1e-15)


def test_mask_shape_mismatch():
    with pytest.raises(ValueError):
        mask_iou(np.zeros((2, 2)), np.zeros((2, 3)))


def test_mask_image_inputs():
    a = MaskImage(_mask([1, 1, 0, 0], 2))
    assert mask_iou(a, a) == 1.0


def test_response_accuracy():
    ok = SegEvalSample([], [], [False], [False])
    assert response_accuracy([ok, SegEvalSample([], [], [True], [True])]) == (1.0, 1.0)
    refused = SegEvalSample([], [], [True], [False])
    assert response_accuracy([ok, ok, ok, refused])[0] == 0.75
    never = [SegEvalSample([], [], [False, False], [True, True]) for _ in range(3)]
    assert response_accuracy(never)[1] == 0.0
    assert math.isnan(response_accuracy(never)[0])


def test_nutrition_metrics():
    assert nutrition_metrics([110, 290], [100, 300]) == (10.0, 5.0)
    assert nutrition_metrics([3, 4], [3, 4]) == (0.0, 0.0)
    with pytest.raises(UndefinedMetricError):
        nutrition_metrics([1.0], [0.0])
    assert nutrition_cell(67.3, 26.6) == "67.3 / 26.6 %"


def test_set_metrics():
    iou, f1 = ingredient_set_metrics(["beef", "onion", "carrot"], ["onion", "carrot", "potato"])
    assert iou == 0.5 and f1 == pytest.approx(2 / 3, abs=1e-15)
    assert ingredient_set_metrics(["a"], ["a"]) == (1.0, 1.0)
    assert ingredient_set_metrics(["a"], ["b"]) == (0.0, 0.0)
    assert ingredient_set_metrics([], []) == (1.0, 1.0)
    assert macro_set_metrics([(["a"], ["a"]), (["a"], ["b"])]) == (0.5, 0.5)


def test_f1_dominates_iou_on_full_enumeration():
    universe = "abcdef"
    subsets = [set(c) for r in range(7) for c in itertools.combinations(universe, r)]
    for a in subsets:
        for b in subsets:
            iou, f1 = ingredient_set_metrics(a, b)
            assert f1 >= iou


@lru_cache(maxsize=None)
def _lcs_rec(a, b):
    if not a or not b:
        return 0
    if a[0] == b[0]:
        return 1 + _lcs_rec(a[1:], b[1:])
    return max(_lcs_rec(a[1:], b), _lcs_rec(a, b[1:]))


def test_lcs_matches_recursive_oracle():
    rng = random.Random(4)
    for _ in range(300):
        a = tuple(rng.choice("abcd") for _ in range(rng.randint(0, 9)))
        b = tuple(rng.choice("abcd") for _ in range(rng.randint(0, 9)))
        assert lcs_length(a, b) == _lcs_rec(a, b)


def test_rouge_l_worked_value():
    assert rouge_l("a b c d", "a c b d") == 0.75
    assert rouge_l("x y", "a b") == 0.0


def test_recipe_metrics_extremes():
    text = "Step 1: grill the fish for ten minutes. Step 2: add lemon juice."
    bleu, rl = recipe_metrics([text], [text])
    assert bleu == pytest.approx(100.0) and rl == 1.0
    assert recipe_metrics(["zzz qqq"], ["alpha beta gamma"]) == (0.0, 0.0)
    assert corpus_bleu([""], ["some text here"]) == 0.0


def test_parse_refusal():
    p = parse_prediction("The watermelon is not found in this picture.", "segmentation")
    assert p.refused == ["watermelon"]
    assert refusal_flags(p, ["fish", "watermelon"], ["watermelon"]) == ([False, True], [False, True])


def test_parse_seg_slots_order():
    p = parse_prediction("Here: <seg_1>, <seg_2>.", "segmentation")
    assert [t for t in p.tokens if not t.is_nutrition] == [TaskToken("segmentation", None, 1), TaskToken("segmentation", None, 2)]
    named = parse_prediction("The fish is masked as <seg_1> and the lemon as <seg_2>.", "segmentation")
    assert [n for n, _ in named.seg_slots] == ["fish", "lemon"]


def test_parser_is_total():
    rng = random.Random(9)
    alphabet = "<>_seg123 totalcal.,:;is not found in this picture\n"
    for _ in range(3000):
        s = "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 60)))
        for tag in ("segmentation", "ingredient", "classification", "nutrition"):
            parse_prediction(s, tag)
    assert not parse_prediction(None, "segmentation").parsed


def _report():
    r = MetricReport()
    r.vqa = {"top1": 1.0, "ingredient_iou": 0.5}
    r.nutrition = [{"field": "total_cal", "mae": 67.3, "mae_pct": 26.6, "n": 4}]
    r.segmentation = [{"refer_k": "1", "ciou": 0.9, "acc": 1.0, "n": 3}, {"refer_k": "zero", "ciou": float("nan"), "acc": 1.0, "n": 2}]
    r.extra = {"answers": 5}
    return r


def test_report_emission():
    a, b = emit_report(_report(), "table"), emit_report(_report(), "table")
    assert a == b
    text = a.decode()
    assert "refer@k" in text and "67.3 / 26.6 %" in text
    back = MetricReport.from_json(json.loads(emit_report(_report(), "json")))
    assert emit_report(back, "json") == emit_report(_report(), "json")
    with pytest.raises(ValueError):
        emit_report(_report(), "xml")
