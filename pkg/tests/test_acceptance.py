"""Acceptance suite: one test (and one PASS/FAIL line) per primary criterion."""

import copy
import itertools
import math
import random
import time
from collections import Counter
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest
import torch

from nutriseg import cli
from nutriseg.datamodel import Conversation, LossWeights, MaskImage, TaskToken, Turn
from nutriseg.dialogue_forge import (
    DialogueParseError,
    Rejection,
    assemble_dialogue_prompt,
    assemble_reasonseg_prompt,
    mock_backend,
    parse_dialogue_response,
    parse_reasonseg_response,
    plan_sample,
    render_dialogue_response,
    render_reasonseg_response,
)
from nutriseg.evalkit import SegEvalSample, ciou, giou, ingredient_set_metrics, lcs_length, rouge_l
from nutriseg.harness import default_harness, evaluate_fit, overfit_harness
from nutriseg.instruction_forge import (
    SYSTEM_MESSAGE,
    ReferMixPolicy,
    build_segmentation,
    render_for_training,
    select_visual,
)
from nutriseg.losses import dice_per_mask, mask_loss, mask_terms, nutrition_loss, text_ce
from nutriseg.model import LoRALinear, apply_lora, build_model, merge_lora
from nutriseg.synth import INGREDIENT_NAMES
from nutriseg.training import ImageCache, Sampler, collate, compute_losses, stage1_plan, stage2_plan
from nutriseg.tokenizer import Tokenizer, build_base_vocab

from conftest import ACCEPTANCE, WORDS, small_config, synth_record

D = torch.float64
HARNESS_STEPS = 2000
SMOKE = Path(__file__).resolve().parents[1] / "configs" / "smoke.yaml"


def verdict(n: int, title: str, failures: list[str], detail: str = "") -> None:
    ok = not failures
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
    if failures:
        line += "  failures: " + "; ".join(failures[:5])
    ACCEPTANCE.append(line)
    print(line)
    assert ok, line


# -- 1: gradients ---------------------------------------------------------------------

FD_STEP = 1e-5
REL_TOL = 1e-4
ABS_FLOOR = 1e-9  # directional derivatives that are identically zero
LOSS_FIELDS = ("l_txt", "mae_term", "mse_term", "l_nutrition", "bce_term", "dice_term", "l_mask", "total")
ALL_TOKENS_TEXT = (
    "The dish has <total_mass> <total_cal> <total_carb> <total_fat> <total_pro> ; "
    "the beef weighs <mass_1> <cal_1> <carb_1> <fat_1> <pro_1> . "
    "The fish is masked as <seg_1> and the lemon as <seg_2> ."
)


def _param_groups(model) -> dict[str, list[torch.nn.Parameter]]:
    groups: dict[str, list] = {}
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        if "lora_" in name:
            key = "lora"
        elif name.startswith("heads."):
            key = ".".join(name.split(".")[:2])
        else:
            key = name.split(".")[0]
        groups.setdefault(key, []).append(p)
    return groups


def _grad_batch(tokenizer, rng: np.random.Generator, size: int):
    convs, images = [], []
    for _ in range(2):
        labels = {}
        for f in ("mass", "cal", "carb", "fat", "pro"):
            labels[TaskToken("nutrition_dish", f)] = float(rng.uniform(5, 500))
            labels[TaskToken("nutrition_ingredient", f, 1)] = float(rng.uniform(1, 200))
        for i in (1, 2):
            m = np.zeros((size, size), dtype=np.uint8)
            y0, x0 = rng.integers(0, size // 2, size=2)
            y1, x1 = y0 + rng.integers(2, size // 2 + 1), x0 + rng.integers(2, size // 2 + 1)
            m[y0:y1, x0:x1] = 1
            labels[TaskToken("segmentation", None, i)] = MaskImage(m)
        turns = (Turn("system", SYSTEM_MESSAGE), Turn("user", "What is this dish?"), Turn("assistant", ALL_TOKENS_TEXT, token_labels=labels))
        convs.append(render_for_training(Conversation(turns, "nutrition", "grad"), tokenizer))
        images.append(torch.tensor(rng.random((size, size, 3)), dtype=D))
    return collate(convs, images, tokenizer.pad_id)


def _check_model_instance(seed: int, tokenizer) -> tuple[list[str], Counter]:
    rng = np.random.default_rng(seed)
    model = build_model(small_config(tokenizer.vocab_size, init_seed=seed), tokenizer).double().eval()
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, LoRALinear):
                m.lora_B.normal_(0, 0.1, generator=g)
    batch = _grad_batch(tokenizer, rng, model.cfg.image_size)
    weights = LossWeights()
    groups = _param_groups(model)
    params = [p for ps in groups.values() for p in ps]

    analytic: dict[str, list[torch.Tensor]] = {}
    for name in LOSS_FIELDS:
        value = getattr(compute_losses(model, batch, weights), name)
        grads = torch.autograd.grad(value, params, allow_unused=True)
        analytic[name] = [torch.zeros_like(p) if gr is None else gr for p, gr in zip(params, grads)]

    failures, nontrivial = [], Counter()
    offset = 0
    for gname, ps in groups.items():
        dirs = [torch.randn(p.shape, generator=g, dtype=D) for p in ps]
        norm = math.sqrt(sum(float((d * d).sum()) for d in dirs))
        dirs = [d / norm for d in dirs]
        vals = {}
        for sign in (1.0, -1.0):
            with torch.no_grad():
                for p, d in zip(ps, dirs):
                    p.add_(sign * FD_STEP * d)
                out = compute_losses(model, batch, weights)
                for p, d in zip(ps, dirs):
                    p.sub_(sign * FD_STEP * d)
            vals[sign] = {k: float(getattr(out, k)) for k in LOSS_FIELDS}
        for name in LOSS_FIELDS:
            numeric = (vals[1.0][name] - vals[-1.0][name]) / (2 * FD_STEP)
            exact = sum(float((gr * d).sum()) for gr, d in zip(analytic[name][offset : offset + len(ps)], dirs))
            scale = max(abs(exact), abs(numeric))
            if abs(exact - numeric) > REL_TOL * scale + ABS_FLOOR:
                failures.append(f"seed {seed} {name}/{gname}: {exact:.9g} vs {numeric:.9g}")
            if scale > 1e-8:
                nontrivial[(name, gname)] += 1
        offset += len(ps)
    return failures, nontrivial


def test_criterion_1_gradients():
    t0 = time.perf_counter()
    tokenizer = Tokenizer(build_base_vocab([WORDS]), max_indices=20)
    failures: list[str] = []
    nontrivial: Counter = Counter()
    for seed in range(20):
        f, c = _check_model_instance(seed, tokenizer)
        failures += f
        nontrivial += c

    # every loss term must actually reach the parameters it should train
    groups = _param_groups(build_model(small_config(tokenizer.vocab_size), tokenizer))
    heads = [k for k in groups if k.startswith("heads.")]
    expected = [("l_txt", k) for k in ("lora", "tok_embed", "lm_head")]
    expected += [(t, k) for t in ("mae_term", "mse_term", "l_nutrition") for k in heads + ["proj", "lora"]]
    expected += [(t, k) for t in ("bce_term", "dice_term", "l_mask") for k in ("mask_decoder", "proj", "lora")]
    for key in expected:
        if nontrivial[key] < 20:
            failures.append(f"{key} exercised on {nontrivial[key]}/20 instances")

    # loss functions on their raw inputs
    g = torch.Generator().manual_seed(11)
    for _ in range(20):
        n, v = int(torch.randint(3, 9, (1,), generator=g)), int(torch.randint(2, 12, (1,), generator=g))
        logits = torch.randn(n, v, dtype=D, generator=g, requires_grad=True)
        targets = torch.randint(0, v, (n,), generator=g)
        yh = (torch.rand(n, dtype=D, generator=g) * 6).requires_grad_()
        y = torch.rand(n, dtype=D, generator=g) * 6
        p = (torch.rand(2, 5, 5, dtype=D, generator=g) * 0.9 + 0.05).requires_grad_()
        t = (torch.rand(2, 5, 5, generator=g) > 0.5).to(D)
        for fn, x in (
            (lambda a: text_ce(a, targets, [(0, n)]), logits),
            (lambda a: nutrition_loss(a, y, 0.1, 1e-4), yh),
            (lambda a: mask_loss(a, t, 2.0, 0.5), p),
        ):
            if not torch.autograd.gradcheck(fn, (x,), eps=1e-6, atol=1e-9, rtol=REL_TOL, raise_exception=False):
                failures.append("raw-input gradcheck")
    elapsed = time.perf_counter() - t0
    if elapsed >= 120:
        failures.append(f"runtime {elapsed:.0f}s")
    verdict(1, "analytic gradients match central differences", failures, f"20 instances, {elapsed:.1f}s")


# -- 2: loss identities ---------------------------------------------------------------

def test_criterion_2_loss_identities():
    failures = []
    targets = torch.tensor([1, 3, 0, 2])
    logits = torch.full((4, 5), -1e4, dtype=D)
    logits[torch.arange(4), targets] = 0.0
    if abs(text_ce(logits, targets, [(0, 4)]).item()) > 1e-12:
        failures.append("perfect CE")
    y = torch.tensor([3.0, 40.0, 7.5], dtype=D)
    if nutrition_loss(y, y, 0.1, 1e-4).item() != 0.0:
        failures.append("perfect nutrition")
    m = torch.tensor([[[1.0, 0.0], [0.0, 1.0]]], dtype=D)
    bce, dice = mask_terms(m, m)
    if not (bce.item() < 1e-6 and dice.item() == 0.0):
        failures.append("perfect mask")
    for v in (2, 7, 384):
        if abs(text_ce(torch.zeros(6, v, dtype=D), torch.randint(0, v, (6,)), [(1, 5)]).item() - math.log(v)) > 1e-12:
            failures.append(f"uniform CE V={v}")
    t = torch.randint(0, 2, (3, 5, 5)).to(D)
    if abs(mask_terms(torch.full((3, 5, 5), 0.5, dtype=D), t)[0].item() - math.log(2)) > 1e-9:
        failures.append("BCE(0.5)")
    pred = torch.ones(1, 2, 2, dtype=D)
    half = torch.tensor([[[1.0, 1.0], [0.0, 0.0]]], dtype=D)
    if abs(dice_per_mask(pred, half, eps=0.0).item() - 1 / 3) > 1e-15:
        failures.append("Dice 1/3 without smoothing")
    if abs(dice_per_mask(pred, half).item() - 2 / 7) > 1e-15:
        failures.append("Dice 2/7 with eps=1")
    worked = nutrition_loss(torch.tensor([12.0, 19.0], dtype=D), torch.tensor([10.0, 20.0], dtype=D), 0.1, 0.0001)
    if abs(worked.item() - 0.15025) > 1e-12:
        failures.append(f"worked nutrition value {worked.item()!r}")
    verdict(2, "loss identities", failures)


# -- 3: metric oracles ----------------------------------------------------------------

def _pixel_counts(p, t):
    inter = union = 0
    for row_p, row_t in zip(p.tolist(), t.tolist()):
        for a, b in zip(row_p, row_t):
            inter += a and b
            union += a or b
    return inter, union


@lru_cache(maxsize=None)
def _lcs_rec(a, b):
    if not a or not b:
        return 0
    if a[0] == b[0]:
        return 1 + _lcs_rec(a[1:], b[1:])
    return max(_lcs_rec(a[1:], b), _lcs_rec(a, b[1:]))


def test_criterion_3_metric_oracles():
    failures = []
    rng = np.random.default_rng(2024)
    for k in range(1000):
        samples = []
        for _ in range(int(rng.integers(1, 4))):
            h, w = (int(x) for x in rng.integers(1, 17, size=2))
            n = int(rng.integers(1, 4))
            density = rng.uniform(0.05, 0.95)
            samples.append(SegEvalSample([rng.random((h, w)) < density for _ in range(n)], [rng.random((h, w)) < density for _ in range(n)]))
        tot_i = tot_u = 0
        per = []
        for s in samples:
            si = su = 0
            for p, t in zip(s.predicted, s.target):
                i, u = _pixel_counts(p, t)
                si, su = si + i, su + u
            tot_i, tot_u = tot_i + si, tot_u + su
            per.append(si / su if su else 1.0)
        want_c = tot_i / tot_u if tot_u else 1.0
        want_g = math.fsum(per) / len(per)
        if ciou(samples) != want_c or abs(giou(samples) - want_g) > 1e-15:
            failures.append(f"mask set {k}")

    words = random.Random(5)
    for k in range(500):
        a = tuple(words.choice("abcde") for _ in range(words.randint(0, 10)))
        b = tuple(words.choice("abcde") for _ in range(words.randint(0, 10)))
        if lcs_length(a, b) != _lcs_rec(a, b):
            failures.append(f"lcs {k}")
        if a and b:
            lcs = _lcs_rec(a, b)
            want = 0.0 if lcs == 0 else 2 * (lcs / len(b)) * (lcs / len(a)) / (lcs / len(b) + lcs / len(a))
            if abs(rouge_l(" ".join(a), " ".join(b)) - want) > 1e-12:
                failures.append(f"rouge-l {k}")

    universe = "abcdef"
    subsets = [set(c) for r in range(7) for c in itertools.combinations(universe, r)]
    for a in subsets:
        for b in subsets:
            iou, f1 = ingredient_set_metrics(a, b)
            if f1 < iou:
                failures.append(f"F1<IoU for {sorted(a)},{sorted(b)}")

    p1 = np.array([[1, 1], [1, 0]], dtype=np.uint8)
    t1 = np.array([[1, 1], [0, 1]], dtype=np.uint8)
    p2 = np.array([[1, 1], [1, 0]], dtype=np.uint8)
    worked = [SegEvalSample([p1], [t1]), SegEvalSample([p2], [p2])]
    if ciou(worked) != 5 / 7 or giou(worked) != 0.75:
        failures.append("worked values")
    verdict(3, "metric oracles", failures, "1000 mask sets, 500 LCS pairs, 64x64 subset pairs")


# -- 4: ratio statistics --------------------------------------------------------------

STAGE1 = {"vireo172": 3, "recipe1m": 4, "nutrition5k": 5, "foodseg103": 6, "uecfoodpix": 7}
STAGE2 = {**STAGE1, "fooddialogues": 8, "foodreasonseg": 9}


def test_criterion_4_ratio_statistics():
    t0 = time.perf_counter()
    failures, stats = [], {}

    plan = stage1_plan()
    sampler = Sampler(plan, {k: list(range(n)) for k, n in STAGE1.items()}, seed=0)
    group = {ds: grp for ds, (grp, _) in plan.datasets.items()}
    counts = Counter(group[sampler.draw(t)[0]] for t in range(10_000))
    for grp, p in {"vqa": 0.5, "nutrition": 0.25, "segmentation": 0.25}.items():
        stats[grp] = counts[grp] / 10_000
        if abs(stats[grp] - p) > 0.02:
            failures.append(f"stage-1 {grp} {stats[grp]:.4f}")

    sampler = Sampler(stage2_plan(), {k: list(range(n)) for k, n in STAGE2.items()}, seed=0)
    gen = sum(sampler.draw(t)[0] in ("fooddialogues", "foodreasonseg") for t in range(22_000)) / 22_000
    stats["generated"] = gen
    if abs(gen - 15 / 22) > 0.02:
        failures.append(f"stage-2 generated share {gen:.4f}")

    records = [synth_record(f"q{i}", "foodseg103", 2 + i % 4, seed=i) for i in range(25)]
    absent_pool = {r.record_id: [n for n in INGREDIENT_NAMES if n not in {i.name for i in r.ingredients}] for r in records}
    n = 100_000
    zero = sum(
        build_segmentation(records[k % 25], ReferMixPolicy(), absent_pool[records[k % 25].record_id], k).meta["form"] == "zero"
        for k in range(n)
    )
    stats["one_to_zero"] = zero / n
    if abs(zero / n - 0.02) > 0.005:
        failures.append(f"one-to-zero rate {zero / n:.4f}")

    # absent counts are drawn only for one-to-zero queries: measure them on queries forced onto that branch
    forced = ReferMixPolicy(one_to_zero_rate=1.0)
    sizes = Counter(
        len(build_segmentation(records[k % 25], forced, absent_pool[records[k % 25].record_id], k).meta["absent"]) for k in range(n)
    )
    for m, p in {1: 0.5, 2: 0.25, 3: 0.25}.items():
        stats[f"absent_{m}"] = sizes[m] / n
        if abs(sizes[m] / n - p) > 0.02:
            failures.append(f"absent count {m}: {sizes[m] / n:.4f}")

    rec = synth_record("vis", "nutrition5k", 2)
    over = sum(select_visual(rec, s).kind == "overhead" for s in range(10_000)) / 10_000
    stats["overhead"] = over
    if abs(over - 0.7) > 0.02:
        failures.append(f"overhead share {over:.4f}")

    elapsed = time.perf_counter() - t0
    if elapsed >= 300:
        failures.append(f"runtime {elapsed:.0f}s")
    detail = ", ".join(f"{k}={v:.4f}" for k, v in stats.items()) + f", {elapsed:.0f}s"
    verdict(4, "sampling ratio statistics", failures, detail)


# -- 5: dataset rules -----------------------------------------------------------------

def _dialogue_rule(n):
    return (1, 3) if n <= 3 else (3, 4) if n <= 10 else (7, 5)


def _reasonseg_rule(n):
    return None if n < 3 else 3 if n == 3 else 4 if n <= 10 else 5


def test_criterion_5_dataset_rules():
    failures = []
    for n in range(1, 20):
        for s in range(3):
            rec = synth_record(f"rule{n}-{s}", "nutrition5k", n, seed=s, size=128)
            plan = plan_sample(rec, "dialogue", s)
            if isinstance(plan, Rejection) or (len(set(plan.topics)), plan.rounds) != _dialogue_rule(n):
                failures.append(f"dialogue n={n}")
            seg = synth_record(f"rule{n}-{s}", "foodseg103", n, seed=s, size=128)
            plan = plan_sample(seg, "reason_seg", s)
            want = _reasonseg_rule(n)
            got = None if isinstance(plan, Rejection) else plan.rounds
            if got != want:
                failures.append(f"reason-seg n={n}: {got} != {want}")
    verdict(5, "topic and round planning rules", failures, "ingredient counts 1-19")


# -- 6: parser round-trips ------------------------------------------------------------

def _mutate(text: str, rng: random.Random) -> str:
    chars = list(text)
    for _ in range(rng.randint(1, 6)):
        op = rng.random()
        pos = rng.randrange(len(chars) + 1)
        if op < 0.4 and chars:
            del chars[min(pos, len(chars) - 1)]
        elif op < 0.8:
            chars.insert(pos, rng.choice("<>{}[]_:.\n 0123456789sgtoal"))
        elif chars:
            j = rng.randrange(len(chars))
            chars[min(pos, len(chars) - 1)], chars[j] = chars[j], chars[min(pos, len(chars) - 1)]
    return "".join(chars)


def test_criterion_6_parser_round_trips():
    t0 = time.perf_counter()
    failures, samples = [], []
    for seed in range(1000):
        rec = synth_record(f"m{seed}", "nutrition5k", 1 + seed % 12, seed=seed, size=128)
        plan = plan_sample(rec, "dialogue", seed)
        resp = mock_backend(assemble_dialogue_prompt(rec, plan.topics, plan.rounds), seed)
        if render_dialogue_response(parse_dialogue_response(resp, rec, plan.rounds, seed)) != resp:
            failures.append(f"dialogue seed {seed}")
        samples.append((resp, rec))

        rec = synth_record(f"s{seed}", "foodseg103", 3 + seed % 10, seed=seed, size=128)
        plan = plan_sample(rec, "reason_seg", seed)
        resp = mock_backend(assemble_reasonseg_prompt(rec, plan.rounds), seed)
        if render_reasonseg_response(parse_reasonseg_response(resp, rec, plan.rounds, seed)) != resp:
            failures.append(f"reason-seg seed {seed}")
        samples.append((resp, rec))

    rng = random.Random(0)
    alphabet = "USERASSISTANT: <>{}[]_:.0123456789\n segtotalcalmass_1fishlemon"
    crashes = 0
    for k in range(100_000):
        base, rec = samples[k % len(samples)]
        text = _mutate(base, rng) if k % 2 else "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 80)))
        parse = parse_dialogue_response if (k // 2) % 2 else parse_reasonseg_response
        try:
            parse(text, rec, rng.randint(1, 5))
        except DialogueParseError:
            pass
        except Exception as exc:  # anything else is a crash
            crashes += 1
            if crashes <= 3:
                failures.append(f"fuzz {k}: {type(exc).__name__}: {exc}")
    elapsed = time.perf_counter() - t0
    verdict(6, "mock -> parse -> render round-trips and fuzzing", failures, f"1000 seeds x 2 modes, 1e5 fuzz inputs, {crashes} crashes, {elapsed:.0f}s")


# -- 7 and 8: overfit harness ---------------------------------------------------------

@pytest.fixture(scope="module")
def fitted():
    torch.set_num_threads(1)
    model, tok, convs, images = default_harness(0)
    report, _ = overfit_harness(model, tok, convs, images, HARNESS_STEPS)
    return model, tok, convs, images, report


@pytest.fixture(scope="module")
def ablated():
    torch.set_num_threads(1)
    model, tok, convs, images = default_harness(0)
    at_init = evaluate_fit(model, tok, convs, images)
    report, _ = overfit_harness(model, tok, convs, images, HARNESS_STEPS, weights=LossWeights(lambda_mask=0.0))
    return at_init, report


def _lora_checks(model, tok, convs, images) -> list[str]:
    failures = []
    base = build_model(model.cfg, tok, lora=False).eval()
    adapted = apply_lora(copy.deepcopy(base)).eval()
    trained = copy.deepcopy(model).eval()
    merged = merge_lora(copy.deepcopy(model)).eval()
    cache = ImageCache(None, model.cfg.image_size, images)
    with torch.no_grad():
        for conv in convs[::4]:
            r = render_for_training(conv, tok)
            img = cache.get(r.image)[None]
            ids = torch.tensor([r.ids])
            if not torch.equal(base(img, ids)[0], adapted(img, ids)[0]):
                failures.append(f"zero-init LoRA changed outputs on {conv.source_record}")
            ref, got = trained(img, ids)[0], merged(img, ids)[0]
            rel = float((got - ref).abs().max() / ref.abs().max())
            if rel >= 1e-5:
                failures.append(f"merged LoRA rel error {rel:.2e} on {conv.source_record}")
    return failures


def test_criterion_7_overfit_harness(fitted, ablated):
    model, tok, convs, images, rep = fitted
    at_init, abl = ablated
    failures = []
    if not rep.mask_iou > 0.9:
        failures.append(f"mask IoU {rep.mask_iou:.4f}")
    if not rep.nutrition_mae_pct_max < 5.0:
        failures.append(f"nutrition MAE% {rep.nutrition_mae_pct_max:.2f}")
    if rep.exact_match != 1.0:
        failures.append(f"exact match {rep.exact_match:.4f}")
    if rep.seconds >= 1800:
        failures.append(f"runtime {rep.seconds:.0f}s")
    drift = abs(abl.mask_iou - at_init.mask_iou)
    if drift > 0.05:
        failures.append(f"lambda_mask=0 moved IoU {at_init.mask_iou:.4f} -> {abl.mask_iou:.4f}")
    failures += _lora_checks(model, tok, convs, images)
    detail = (
        f"IoU={rep.mask_iou:.4f}, MAE%max={rep.nutrition_mae_pct_max:.2f}, exact={rep.exact_match:.3f}, "
        f"{rep.seconds:.0f}s; ablation IoU {at_init.mask_iou:.4f}->{abl.mask_iou:.4f}"
    )
    verdict(7, "overfit harness mechanism", failures, detail)


def test_criterion_8_one_to_any(fitted):
    rep = fitted[-1]
    failures = []
    if rep.acc_absent != 1.0:
        failures.append(f"acc_absent {rep.acc_absent:.4f}")
    if rep.acc_existent != 1.0:
        failures.append(f"acc_existent {rep.acc_existent:.4f}")
    verdict(8, "refuses absent objects, segments present ones", failures, f"acc_existent={rep.acc_existent}, acc_absent={rep.acc_absent}")


# -- 9: determinism -------------------------------------------------------------------

PIPELINE = (
    ["synth"],
    ["forge-stage1"],
    ["forge-stage2"],
    ["train"],
    ["eval"],
    ["report"],
    ["train", "--stage", "2"],
    ["eval", "--stage", "2"],
)


def _run_pipeline(root: Path, monkeypatch) -> dict[str, bytes]:
    root.mkdir()
    monkeypatch.chdir(root)
    for step in PIPELINE:
        code = cli.main([*step, "--config", str(SMOKE), "--seed", "7"])
        assert code == 0, f"{step} exited {code}"
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_9_determinism(tmp_path, monkeypatch, capsys):
    a = _run_pipeline(tmp_path / "a", monkeypatch)
    b = _run_pipeline(tmp_path / "b", monkeypatch)
    capsys.readouterr()
    failures = []
    if set(a) != set(b):
        failures.append(f"file sets differ: {sorted(set(a) ^ set(b))[:3]}")
    failures += [f"{name} differs" for name in sorted(set(a) & set(b)) if a[name] != b[name]]
    kinds = {
        "shards": any(k.endswith(".jsonl") for k in a),
        "logs": any(k.endswith("train.log") for k in a),
        "checkpoints": any(k.endswith(".ckpt") for k in a),
        "reports": any(k.endswith("report.json") for k in a) and any(k.endswith(".png") for k in a),
    }
    failures += [f"no {k} produced" for k, seen in kinds.items() if not seen]
    verdict(9, "bit-identical pipeline reruns", failures, f"{len(a)} files compared")
