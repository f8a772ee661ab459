from collections import Counter

import pytest
import torch

from nutriseg.datamodel import Conversation, LossWeights, Turn
from nutriseg.instruction_forge import SYSTEM_MESSAGE, build_nutrition, render_for_training
from nutriseg.model import build_model, load_checkpoint
from nutriseg.training import (
    NumericError,
    Sampler,
    StagePlan,
    collate,
    make_optimizer,
    run_stage,
    single_task_plan,
    stage1_plan,
    stage2_plan,
    train_step,
    warmup_decay,
)

from conftest import small_config

STAGE1 = {"vireo172": 3, "recipe1m": 4, "nutrition5k": 5, "foodseg103": 6, "uecfoodpix": 7}
STAGE2 = {**STAGE1, "fooddialogues": 8, "foodreasonseg": 9}


def _registry(sizes):
    return {k: list(range(n)) for k, n in sizes.items()}


def test_stage1_group_frequencies():
    plan = stage1_plan()
    s = Sampler(plan, _registry(STAGE1), seed=0)
    group = {ds: g for ds, (g, _) in plan.datasets.items()}
    counts = Counter(group[s.draw(t)[0]] for t in range(10_000))
    for g, p in {"vqa": 0.5, "nutrition": 0.25, "segmentation": 0.25}.items():
        assert abs(counts[g] / 10_000 - p) <= 0.02


def test_stage2_generated_share():
    plan = stage2_plan()
    s = Sampler(plan, _registry(STAGE2), seed=1)
    gen = sum(s.draw(t)[0] in ("fooddialogues", "foodreasonseg") for t in range(22_000))
    assert abs(gen / 22_000 - 15 / 22) <= 0.02


def test_single_dataset_plan_always_draws_it():
    s = Sampler(single_task_plan("nutrition5k"), {"nutrition5k": [0, 1, 2]}, 0)
    assert {s.draw(t)[0] for t in range(500)} == {"nutrition5k"}
    assert {s.draw(t)[1] for t in range(500)} == {0, 1, 2}


def test_draws_are_random_access():
    s = Sampler(stage1_plan(), _registry(STAGE1), 7)
    forward = [s.draw(t) for t in range(50)]
    backward = [s.draw(t) for t in reversed(range(50))][::-1]
    assert forward == backward
    assert s.batch(3) == forward[12:16]


def test_missing_shard():
    with pytest.raises(KeyError):
        Sampler(stage1_plan(), {**_registry(STAGE1), "uecfoodpix": []}, 0)


def test_plan_validation():
    with pytest.raises(ValueError):
        StagePlan(1, {"a": 1}, {"x": ("b", 1)})
    with pytest.raises(ValueError):
        StagePlan(1, {"a": 0}, {"x": ("a", 1)})


def test_warmup_decay_shape():
    assert warmup_decay(0, 100, 2000) == pytest.approx(0.01)
    assert warmup_decay(99, 100, 2000) == 1.0
    assert warmup_decay(2000, 100, 2000) == 0.0
    vals = [warmup_decay(s, 100, 2000) for s in range(100, 2000)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def _nutrition_batch(tokenizer, fish_record):
    conv = build_nutrition(fish_record, 5, 0)
    r = render_for_training(conv, tokenizer)
    img = torch.rand(16, 16, 3, generator=torch.Generator().manual_seed(0))
    return collate([r, r], [img, img], tokenizer.pad_id)


def test_zero_lr_leaves_parameters(small_model, tokenizer, fish_record):
    plan = single_task_plan("x", lr=0.0)
    state = make_optimizer(small_model, plan)
    before = {k: v.clone() for k, v in small_model.state_dict().items()}
    train_step(small_model, _nutrition_batch(tokenizer, fish_record), LossWeights(), state)
    for k, v in small_model.state_dict().items():
        assert torch.equal(v, before[k]), k


def test_frozen_base_unchanged(small_model, tokenizer, fish_record):
    frozen = {n: p.clone() for n, p in small_model.named_parameters() if not p.requires_grad}
    head = small_model.heads["dish_cal"][0].weight.detach().clone()
    assert any(n.startswith("blocks.") for n in frozen)
    state = make_optimizer(small_model, single_task_plan("x", lr=1e-2, warmup_steps=0))
    for _ in range(3):
        train_step(small_model, _nutrition_batch(tokenizer, fish_record), LossWeights(), state)
    params = dict(small_model.named_parameters())
    for n, v in frozen.items():
        assert torch.equal(params[n], v), n
    assert not torch.equal(params["heads.dish_cal.0.weight"], head)


def test_nutrition_loss_decreases(small_model, tokenizer, fish_record):
    batch = _nutrition_batch(tokenizer, fish_record)
    state = make_optimizer(small_model, single_task_plan("x", lr=1e-3, warmup_steps=0, steps=10_000))
    w = LossWeights()
    vals = [train_step(small_model, batch, w, state)[1].l_nutrition.item() for _ in range(50)]
    rises = sum(b > a for a, b in zip(vals, vals[1:]))
    assert rises <= 5 and vals[-1] < vals[0]


def test_non_finite_loss_aborts(small_model, tokenizer, fish_record):
    state = make_optimizer(small_model, single_task_plan("x"))
    with torch.no_grad():
        small_model.heads["dish_cal"][-1].bias.fill_(float("nan"))
    with pytest.raises(NumericError):
        train_step(small_model, _nutrition_batch(tokenizer, fish_record), LossWeights(), state)


def _tiny_corpus(tag, n=2):
    return [
        Conversation((Turn("system", SYSTEM_MESSAGE), Turn("user", f"What is {i}?"), Turn("assistant", f"It is {i}.")), tag, f"{tag}-{i}")
        for i in range(n)
    ]


def test_zero_steps_checkpoint_equals_init(small_model, tokenizer, tmp_path):
    init = {k: v.clone() for k, v in small_model.state_dict().items()}
    res = run_stage(single_task_plan("d", steps=0), small_model, tokenizer, {"d": _tiny_corpus("classification")}, LossWeights(), 0, out_dir=tmp_path)
    loaded, _, extra = load_checkpoint(res.checkpoint)
    assert extra["step"] == 0
    for k, v in loaded.state_dict().items():
        assert torch.equal(v, init[k])
    assert (tmp_path / "train.log").read_text().count("\n") == 1


def _run(tokenizer, tmp_path, seed):
    model = build_model(small_config(tokenizer.vocab_size), tokenizer)
    corpora = {"d": _tiny_corpus("classification", 3)}
    return run_stage(single_task_plan("d", steps=5, batch_size=2, checkpoint_every=2), model, tokenizer, corpora, LossWeights(), seed, out_dir=tmp_path)


def test_same_seed_runs_are_identical(tokenizer, tmp_path):
    a = _run(tokenizer, tmp_path / "a", 3)
    b = _run(tokenizer, tmp_path / "b", 3)
    assert a.log_lines == b.log_lines
    for name in ("train.log", "model.ckpt", "model-step2.ckpt", "model-step4.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_stage2_log_histogram(tokenizer):
    model = build_model(small_config(tokenizer.vocab_size, n_layers=1), tokenizer)
    tags = {"fooddialogues": "dialogue", "foodreasonseg": "reason_seg"}
    corpora = {ds: _tiny_corpus(tags.get(ds, "classification"), 1) for ds in STAGE2}
    plan = stage2_plan(steps=1500, batch_size=4, lr=0.0)
    res = run_stage(plan, model, tokenizer, corpora, LossWeights(), 0)
    drawn = [t for line in res.log_lines[1:] for t in line.split("\t")[-1].split(",")]
    assert len(drawn) == 6000
    gen = sum(t in ("dialogue", "reason_seg") for t in drawn) / len(drawn)
    assert abs(gen - 15 / 22) <= 0.02
    assert Counter(drawn) == res.task_counts
