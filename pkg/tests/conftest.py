import numpy as np
import pytest
import torch

from nutriseg.datamodel import (
    FoodRecord,
    ImageHandle,
    IngredientEntry,
    MaskImage,
    NutritionFacts,
)
from nutriseg.model import ModelConfig, build_model
from nutriseg.synth import make_record
from nutriseg.tokenizer import Tokenizer, build_base_vocab

torch.set_num_threads(1)

SMALL = dict(
    d_model=32,
    n_layers=2,
    n_heads=2,
    image_size=16,
    patch_size=8,
    max_text_len=160,
    proj_dims=(32, 32, 32),
    head_dims=(16, 1),
    lora_rank=4,
    mask_decode_dim=16,
    pixel_dim=8,
)

WORDS = (
    "You are a helpful food assistant. USER: ASSISTANT: What is this dish? It is mapo tofu. "
    "The fish is masked as and the lemon as Sorry, the melon is not found in this picture. "
    "The dish has kilocalories in total; the beef weighs grams and has Segment the fish. "
    "\n0123456789.,:;"
)


@pytest.fixture
def tokenizer():
    return Tokenizer(build_base_vocab([WORDS]), max_indices=20)


def small_config(vocab_size: int, **kw) -> ModelConfig:
    return ModelConfig(vocab_size=vocab_size, **{**SMALL, **kw})


@pytest.fixture
def small_model(tokenizer):
    return build_model(small_config(tokenizer.vocab_size), tokenizer)


def rect_mask(h, w, y0, y1, x0, x1):
    m = np.zeros((h, w), dtype=np.uint8)
    m[y0:y1, x0:x1] = 1
    return MaskImage(m)


@pytest.fixture
def fish_record():
    """Two masked ingredients (fish, lemon) on a 16×16 image, with facts."""
    fish = IngredientEntry("fish", NutritionFacts(100.0, 206.0, 12.0, 0.0, 22.0), rect_mask(16, 16, 0, 8, 0, 8))
    lemon = IngredientEntry("lemon", NutritionFacts(50.0, 14.5, 0.2, 4.5, 0.6), rect_mask(16, 16, 8, 16, 8, 16))
    total = NutritionFacts(150.0, 220.5, 12.2, 4.5, 22.6)
    return FoodRecord(
        "dish-1",
        (ImageHandle("images/dish-1.png", "overhead", 16, 16),),
        (fish, lemon),
        class_label="fish plate",
        recipe="Step 1: grill the fish. Step 2: add lemon.",
        total=total,
    )


def synth_record(rid="r-0", dataset="nutrition5k", n=3, seed=0, size=32):
    return make_record(rid, dataset, n, seed, size)[0]


# one line per acceptance criterion, echoed after the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
