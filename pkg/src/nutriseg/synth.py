"""Synthetic, schema-equivalent food corpora.

Each dish image is a white plate with one flat-colored region per ingredient,
so ingredient identity, masks and mass (∝ visible area) are all recoverable
from pixels. Values are rounded to one decimal so they print exactly.
"""

from __future__ import annotations

import itertools
from pathlib import Path
from typing import Sequence

import numpy as np

from .datamodel import FoodRecord, ImageHandle, IngredientEntry, MaskImage, NutritionFacts
from .instruction_forge import derive_rng
from .io import MANIFEST_NAME, atomic_write_text, dumps, record_to_json, save_image_png, save_mask_png

# name, kcal/g, fat/g, carb/g, protein/g
INGREDIENT_TABLE = (
    ("beef", 2.5, 0.15, 0.0, 0.26),
    ("onion", 0.4, 0.001, 0.09, 0.011),
    ("carrot", 0.41, 0.002, 0.1, 0.009),
    ("rice", 1.3, 0.003, 0.28, 0.027),
    ("fish", 2.06, 0.12, 0.0, 0.22),
    ("lemon", 0.29, 0.003, 0.09, 0.011),
    ("broccoli", 0.34, 0.004, 0.07, 0.028),
    ("tofu", 0.76, 0.048, 0.019, 0.08),
    ("egg", 1.55, 0.11, 0.011, 0.13),
    ("potato", 0.77, 0.001, 0.17, 0.02),
    ("tomato", 0.18, 0.002, 0.039, 0.009),
    ("chicken", 2.39, 0.14, 0.0, 0.27),
    ("spinach", 0.23, 0.004, 0.036, 0.029),
    ("mushroom", 0.22, 0.003, 0.033, 0.031),
    ("corn", 0.86, 0.012, 0.19, 0.033),
    ("bread", 2.65, 0.032, 0.49, 0.09),
    ("cheese", 4.02, 0.33, 0.013, 0.25),
    ("apple", 0.52, 0.002, 0.14, 0.003),
    ("pork", 2.42, 0.14, 0.0, 0.27),
    ("noodles", 1.38, 0.021, 0.25, 0.045),
    ("shrimp", 0.99, 0.003, 0.002, 0.24),
    ("cucumber", 0.15, 0.001, 0.036, 0.007),
    ("pepper", 0.31, 0.003, 0.06, 0.01),
    ("salmon", 2.08, 0.13, 0.0, 0.2),
)
INGREDIENT_NAMES = tuple(row[0] for row in INGREDIENT_TABLE)

_LEVELS = (0.1, 0.5, 0.9)
PALETTE = tuple(
    c for c in itertools.product(_LEVELS, repeat=3) if len(set(c)) > 1
)[: len(INGREDIENT_TABLE)]
BACKGROUND = (1.0, 1.0, 1.0)
COLORS = dict(zip(INGREDIENT_NAMES, PALETTE))

DISHES = (
    "mapo tofu", "fried rice", "fish plate", "garden salad", "stir fry",
    "breakfast plate", "noodle bowl", "seafood platter", "roast dinner", "veggie mix",
)
GRAMS_PER_PIXEL = 0.25

# dataset -> (tasks, mask_complete, stage-2 modes)
DATASETS = {
    "vireo172": (("classification", "ingredient"), True, ()),
    "recipe1m": (("ingredient", "recipe"), True, ()),
    "nutrition5k": (("nutrition",), True, ("dialogue",)),
    "foodseg103": (("segmentation",), True, ("reason_seg",)),
    "uecfoodpix": (("segmentation",), False, ()),
}


def paint(names: Sequence[str], rng: np.random.Generator, size: int = 64, min_area: int = 12):
    """Image plus visible-area masks; regions painted in order, later ones on top."""
    for _ in range(100):
        label = np.full((size, size), -1, dtype=np.int64)
        for k in range(len(names)):
            h, w = (int(x) for x in rng.integers(size // 8, size // 2, size=2))
            y, x = int(rng.integers(0, size - h)), int(rng.integers(0, size - w))
            label[y : y + h, x : x + w] = k
        areas = [int((label == k).sum()) for k in range(len(names))]
        if min(areas) >= min_area:
            break
    else:
        raise RuntimeError(f"could not place {len(names)} regions on a {size}px image")
    image = np.empty((size, size, 3), dtype=np.float32)
    image[:] = BACKGROUND
    for k, n in enumerate(names):
        image[label == k] = COLORS[n]
    masks = [MaskImage(label == k) for k in range(len(names))]
    return image, masks


def _facts(name: str, area: int) -> NutritionFacts:
    row = INGREDIENT_TABLE[INGREDIENT_NAMES.index(name)]
    mass = round(area * GRAMS_PER_PIXEL, 1)
    return NutritionFacts(
        mass=mass,
        calories=round(mass * row[1], 1),
        fat=round(mass * row[2], 1),
        carbohydrate=round(mass * row[3], 1),
        protein=round(mass * row[4], 1),
    )


def _sum_facts(parts: Sequence[NutritionFacts]) -> NutritionFacts:
    return NutritionFacts(
        **{k: round(sum(getattr(p, k) for p in parts), 1) for k in ("mass", "calories", "fat", "carbohydrate", "protein")}
    )


def _recipe(names: Sequence[str], dish: str) -> str:
    steps = [f"Step 1: wash and cut the {names[0]}."]
    steps += [f"Step {i}: add the {n} and stir." for i, n in enumerate(names[1:], 2)]
    steps.append(f"Step {len(names) + 1}: serve the {dish} warm.")
    return " ".join(steps)


def make_record(
    record_id: str,
    dataset: str,
    n_ingredients: int,
    seed: int,
    size: int = 64,
    split: str = "train",
    names: Sequence[str] | None = None,
) -> tuple[FoodRecord, dict[str, np.ndarray]]:
    """A record plus the pixel arrays for its image handles (path -> RGB array)."""
    rng = derive_rng(seed, record_id, "synth")
    if names is None:
        names = [INGREDIENT_NAMES[int(i)] for i in rng.choice(len(INGREDIENT_NAMES), size=n_ingredients, replace=False)]
    image, masks = paint(names, rng, size)
    tasks, complete, _ = DATASETS[dataset]
    handles = [ImageHandle(f"images/{record_id}.png", "overhead", size, size)]
    pixels = {handles[0].path: image}
    if dataset == "nutrition5k":
        for f, view in enumerate((image[:, ::-1], image[::-1, :]), 1):
            h = ImageHandle(f"images/{record_id}_f{f}.png", "frame", size, size)
            handles.append(h)
            pixels[h.path] = np.ascontiguousarray(view)

    with_facts = dataset == "nutrition5k"
    with_masks = dataset in ("foodseg103", "uecfoodpix")
    ingredients = []
    for k, (n, m) in enumerate(zip(names, masks)):
        keep_mask = with_masks and (complete or k % 2 == 0)
        ingredients.append(
            IngredientEntry(
                name=n,
                facts=_facts(n, int(m.values.sum())) if with_facts else None,
                mask=m if keep_mask else None,
            )
        )
    dish = DISHES[int(rng.integers(len(DISHES)))]
    record = FoodRecord(
        record_id=record_id,
        image=tuple(handles),
        ingredients=tuple(ingredients),
        class_label=dish if dataset == "vireo172" else None,
        recipe=_recipe(names, dish) if dataset == "recipe1m" else None,
        total=_sum_facts([i.facts for i in ingredients]) if with_facts else None,
        split=split,
    )
    return record, pixels


def write_corpus(
    root: str | Path,
    per_dataset: int = 8,
    seed: int = 0,
    size: int = 64,
    ingredient_range: tuple[int, int] = (1, 5),
    test_fraction: float = 0.0,
) -> Path:
    """Write images, masks, record files and the manifest under ``root``."""
    root = Path(root)
    lo, hi = ingredient_range
    manifest = {"version": 1, "splits": ["train", "test"], "datasets": {}}
    for dataset, (tasks, complete, modes) in DATASETS.items():
        rng = derive_rng(seed, dataset, "counts")
        rows = []
        for j in range(per_dataset):
            rid = f"{dataset}-{j:04d}"
            n = int(rng.integers(lo, hi + 1))
            if dataset == "foodseg103":
                n = max(n, 3 if hi >= 3 else n)
            split = "test" if rng.random() < test_fraction else "train"
            record, pixels = make_record(rid, dataset, n, seed, size, split)
            for path, arr in pixels.items():
                save_image_png(root / path, arr)
            mask_paths = {}
            for ing in record.ingredients:
                if ing.mask is not None:
                    rel = f"masks/{rid}/{ing.name.replace(' ', '_')}.png"
                    save_mask_png(root / rel, ing.mask)
                    mask_paths[ing.name] = rel
            rows.append(dumps(record_to_json(record, mask_paths)) + "\n")
        atomic_write_text(root / f"{dataset}.jsonl", "".join(rows))
        manifest["datasets"][dataset] = {
            "records": f"{dataset}.jsonl",
            "tasks": list(tasks),
            "mask_complete": complete,
            "stage2": list(modes),
        }
    atomic_write_text(root / MANIFEST_NAME, dumps(manifest) + "\n")
    return root
