"""Serialization: record corpora, conversation shards, masks and images.

Records and conversations are stored one JSON object per line. Masks are
either 8-bit grayscale PNGs (0 background, 255 foreground) referenced by a
path relative to the corpus root, or inline run-length dicts.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Any, Iterable, Iterator

import numpy as np
from PIL import Image

from .datamodel import (
    Conversation,
    FoodRecord,
    ImageHandle,
    IngredientEntry,
    MaskImage,
    NutritionFacts,
    Turn,
    parse_token,
)

MANIFEST_NAME = "manifest.json"


class DataError(ValueError):
    """Malformed corpus, shard or manifest content."""


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dumps(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def write_jsonl(path: str | os.PathLike, rows: Iterable[Any]) -> None:
    atomic_write_text(path, "".join(dumps(r) + "\n" for r in rows))


def read_jsonl(path: str | os.PathLike) -> Iterator[tuple[int, Any]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None


# -- masks and images ------------------------------------------------------

def save_mask_png(path: str | os.PathLike, mask: MaskImage) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((mask.values * 255).astype(np.uint8), mode="L").save(path, format="PNG")


def load_mask_png(path: str | os.PathLike) -> MaskImage:
    arr = np.asarray(Image.open(path).convert("L"))
    uniq = set(np.unique(arr).tolist())
    if not uniq <= {0, 255}:
        raise DataError(f"{path}: mask pixels must be 0 or 255, found {sorted(uniq - {0, 255})[:5]}")
    return MaskImage(arr // 255)


def save_image_png(path: str | os.PathLike, image: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_image(root: str | os.PathLike, handle: ImageHandle) -> np.ndarray:
    """RGB float32 array in [0, 1] with shape (H, W, 3)."""
    with Image.open(Path(root) / handle.path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def mask_to_json(mask: MaskImage) -> dict[str, Any]:
    return mask.to_rle()


def mask_from_json(data: Any, root: str | os.PathLike | None = None) -> MaskImage:
    if "rle" in data:
        return MaskImage.from_rle(data)
    if "path" in data:
        if root is None:
            raise DataError("mask path given without a corpus root")
        return load_mask_png(Path(root) / data["path"])
    raise DataError(f"unrecognised mask entry keys {sorted(data)}")


# -- records ---------------------------------------------------------------

def _facts_from(d: Any) -> NutritionFacts | None:
    if d is None:
        return None
    return NutritionFacts(
        mass=float(d["mass"]),
        calories=float(d["calories"]),
        fat=float(d["fat"]),
        carbohydrate=float(d["carbohydrate"]),
        protein=float(d["protein"]),
    )


def record_to_json(record: FoodRecord, mask_paths: dict[str, str] | None = None) -> dict[str, Any]:
    """``mask_paths`` maps ingredient name -> relative PNG path; others go inline."""
    mask_paths = mask_paths or {}
    ings = []
    for ing in record.ingredients:
        d: dict[str, Any] = {"name": ing.name}
        if ing.facts is not None:
            d["facts"] = ing.facts.as_dict()
        if ing.mask is not None:
            d["mask"] = {"path": mask_paths[ing.name]} if ing.name in mask_paths else mask_to_json(ing.mask)
        ings.append(d)
    out: dict[str, Any] = {
        "record_id": record.record_id,
        "image": [
            {"path": h.path, "kind": h.kind, "height": h.height, "width": h.width} for h in record.image
        ],
        "ingredients": ings,
        "split": record.split,
    }
    if record.class_label is not None:
        out["class_label"] = record.class_label
    if record.recipe is not None:
        out["recipe"] = record.recipe
    if record.total is not None:
        out["total"] = record.total.as_dict()
    return out


def record_from_json(d: Any, root: str | os.PathLike | None = None) -> FoodRecord:
    try:
        return FoodRecord(
            record_id=str(d["record_id"]),
            image=tuple(
                ImageHandle(h["path"], h.get("kind", "overhead"), int(h.get("height", 64)), int(h.get("width", 64)))
                for h in d["image"]
            ),
            ingredients=tuple(
                IngredientEntry(
                    name=i["name"],
                    facts=_facts_from(i.get("facts")),
                    mask=mask_from_json(i["mask"], root) if i.get("mask") is not None else None,
                )
                for i in d.get("ingredients", ())
            ),
            class_label=d.get("class_label"),
            recipe=d.get("recipe"),
            total=_facts_from(d.get("total")),
            split=d.get("split", "train"),
        )
    except (KeyError, TypeError) as exc:
        raise DataError(f"malformed record: missing or bad field {exc}") from None


def read_records(path: str | os.PathLike, root: str | os.PathLike | None = None) -> list[tuple[int, FoodRecord]]:
    root = Path(path).parent if root is None else root
    out = []
    for lineno, d in read_jsonl(path):
        try:
            out.append((lineno, record_from_json(d, root)))
        except (DataError, ValueError) as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
    return out


def load_manifest(root: str | os.PathLike) -> dict[str, Any]:
    path = Path(root) / MANIFEST_NAME
    if not path.exists():
        raise DataError(f"corpus manifest not found: {path}")
    with open(path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if "datasets" not in manifest:
        raise DataError(f"{path}: manifest lacks 'datasets'")
    return manifest


# -- conversations ---------------------------------------------------------

def conversation_to_json(conv: Conversation) -> dict[str, Any]:
    turns = []
    for t in conv.turns:
        d: dict[str, Any] = {"speaker": t.speaker, "text": t.text}
        if t.images:
            d["images"] = [{"path": h.path, "kind": h.kind, "height": h.height, "width": h.width} for h in t.images]
        if t.token_labels:
            labels = []
            for tok, val in t.token_labels.items():
                if isinstance(val, MaskImage):
                    labels.append({"token": tok.surface, "mask": mask_to_json(val)})
                else:
                    labels.append({"token": tok.surface, "value": float(val)})
            d["labels"] = labels
        turns.append(d)
    return {
        "task_tag": conv.task_tag,
        "source_record": conv.source_record,
        "meta": dict(conv.meta),
        "turns": turns,
    }


def conversation_from_json(d: Any) -> Conversation:
    try:
        turns = []
        for t in d["turns"]:
            labels = {}
            for lab in t.get("labels", ()):
                tok = parse_token(lab["token"])
                labels[tok] = MaskImage.from_rle(lab["mask"]) if "mask" in lab else float(lab["value"])
            images = tuple(
                ImageHandle(h["path"], h.get("kind", "overhead"), int(h.get("height", 64)), int(h.get("width", 64)))
                for h in t.get("images", ())
            )
            turns.append(Turn(t["speaker"], t["text"], images, labels))
        return Conversation(tuple(turns), d["task_tag"], d["source_record"], d.get("meta", {}))
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed conversation: {exc}") from None


def write_conversations(path: str | os.PathLike, convs: Iterable[Conversation]) -> None:
    write_jsonl(path, (conversation_to_json(c) for c in convs))


def read_conversations(path: str | os.PathLike) -> list[Conversation]:
    out = []
    for lineno, d in read_jsonl(path):
        try:
            out.append(conversation_from_json(d))
        except DataError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
    return out
