"""Word-piece tokenizer with byte fallback and atomic task tokens.

Text is split into pieces by a fixed regex; pieces found in the vocabulary map
to one id, everything else falls back to UTF-8 byte tokens, so
``decode(encode(s)) == s`` for every string. Task-token surfaces and the
special tokens are matched before splitting and always map to a single id.
"""

from __future__ import annotations

import re
from collections import Counter
from typing import Iterable, Sequence

from .datamodel import NUTRITION_FIELDS, TaskToken, parse_token, token_surface

STOP = "<stop>"
PAD = "<pad>"
SPECIALS = (PAD, STOP)
N_BYTES = 256

_PIECE_RE = re.compile(r" ?[A-Za-z]+| ?[0-9]| ?[^\sA-Za-z0-9]|\s+")


class VocabularyError(ValueError):
    pass


def split_pieces(text: str) -> list[str]:
    return _PIECE_RE.findall(text)


def task_token_surfaces(max_indices: int) -> list[str]:
    """5 dish-level, 5·max_indices ingredient-level and max_indices seg tokens."""
    out = [token_surface(TaskToken("nutrition_dish", f)) for f in NUTRITION_FIELDS]
    for i in range(1, max_indices + 1):
        out += [token_surface(TaskToken("nutrition_ingredient", f, i)) for f in NUTRITION_FIELDS]
    out += [token_surface(TaskToken("segmentation", None, i)) for i in range(1, max_indices + 1)]
    return out


def build_base_vocab(texts: Iterable[str], min_count: int = 1) -> list[str]:
    """Word pieces seen in ``texts`` (task tokens excluded), sorted for determinism."""
    counts: Counter[str] = Counter()
    for text in texts:
        for chunk in _ATOMIC_SPLIT.split(text):
            if chunk and not _ATOMIC_FULL.fullmatch(chunk):
                counts.update(split_pieces(chunk))
    return sorted(p for p, c in counts.items() if c >= min_count)


_ATOMIC_ALT = r"<stop>|<pad>|<total_(?:mass|cal|carb|fat|pro)>|<(?:mass|cal|carb|fat|pro|seg)_[1-9][0-9]*>"
_ATOMIC_SPLIT = re.compile(f"({_ATOMIC_ALT})")
_ATOMIC_FULL = re.compile(_ATOMIC_ALT)


class Tokenizer:
    """Ids: specials, then 256 byte tokens, then base pieces, then task tokens."""

    def __init__(self, base_vocab: Sequence[str], max_indices: int = 20):
        self.max_indices = max_indices
        self.base_vocab = list(base_vocab)
        self.task_surfaces = task_token_surfaces(max_indices)
        reserved = set(SPECIALS) | set(self.task_surfaces)
        clash = sorted(reserved.intersection(self.base_vocab))
        if clash:
            raise VocabularyError(f"base vocabulary collides with reserved surfaces: {clash[:5]}")
        if len(set(self.base_vocab)) != len(self.base_vocab):
            raise VocabularyError("base vocabulary has duplicates")

        self.id_to_piece: list[str] = list(SPECIALS)
        self.byte_offset = len(self.id_to_piece)
        self.id_to_piece += [f"<0x{b:02X}>" for b in range(N_BYTES)]
        self.base_offset = len(self.id_to_piece)
        self.id_to_piece += self.base_vocab
        self.task_offset = len(self.id_to_piece)
        self.id_to_piece += self.task_surfaces

        self.piece_to_id = {p: i for i, p in enumerate(self.base_vocab, self.base_offset)}
        self.atomic_to_id = {s: self.id_to_piece.index(s) for s in SPECIALS}
        self.atomic_to_id.update({s: i for i, s in enumerate(self.task_surfaces, self.task_offset)})
        self._task_by_id = {i: parse_token(s) for s, i in self.atomic_to_id.items() if s not in SPECIALS}
        self._id_by_task = {t: i for i, t in self._task_by_id.items()}

    @property
    def vocab_size(self) -> int:
        return len(self.id_to_piece)

    @property
    def n_task_tokens(self) -> int:
        return len(self.task_surfaces)

    @property
    def stop_id(self) -> int:
        return self.atomic_to_id[STOP]

    @property
    def pad_id(self) -> int:
        return self.atomic_to_id[PAD]

    def is_task_id(self, i: int) -> bool:
        return i >= self.task_offset

    def task_token(self, i: int) -> TaskToken:
        return self._task_by_id[i]

    def task_id(self, tok: TaskToken) -> int:
        try:
            return self._id_by_task[tok]
        except KeyError:
            raise VocabularyError(f"{tok.surface} is not in the vocabulary") from None

    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        for chunk in _ATOMIC_SPLIT.split(text):
            if not chunk:
                continue
            if chunk in self.atomic_to_id:
                ids.append(self.atomic_to_id[chunk])
                continue
            if _ATOMIC_FULL.fullmatch(chunk):
                raise VocabularyError(f"{chunk} is not in the vocabulary")
            for piece in split_pieces(chunk):
                pid = self.piece_to_id.get(piece)
                if pid is not None:
                    ids.append(pid)
                else:
                    ids.extend(self.byte_offset + b for b in piece.encode("utf-8"))
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        out: list[str] = []
        pending = bytearray()
        for i in ids:
            i = int(i)
            if self.byte_offset <= i < self.base_offset:
                pending.append(i - self.byte_offset)
                continue
            if pending:
                out.append(pending.decode("utf-8", errors="replace"))
                pending.clear()
            out.append(self.id_to_piece[i])
        if pending:
            out.append(pending.decode("utf-8", errors="replace"))
        return "".join(out)

    def to_json(self) -> dict:
        return {"base_vocab": self.base_vocab, "max_indices": self.max_indices}

    @classmethod
    def from_json(cls, d: dict) -> "Tokenizer":
        return cls(d["base_vocab"], d["max_indices"])


def extend_vocabulary(base_vocab: Sequence[str], max_indices: int = 20) -> Tokenizer:
    return Tokenizer(base_vocab, max_indices)
