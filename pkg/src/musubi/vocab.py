"""Closed template vocabulary: whitespace tokens with fixed special ids."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD_TOKEN = "<pad>"
MASK_TOKEN = "<mask>"
PAD_ID = 0
MASK_ID = 1
SPECIAL_TOKENS = (PAD_TOKEN, MASK_TOKEN)

TEMPLATE_WORDS = (
    "the",
    ".",
    "it",
    "to",
    "of",
    "from",
    "next",
    "room",
    "center",
    "closest",
    "farthest",
    "left",
    "right",
    "front",
    "back",
    "leftmost",
    "rightmost",
    "frontmost",
    "backmost",
    "largest",
    "smallest",
    "tallest",
    "shortest",
)

# One counter-clockwise quarter turn about +z maps each horizontal direction
# word onto the one that now describes the same object.
_QUARTER_TURN = {
    "left": "front",
    "front": "right",
    "right": "back",
    "back": "left",
    "leftmost": "frontmost",
    "frontmost": "rightmost",
    "rightmost": "backmost",
    "backmost": "leftmost",
}


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if tuple(self.tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ValueError(f"vocabulary must start with {SPECIAL_TOKENS}")
        index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(index) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def token_id(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise ValueError(f"token {token!r} is not in the vocabulary") from None

    def encode(self, text: str) -> np.ndarray:
        words = text.split()
        if not words:
            raise ValueError("cannot encode an empty sentence")
        return np.array([self.token_id(w) for w in words], dtype=np.int64)

    def decode(self, ids: Iterable[int]) -> str:
        words = []
        for i in ids:
            i = int(i)
            if i == PAD_ID:
                break
            if not 0 <= i < len(self.tokens):
                raise ValueError(f"token id {i} out of range for vocabulary of {len(self)}")
            words.append(self.tokens[i])
        return " ".join(words)

    def rotation_table(self, quarter_turns: int) -> np.ndarray:
        """Id remapping for direction words after ``quarter_turns`` CCW turns."""

        table = np.arange(len(self.tokens), dtype=np.int64)
        for _ in range(quarter_turns % 4):
            step = table.copy()
            for src, dst in _QUARTER_TURN.items():
                if src in self._index and dst in self._index:
                    step[table == self._index[src]] = self._index[dst]
            table = step
        return table


def build_vocabulary(class_names: Sequence[str]) -> Vocabulary:
    clash = sorted(set(class_names) & (set(TEMPLATE_WORDS) | set(SPECIAL_TOKENS)))
    if clash:
        raise ValueError(f"class names collide with template words: {clash}")
    return Vocabulary(tokens=SPECIAL_TOKENS + TEMPLATE_WORDS + tuple(class_names))


def save_vocabulary(vocab: Vocabulary, path: str | Path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{tok}\t{i}" for i, tok in enumerate(vocab.tokens)]
    p.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return p


def load_vocabulary(path: str | Path) -> Vocabulary:
    pairs: list[tuple[int, str]] = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            token, raw_id = line.split("\t")
            pairs.append((int(raw_id), token))
        except ValueError:
            raise ValueError(f"{path}:{lineno}: expected 'token<TAB>id'") from None
    pairs.sort()
    if [i for i, _ in pairs] != list(range(len(pairs))):
        raise ValueError(f"{path}: token ids must be contiguous from 0")
    return Vocabulary(tokens=tuple(tok for _, tok in pairs))
