"""Word tokenizer with an engine-owned vocabulary mapping.

The engine reserves token ids below 8; the prompt words "a", "photo",
"of" are pinned to ids 1..3 so exported captions and the engine's prompt
templates share a vocabulary. New words are assigned ids from 8 upward in
first-seen order, which keeps exports deterministic for a fixed dataset
ordering.
"""

from __future__ import annotations

import re

RESERVED = {"a": 1, "photo": 2, "of": 3}
FIRST_FREE_ID = 8

_WORD = re.compile(r"[a-z0-9]+(?:'[a-z]+)?")


def tokenize(text: str) -> list[str]:
    return _WORD.findall(text.lower())


class VocabMapping:
    """Grows as captions are tokenized; serializable as {word: id}."""

    def __init__(self):
        self.word_to_id: dict[str, int] = dict(RESERVED)
        self._next = FIRST_FREE_ID

    def encode(self, words: list[str]) -> list[int]:
        ids = []
        for word in words:
            if word not in self.word_to_id:
                self.word_to_id[word] = self._next
                self._next += 1
            ids.append(self.word_to_id[word])
        return ids

    @property
    def size(self) -> int:
        return self._next
