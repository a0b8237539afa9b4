"""Toy integer tokenizer.

Token ids are the vocabulary: document text is the whitespace-joined
decimal form of the ids, so the round trip is trivial and spans stay
aligned with whatever produced them.  Ids 0..3 are reserved.
"""

from __future__ import annotations

PAD = 0
BOS = 1
SEP = 2
EOS = 3

FIRST_CONTENT_ID = 4


def to_text(token_ids: list[int]) -> str:
    return " ".join(str(t) for t in token_ids)


def from_text(text: str) -> list[int]:
    return [int(t) for t in text.split()]
