"""Byte-level tokenizer: 256 byte ids plus three reserved control ids.

No external vocabulary. Reserved ids never occur inside encoded text, so
payload/control collisions are impossible by construction.
"""

from __future__ import annotations

from typing import List

PAD = 256
REASON = 257
ANS = 258
VOCAB_SIZE = 259

RESERVED = (PAD, REASON, ANS)


def encode(text: str) -> List[int]:
    return list(text.encode("utf-8"))


def decode(tokens) -> str:
    payload = bytes(t for t in tokens if t < 256)
    return payload.decode("utf-8", errors="replace")
