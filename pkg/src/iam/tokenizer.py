"""Byte-level tokenizer shared by every model: ids 0-255 are raw bytes."""

from __future__ import annotations

BOS = 256
EOS = 257
VOCAB_SIZE = 258


def encode(text: str | bytes, bos: bool = True) -> list[int]:
    data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    ids = list(data)
    return [BOS] + ids if bos else ids


def decode(ids) -> str:
    return bytes(i for i in ids if i < 256).decode("utf-8", errors="replace")
