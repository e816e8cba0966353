"""Plain-text corpus ingestion with a character or whitespace tokenizer."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .embedding import Vocabulary

PAD = "<pad>"


def tokenize(text: str, tokenizer: str) -> list:
    if tokenizer == "char":
        return list(text)
    if tokenizer == "whitespace":
        return text.split()
    raise ValueError(f"unknown tokenizer {tokenizer!r}")


def detokenize(tokens, tokenizer: str) -> str:
    tokens = [t for t in tokens if t != PAD]
    return "".join(tokens) if tokenizer == "char" else " ".join(tokens)


def ingest_corpus(path, tokenizer: str, seq_len: int):
    """Split a UTF-8 file into non-overlapping windows of ``seq_len`` token ids.

    The vocabulary is the sorted set of observed symbols behind a pad token at
    index 0; the final partial window is right-padded.
    """
    if seq_len < 1:
        raise ValueError("seq_len must be >= 1")
    raw = Path(path).read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ValueError(f"{path}: not valid UTF-8 ({exc})") from None
    symbols = tokenize(text, tokenizer)
    if not symbols:
        raise ValueError(f"{path}: corpus is empty")
    vocab = Vocabulary([PAD] + sorted(set(symbols) - {PAD}))
    ids = vocab.encode(symbols)
    n = -(-ids.size // seq_len)
    padded = np.zeros(n * seq_len, dtype=np.int64)
    padded[: ids.size] = ids
    return padded.reshape(n, seq_len), vocab
