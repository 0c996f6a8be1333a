"""Byte-level tokenizer and synthetic task generators.

The vocabulary is the 256 raw byte values plus three specials: BOS (sequence
start), SEP (marks the span a task wants remembered) and QUERY (asks for it
back). Tasks come as (inputs, targets, loss_mask) triples already shifted
for next-token prediction; only masked positions are scored.

* copy:   BOS payload SEP payload — scored on the second payload.
* needle: BOS filler SEP needle filler QUERY needle — the needle sits at a
  uniformly random depth inside the filler and is scored on its reproduction
  after QUERY.
* bytes:  a random window of a raw byte corpus, scored everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Rng

__all__ = [
    "BOS",
    "SEP",
    "QUERY",
    "VOCAB_SIZE",
    "tokenize_bytes",
    "detokenize",
    "TaskInstance",
    "make_copy_task",
    "make_needle_task",
    "make_bytes_task",
]

BOS = 256
SEP = 257
QUERY = 258
VOCAB_SIZE = 259

# filler/needle alphabet: lowercase letters, so retrieval cannot key on rare bytes
_LETTER_LO, _LETTER_HI = 97, 123


def tokenize_bytes(text: str | bytes) -> np.ndarray:
    """Map text to its byte ids (0..255)."""
    raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def detokenize(ids) -> bytes:
    """Inverse of tokenize_bytes; ids must all be plain bytes (< 256)."""
    arr = np.asarray(ids, dtype=np.int64)
    if arr.size and (arr.min() < 0 or arr.max() > 255):
        raise ValueError("detokenize: id out of byte range")
    return arr.astype(np.uint8).tobytes()


@dataclass
class TaskInstance:
    inputs: np.ndarray  # [T] int64
    targets: np.ndarray  # [T] int64
    loss_mask: np.ndarray  # [T] float, 1.0 where scored

    def __post_init__(self):
        if not (self.inputs.shape == self.targets.shape == self.loss_mask.shape):
            raise ValueError("inputs/targets/mask must share a shape")
        lo = min(self.inputs.min(), self.targets.min())
        hi = max(self.inputs.max(), self.targets.max())
        if lo < 0 or hi >= VOCAB_SIZE:
            raise ValueError("token id out of vocabulary")


def _shifted(tokens: np.ndarray, scored: slice) -> TaskInstance:
    inputs = tokens[:-1]
    targets = tokens[1:]
    mask = np.zeros(len(targets), dtype=np.float64)
    mask[scored] = 1.0
    return TaskInstance(inputs=inputs, targets=targets, loss_mask=mask)


def make_copy_task(rng: Rng, T: int, vocab: int = 64) -> TaskInstance:
    """BOS payload SEP payload over ``T`` total tokens, scored on the echo.

    Payload symbols are distinct whenever the alphabet allows, so a perfect
    copier can always disambiguate which occurrence to continue from.
    """
    payload_len = (T - 2) // 2
    if payload_len < 1:
        raise ValueError(f"sequence length {T} too short for a copy payload")
    if not (2 <= vocab <= 256):
        raise ValueError("payload alphabet must be between 2 and 256 symbols")
    if payload_len <= vocab:
        payload = rng.permutation(vocab)[:payload_len].astype(np.int64)
    else:
        payload = rng.integers(0, vocab, (payload_len,))
    tokens = np.concatenate([[BOS], payload, [SEP], payload]).astype(np.int64)
    return _shifted(tokens, slice(-payload_len, None))


def make_needle_task(rng: Rng, T: int, needle_len: int = 8) -> TaskInstance:
    """Needle retrieval: reproduce the SEP-marked span when QUERY arrives.

    The needle's depth inside the filler is uniform, so over many samples the
    model is probed at every position.
    """
    filler_len = T - 3 - 2 * needle_len
    if filler_len < 0:
        raise ValueError(f"sequence length {T} too short for needle length {needle_len}")
    needle = rng.integers(_LETTER_LO, _LETTER_HI, (needle_len,))
    filler = rng.integers(_LETTER_LO, _LETTER_HI, (filler_len,))
    depth = int(rng.integers(0, filler_len + 1, ()))
    tokens = np.concatenate(
        [[BOS], filler[:depth], [SEP], needle, filler[depth:], [QUERY], needle]
    ).astype(np.int64)
    return _shifted(tokens, slice(-needle_len, None))


def make_bytes_task(rng: Rng, corpus: bytes, T: int) -> TaskInstance:
    """A random corpus window as a plain LM example (every position scored)."""
    if len(corpus) < T:
        raise ValueError(f"corpus shorter than window {T}")
    start = int(rng.integers(0, len(corpus) - T + 1, ()))
    window = np.frombuffer(corpus[start : start + T], dtype=np.uint8).astype(np.int64)
    tokens = np.concatenate([[BOS], window]).astype(np.int64)
    return _shifted(tokens, slice(None))
