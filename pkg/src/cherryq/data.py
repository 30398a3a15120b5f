"""Byte-level corpus handling: ingestion, windowing, and a synthetic text source."""

from __future__ import annotations

import hashlib
import os
from typing import Iterator

import numpy as np

from .errors import ConfigError, DataError


def ingest(path) -> np.ndarray:
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise DataError(f"corpus not found: {path}")
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw:
        raise DataError(f"corpus is empty: {path}")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def tokenize(text: str | bytes) -> np.ndarray:
    raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def detokenize(ids) -> bytes:
    return np.asarray(ids, dtype=np.uint8).tobytes()


def corpus_hash(ids) -> str:
    return hashlib.sha256(detokenize(ids)).hexdigest()


def windows(ids, seq_len: int) -> np.ndarray:
    """Contiguous non-overlapping windows, trailing remainder dropped."""
    ids = np.asarray(ids)
    if seq_len < 2:
        raise ConfigError(f"seq_len must be >= 2, got {seq_len}")
    if seq_len >= len(ids):
        raise DataError(f"seq_len {seq_len} must be shorter than the corpus ({len(ids)} tokens)")
    n = len(ids) // seq_len
    return ids[: n * seq_len].reshape(n, seq_len)


def split_windows(ids, seq_len: int, val_fraction: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Train windows first, validation windows last; no window crosses the boundary."""
    w = windows(ids, seq_len)
    if not 0 <= val_fraction < 1:
        raise ConfigError(f"val_fraction must be in [0, 1), got {val_fraction}")
    n_val = int(round(len(w) * val_fraction))
    if val_fraction > 0:
        n_val = max(1, n_val)
    if n_val >= len(w):
        raise DataError("corpus too small for a train/validation split")
    return w[: len(w) - n_val], w[len(w) - n_val:]


def make_batches(ids, seq_len: int, batch_size: int, split: str = "train", seed: int = 0,
                 val_fraction: float = 0.1, shuffle: bool | None = None) -> Iterator[np.ndarray]:
    """Yield (batch, seq_len) token arrays. Train windows are shuffled per seed by default."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    if split not in ("train", "val", "all"):
        raise ConfigError(f"unknown split {split!r}")
    if split == "all":
        w = windows(ids, seq_len)
    else:
        train, val = split_windows(ids, seq_len, val_fraction)
        w = train if split == "train" else val
    if shuffle is None:
        shuffle = split == "train"
    order = np.random.default_rng(seed).permutation(len(w)) if shuffle else np.arange(len(w))
    for start in range(0, len(w), batch_size):
        yield w[order[start:start + batch_size]]


# -- synthetic corpus ---------------------------------------------------------------
# Deterministic English-like text for tests and demos when no corpus is at hand.

_DET = ["the", "a", "this", "that", "every", "one", "some", "her", "his", "our", "their", "no"]
_ADJ = ["old", "quiet", "bright", "small", "heavy", "green", "cold", "patient", "strange", "early",
        "narrow", "gentle", "broken", "silver", "distant", "warm", "simple", "hollow", "crooked",
        "golden", "tired", "wooden", "hidden", "proud", "careful", "empty", "ancient", "wild", "pale",
        "sudden", "crowded", "bitter"]
_NOUN = ["river", "garden", "window", "farmer", "letter", "mountain", "lamp", "sailor", "city", "road",
         "teacher", "wheel", "forest", "harbor", "clock", "stone", "child", "market", "bridge", "song",
         "winter", "horse", "kitchen", "island", "engine", "candle", "village", "tower", "doctor",
         "basket", "captain", "meadow", "library", "mirror", "soldier", "orchard", "storm", "ladder",
         "merchant", "chapel", "lantern", "valley", "painter", "blanket", "shepherd", "compass", "cellar",
         "fisherman", "parcel", "kettle", "violin", "factory", "cottage", "widow", "wagon", "prisoner"]
_VERB = ["carried", "watched", "found", "opened", "crossed", "painted", "followed", "built", "heard",
         "remembered", "lifted", "mended", "counted", "visited", "closed", "answered", "buried",
         "greeted", "pushed", "described", "borrowed", "guarded", "sold", "forgot", "cleaned", "chased",
         "admired", "measured", "repaired", "ignored", "warned", "named"]
_PREP = ["near", "under", "beside", "beyond", "across", "behind", "inside", "toward", "without", "above",
         "through", "against"]
_ADV = ["slowly", "again", "at dawn", "before noon", "in silence", "once more", "with care", "all day",
        "by mistake", "after supper", "in the rain", "without a word", "too late", "every morning"]
_NAME = ["Anna", "Tomas", "Marek", "Elise", "Jonah", "Ruth", "Pavel", "Ines", "Oskar", "Lena", "Hugo",
         "Clara", "Felix", "Agnes", "Viktor", "Nora"]
_SAY = ["said", "asked", "whispered", "shouted", "replied", "thought"]


def synthetic_corpus(n_bytes: int = 200_000, seed: int = 0) -> bytes:
    """Sentences from a small stochastic grammar with Zipf-skewed word choice."""
    rng = np.random.default_rng(seed)

    def pick(words):
        p = 1.0 / np.arange(1, len(words) + 1)
        return words[rng.choice(len(words), p=p / p.sum())]

    def noun_phrase():
        parts = [pick(_DET)]
        if rng.random() < 0.5:
            parts.append(pick(_ADJ))
        parts.append(pick(_NOUN))
        return " ".join(parts)

    def subject():
        return pick(_NAME) if rng.random() < 0.3 else noun_phrase()

    def clause():
        c = f"{subject()} {pick(_VERB)} {noun_phrase()}"
        r = rng.random()
        if r < 0.4:
            c += f" {pick(_PREP)} {noun_phrase()}"
        elif r < 0.6:
            c += f" {pick(_ADV)}"
        return c

    out: list[str] = []
    size = 0
    sentences_in_par = 0
    while size < n_bytes:
        r = rng.random()
        if r < 0.12:
            inner = clause()
            s = f'"{inner[0].upper() + inner[1:]}," {pick(_SAY)} {pick(_NAME)}'
        elif r < 0.2:
            s = f"In {rng.integers(1700, 1950)} {clause()}"
        elif r < 0.27:
            s = f"{subject()} {pick(_VERB)} {rng.integers(2, 99)} {pick(_NOUN)}s"
        else:
            s = clause()
            if rng.random() < 0.2:
                s += f", {'and' if rng.random() < 0.6 else 'but'} {clause()}"
        s = s[0].upper() + s[1:] + ("?" if rng.random() < 0.05 else ".")
        sentences_in_par += 1
        sep = "\n\n" if sentences_in_par >= 5 and rng.random() < 0.3 else " "
        if sep != " ":
            sentences_in_par = 0
        out.append(s + sep)
        size += len(s) + len(sep)
    return "".join(out).encode("ascii")[:n_bytes]
