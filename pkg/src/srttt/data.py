"""Byte tokenizer, template-story corpus and needle-in-a-haystack samples."""

from __future__ import annotations

import json
import string
from dataclasses import dataclass
from pathlib import Path

import numpy as np

VOCAB_SIZE = 256
NEEDLE_ALPHABET = string.ascii_uppercase + string.digits
NEEDLE_LEN = 8
CARRIER = "The magic key is "
RESERVED_TAIL = 64

# named RNG sub-streams
STREAM_DATA, STREAM_INIT, STREAM_EVAL, STREAM_NEEDLE = 11, 23, 37, 41


def rng_for(seed: int, stream: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(stream), *map(int, extra)])


def tokenize(text: str | bytes) -> list[int]:
    if isinstance(text, str):
        text = text.encode("utf-8")
    return list(text)


def detokenize(tokens) -> str:
    return bytes(int(t) for t in tokens).decode("utf-8", errors="replace")


NAMES = ["Tom", "Lily", "Max", "Sue", "Ben", "Mia", "Sam", "Anna"]
OBJECTS = ["ball", "cat", "dog", "cake", "box", "tree", "hat", "kite", "bird", "cup"]
PLACES = ["park", "house", "garden", "shop", "lake", "school"]
ADJS = ["red", "big", "small", "happy", "soft", "green", "little", "funny"]
FEELINGS = ["happy", "sad", "glad", "tired", "excited"]
VERBS = ["found", "liked", "saw", "took", "lost", "wanted", "hugged"]
TEMPLATES = [
    "{n} had a {a} {o}.",
    "{n} {v} the {o}.",
    "The {o} was {a}.",
    "{n} and {m} went to the {p}.",
    "They were very {f}.",
    "{n} played with the {a} {o} in the {p}.",
    "One day, {n} saw a {a} {o}.",
    "{n} was {f}.",
]


def _sentences(rng: np.random.Generator):
    while True:
        t = TEMPLATES[rng.integers(len(TEMPLATES))]
        n, m = rng.choice(NAMES, size=2, replace=False)
        yield t.format(
            n=n,
            m=m,
            o=OBJECTS[rng.integers(len(OBJECTS))],
            p=PLACES[rng.integers(len(PLACES))],
            a=ADJS[rng.integers(len(ADJS))],
            f=FEELINGS[rng.integers(len(FEELINGS))],
            v=VERBS[rng.integers(len(VERBS))],
        )


def gen_sentences(seed: int, n_tokens: int, source: list[str] | None = None) -> list[str]:
    """Sentences (each ending in a space) totalling at least ``n_tokens`` bytes."""
    rng = rng_for(seed, STREAM_DATA)
    out, total = [], 0
    if source:
        it = (source[i % len(source)] for i in range(int(rng.integers(len(source))), 10**12))
    else:
        it = _sentences(rng)
    while total < n_tokens:
        s = next(it).strip() + " "
        out.append(s)
        total += len(s.encode("utf-8"))
    return out


def gen_corpus(seed: int, n_tokens: int, source: list[str] | None = None) -> str:
    if n_tokens <= 0:
        raise ValueError("n_tokens must be positive")
    text = "".join(gen_sentences(seed, n_tokens, source))
    return detokenize(tokenize(text)[:n_tokens])


def load_text_source(path: str | Path) -> list[str]:
    """Plain UTF-8 file, one story line per line; blank lines are skipped."""
    lines = [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines:
        raise ValueError(f"{path}: no text lines")
    return lines


def gen_needle(seed: int) -> str:
    rng = rng_for(seed, STREAM_NEEDLE)
    return "".join(NEEDLE_ALPHABET[i] for i in rng.integers(len(NEEDLE_ALPHABET), size=NEEDLE_LEN))


@dataclass
class NiahSample:
    tokens: list[int]
    needle_code: str
    depth: float
    needle_span: tuple[int, int]  # the full carrier sentence
    code_span: tuple[int, int]  # the 8 code bytes inside it
    query_span: tuple[int, int]
    answer_span: tuple[int, int]
    seed: int = -1

    @property
    def context(self) -> list[int]:
        """Everything the model sees before it has to produce the answer."""
        return self.tokens[: self.answer_span[0]]

    def to_record(self) -> dict:
        return {
            "seed": self.seed,
            "depth": self.depth,
            "needle_code": self.needle_code,
            "seq_len": len(self.tokens),
            "needle_span": list(self.needle_span),
            "code_span": list(self.code_span),
            "query_span": list(self.query_span),
            "answer_span": list(self.answer_span),
        }


def inject(sentences: list[str], needle_code: str, depth: float, seq_len: int, seed: int = -1) -> NiahSample:
    """Place the needle sentence at fractional ``depth`` of the background.

    Layout: background prefix | needle sentence | background | query | code |
    ".", then background filler to exactly ``seq_len`` tokens. Depth maps over
    the first ``seq_len - RESERVED_TAIL`` tokens, snapped back to a sentence
    boundary.
    """
    if not 0 <= depth <= 1:
        raise ValueError(f"depth must lie in [0, 1], got {depth}")
    needle = tokenize(f"{CARRIER}{needle_code}. ")
    query = tokenize(CARRIER)
    budget = seq_len - RESERVED_TAIL
    if budget < 0 or len(needle) + len(query) + NEEDLE_LEN + 1 > RESERVED_TAIL:
        raise ValueError(f"seq_len={seq_len} too small for needle + query + answer (needs >= {RESERVED_TAIL})")
    sent_toks = [tokenize(s) for s in sentences]
    bounds = [0]
    for st in sent_toks:
        if bounds[-1] + len(st) > budget:
            break
        bounds.append(bounds[-1] + len(st))
    bg_len = bounds[-1]
    bg = [t for st in sent_toks[: len(bounds) - 1] for t in st]
    target = int(np.floor(depth * bg_len))
    off = max(b for b in bounds if b <= target)
    tokens = bg[:off] + needle + bg[off:bg_len]
    needle_span = (off, off + len(needle))
    code_start = off + len(query)
    q0 = len(tokens)
    tokens += query
    a0 = len(tokens)
    tokens += tokenize(needle_code) + tokenize(". ")
    rest = [t for st in sent_toks[len(bounds) - 1 :] for t in st]
    k = 0
    while len(tokens) < seq_len:
        if k >= len(rest):
            rest += tokenize("The end. ")
        tokens.append(rest[k])
        k += 1
    return NiahSample(
        tokens=tokens[:seq_len],
        needle_code=needle_code,
        depth=float(depth),
        needle_span=needle_span,
        code_span=(code_start, code_start + NEEDLE_LEN),
        query_span=(q0, a0),
        answer_span=(a0, a0 + NEEDLE_LEN),
        seed=seed,
    )


def make_sample(seed: int, depth: float, seq_len: int, source: list[str] | None = None) -> NiahSample:
    """(seed, depth, seq_len) fully determines the sample."""
    return inject(gen_sentences(seed, seq_len + 256, source), gen_needle(seed), depth, seq_len, seed)


def training_sequence(seed: int, step: int, seq_len: int, needle_mix: float, source=None) -> list[int]:
    """Deterministic training sequence for ``step``: a NIAH sample with
    probability ``needle_mix``, plain background otherwise."""
    rng = rng_for(seed, STREAM_DATA, step)
    sub_seed = int(rng.integers(2**31))
    if rng.random() < needle_mix:
        return make_sample(sub_seed, float(rng.random()), seq_len, source).tokens
    return tokenize(gen_corpus(sub_seed, seq_len, source))


def dump_samples(samples, fh):
    for s in samples:
        fh.write(json.dumps(s.to_record()) + "\n")
