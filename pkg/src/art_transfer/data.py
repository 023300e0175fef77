"""Corpus loading, vocabularies, batching and the synthetic cross-domain task."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError
from .heads import CHAR_PAD, CHAR_UNK, pad_chars

log = logging.getLogger(__name__)

PAD, UNK = 0, 1
PAD_TOKEN, UNK_TOKEN = "<pad>", "<unk>"
FLOAT_FORMAT = "%.17g"


class Vocabulary:
    """Token <-> id map with ``<pad>`` = 0 and ``<unk>`` = 1.

    Non-reserved tokens are ordered by decreasing frequency, then
    lexicographically.
    """

    def __init__(self, tokens: Sequence[str] = (), reserved: bool = True):
        self.itos: list[str] = [PAD_TOKEN, UNK_TOKEN] if reserved else []
        self.reserved = reserved
        self.stoi: dict[str, int] = {}
        for i, t in enumerate(self.itos):
            self.stoi[t] = i
        for t in tokens:
            self.add(t)

    @classmethod
    def build(cls, sequences: Iterable[Sequence[str]], min_count: int = 1,
              reserved: bool = True) -> "Vocabulary":
        counts = Counter(t for seq in sequences for t in seq)
        ordered = sorted((t for t, c in counts.items() if c >= min_count),
                         key=lambda t: (-counts[t], t))
        return cls(ordered, reserved)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def id(self, token: str) -> int:
        if self.reserved:
            return self.stoi.get(token, UNK)
        try:
            return self.stoi[token]
        except KeyError:
            raise DataError(f"unknown label {token!r}") from None

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]


def char_vocabulary(sequences: Iterable[Sequence[str]]) -> Vocabulary:
    """Characters seen in the tokens; id 0 is the pad char, 1 the unknown char."""
    chars = sorted({ch for seq in sequences for tok in seq for ch in tok})
    v = Vocabulary(chars)
    assert v.id(PAD_TOKEN) == CHAR_PAD and v.id(UNK_TOKEN) == CHAR_UNK
    return v


@dataclass
class Example:
    """One sentence: whitespace tokens plus a class bit or a tag per token."""

    tokens: list[str]
    label: int | list[str]
    domain: str = "target"

    @property
    def is_tagging(self) -> bool:
        return isinstance(self.label, list)

    def char_ids(self, chars: Vocabulary) -> list[list[int]]:
        return [[chars.id(ch) for ch in tok] for tok in self.tokens]


# ----------------------------------------------------------------- embeddings

def load_embeddings_text(path, width: int) -> tuple[list[str], np.ndarray]:
    """Read ``token v1 ... v_width`` lines; returns tokens and a ``(n, width)`` matrix."""
    tokens, rows = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split(" ")
            if parts == [""]:
                continue
            if len(parts) != width + 1:
                raise DataError(f"{path}:{lineno}: expected {width} values, got {len(parts) - 1}")
            try:
                rows.append([float(v) for v in parts[1:]])
            except ValueError:
                raise DataError(f"{path}:{lineno}: malformed number") from None
            tokens.append(parts[0])
    matrix = np.array(rows, dtype=np.float64).reshape(len(rows), width)
    return tokens, matrix


def write_embeddings_text(path, tokens: Sequence[str], matrix: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for tok, row in zip(tokens, matrix):
            fh.write(tok + " " + " ".join(FLOAT_FORMAT % v for v in row) + "\n")


# -------------------------------------------------------------- classification

def load_classification_tsv(path, lowercase: bool = True) -> list[Example]:
    """``label<TAB>text`` lines with label 0/1; blank lines are skipped."""
    examples, skipped = [], 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                skipped += 1
                continue
            label, sep, text = line.partition("\t")
            if not sep or label not in ("0", "1"):
                raise DataError(f"{path}:{lineno}: label must be 0 or 1 followed by a tab")
            tokens = (text.lower() if lowercase else text).split()
            if not tokens:
                raise DataError(f"{path}:{lineno}: empty text")
            examples.append(Example(tokens, int(label)))
    if skipped:
        log.warning("%s: skipped %d blank line(s)", path, skipped)
    return examples


def write_classification_tsv(path, examples: Iterable[Example]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            fh.write(f"{ex.label}\t{' '.join(ex.tokens)}\n")


# ---------------------------------------------------------------------- CoNLL

def load_conll(path) -> list[Example]:
    """One ``token<TAB>tag`` per line, sentences separated by blank lines.

    Lines without a tab are split on whitespace, taking the first column as
    the token and the last as the tag (CoNLL-2003 layout).
    """
    examples: list[Example] = []
    tokens, tags = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                if tokens:
                    examples.append(Example(tokens, tags))
                    tokens, tags = [], []
                continue
            if "\t" in line:
                parts = line.split("\t")
            else:
                parts = line.split()
            token, tag = parts[0], parts[-1]
            if len(parts) < 2 or not token.strip() or not tag.strip():
                raise DataError(f"{path}:{lineno}: need a token and a tag")
            tokens.append(token)
            tags.append(tag)
    if tokens:
        examples.append(Example(tokens, tags))
    return examples


def write_conll(path, examples: Iterable[Example]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            for tok, tag in zip(ex.tokens, ex.label):
                fh.write(f"{tok}\t{tag}\n")
            fh.write("\n")


def tag_vocabulary(examples: Iterable[Example]) -> Vocabulary:
    """Tags in first-seen order; no reserved entries."""
    v = Vocabulary(reserved=False)
    for ex in examples:
        for tag in ex.label:
            v.add(tag)
    return v


def subsample(examples: Sequence, fraction: float, seed: int) -> list:
    """Seeded subset of ``round(fraction * len)`` items, kept in original order."""
    k = int(round(fraction * len(examples)))
    idx = np.sort(np.random.default_rng(seed).choice(len(examples), size=k, replace=False))
    return [examples[i] for i in idx]


# ------------------------------------------------------------------- batching

@dataclass
class Batch:
    examples: list[Example]
    ids: np.ndarray          # (B, n) word ids, PAD beyond length
    lengths: np.ndarray      # (B,)
    mask: np.ndarray         # (B, n) bool
    labels: np.ndarray       # (B,) class bits or (B, n) tag ids
    chars: np.ndarray | None = None        # (B, n, L) char ids
    char_mask: np.ndarray | None = None    # (B, n, L)

    @property
    def size(self) -> int:
        return len(self.examples)


def encode_batch(examples: Sequence[Example], vocab: Vocabulary,
                 chars: Vocabulary | None = None, tags: Vocabulary | None = None) -> Batch:
    B = len(examples)
    lengths = np.array([len(ex.tokens) for ex in examples])
    if np.any(lengths == 0):
        raise DataError("empty sentence in batch")
    n = int(lengths.max())
    ids = np.full((B, n), PAD, dtype=np.int64)
    mask = np.zeros((B, n), dtype=bool)
    for b, ex in enumerate(examples):
        ids[b, :lengths[b]] = vocab.encode(ex.tokens)
        mask[b, :lengths[b]] = True
    if tags is not None:
        labels = np.zeros((B, n), dtype=np.int64)
        for b, ex in enumerate(examples):
            labels[b, :lengths[b]] = tags.encode(ex.label)
    else:
        labels = np.array([ex.label for ex in examples], dtype=np.int64)
    batch = Batch(list(examples), ids, lengths, mask, labels)
    if chars is not None:
        per_tok = [[pad_chars(c) for c in ex.char_ids(chars)] for ex in examples]
        L = max(len(c) for tok in per_tok for c in tok)
        cid = np.full((B, n, L), CHAR_PAD, dtype=np.int64)
        cmask = np.zeros((B, n, L), dtype=bool)
        for b, toks in enumerate(per_tok):
            for t, (c, tok) in enumerate(zip(toks, examples[b].tokens)):
                cid[b, t, :len(c)] = c
                cmask[b, t, :len(tok)] = True
        batch.chars, batch.char_mask = cid, cmask
    return batch


def batch_indices(n: int, batch_size: int, rng: np.random.Generator | None = None) -> list:
    """Index groups covering ``range(n)`` once; shuffled when ``rng`` is given."""
    order = np.arange(n) if rng is None else rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


# ----------------------------------------------------------- synthetic task

@dataclass
class SyntheticTaskSpec:
    """Generator settings for the two-domain collocation task.

    Each sentence holds filler words and exactly one sentiment trigger. Its
    label is the trigger's polarity, flipped when a modifier word sits at a
    flipping offset before the trigger. The source and target domains differ
    in which offsets flip (``source_offsets`` vs ``target_offsets``), in
    the offsets at which non-flipping distractor modifiers are placed, and
    by the token substitutions in ``shift_map``.
    """

    vocab_size: int = 30
    min_len: int = 9
    max_len: int = 14
    positive: tuple = ("great", "love", "superb", "fine", "nice", "happy")
    negative: tuple = ("awful", "hate", "poor", "bad", "dull", "sad")
    modifiers: tuple = ("hardly", "never", "barely")
    source_offsets: tuple = (1, 2)
    target_offsets: tuple = (4, 5, 6)
    source_distractor_offsets: tuple = (3, 4, 5, 6, 7)
    target_distractor_offsets: tuple = ()
    collocation_fraction: float = 0.3
    distractor_fraction: float = 0.5
    shift_map: dict = field(default_factory=lambda: {"w0": "t0", "w1": "t1", "w2": "t2",
                                                      "w3": "t3"})
    seed: int = 0

    def __post_init__(self):
        for name in ("positive", "negative", "modifiers", "source_offsets", "target_offsets",
                     "source_distractor_offsets", "target_distractor_offsets"):
            setattr(self, name, tuple(getattr(self, name)))

    def fillers(self) -> list[str]:
        return [f"w{k}" for k in range(self.vocab_size)]

    def offsets(self, domain: str) -> tuple:
        return self.source_offsets if domain == "source" else self.target_offsets

    def distractors(self, domain: str) -> tuple:
        return (self.source_distractor_offsets if domain == "source"
                else self.target_distractor_offsets)

    def validate(self) -> None:
        pos, neg, mod = set(self.positive), set(self.negative), set(self.modifiers)
        if pos & neg:
            raise DataError(f"trigger words in both classes: {sorted(pos & neg)}")
        if (pos | neg) & mod:
            raise DataError("modifiers overlap trigger words")
        words = pos | neg | mod
        if words & set(self.fillers()) or words & set(self.shift_map.values()):
            raise DataError("filler or substituted words overlap trigger/modifier words")
        for dom in ("source", "target"):
            if set(self.offsets(dom)) & set(self.distractors(dom)):
                raise DataError(f"{dom}: distractor offsets overlap flipping offsets")
            if any(k < 1 for k in self.offsets(dom) + self.distractors(dom)):
                raise DataError("offsets must be positive")
            longest = max(self.offsets(dom) + self.distractors(dom), default=0)
            if longest >= self.min_len:
                raise DataError(f"{dom}: offset {longest} does not fit sentences of length "
                                f"{self.min_len}")
        if not 0 <= self.collocation_fraction <= 1 or not 0 <= self.distractor_fraction <= 1:
            raise DataError("fractions must be in [0, 1]")
        if self.min_len < 1 or self.max_len < self.min_len:
            raise DataError("bad sentence length range")


def synthetic_label(tokens: Sequence[str], spec: SyntheticTaskSpec, domain: str) -> int:
    """Label rule of the synthetic task."""
    pos, neg = set(spec.positive), set(spec.negative)
    trig = [t for t, w in enumerate(tokens) if w in pos or w in neg]
    if len(trig) != 1:
        raise DataError("synthetic sentence must contain exactly one trigger")
    i = trig[0]
    label = 1 if tokens[i] in pos else 0
    mods = set(spec.modifiers)
    if any(i - k >= 0 and tokens[i - k] in mods for k in spec.offsets(domain)):
        label = 1 - label
    return label


def _sentence(rng, spec: SyntheticTaskSpec, domain: str, flip: bool, distract: bool):
    fillers = spec.fillers()
    n = int(rng.integers(spec.min_len, spec.max_len + 1))
    flip_offsets, distract_offsets = spec.offsets(domain), spec.distractors(domain)
    distract = distract and bool(distract_offsets)
    need = max([k for k, on in ((max(flip_offsets), flip),
                                (max(distract_offsets, default=0), distract)) if on] or [0])
    i = int(rng.integers(need, n))
    toks = [fillers[k] for k in rng.integers(0, len(fillers), size=n)]
    polarity = int(rng.integers(0, 2))
    toks[i] = str(rng.choice(spec.positive if polarity else spec.negative))
    if flip:
        k = int(rng.choice([k for k in flip_offsets if k <= i]))
        toks[i - k] = str(rng.choice(spec.modifiers))
    if distract:
        k = int(rng.choice([k for k in distract_offsets if k <= i]))
        if not flip or toks[i - k] not in spec.modifiers:
            toks[i - k] = str(rng.choice(spec.modifiers))
    if domain == "target":
        toks = [spec.shift_map.get(t, t) for t in toks]
    return toks


def _corpus(rng, spec: SyntheticTaskSpec, domain: str, count: int) -> list[Example]:
    n_flip = int(np.ceil(spec.collocation_fraction * count))
    flips = np.zeros(count, dtype=bool)
    flips[:n_flip] = True
    flips = rng.permutation(flips)
    out = []
    for f in flips:
        distract = bool(rng.random() < spec.distractor_fraction)
        toks = _sentence(rng, spec, domain, bool(f), distract)
        out.append(Example(toks, synthetic_label(toks, spec, domain), domain))
    return out


def generate_synthetic_transfer(spec: SyntheticTaskSpec, n_source: int, n_target_train: int,
                                n_target_test: int, n_source_dev: int = 0,
                                n_target_dev: int = 0) -> dict[str, list[Example]]:
    """Source, target-train and target-test corpora (plus optional dev splits).

    A ``collocation_fraction`` share of every corpus is labelled through a
    modifier at one of the domain's flipping offsets.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    parts = {
        "source_train": ("source", n_source),
        "source_dev": ("source", n_source_dev),
        "target_train": ("target", n_target_train),
        "target_dev": ("target", n_target_dev),
        "target_test": ("target", n_target_test),
    }
    return {name: _corpus(rng, spec, dom, count) for name, (dom, count) in parts.items()}
