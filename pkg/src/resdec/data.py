"""Corpora, vocabularies, batching, synthetic tasks and gold trees."""
from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import InputError, ParseError

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<s>", "</s>", "<unk>")


class Vocabulary:
    """Bidirectional token/id map; ids 0-3 are PAD, BOS, EOS, UNK."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for tok in tokens:
            if tok in self.stoi:
                raise InputError(f"duplicate vocabulary token {tok!r}")
            self.stoi[tok] = len(self.itos)
            self.itos.append(tok)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    @property
    def tokens(self) -> list[str]:
        """Non-reserved tokens in id order."""
        return self.itos[len(RESERVED):]

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def encode(self, sentence: str | Sequence[str], add_bos=False, add_eos=True) -> list[int]:
        words = sentence.split() if isinstance(sentence, str) else list(sentence)
        ids = [self.stoi.get(w, UNK) for w in words]
        if add_bos:
            ids.insert(0, BOS)
        if add_eos:
            ids.append(EOS)
        return ids

    def decode(self, ids: Iterable[int], strip=True) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip and i in (PAD, BOS):
                continue
            if strip and i == EOS:
                break
            out.append(self.itos[i])
        return out

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        text = Path(path).read_text(encoding="utf-8")
        return cls(line for line in text.splitlines() if line)


def build_vocabulary(corpus: Iterable[str | Sequence[str]], max_size: int) -> Vocabulary:
    """Keep the ``max_size - 4`` most frequent tokens, ties broken lexicographically."""
    if max_size < len(RESERVED):
        raise InputError(f"max_size must be >= {len(RESERVED)}, got {max_size}")
    counts: Counter = Counter()
    seen = False
    for line in corpus:
        seen = True
        counts.update(line.split() if isinstance(line, str) else line)
    if not seen:
        raise InputError("cannot build a vocabulary from an empty corpus")
    for tok in RESERVED:
        counts.pop(tok, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary(tok for tok, _ in ranked[: max_size - len(RESERVED)])


@dataclass(frozen=True)
class SentencePair:
    """Source ends with EOS; target starts with BOS and ends with EOS."""

    source: tuple
    target: tuple

    def __post_init__(self):
        if not self.source or self.source[-1] != EOS:
            raise InputError("source must be non-empty and end with EOS")
        if len(self.target) < 2 or self.target[0] != BOS or self.target[-1] != EOS:
            raise InputError("target must begin with BOS and end with EOS")


def make_pair(source_ids: Sequence[int], target_ids: Sequence[int]) -> SentencePair:
    """Wrap bare token ids with the boundary symbols."""
    return SentencePair(tuple(source_ids) + (EOS,), (BOS,) + tuple(target_ids) + (EOS,))


def load_parallel_corpus(src_path, tgt_path, src_vocab: Vocabulary, tgt_vocab: Vocabulary,
                         max_len: int = 50) -> list[SentencePair]:
    """Read aligned UTF-8 files; pairs with a side longer than ``max_len`` are dropped."""
    src_lines = Path(src_path).read_text(encoding="utf-8").splitlines()
    tgt_lines = Path(tgt_path).read_text(encoding="utf-8").splitlines()
    if len(src_lines) != len(tgt_lines):
        raise InputError(f"{src_path} has {len(src_lines)} lines but {tgt_path} has {len(tgt_lines)}")
    pairs = []
    for s, t in zip(src_lines, tgt_lines):
        s, t = s.split(), t.split()
        if not s or not t or len(s) + 1 > max_len or len(t) + 1 > max_len:
            continue
        pairs.append(SentencePair(tuple(src_vocab.encode(s)), tuple(tgt_vocab.encode(t, add_bos=True))))
    return pairs


# ---------------------------------------------------------------------------
# synthetic tasks

TASKS = ("copy", "reverse", "agreement")


def synthetic_vocabulary(vocab_size: int) -> Vocabulary:
    """Vocabulary whose content tokens ``t0..t{n-1}`` sit at ids ``4..n+3``."""
    return Vocabulary(f"t{i}" for i in range(vocab_size))


def agreement_groups(vocab_size: int) -> tuple[list[int], list[int], list[int]]:
    """Split content ids into (markers, paired tokens, filler tokens)."""
    k = max(2, vocab_size // 5)
    ids = list(range(len(RESERVED), len(RESERVED) + vocab_size))
    return ids[:k], ids[k: 2 * k], ids[2 * k:]


def make_synthetic_task(kind: str, vocab_size: int, length_range: tuple[int, int], n_pairs: int,
                        seed: int) -> list[SentencePair]:
    """Generate ``n_pairs`` deterministic pairs over ``vocab_size`` content tokens.

    ``copy`` and ``reverse`` are what they say.  ``agreement`` sources
    start with a marker; the target copies the source and then emits the
    token paired with the marker, so the final prediction depends on the
    first word.
    """
    if kind not in TASKS:
        raise InputError(f"unknown task {kind!r}; expected one of {TASKS}")
    lo, hi = length_range
    if vocab_size < 6:
        raise InputError(f"vocab_size must be >= 6, got {vocab_size}")
    if lo < 2 or hi < lo:
        raise InputError(f"invalid length range {length_range}")
    if n_pairs < 0:
        raise InputError("n_pairs must be non-negative")
    rng = np.random.default_rng(seed)
    first = len(RESERVED)
    pairs = []
    if kind == "agreement":
        markers, paired, filler = agreement_groups(vocab_size)
    for _ in range(n_pairs):
        n = int(rng.integers(lo, hi + 1))
        if kind == "agreement":
            k = int(rng.integers(len(markers)))
            body = rng.choice(filler, size=n - 1).tolist()
            src = [markers[k]] + body
            tgt = src + [paired[k]]
        else:
            src = rng.integers(first, first + vocab_size, size=n).tolist()
            tgt = src if kind == "copy" else src[::-1]
        pairs.append(make_pair(src, tgt))
    return pairs


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    src: np.ndarray       # (B, m) int
    src_mask: np.ndarray  # (B, m) float, 1 on real tokens
    tgt_in: np.ndarray    # (B, n) int, BOS + target words
    tgt_out: np.ndarray   # (B, n) int, target words + EOS
    tgt_mask: np.ndarray  # (B, n) float

    def __len__(self) -> int:
        return self.tgt_in.shape[0]

    @property
    def n_tokens(self) -> int:
        return int(self.tgt_mask.sum())


def pad_sequences(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    for row, s in enumerate(seqs):
        ids[row, : len(s)] = s
    return ids, (ids != PAD).astype(np.float64)


def make_batch(pairs: Sequence[SentencePair]) -> Batch:
    src, src_mask = pad_sequences([p.source for p in pairs])
    tgt, _ = pad_sequences([p.target for p in pairs])
    tgt_in, tgt_out = tgt[:, :-1].copy(), tgt[:, 1:].copy()
    return Batch(src, src_mask, tgt_in, tgt_out, (tgt_out != PAD).astype(np.float64))


def batch_iterator(pairs: Sequence[SentencePair], batch_size: int, seed: int | None = None,
                   epoch: int = 0) -> Iterator[Batch]:
    """One epoch of padded batches; shuffled by ``(seed, epoch)`` unless ``seed`` is None."""
    if batch_size < 1:
        raise InputError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(pairs))
    if seed is not None:
        np.random.default_rng([seed, epoch]).shuffle(order)
    for start in range(0, len(order), batch_size):
        yield make_batch([pairs[i] for i in order[start: start + batch_size]])


# ---------------------------------------------------------------------------
# gold trees

_TOKEN = re.compile(r"\(|\)|[^\s()]+")


@dataclass(frozen=True)
class GoldTree:
    """Bracketed constituent structure; spans are end-exclusive and include singletons."""

    words: tuple
    spans: frozenset = field(default_factory=frozenset)

    def constituents(self) -> frozenset:
        """Spans covering more than one word."""
        return frozenset(s for s in self.spans if s[1] - s[0] > 1)


def _read_brackets(tokens: list[str], line: int):
    """Nested lists of atoms; raises on unbalanced parentheses."""
    stack: list[list] = [[]]
    for tok in tokens:
        if tok == "(":
            stack.append([])
        elif tok == ")":
            if len(stack) == 1:
                raise ParseError("unbalanced ')'", line)
            node = stack.pop()
            stack[-1].append(node)
        else:
            stack[-1].append(tok)
    if len(stack) != 1:
        raise ParseError("unbalanced '(': missing ')'", line)
    return stack[0]


def _is_labeled(node) -> bool:
    # Unlabeled trees never mix a bare word with a bracketed sibling after it.
    if not isinstance(node, list):
        return False
    if node and isinstance(node[0], str) and any(isinstance(c, list) for c in node[1:]):
        return True
    return any(_is_labeled(c) for c in node)


def parse_tree(text: str, line: int | None = None) -> GoldTree:
    """Parse one bracketed tree.  Labels (Penn style) are detected and dropped."""
    tokens = _TOKEN.findall(text)
    top = _read_brackets(tokens, line)
    if not top:
        raise ParseError("empty tree", line)
    if len(top) != 1 or not isinstance(top[0], list):
        raise ParseError("expected exactly one bracketed tree", line)
    labeled = _is_labeled(top[0])
    words: list[str] = []
    spans: set = set()

    def walk(node) -> None:
        start = len(words)
        children = node
        if labeled and len(children) > 1 and isinstance(children[0], str):
            children = children[1:]
        for child in children:
            if isinstance(child, list):
                walk(child)
            else:
                spans.add((len(words), len(words) + 1))
                words.append(child)
        if len(words) > start:
            spans.add((start, len(words)))

    walk(top[0])
    if not words:
        raise ParseError("tree has no words", line)
    return GoldTree(tuple(words), frozenset(spans))


def load_gold_trees(path) -> list[GoldTree]:
    """One bracketed tree per non-blank line."""
    trees = []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if raw.strip():
            trees.append(parse_tree(raw, lineno))
    return trees


# ---------------------------------------------------------------------------
# language-model corpora


def lm_sequences(lines: Iterable[str], vocab: Vocabulary, max_len: int = 50) -> list[tuple]:
    """Encode sentences as ``BOS w1 .. wk EOS``; longer ones are dropped."""
    out = []
    for line in lines:
        words = line.split()
        if words and len(words) + 1 <= max_len:
            out.append(tuple(vocab.encode(words, add_bos=True)))
    return out


def make_lm_batch(seqs: Sequence[Sequence[int]]) -> Batch:
    tgt, _ = pad_sequences(seqs)
    tgt_in, tgt_out = tgt[:, :-1].copy(), tgt[:, 1:].copy()
    return Batch(None, None, tgt_in, tgt_out, (tgt_out != PAD).astype(np.float64))


def lm_batch_iterator(seqs: Sequence[Sequence[int]], batch_size: int, seed: int | None = None,
                      epoch: int = 0) -> Iterator[Batch]:
    if batch_size < 1:
        raise InputError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(seqs))
    if seed is not None:
        np.random.default_rng([seed, epoch]).shuffle(order)
    for start in range(0, len(order), batch_size):
        yield make_lm_batch([seqs[i] for i in order[start: start + batch_size]])


def make_toy_lm_corpus(n_tokens: int, seed: int, n_topics: int = 4, topic_size: int = 8,
                       n_function: int = 8, length_range: tuple[int, int] = (6, 16)) -> list[str]:
    """Word-level sentences whose content words all come from one topic per sentence.

    Half the positions hold shared function words, so the topic has to be
    carried across the sentence to predict the next content word.  Lines
    are produced until ``n_tokens`` words (end symbols included) exist.
    """
    if n_tokens < 1 or n_topics < 1 or topic_size < 1 or n_function < 1:
        raise InputError("toy corpus sizes must be positive")
    rng = np.random.default_rng(seed)
    function = [f"f{j}" for j in range(n_function)]
    topics = [[f"w{k}_{j}" for j in range(topic_size)] for k in range(n_topics)]
    lines, total = [], 0
    while total < n_tokens:
        words = topics[int(rng.integers(n_topics))]
        n = int(rng.integers(length_range[0], length_range[1] + 1))
        sent = [function[int(rng.integers(n_function))] if rng.random() < 0.5 else words[int(rng.integers(topic_size))]
                for _ in range(n)]
        lines.append(" ".join(sent))
        total += n + 1
    return lines
