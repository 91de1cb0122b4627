"""Binary phrase trees read off target-side attention, and bracket scoring."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .data import GoldTree
from .errors import ContractError, InputError
from .inference import AttentionTrace


@dataclass(frozen=True)
class BinaryTree:
    """A leaf covering words ``[start, end)`` or a node with exactly two children."""

    start: int
    end: int
    children: tuple = ()

    @classmethod
    def node(cls, left: "BinaryTree", right: "BinaryTree") -> "BinaryTree":
        if left.end != right.start:
            raise ContractError(f"children {left.span} and {right.span} are not adjacent")
        return cls(left.start, right.end, (left, right))

    @property
    def span(self) -> tuple[int, int]:
        return (self.start, self.end)

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def __len__(self) -> int:
        return self.end - self.start

    def leaves(self) -> list["BinaryTree"]:
        out, stack = [], [self]
        while stack:
            t = stack.pop()
            if t.is_leaf:
                out.append(t)
            else:
                stack.extend(reversed(t.children))
        return out

    def spans(self) -> frozenset:
        """Every span in the tree, singletons included."""
        out, stack = set(), [self]
        while stack:
            t = stack.pop()
            out.add(t.span)
            stack.extend(t.children)
        return frozenset(out)

    def constituents(self) -> frozenset:
        """Spans of more than one word, whole sentence included."""
        return frozenset(s for s in self.spans() if s[1] - s[0] > 1)

    def bracket(self, words: Sequence[str]) -> str:
        """Unlabeled bracket string; a one-word leaf renders as ``(w)``."""
        if len(words) < self.end:
            raise InputError(f"tree spans {self.end} words, sentence has {len(words)}")
        if self.is_leaf:
            return "(" + " ".join(_escape(w) for w in words[self.start:self.end]) + ")"
        left, right = self.children
        return f"({left.bracket(words)} {right.bracket(words)})"


def _escape(word: str) -> str:
    return str(word).replace("(", "-LRB-").replace(")", "-RRB-")


def binarize_attention(trace: AttentionTrace) -> np.ndarray:
    """0/1 matrix over the emitted words: row k marks the word most attended while predicting word k.

    The begin-of-sentence slot and the step that emits end-of-sentence are
    left out; ties go to the most recent word.
    """
    if trace.target_attention is None:
        raise ContractError("binarization needs target-side attention")
    n_words = len(trace.words())
    A = np.zeros((n_words, n_words), dtype=np.int8)
    for k in range(1, n_words):
        row = np.asarray(trace.target_attention[k], dtype=float)[1:]  # drop BOS
        if row.size != k:
            raise ContractError(f"attention row {k} has {row.size + 1} entries, expected {k + 1}")
        A[k, k - 1 - int(np.argmax(row[::-1]))] = 1
    return A


def _check_matrix(A: np.ndarray, n: int) -> np.ndarray:
    A = np.asarray(A)
    if A.shape != (n, n):
        raise ContractError(f"attention matrix has shape {A.shape}, expected ({n}, {n})")
    if not np.isin(A, (0, 1)).all():
        raise ContractError("attention matrix entries must be 0 or 1")
    if (A.sum(axis=1) > 1).any():
        raise ContractError("attention matrix has a row with more than one 1")
    return A.astype(bool)


def build_tree(A, sentence: Sequence) -> BinaryTree:
    """Split into a prefix leaf and a recursively built suffix at the first attended column.

    Within a segment of length ``n`` the scan starts at column 1 and stops
    at the first column with any 1; a segment with no such column is a leaf.
    """
    n = len(sentence)
    if n < 1:
        raise ContractError("sentence must have at least one word")
    A = _check_matrix(A, n)
    hits = [list(np.flatnonzero(A[:, j])) for j in range(n)]  # rows attending column j
    prefixes = []
    lo = 0
    while True:
        i = 1
        while lo + i < n and not any(r >= lo for r in hits[lo + i]):
            i += 1
        if lo + i >= n:
            tree = BinaryTree(lo, n)
            break
        prefixes.append(BinaryTree(lo, lo + i))
        lo += i
    for leaf in reversed(prefixes):
        tree = BinaryTree.node(leaf, tree)
    return tree


def right_branching_tree(n: int) -> BinaryTree:
    """``(w0 (w1 (... (w[n-2] w[n-1]))))`` with every word its own leaf."""
    if n < 1:
        raise ContractError("tree needs at least one word")
    tree = BinaryTree(n - 1, n)
    for k in range(n - 2, -1, -1):
        tree = BinaryTree.node(BinaryTree(k, k + 1), tree)
    return tree


@dataclass(frozen=True)
class ParsevalScore:
    precision: float
    recall: float
    matched: int
    predicted: int = 0
    gold: int = 0

    def __str__(self) -> str:
        return f"precision={self.precision:.6f} recall={self.recall:.6f}"


def _span_set(tree) -> tuple[frozenset, int | None]:
    if isinstance(tree, BinaryTree):
        return tree.constituents(), len(tree)
    if isinstance(tree, GoldTree):
        return tree.constituents(), len(tree.words)
    spans = frozenset(tuple(s) for s in tree)
    return frozenset(s for s in spans if s[1] - s[0] > 1), None


def _score(matched: int, n_pred: int, n_gold: int) -> ParsevalScore:
    return ParsevalScore(matched / n_pred if n_pred else 0.0, matched / n_gold if n_gold else 0.0,
                         matched, n_pred, n_gold)


def parseval(predicted, gold) -> ParsevalScore:
    """Unlabeled bracket precision and recall over multi-word spans.

    Either argument may be a :class:`BinaryTree`, a gold tree, or a plain
    collection of ``(start, end)`` spans.
    """
    pred, n_pred = _span_set(predicted)
    ref, n_gold = _span_set(gold)
    if n_pred is not None and n_gold is not None and n_pred != n_gold:
        raise InputError(f"predicted tree covers {n_pred} words, gold covers {n_gold}")
    return _score(len(pred & ref), len(pred), len(ref))


def corpus_parseval(predicted: Iterable, gold: Iterable) -> ParsevalScore:
    """Micro-averaged precision and recall over a list of sentence pairs."""
    predicted, gold = list(predicted), list(gold)
    if len(predicted) != len(gold):
        raise InputError(f"{len(predicted)} predicted trees for {len(gold)} gold trees")
    matched = n_pred = n_gold = 0
    for p, g in zip(predicted, gold):
        s = parseval(p, g)
        matched += s.matched
        n_pred += s.predicted
        n_gold += s.gold
    return _score(matched, n_pred, n_gold)
