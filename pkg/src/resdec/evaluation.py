"""Corpus BLEU, token accuracy, perplexity and attention-position histograms."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, InputError
from .inference import AttentionTrace


@dataclass(frozen=True)
class BleuReport:
    score: float            # in [0, 1]
    precisions: tuple       # modified n-gram precisions, n = 1..4
    brevity_penalty: float
    hyp_len: int
    ref_len: int

    def __str__(self) -> str:
        ps = "/".join(f"{p:.4f}" for p in self.precisions)
        return (f"BLEU = {self.score:.4f}, {ps} (BP={self.brevity_penalty:.3f}, "
                f"ratio={self.hyp_len / max(self.ref_len, 1):.3f}, hyp_len={self.hyp_len}, ref_len={self.ref_len})")


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses: Sequence[Sequence], references: Sequence[Sequence], max_n: int = 4) -> BleuReport:
    """Corpus-level BLEU with a single reference per sentence and no smoothing."""
    if len(hypotheses) != len(references):
        raise InputError(f"{len(hypotheses)} hypotheses for {len(references)} references")
    if not hypotheses:
        raise InputError("empty corpus")
    matches = np.zeros(max_n)
    totals = np.zeros(max_n)
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp, ref = list(hyp), list(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    precisions = tuple(float(m / t) if t else 0.0 for m, t in zip(matches, totals))
    if hyp_len == 0:
        bp = 0.0
    else:
        bp = 1.0 if hyp_len > ref_len else math.exp(1 - ref_len / hyp_len)
    if min(precisions) <= 0:
        score = 0.0
    else:
        score = bp * math.exp(sum(math.log(p) for p in precisions) / max_n)
    return BleuReport(score, precisions, bp, hyp_len, ref_len)


def token_accuracy(hypotheses: Sequence[Sequence], references: Sequence[Sequence]) -> float:
    """Position-wise matches divided by the longer length of each pair, averaged over pairs."""
    if len(hypotheses) != len(references):
        raise InputError("hypotheses and references differ in number")
    if not hypotheses:
        raise InputError("empty corpus")
    scores = []
    for h, r in zip(hypotheses, references):
        longest = max(len(h), len(r))
        scores.append(sum(a == b for a, b in zip(h, r)) / longest if longest else 1.0)
    return float(np.mean(scores))


def perplexity(params, corpus, variant=None, batch_size: int = 64) -> float:
    """exp(total NLL / total tokens) under teacher forcing.

    ``corpus`` holds sentence pairs, or token-id sequences for
    language-model parameters.
    """
    from .model import check_variant
    from .training import evaluate

    check_variant(variant, params)
    loss, _ = evaluate(params, corpus, batch_size=batch_size)
    return math.exp(loss)


# ---------------------------------------------------------------------------
# relative-position histogram


@dataclass
class PositionHistogram:
    """Where target-side attention peaks, relative to the step being predicted.

    ``counts[k]`` is how often the argmax sat ``k`` steps back (k <= -1),
    ``opportunities[k]`` how often that offset was available at all.
    ``frequency`` divides the two and renormalizes to sum to one.
    """

    counts: dict = field(default_factory=dict)
    opportunities: dict = field(default_factory=dict)

    def offsets(self) -> list[int]:
        return sorted(self.opportunities, reverse=True)

    def frequencies(self) -> dict[int, float]:
        raw = {k: self.counts.get(k, 0) / self.opportunities[k] for k in self.offsets()}
        total = sum(raw.values())
        return {k: (v / total if total else 0.0) for k, v in raw.items()}

    def frequency(self, offset: int) -> float:
        return self.frequencies().get(offset, 0.0)

    def lines(self) -> list[str]:
        return [f"{k}\t{v:.6f}" for k, v in self.frequencies().items()]

    def write(self, path) -> None:
        Path(path).write_text("".join(line + "\n" for line in self.lines()), encoding="utf-8")


def max_attention_histogram(traces: Iterable[AttentionTrace]) -> PositionHistogram:
    """Histogram of the relative position of each step's most attended previous word.

    Step ``t`` attends over columns ``0..t-1``; column ``j`` sits at offset
    ``j - t``. Ties go to the most recent position.
    """
    hist = PositionHistogram()
    for tr in traces:
        if tr.target_attention is None:
            raise ContractError("histogram needs traces with target-side attention")
        for row in tr.target_attention:
            row = np.asarray(row, dtype=float)
            t = row.size
            if t == 0:
                continue
            off = -1 - int(np.argmax(row[::-1]))
            hist.counts[off] = hist.counts.get(off, 0) + 1
            for k in range(-t, 0):
                hist.opportunities[k] = hist.opportunities.get(k, 0) + 1
    return hist


def forced_position_accuracy(params, pairs, from_end: int = 2, batch_size: int = 64) -> float:
    """Teacher-forced accuracy at one target position counted from the end.

    ``from_end=1`` is the end-of-sentence token, ``from_end=2`` the last word.
    """
    from .data import batch_iterator
    from .training import batch_forward

    hit = total = 0
    for batch in batch_iterator(pairs, batch_size):
        pred = batch_forward(params, batch).logprobs.data.argmax(axis=-1)
        idx = batch.tgt_mask.sum(axis=1).astype(int) - from_end
        if (idx < 0).any():
            raise InputError(f"a target is shorter than {from_end} tokens")
        rows = np.arange(len(idx))
        hit += int((pred[rows, idx] == batch.tgt_out[rows, idx]).sum())
        total += len(idx)
    if total == 0:
        raise InputError("empty corpus")
    return hit / total
