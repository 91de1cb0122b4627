"""Greedy and beam decoding with source- and target-side attention traces."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import BOS, EOS, Vocabulary
from .errors import ContractError, ParseError
from .model import EncoderStates, ModelParams, decoder_step, encode, initial_state

TRACE_HEADER = "# resdec attention traces v1"


@dataclass
class AttentionTrace:
    """Attention recorded while emitting ``tokens``.

    ``source_attention`` is (n, m); ``target_attention[t-1]`` holds the
    ``t`` weights over ``y_0..y_{t-1}`` used at step ``t``, or the whole
    field is None for variants without target-side attention.
    """

    tokens: list
    source_attention: np.ndarray
    target_attention: list | None = None

    @property
    def n(self) -> int:
        return len(self.tokens)

    @property
    def m(self) -> int:
        return self.source_attention.shape[1] if self.source_attention.size else 0

    def target_matrix(self) -> np.ndarray:
        """(n, n) array with row ``t-1`` holding step ``t``'s weights in columns ``0..t-1``."""
        if self.target_attention is None:
            raise ContractError("trace has no target-side attention")
        out = np.zeros((self.n, self.n))
        for i, row in enumerate(self.target_attention):
            out[i, : len(row)] = row
        return out

    def words(self, vocab: Vocabulary | None = None) -> list[str]:
        """Emitted words with a trailing end-of-sentence symbol removed."""
        toks = list(self.tokens)
        if toks and toks[-1] in (EOS, "</s>"):
            toks = toks[:-1]
        if vocab is not None:
            return [vocab.itos[t] if isinstance(t, (int, np.integer)) else t for t in toks]
        return [str(t) for t in toks]


@dataclass
class Hypothesis:
    tokens: list
    logprob: float
    trace: AttentionTrace
    score: float = 0.0
    summaries: list = field(default_factory=list)


def _decode_prep(source, params: ModelParams):
    src = np.asarray(source, dtype=np.int64).reshape(1, -1)
    enc = encode(src, params)
    return enc, initial_state(params, enc, batch_size=1)


def greedy_decode(source, params: ModelParams, variant=None, max_len: int = 50) -> Hypothesis:
    """Emit the argmax token at each step until EOS or ``max_len`` tokens."""
    if max_len < 1:
        raise ContractError("max_len must be >= 1")
    enc, state = _decode_prep(source, params)
    prev = BOS
    tokens, src_rows, tgt_rows, summaries = [], [], [], []
    total = 0.0
    for _ in range(max_len):
        state, logp, tw = decoder_step(state, [prev], enc, variant, params)
        lp = logp.data[0]
        tok = int(np.argmax(lp))
        total += float(lp[tok])
        tokens.append(tok)
        src_rows.append(state.source_weights.data[0].copy())
        if tw is not None:
            tgt_rows.append(tw.data[0].copy())
        if state.summary is not None:
            summaries.append(state.summary.data[0].copy())
        prev = tok
        if tok == EOS:
            break
    trace = AttentionTrace(tokens, np.array(src_rows), tgt_rows if tgt_rows else None)
    return Hypothesis(tokens, total, trace, score=total, summaries=summaries)


def _select_enc(enc: EncoderStates, rows) -> EncoderStates:
    from .tensor import Tensor
    return EncoderStates(Tensor(enc.states.data[rows]), enc.mask[rows], Tensor(enc.keys.data[rows]))


def beam_decode(source, params: ModelParams, variant=None, beam: int = 4, max_len: int = 50,
                length_norm: float = 1.0) -> Hypothesis:
    """Beam search; finished hypotheses are ranked by ``logprob / len ** length_norm``.

    The beam shrinks by one for every finished hypothesis, so ``beam=1``
    follows exactly the greedy path. The greedy hypothesis always joins the
    final candidates, so a wider beam never returns a worse-scoring result.
    """
    if beam < 1:
        raise ContractError("beam must be >= 1")
    if max_len < 1:
        raise ContractError("max_len must be >= 1")
    enc1, state = _decode_prep(source, params)
    # (tokens, logprob, source rows, target rows, summaries)
    live = [([], 0.0, [], [], [])]
    finished: list[Hypothesis] = []
    enc = enc1
    for step in range(max_len):
        prev = [h[0][-1] if h[0] else BOS for h in live]
        state, logp, tw = decoder_step(state, prev, enc, variant, params)
        lp = logp.data.astype(np.float64)
        totals = np.array([h[1] for h in live])[:, None] + lp
        width = beam - len(finished)
        flat = totals.reshape(-1)
        order = np.argsort(-flat, kind="stable")[:width]
        next_live, parents = [], []
        for idx in order:
            row, tok = divmod(int(idx), lp.shape[1])
            toks, _, srows, trows, sums = live[row]
            entry = (toks + [tok], float(flat[idx]),
                     srows + [state.source_weights.data[row].copy()],
                     trows + ([tw.data[row].copy()] if tw is not None else []),
                     sums + ([state.summary.data[row].copy()] if state.summary is not None else []))
            if tok == EOS:
                finished.append(_finish(entry, length_norm))
            else:
                next_live.append(entry)
                parents.append(row)
        if not next_live:
            break
        live = next_live
        state = state.select(parents)
        enc = _select_enc(enc1, np.zeros(len(parents), dtype=int))
    else:
        finished.extend(_finish(entry, length_norm) for entry in live)
    if beam > 1:
        g = greedy_decode(source, params, variant, max_len)
        g.score = g.logprob / len(g.tokens) ** length_norm
        finished.append(g)
    return max(finished, key=lambda h: h.score)


def _finish(entry, length_norm: float) -> Hypothesis:
    toks, total, srows, trows, sums = entry
    trace = AttentionTrace(toks, np.array(srows), trows if trows else None)
    return Hypothesis(toks, total, trace, score=total / len(toks) ** length_norm, summaries=sums)


# ---------------------------------------------------------------------------
# trace files


def _fmt(values) -> str:
    return " ".join(f"{float(v):.6g}" for v in values)


def export_traces(hyps: Sequence[Hypothesis | AttentionTrace], path, vocab: Vocabulary | None = None) -> None:
    """Write traces as text: ``SENT id n m``, tokens, n source rows, n target rows, blank line."""
    lines = [TRACE_HEADER]
    for i, h in enumerate(hyps):
        tr = h.trace if isinstance(h, Hypothesis) else h
        toks = [vocab.itos[t] if vocab is not None and isinstance(t, (int, np.integer)) else str(t)
                for t in tr.tokens]
        lines.append(f"SENT {i} {tr.n} {tr.m}")
        lines.append(" ".join(toks))
        lines.extend(_fmt(row) for row in tr.source_attention)
        if tr.target_attention is None:
            lines.extend("NA" for _ in range(tr.n))
        else:
            lines.extend(_fmt(row) for row in tr.target_attention)
        lines.append("")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_traces(path) -> list[AttentionTrace]:
    """Parse a file written by :func:`export_traces`; tokens come back as strings."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != TRACE_HEADER:
        raise ParseError("missing trace header", 1)
    traces = []
    i = 1
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        head = lines[i].split()
        if len(head) != 4 or head[0] != "SENT":
            raise ParseError(f"expected 'SENT <id> <n> <m>', got {lines[i]!r}", i + 1)
        try:
            n, m = int(head[2]), int(head[3])
        except ValueError:
            raise ParseError("non-integer sentence dimensions", i + 1) from None
        if i + 1 + 2 * n >= len(lines) + 1:
            raise ParseError("truncated sentence block", i + 1)
        tokens = lines[i + 1].split()
        if len(tokens) != n:
            raise ParseError(f"expected {n} tokens, found {len(tokens)}", i + 2)
        src = []
        for k in range(n):
            row = _parse_row(lines, i + 2 + k, m)
            src.append(row)
        tgt = []
        for k in range(n):
            ln = i + 2 + n + k
            if ln >= len(lines):
                raise ParseError("truncated target-attention block", ln + 1)
            if lines[ln].strip() == "NA":
                tgt.append(None)
            else:
                tgt.append(_parse_row(lines, ln, k + 1))
        if any(r is None for r in tgt) and not all(r is None for r in tgt):
            raise ParseError("mixed NA and numeric target-attention rows", i + 2 + n)
        target = None if (n and tgt[0] is None) else tgt
        traces.append(AttentionTrace(tokens, np.array(src).reshape(n, m), target))
        i += 2 + 2 * n
    return traces


def _parse_row(lines, ln: int, width: int) -> np.ndarray:
    if ln >= len(lines):
        raise ParseError("unexpected end of file", ln + 1)
    try:
        row = np.array([float(x) for x in lines[ln].split()])
    except ValueError:
        raise ParseError(f"non-numeric attention value in {lines[ln]!r}", ln + 1) from None
    if row.size != width:
        raise ParseError(f"expected {width} values, found {row.size}", ln + 1)
    return row
