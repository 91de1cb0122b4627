"""Bidirectional GRU encoder, additive source attention and five decoders.

Decoder variants differ only in how target-side history reaches the
recurrence or the output layer:

* ``baseline``: output layer sees ``s_t``, ``y_{t-1}``, ``c_t``.
* ``mean_residual``: ``y_{t-1}`` is replaced by the mean of ``y_0..y_{t-1}``.
* ``attn_residual``: ``y_{t-1}`` is replaced by an attention-weighted
  average of ``y_0..y_{t-1}`` (``content`` or ``content_scope`` scoring).
* ``memory_rnn``: the recurrence consumes an attention summary of previous
  decoder states instead of ``s_{t-1}``.
* ``self_attentive_rnn``: the output layer additionally sees an attention
  summary of previous decoder states, queried with ``s_t``.

The output layer is ``log_softmax(W_out tanh(L_s s + L_d u + L_c c [+ L_m m] + b))``.
Hidden-state memories hold ``s_0..s_{t-1}`` where ``s_0`` is the initial
decoder state, so every target-side attention row at step ``t`` has ``t``
entries.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .errors import ContractError, InputError
from .tensor import Tensor


class Variant(str, enum.Enum):
    BASELINE = "baseline"
    MEMORY_RNN = "memory_rnn"
    SELF_ATTENTIVE_RNN = "self_attentive_rnn"
    MEAN_RESIDUAL = "mean_residual"
    ATTN_RESIDUAL = "attn_residual"

    @classmethod
    def parse(cls, name) -> "Variant":
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).replace("-", "_"))
        except ValueError:
            raise ContractError(f"unknown decoder variant {name!r}") from None


class Scoring(str, enum.Enum):
    CONTENT = "content"
    CONTENT_SCOPE = "content_scope"

    @classmethod
    def parse(cls, name) -> "Scoring":
        if isinstance(name, cls):
            return name
        key = str(name).replace("+", "_").replace("-", "_")
        try:
            return cls(key)
        except ValueError:
            raise ContractError(f"unknown scoring function {name!r}") from None


LM_VARIANTS = (Variant.BASELINE, Variant.MEAN_RESIDUAL, Variant.ATTN_RESIDUAL)
TARGET_ATTENTION_VARIANTS = (Variant.ATTN_RESIDUAL, Variant.MEMORY_RNN, Variant.SELF_ATTENTIVE_RNN)


@dataclass(frozen=True)
class ModelConfig:
    variant: Variant
    embed_dim: int
    hidden_dim: int
    src_vocab: int
    tgt_vocab: int
    scoring: Scoring | None = None
    lm: bool = False

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant.parse(self.variant))
        if self.variant is Variant.ATTN_RESIDUAL:
            object.__setattr__(self, "scoring", Scoring.parse(self.scoring or Scoring.CONTENT))
        elif self.scoring is not None:
            raise ContractError(f"scoring applies only to attn_residual, not {self.variant.value}")
        if min(self.embed_dim, self.hidden_dim, self.tgt_vocab) < 1 or (not self.lm and self.src_vocab < 1):
            raise ContractError("dimensions and vocabulary sizes must be positive")
        if self.lm and self.variant not in LM_VARIANTS:
            raise ContractError(f"LM mode supports {[v.value for v in LM_VARIANTS]}, not {self.variant.value}")


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Name -> shape for every trainable tensor of ``cfg``, in a fixed order."""
    e, d, v = cfg.embed_dim, cfg.hidden_dim, cfg.variant
    shapes: dict[str, tuple] = {}
    if not cfg.lm:
        shapes["src_emb"] = (cfg.src_vocab, e)
        for side in ("fwd", "bwd"):
            shapes[f"enc_{side}_Wx"] = (e, 3 * d)
            shapes[f"enc_{side}_Uh"] = (d, 3 * d)
            shapes[f"enc_{side}_b"] = (3 * d,)
        shapes["init_W"] = (2 * d, d)
        shapes["init_b"] = (d,)
        shapes["att_W"] = (d, d)
        shapes["att_U"] = (2 * d, d)
        shapes["att_v"] = (d,)
    shapes["tgt_emb"] = (cfg.tgt_vocab, e)
    shapes["dec_Wy"] = (e, 3 * d)
    if not cfg.lm:
        shapes["dec_Wc"] = (2 * d, 3 * d)
    shapes["dec_Uh"] = (d, 3 * d)
    shapes["dec_b"] = (3 * d,)
    shapes["out_Ls"] = (d, e)
    shapes["out_Ld"] = (e, e)
    if not cfg.lm:
        shapes["out_Lc"] = (2 * d, e)
    shapes["out_b"] = (e,)
    shapes["out_W"] = (e, cfg.tgt_vocab)
    shapes["out_bias"] = (cfg.tgt_vocab,)
    if v is Variant.ATTN_RESIDUAL:
        shapes["res_Wy"] = (e, e)
        shapes["res_v"] = (e,)
        if cfg.scoring is Scoring.CONTENT_SCOPE:
            shapes["res_Ws"] = (d, e)
    elif v is Variant.MEMORY_RNN:
        shapes["mem_Ws"] = (d, d)
        shapes["mem_Wy"] = (e, d)
        shapes["mem_Wm"] = (d, d)
        shapes["mem_v"] = (d,)
    elif v is Variant.SELF_ATTENTIVE_RNN:
        shapes["sa_Wi"] = (d, d)
        shapes["sa_Wt"] = (d, d)
        shapes["sa_v"] = (d,)
        shapes["out_Lm"] = (d, e)
    return shapes


def is_bias(name: str) -> bool:
    return name.endswith("_b") or name.endswith("_bias")


def param_count(variant, e: int, d: int, vocabs: tuple[int, int], scoring=None, lm: bool = False) -> int:
    """Exact number of scalars in a model, by enumerating its tensors."""
    src, tgt = vocabs
    cfg = ModelConfig(Variant.parse(variant), e, d, src, tgt, scoring=scoring, lm=lm)
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


class ModelParams:
    """Named trainable tensors of one decoder variant."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        expected = param_shapes(config)
        if list(tensors) != list(expected):
            missing = set(expected) ^ set(tensors)
            raise ContractError(f"parameter names do not match the configuration: {sorted(missing)}")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ContractError(f"{name}: shape {tensors[name].shape}, expected {shape}")
            tensors[name].name = name
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def requires_grad_(self, flag: bool = True) -> "ModelParams":
        for t in self.tensors.values():
            t.requires_grad = flag
        return self

    def copy(self, dtype=None) -> "ModelParams":
        return ModelParams(self.config, {
            k: Tensor(t.data.astype(dtype or t.dtype, copy=True), requires_grad=t.requires_grad)
            for k, t in self.tensors.items()})


# ---------------------------------------------------------------------------
# building blocks

Dropout = Callable[[Tensor], Tensor]


def _identity(x: Tensor) -> Tensor:
    return x


def _const(x, like: Tensor) -> Tensor:
    return Tensor(np.asarray(x, dtype=like.dtype))


def gru_cell(h: Tensor, xp: Tensor, Uh: Tensor, mask=None) -> Tensor:
    """One GRU update; ``xp`` already holds ``x W + b`` for the (z, r, n) gates."""
    return T.gru_cell(h, xp, Uh, mask)


def _as_batch(ids) -> np.ndarray:
    arr = np.asarray(ids)
    if arr.dtype.kind not in "iu":
        raise InputError(f"token ids must be integers, got {arr.dtype}")
    return arr[None, :] if arr.ndim == 1 else arr


def _check_ids(ids: np.ndarray, vocab: int, what: str) -> None:
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise InputError(f"{what} id out of range [0, {vocab})")


@dataclass
class EncoderStates:
    states: Tensor   # (B, m, 2d): [forward; backward]
    mask: np.ndarray  # (B, m)
    keys: Tensor     # (B, m, d): states @ att_U, cached for attention

    def __len__(self) -> int:
        return self.states.shape[1]


def encode(source, params: ModelParams, mask=None, dropout: Dropout = _identity) -> EncoderStates:
    """Run forward and backward GRUs over the embedded source.

    ``source`` is a 1-D id sequence or a (B, m) padded id matrix; ``mask``
    defaults to all ones.
    """
    cfg = params.config
    if cfg.lm:
        raise ContractError("LM-mode parameters have no encoder")
    src = _as_batch(source)
    _check_ids(src, cfg.src_vocab, "source")
    B, m = src.shape
    if m == 0:
        raise InputError("empty source sequence")
    mask = np.ones((B, m)) if mask is None else np.asarray(mask, dtype=float).reshape(B, m)
    dtype = params.dtype
    d = cfg.hidden_dim
    x = T.embedding_lookup(params["src_emb"], src)
    outputs = {}
    for side, order in (("fwd", range(m)), ("bwd", range(m - 1, -1, -1))):
        xp = x @ params[f"enc_{side}_Wx"] + params[f"enc_{side}_b"]
        h = Tensor(np.zeros((B, d), dtype=dtype))
        hs = [None] * m
        for i in order:
            step_mask = mask[:, i: i + 1]
            h = gru_cell(h, xp[:, i], params[f"enc_{side}_Uh"], step_mask)
            hs[i] = h
        outputs[side] = T.stack(hs, axis=1)
    states = dropout(T.concat([outputs["fwd"], outputs["bwd"]], axis=-1))
    return EncoderStates(states, mask, states @ params["att_U"])


def source_attention(prev_hidden: Tensor, enc: EncoderStates, params: ModelParams) -> tuple[Tensor, Tensor]:
    """Additive attention over encoder states queried with ``s_{t-1}``.

    Returns the context ``c_t`` (B, 2d) and weights (B, m); masked source
    positions get weight exactly zero.
    """
    if len(enc) == 0:
        raise ContractError("source attention over an empty encoding")
    if not np.all(enc.mask.any(axis=-1)):
        raise ContractError("source attention: all positions masked")
    query = prev_hidden @ params["att_W"]
    scores = T.additive_scores(enc.keys, query, params["att_v"])
    alpha = T.softmax_lastdim(scores, mask=enc.mask > 0)
    context = T.weighted_sum(alpha, enc.states)
    return context, alpha


def _unbatched(x: Tensor, nd: int) -> tuple[Tensor, bool]:
    if x.ndim == nd - 1:
        return x[None], True
    return x, False


def target_summary_mean(prev_embeddings: Tensor) -> Tensor:
    """Mean of ``y_0..y_{t-1}``; input (t, e) or (B, t, e)."""
    if prev_embeddings.ndim < 2 or prev_embeddings.shape[-2] == 0:
        raise ContractError("target_summary_mean needs at least one previous embedding")
    return T.mean_lastdim(prev_embeddings, axis=-2)


def target_summary_attentive(prev_embeddings: Tensor, current_hidden: Tensor | None, scoring,
                             params: ModelParams) -> tuple[Tensor, Tensor]:
    """Attention-weighted mean of ``y_0..y_{t-1}``.

    content: ``e_i = v . tanh(W_y y_i)``; content_scope adds ``W_s s_t``
    inside the tanh.  Accepts (t, e) / (d,) or batched (B, t, e) / (B, d).
    """
    scoring = Scoring.parse(scoring)
    ys, single = _unbatched(prev_embeddings, 3)
    if ys.shape[1] == 0:
        raise ContractError("target_summary_attentive needs at least one previous embedding")
    keys = ys @ params["res_Wy"]
    if scoring is Scoring.CONTENT_SCOPE:
        if current_hidden is None:
            raise ContractError("content_scope scoring needs the current hidden state")
        s, _ = _unbatched(current_hidden, 2)
        query = s @ params["res_Ws"]
    else:
        query = Tensor(np.zeros((ys.shape[0], keys.shape[-1]), dtype=keys.dtype))
    scores = T.additive_scores(keys, query, params["res_v"])
    return _weighted(scores, ys, single)


def _weighted(scores: Tensor, values: Tensor, single: bool = False) -> tuple[Tensor, Tensor]:
    alpha = T.softmax_lastdim(scores)
    summary = T.weighted_sum(alpha, values)
    if single:
        return summary[0], alpha[0]
    return summary, alpha


def memory_state(prev_hiddens: Tensor, prev_embedding: Tensor, prev_summary: Tensor | None,
                 params: ModelParams) -> tuple[Tensor, Tensor]:
    """Memory-RNN read: ``e_i = v . tanh(A s_i + B y_{t-1} + C m_{t-1})``, ``m_t = sum a_i s_i``.

    ``prev_summary`` may be None (zero vector).
    """
    hs, single = _unbatched(prev_hiddens, 3)
    y, _ = _unbatched(prev_embedding, 2)
    query = y @ params["mem_Wy"]
    if prev_summary is not None:
        m, _ = _unbatched(prev_summary, 2)
        query = query + m @ params["mem_Wm"]
    scores = T.additive_scores(hs @ params["mem_Ws"], query, params["mem_v"])
    return _weighted(scores, hs, single)


def hidden_summary(prev_hiddens: Tensor, current_hidden: Tensor, params: ModelParams) -> tuple[Tensor, Tensor]:
    """Self-attentive-RNN read: ``e_i = v . tanh(A s_i + B s_t)`` over previous states."""
    hs, single = _unbatched(prev_hiddens, 3)
    s, _ = _unbatched(current_hidden, 2)
    scores = T.additive_scores(hs @ params["sa_Wi"], s @ params["sa_Wt"], params["sa_v"])
    return _weighted(scores, hs, single)


# ---------------------------------------------------------------------------
# decoding


@dataclass
class DecoderState:
    """Recurrent state before step ``t + 1``.

    ``embeds`` holds ``y_0..y_{t-1}`` of the steps taken so far and
    ``hiddens`` holds ``s_0..s_t``; ``emb_keys`` and ``hid_keys`` cache the
    projections their scorers need.
    """

    t: int
    s: Tensor
    hiddens: Tensor | None = None
    hid_keys: Tensor | None = None
    embeds: Tensor | None = None
    emb_keys: Tensor | None = None
    memory: Tensor | None = None
    summary: Tensor | None = None
    source_weights: Tensor | None = None
    target_weights: Tensor | None = None

    @property
    def batch_size(self) -> int:
        return self.s.shape[0]

    def select(self, rows) -> "DecoderState":
        """Reindex the batch dimension (used by beam search)."""
        rows = np.asarray(rows)

        def pick(x):
            return None if x is None else Tensor(x.data[rows])

        return replace(self, s=pick(self.s), hiddens=pick(self.hiddens), hid_keys=pick(self.hid_keys),
                       embeds=pick(self.embeds), emb_keys=pick(self.emb_keys), memory=pick(self.memory),
                       summary=pick(self.summary), source_weights=pick(self.source_weights),
                       target_weights=pick(self.target_weights))


def _append(hist: Tensor | None, new: Tensor) -> Tensor:
    new = new[:, None]
    return new if hist is None else T.concat([hist, new], axis=1)


def initial_state(params: ModelParams, enc: EncoderStates | None = None, batch_size: int = 1) -> DecoderState:
    cfg = params.config
    d = cfg.hidden_dim
    if cfg.lm or enc is None:
        if not cfg.lm:
            raise ContractError("translation decoding needs encoder states")
        s0 = Tensor(np.zeros((batch_size, d), dtype=params.dtype))
    else:
        weights = enc.mask / enc.mask.sum(axis=1, keepdims=True)
        mean_h = T.weighted_sum(_const(weights, enc.states.data), enc.states)
        s0 = T.tanh(mean_h @ params["init_W"] + params["init_b"])
    state = DecoderState(t=0, s=s0)
    if cfg.variant is Variant.MEMORY_RNN:
        state.hiddens = s0[:, None]
        state.hid_keys = state.hiddens @ params["mem_Ws"]
    elif cfg.variant is Variant.SELF_ATTENTIVE_RNN:
        state.hiddens = s0[:, None]
        state.hid_keys = state.hiddens @ params["sa_Wi"]
    return state


def _step(state: DecoderState, prev_token, enc: EncoderStates | None, params: ModelParams,
          dropout: Dropout = _identity) -> tuple[DecoderState, Tensor]:
    """Advance one step; returns the new state and the pre-softmax readout (B, e)."""
    cfg = params.config
    v = cfg.variant
    ids = np.asarray(prev_token).reshape(-1)
    _check_ids(ids, cfg.tgt_vocab, "target")
    if ids.shape[0] != state.batch_size:
        raise ContractError(f"{ids.shape[0]} previous tokens for a batch of {state.batch_size}")
    y = T.embedding_lookup(params["tgt_emb"], ids)
    new = replace(state, t=state.t + 1, target_weights=None, source_weights=None, summary=None)

    context = None
    if not cfg.lm:
        context, new.source_weights = source_attention(state.s, enc, params)

    recurrent_in = state.s
    if v is Variant.MEMORY_RNN:
        query = y @ params["mem_Wy"]
        if state.memory is not None:
            query = query + state.memory @ params["mem_Wm"]
        scores = T.additive_scores(state.hid_keys, query, params["mem_v"])
        new.memory, new.target_weights = _weighted(scores, state.hiddens)
        recurrent_in = new.memory

    xp = y @ params["dec_Wy"] + params["dec_b"]
    if context is not None:
        xp = xp + context @ params["dec_Wc"]
    s = gru_cell(recurrent_in, xp, params["dec_Uh"])
    new.s = s

    extra = None
    if v is Variant.SELF_ATTENTIVE_RNN:
        scores = T.additive_scores(state.hid_keys, s @ params["sa_Wt"], params["sa_v"])
        summary, new.target_weights = _weighted(scores, state.hiddens)
        new.summary = summary
        extra = dropout(summary) @ params["out_Lm"]
    if v in (Variant.MEMORY_RNN, Variant.SELF_ATTENTIVE_RNN):
        new.hiddens = _append(state.hiddens, s)
        key = s @ params["mem_Ws" if v is Variant.MEMORY_RNN else "sa_Wi"]
        new.hid_keys = _append(state.hid_keys, key)

    if v is Variant.MEAN_RESIDUAL:
        new.embeds = _append(state.embeds, y)
        new.summary = target_summary_mean(new.embeds)
        u = dropout(new.summary)
    elif v is Variant.ATTN_RESIDUAL:
        new.embeds = _append(state.embeds, y)
        if cfg.scoring is Scoring.CONTENT:
            score = T.tanh(y @ params["res_Wy"]) @ params["res_v"]
            new.emb_keys = _append(state.emb_keys, score)
            scores = new.emb_keys
        else:
            new.emb_keys = _append(state.emb_keys, y @ params["res_Wy"])
            scores = T.additive_scores(new.emb_keys, s @ params["res_Ws"], params["res_v"])
        new.summary, new.target_weights = _weighted(scores, new.embeds)
        u = dropout(new.summary)
    else:
        u = y

    pre = dropout(s) @ params["out_Ls"] + u @ params["out_Ld"] + params["out_b"]
    if context is not None:
        pre = pre + context @ params["out_Lc"]
    if extra is not None:
        pre = pre + extra
    return new, T.tanh(pre)


def output_logprobs(readout: Tensor, params: ModelParams) -> Tensor:
    return T.log_softmax_lastdim(readout @ params["out_W"] + params["out_bias"])


def check_variant(variant, params: ModelParams) -> None:
    if variant is None:
        return
    if Variant.parse(variant) is not params.config.variant:
        raise ContractError(f"variant {variant} does not match parameters built for {params.config.variant.value}")


def decoder_step(state: DecoderState, prev_token, enc: EncoderStates, variant, params: ModelParams,
                 dropout: Dropout = _identity) -> tuple[DecoderState, Tensor, Tensor | None]:
    """One translation step: new state, log-distribution (B, V), target-side weights or None."""
    check_variant(variant, params)
    if params.config.lm:
        raise ContractError("decoder_step needs translation parameters; use lm_step")
    new, readout = _step(state, prev_token, enc, params, dropout)
    return new, output_logprobs(readout, params), new.target_weights


def lm_step(state: DecoderState, prev_token, variant, params: ModelParams,
            dropout: Dropout = _identity) -> tuple[DecoderState, Tensor]:
    """One language-model step (no encoder, no context vector)."""
    check_variant(variant, params)
    if Variant.parse(variant or params.config.variant) not in LM_VARIANTS:
        raise ContractError(f"LM mode does not support {variant}")
    if not params.config.lm:
        raise ContractError("lm_step needs LM-mode parameters")
    new, readout = _step(state, prev_token, None, params, dropout)
    return new, output_logprobs(readout, params)


@dataclass
class ForcedOutput:
    logprobs: Tensor                 # (B, n, V)
    source_weights: list = field(default_factory=list)  # per step (B, m)
    target_weights: list = field(default_factory=list)  # per step (B, t) or None
    summaries: list = field(default_factory=list)


def teacher_force(params: ModelParams, src, src_mask, tgt_in, dropout: Dropout = _identity,
                  keep_traces: bool = False) -> ForcedOutput:
    """Run the decoder over reference prefixes; ``src`` is ignored in LM mode."""
    cfg = params.config
    tgt_in = _as_batch(tgt_in)
    B, n = tgt_in.shape
    enc = None if cfg.lm else encode(src, params, src_mask, dropout)
    state = initial_state(params, enc, batch_size=B)
    readouts = []
    out = ForcedOutput(logprobs=None)
    for t in range(n):
        state, r = _step(state, tgt_in[:, t], enc, params, dropout)
        readouts.append(r)
        if keep_traces:
            out.source_weights.append(state.source_weights)
            out.target_weights.append(state.target_weights)
            out.summaries.append(state.summary)
    out.logprobs = output_logprobs(T.stack(readouts, axis=1), params)
    return out
