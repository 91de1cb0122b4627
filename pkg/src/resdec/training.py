"""Negative log-likelihood training with Adadelta, dropout and checkpoints."""
from __future__ import annotations

import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import Batch, SentencePair, batch_iterator, make_batch
from .errors import CheckpointError, ContractError, InputError, NumericError
from .model import (ModelConfig, ModelParams, Scoring, Variant, is_bias, param_shapes,
                    teacher_force)
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

STREAMS = {"init": 0, "dropout": 1, "shuffle": 2}


def substream(seed: int, name: str) -> int:
    """Independent integer seed for a named randomness stream."""
    return int(np.random.SeedSequence([seed, STREAMS[name]]).generate_state(1)[0])


@dataclass
class TrainConfig:
    variant: Variant = Variant.BASELINE
    scoring: Scoring | None = None
    embed_dim: int = 32
    hidden_dim: int = 64
    src_vocab: int = 0
    tgt_vocab: int = 0
    lm: bool = False
    rho: float = 0.95
    epsilon: float = 1e-6
    dropout_p: float = 0.5
    init_scale: float = 0.01
    batch_size: int = 32
    max_epochs: int = 30
    seed: int = 1
    precision: str = "single"
    max_len: int = 50
    clip_norm: float | None = 1.0
    stop_accuracy: float | None = None

    def __post_init__(self):
        self.variant = Variant.parse(self.variant)
        if self.scoring is not None:
            self.scoring = Scoring.parse(self.scoring)
        if not 0.0 <= self.dropout_p < 1.0:
            raise ContractError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if not 0.0 < self.rho < 1.0:
            raise ContractError(f"rho must be in (0, 1), got {self.rho}")
        if self.epsilon <= 0:
            raise ContractError(f"epsilon must be positive, got {self.epsilon}")
        if self.precision not in ("single", "double"):
            raise ContractError(f"precision must be single or double, got {self.precision!r}")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ContractError("batch_size must be >= 1 and max_epochs >= 0")

    @property
    def dtype(self):
        return np.float32 if self.precision == "single" else np.float64

    def model_config(self) -> ModelConfig:
        scoring = self.scoring if self.variant is Variant.ATTN_RESIDUAL else None
        return ModelConfig(self.variant, self.embed_dim, self.hidden_dim, self.src_vocab,
                           self.tgt_vocab, scoring=scoring, lm=self.lm)


def init_params(cfg: TrainConfig, seed: int | None = None) -> ModelParams:
    """Weights ~ init_scale * N(0, 1), biases zero; deterministic per seed."""
    mcfg = cfg.model_config()
    rng = np.random.default_rng(substream(cfg.seed if seed is None else seed, "init"))
    tensors = {}
    for name, shape in param_shapes(mcfg).items():
        if is_bias(name):
            value = np.zeros(shape)
        else:
            value = rng.standard_normal(shape) * cfg.init_scale
        tensors[name] = Tensor(value.astype(cfg.dtype), requires_grad=True)
    return ModelParams(mcfg, tensors)


def dropout_apply(x: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; the identity (same object) at inference or when ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return x * Tensor(keep)


def nll_loss(logprobs: Tensor, targets, mask) -> tuple[Tensor, int]:
    """Summed negative log-likelihood over unmasked positions, and their count."""
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=logprobs.dtype)
    if logprobs.shape[:-1] != targets.shape or targets.shape != mask.shape:
        raise ContractError(f"nll_loss shapes differ: {logprobs.shape}, {targets.shape}, {mask.shape}")
    if np.all(mask == 1):
        picked = T.gather_lastdim(logprobs, targets)
    else:
        # select unmasked rows first so a -inf at a padded position cannot turn into NaN
        rows = np.flatnonzero(mask.reshape(-1) > 0)
        flat = T.reshape(logprobs, (-1, logprobs.shape[-1]))
        picked = T.gather_lastdim(T.embedding_lookup(flat, rows), targets.reshape(-1)[rows])
    if np.any(np.isneginf(picked.data)):
        raise NumericError("log-probability of a target token is -inf")
    return -T.sum_(picked), int(mask.sum())


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    """Adadelta running averages E[g^2] and E[dx^2] per parameter."""

    sq_grad: dict = field(default_factory=dict)
    sq_step: dict = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "OptimizerState":
        return cls({k: np.zeros_like(t.data) for k, t in params.items()},
                   {k: np.zeros_like(t.data) for k, t in params.items()})


def adadelta_step(params: ModelParams, opt: OptimizerState, cfg: TrainConfig) -> None:
    """Apply one Adadelta update in place and clear gradients."""
    rho, eps = cfg.rho, cfg.epsilon
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter {name}")
        eg = opt.sq_grad.setdefault(name, np.zeros_like(p.data))
        ex = opt.sq_step.setdefault(name, np.zeros_like(p.data))
        eg *= rho
        eg += (1.0 - rho) * g * g
        delta = -np.sqrt(ex + eps) / np.sqrt(eg + eps) * g
        ex *= rho
        ex += (1.0 - rho) * delta * delta
        p.data += delta.astype(p.dtype)
        p.grad = None


def clip_gradients(params: ModelParams, max_norm: float) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``max_norm``; returns the norm."""
    total = math.sqrt(sum(float(np.sum(t.grad.astype(np.float64) ** 2))
                          for t in params.values() if t.grad is not None))
    if total > max_norm:
        scale = max_norm / total
        for t in params.values():
            if t.grad is not None:
                t.grad = t.grad * t.dtype.type(scale)
    return total


# ---------------------------------------------------------------------------
# evaluation helpers


def batch_forward(params: ModelParams, batch: Batch, dropout=None):
    kwargs = {} if dropout is None else {"dropout": dropout}
    return teacher_force(params, batch.src, batch.src_mask, batch.tgt_in, **kwargs)


def evaluate(params: ModelParams, pairs: Sequence, batch_size: int = 64) -> tuple[float, float]:
    """Per-token dev loss and teacher-forced token accuracy (no dropout, no tape)."""
    total = correct = 0.0
    count = 0
    for batch in _batches(pairs, batch_size, lm=params.config.lm):
        out = batch_forward(params, batch)
        loss, n = nll_loss(out.logprobs, batch.tgt_out, batch.tgt_mask)
        total += float(loss.data)
        count += n
        pred = out.logprobs.data.argmax(axis=-1)
        correct += float(((pred == batch.tgt_out) * batch.tgt_mask).sum())
    if count == 0:
        raise InputError("evaluation corpus has no tokens")
    return total / count, correct / count


def _batches(pairs, batch_size, lm=False, seed=None, epoch=0):
    if lm:
        from .data import lm_batch_iterator
        return lm_batch_iterator(pairs, batch_size, seed=seed, epoch=epoch)
    return batch_iterator(pairs, batch_size, seed=seed, epoch=epoch)


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"ARSQ1\n"


def save_checkpoint(path, params: ModelParams, extra: dict | None = None) -> None:
    cfg = params.config
    precision = "double" if params.dtype == np.float64 else "single"
    meta = {
        "variant": cfg.variant.value,
        "scoring": cfg.scoring.value if cfg.scoring else "none",
        "e": cfg.embed_dim,
        "d": cfg.hidden_dim,
        "src_vocab": cfg.src_vocab,
        "tgt_vocab": cfg.tgt_vocab,
        "precision": precision,
        "lm": int(cfg.lm),
    }
    for k, v in (extra or {}).items():
        if "\n" in str(v) or "=" in k:
            raise ContractError(f"metadata entry {k!r} is not a single key=value line")
        meta[k] = v
    dtype = np.dtype("<f4" if precision == "single" else "<f8")
    chunks = [MAGIC, "".join(f"{k}={v}\n" for k, v in meta.items()).encode("utf-8"), b"\n"]
    for name, t in params.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<{1 + t.ndim}I", t.ndim, *t.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype=dtype).tobytes())
    try:
        Path(path).write_bytes(b"".join(chunks))
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    """Inverse of :func:`save_checkpoint`; returns parameters and the metadata dict."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    end = blob.find(b"\n\n", len(MAGIC) - 1)
    if end < 0:
        raise CheckpointError(f"{path}: unterminated metadata block")
    meta = {}
    for line in blob[len(MAGIC): end].decode("utf-8").splitlines():
        if line:
            key, _, value = line.partition("=")
            meta[key] = value
    try:
        cfg = ModelConfig(Variant.parse(meta["variant"]), int(meta["e"]), int(meta["d"]),
                          int(meta["src_vocab"]), int(meta["tgt_vocab"]),
                          scoring=None if meta["scoring"] == "none" else meta["scoring"],
                          lm=bool(int(meta.get("lm", "0"))))
        dtype = np.dtype("<f4" if meta["precision"] == "single" else "<f8")
    except (KeyError, ValueError, ContractError) as exc:
        raise CheckpointError(f"{path}: bad metadata: {exc}") from exc
    pos = end + 2
    tensors = {}
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos: pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            nbytes = count * dtype.itemsize
            if pos + nbytes > len(blob):
                raise CheckpointError(f"{path}: truncated record {name!r}")
            values = np.frombuffer(blob, dtype=dtype, count=count, offset=pos).reshape(dims)
            pos += nbytes
            tensors[name] = Tensor(values.astype(dtype.newbyteorder("="), copy=True), requires_grad=True)
        params = ModelParams(cfg, tensors)
    except (struct.error, ValueError, UnicodeDecodeError, ContractError) as exc:
        raise CheckpointError(f"{path}: corrupted tensor records: {exc}") from exc
    return params, meta


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    dev_loss: float
    dev_accuracy: float

    def line(self) -> str:
        return f"{self.epoch}\t{self.train_loss:.6f}\t{self.dev_loss:.6f}\t{self.dev_accuracy:.6f}"


@dataclass
class TrainResult:
    params: ModelParams
    history: list
    best_epoch: int
    initial_loss: float


def train_batch(params: ModelParams, batch: Batch, opt: OptimizerState, cfg: TrainConfig,
                rng: np.random.Generator) -> tuple[float, int]:
    """Forward, backward and one optimizer step; returns (summed loss, tokens)."""

    def drop(x):
        return dropout_apply(x, cfg.dropout_p, True, rng)

    with Tape() as tape:
        out = batch_forward(params, batch, dropout=drop if cfg.dropout_p > 0 else None)
        loss, n = nll_loss(out.logprobs, batch.tgt_out, batch.tgt_mask)
        # per-sentence average, as in the conditional log-likelihood objective
        objective = loss * (1.0 / len(batch))
        tape.backward(objective)
    if cfg.clip_norm:
        clip_gradients(params, cfg.clip_norm)
    adadelta_step(params, opt, cfg)
    return float(loss.data), n


def train(cfg: TrainConfig, train_pairs: Sequence, dev_pairs: Sequence, checkpoint=None,
          metrics_log=None, extra_meta: dict | None = None, params: ModelParams | None = None) -> TrainResult:
    """Train for up to ``cfg.max_epochs`` epochs, keeping the parameters with the best dev loss.

    Stops early once dev token accuracy reaches ``cfg.stop_accuracy``.
    """
    if not train_pairs or not dev_pairs:
        raise InputError("training and dev corpora must be non-empty")
    params = params or init_params(cfg)
    opt = OptimizerState.zeros_like(params)
    drop_rng = np.random.default_rng(substream(cfg.seed, "dropout"))
    shuffle_seed = substream(cfg.seed, "shuffle")
    initial_loss, _ = evaluate(params, train_pairs[: max(cfg.batch_size, 256)])
    history: list[EpochMetrics] = []
    best = (math.inf, 0, params.copy())
    log_file = None
    if metrics_log is not None:
        try:
            log_file = open(metrics_log, "w", encoding="utf-8")
        except OSError as exc:
            raise OSError(f"cannot open metrics log {metrics_log}: {exc}") from exc
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            start = time.perf_counter()
            total, count = 0.0, 0
            for batch in _batches(train_pairs, cfg.batch_size, lm=cfg.lm, seed=shuffle_seed, epoch=epoch):
                loss, n = train_batch(params, batch, opt, cfg, drop_rng)
                if not math.isfinite(loss):
                    raise NumericError(f"training diverged in epoch {epoch}")
                total += loss
                count += n
            dev_loss, dev_acc = evaluate(params, dev_pairs)
            m = EpochMetrics(epoch, total / count, dev_loss, dev_acc)
            history.append(m)
            log.info("epoch %d  train %.4f  dev %.4f  acc %.4f  (%.1fs)", epoch, m.train_loss,
                     dev_loss, dev_acc, time.perf_counter() - start)
            if log_file:
                log_file.write(m.line() + "\n")
                log_file.flush()
            if dev_loss < best[0]:
                best = (dev_loss, epoch, params.copy())
                if checkpoint is not None:
                    save_checkpoint(checkpoint, best[2], extra_meta)
            if cfg.stop_accuracy is not None and dev_acc >= cfg.stop_accuracy:
                break
    finally:
        if log_file:
            log_file.close()
    if checkpoint is not None and not history:
        save_checkpoint(checkpoint, params, extra_meta)
    return TrainResult(best[2], history, best[1], initial_loss)
