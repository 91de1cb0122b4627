"""Command-line interface: train, translate, analyze and language-model subcommands."""
from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import data as D
from .errors import CheckpointError, NumericError, ResdecError
from .evaluation import bleu, max_attention_histogram, perplexity
from .inference import beam_decode, export_traces, greedy_decode, read_traces
from .model import LM_VARIANTS, Scoring, Variant
from .structure import binarize_attention, build_tree, corpus_parseval
from .training import TrainConfig, load_checkpoint, train

EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 1, 2, 3
log = logging.getLogger("resdec")


class UsageError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    """argparse that exits with the config-error code instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _variant_name(v: str) -> str:
    return Variant.parse(v).value


def _add_model_flags(p, lm=False):
    choices = [v.value.replace("_", "-") for v in (LM_VARIANTS if lm else Variant)]
    p.add_argument("--decoder", required=True, choices=choices, help="decoder variant")
    p.add_argument("--scoring", choices=["content", "content+scope"],
                   help="scoring for attn-residual (default content)")
    p.add_argument("--embed-dim", type=int, default=32, help="embedding size e")
    p.add_argument("--hidden-dim", type=int, default=64, help="hidden size d")


def _add_train_flags(p):
    p.add_argument("--epochs", type=int, default=30, help="maximum number of epochs")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--dropout", type=float, default=0.5, help="dropout probability")
    p.add_argument("--init-scale", type=float, default=0.01, help="weight init standard deviation")
    p.add_argument("--clip", type=float, default=1.0, help="gradient L2 clip norm, 0 disables")
    p.add_argument("--rho", type=float, default=0.95, help="Adadelta decay")
    p.add_argument("--epsilon", type=float, default=1e-6, help="Adadelta epsilon")
    p.add_argument("--precision", choices=["single", "double"], default="single")
    p.add_argument("--max-len", type=int, default=50, help="drop training sentences longer than this")
    p.add_argument("--stop-accuracy", type=float, help="stop once dev token accuracy reaches this")
    p.add_argument("--seed", type=int, default=1, help="seed for init, dropout and shuffling streams")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="per-epoch metrics log (default: <out>.log)")
    p.add_argument("--config", help="file of key=value lines; explicit flags override it")
    p.add_argument("--save-config", help="write the resolved settings as a config file")


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="resdec", description="Attention-based encoder-decoder with residual "
                            "connections over previous outputs.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("train", help="train a translation model")
    _add_model_flags(p)
    p.add_argument("--task", choices=D.TASKS, help="synthetic task instead of corpus files")
    p.add_argument("--vocab-size", type=int, default=20,
                   help="content tokens for synthetic tasks; total vocabulary for corpora")
    p.add_argument("--train-size", type=int, default=5000, help="synthetic training pairs")
    p.add_argument("--dev-size", type=int, default=500, help="synthetic dev pairs")
    p.add_argument("--min-len", type=int, default=2, help="synthetic minimum length")
    p.add_argument("--task-max-len", type=int, default=10, help="synthetic maximum length")
    p.add_argument("--train-src"), p.add_argument("--train-tgt")
    p.add_argument("--dev-src"), p.add_argument("--dev-tgt")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="decode sentences with a trained model")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--input", required=True, help="source sentences, one per line")
    p.add_argument("--output", help="hypotheses file (default: standard output)")
    p.add_argument("--beam", type=int, default=4, help="beam size; 1 is greedy")
    p.add_argument("--length-norm", type=float, default=1.0, help="length normalization exponent")
    p.add_argument("--max-len", type=int, default=50, help="maximum output length")
    p.add_argument("--dump-attn", metavar="PATH", help="write attention traces here")
    p.add_argument("--workers", type=int, default=1, help="parallel decoding processes")
    p.add_argument("--decoder", help="expected decoder variant (must match the checkpoint)")
    p.add_argument("--scoring", help="expected scoring (must match the checkpoint)")
    p.add_argument("--config", help="file of key=value lines; explicit flags override it")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("analyze", help="histograms, trees, PARSEVAL, BLEU and perplexity")
    asub = p.add_subparsers(dest="analysis", required=True, metavar="ANALYSIS")
    a = asub.add_parser("hist", help="relative position of maximal target-side attention")
    a.add_argument("--traces", required=True)
    a.add_argument("--output")
    a.set_defaults(func=cmd_hist)
    a = asub.add_parser("tree", help="binary trees from target-side attention")
    a.add_argument("--traces", required=True)
    a.add_argument("--output")
    a.set_defaults(func=cmd_tree)
    a = asub.add_parser("parseval", help="unlabeled bracket precision and recall")
    a.add_argument("--pred", required=True, help="predicted trees, one per line")
    a.add_argument("--gold", required=True, help="gold trees, one per line")
    a.set_defaults(func=cmd_parseval)
    a = asub.add_parser("bleu", help="corpus BLEU of tokenized text")
    a.add_argument("--hyp", required=True)
    a.add_argument("--ref", required=True)
    a.set_defaults(func=cmd_bleu)
    a = asub.add_parser("ppl", help="teacher-forced perplexity of a translation model")
    a.add_argument("--model", required=True)
    a.add_argument("--src", required=True)
    a.add_argument("--tgt", required=True)
    a.set_defaults(func=cmd_ppl)

    p = sub.add_parser("lm", help="language-model mode (no encoder)")
    lsub = p.add_subparsers(dest="lm_command", required=True, metavar="LMCOMMAND")
    a = lsub.add_parser("train", help="train a language model")
    _add_model_flags(a, lm=True)
    a.add_argument("--corpus", help="training text, one sentence per line")
    a.add_argument("--dev", help="dev text, one sentence per line")
    a.add_argument("--toy-tokens", type=int, help="generate a toy topic corpus of this many tokens instead")
    a.add_argument("--vocab-size", type=int, default=10000, help="vocabulary size including reserved ids")
    _add_train_flags(a)
    a.set_defaults(func=cmd_lm_train)
    a = lsub.add_parser("ppl", help="perplexity of a language model")
    a.add_argument("--model", required=True)
    a.add_argument("--corpus", required=True)
    a.set_defaults(func=cmd_lm_ppl)
    return parser


# ---------------------------------------------------------------------------
# config files


def read_config(path) -> dict[str, str]:
    """``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"{path}:{lineno}: expected key=value")
        out[key.strip().replace("_", "-")] = value.strip()
    return out


def _subparser(parser, argv):
    node, depth = parser, 0
    while depth < len(argv):
        subs = [a for a in node._actions if isinstance(a, argparse._SubParsersAction)]
        if not subs or argv[depth] not in subs[0].choices:
            break
        node = subs[0].choices[argv[depth]]
        depth += 1
    return node, depth


def _config_path(argv) -> str | None:
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def expand_config(parser, argv: list[str]) -> list[str]:
    """Insert flags from ``--config`` right after the subcommand so explicit flags win."""
    path = _config_path(argv)
    if path is None:
        return argv
    head = 0
    while head < len(argv) and argv[head].startswith("-"):
        head += 1
    node, depth = _subparser(parser, argv[head:])
    actions = {opt: act for act in node._actions for opt in act.option_strings}
    extra = []
    for key, value in read_config(path).items():
        flag = "--" + key
        act = actions.get(flag)
        if act is None or key in ("config", "help"):
            raise UsageError(f"{path}: unknown setting {key!r}")
        if act.nargs == 0:
            if value.lower() in ("1", "true", "yes", "on"):
                extra.append(flag)
        else:
            extra += [flag, value]
    split = head + depth
    return argv[:split] + extra + argv[split:]


def write_config(path, args) -> None:
    skip = {"func", "command", "lm_command", "analysis", "config", "save_config", "verbose"}
    lines = [f"{k.replace('_', '-')}={v}" for k, v in sorted(vars(args).items())
             if k not in skip and v is not None and v is not False]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# commands


def _train_config(args, src_vocab: int, tgt_vocab: int, lm=False) -> TrainConfig:
    variant = _variant_name(args.decoder)
    if args.scoring and variant != Variant.ATTN_RESIDUAL.value:
        raise UsageError("--scoring requires --decoder attn-residual")
    return TrainConfig(variant=variant, scoring=args.scoring, embed_dim=args.embed_dim,
                       hidden_dim=args.hidden_dim, src_vocab=src_vocab, tgt_vocab=tgt_vocab, lm=lm,
                       rho=args.rho, epsilon=args.epsilon, dropout_p=args.dropout,
                       init_scale=args.init_scale, batch_size=args.batch_size, max_epochs=args.epochs,
                       seed=args.seed, precision=args.precision, max_len=args.max_len,
                       clip_norm=args.clip or None, stop_accuracy=args.stop_accuracy)


def _check_train_flags(args) -> None:
    if args.embed_dim < 1 or args.hidden_dim < 1:
        raise UsageError("--embed-dim and --hidden-dim must be positive")
    if args.max_len < 1:
        raise UsageError("--max-len must be >= 1")


def _finish_train(args, cfg, train_pairs, dev_pairs, meta) -> int:
    if args.save_config:
        write_config(args.save_config, args)
    result = train(cfg, train_pairs, dev_pairs, checkpoint=args.out,
                   metrics_log=args.log or args.out + ".log", extra_meta=meta)
    best = result.history[result.best_epoch - 1] if result.best_epoch else None
    if best is not None:
        print(f"best epoch {best.epoch}: dev_loss={best.dev_loss:.6f} dev_accuracy={best.dev_accuracy:.6f}")
    return 0


def cmd_train(args) -> int:
    _check_train_flags(args)
    files = [args.train_src, args.train_tgt, args.dev_src, args.dev_tgt]
    if args.task and any(files):
        raise UsageError("use either --task or corpus files, not both")
    if not args.task and not all(files):
        raise UsageError("need --task or all of --train-src --train-tgt --dev-src --dev-tgt")
    if args.task:
        vocab = D.synthetic_vocabulary(args.vocab_size)
        cfg = _train_config(args, len(vocab), len(vocab))
        lengths = (args.min_len, args.task_max_len)
        train_pairs = D.make_synthetic_task(args.task, args.vocab_size, lengths, args.train_size, args.seed)
        dev_pairs = D.make_synthetic_task(args.task, args.vocab_size, lengths, args.dev_size, args.seed + 10**6)
        src_vocab = tgt_vocab = vocab
    else:
        src_lines = _read_lines(args.train_src)
        tgt_lines = _read_lines(args.train_tgt)
        src_vocab = D.build_vocabulary(src_lines, args.vocab_size)
        tgt_vocab = D.build_vocabulary(tgt_lines, args.vocab_size)
        cfg = _train_config(args, len(src_vocab), len(tgt_vocab))
        train_pairs = D.load_parallel_corpus(args.train_src, args.train_tgt, src_vocab, tgt_vocab, args.max_len)
        dev_pairs = D.load_parallel_corpus(args.dev_src, args.dev_tgt, src_vocab, tgt_vocab, args.max_len)
    meta = {"src_tokens": " ".join(src_vocab.tokens), "tgt_tokens": " ".join(tgt_vocab.tokens)}
    return _finish_train(args, cfg, train_pairs, dev_pairs, meta)


def cmd_lm_train(args) -> int:
    _check_train_flags(args)
    if args.toy_tokens and (args.corpus or args.dev):
        raise UsageError("use either --toy-tokens or --corpus/--dev, not both")
    if args.toy_tokens:
        train_lines = D.make_toy_lm_corpus(args.toy_tokens, seed=args.seed)
        dev_lines = D.make_toy_lm_corpus(max(args.toy_tokens // 10, 100), seed=args.seed + 10**6)
    elif args.corpus and args.dev:
        train_lines, dev_lines = _read_lines(args.corpus), _read_lines(args.dev)
    else:
        raise UsageError("need --toy-tokens or both --corpus and --dev")
    vocab = D.build_vocabulary(train_lines, args.vocab_size)
    cfg = _train_config(args, 0, len(vocab), lm=True)
    train_seqs = D.lm_sequences(train_lines, vocab, args.max_len)
    dev_seqs = D.lm_sequences(dev_lines, vocab, args.max_len)
    return _finish_train(args, cfg, train_seqs, dev_seqs, {"tgt_tokens": " ".join(vocab.tokens)})


def _read_lines(path) -> list[str]:
    return Path(path).read_text(encoding="utf-8").splitlines()


def _load_model(path, lm: bool | None = None):
    params, meta = load_checkpoint(path)
    if lm is not None and params.config.lm != lm:
        raise UsageError(f"{path} is {'an LM' if params.config.lm else 'a translation'} checkpoint")
    src_vocab = D.Vocabulary(meta.get("src_tokens", "").split())
    tgt_vocab = D.Vocabulary(meta.get("tgt_tokens", "").split())
    if len(tgt_vocab) != params.config.tgt_vocab or (not params.config.lm and len(src_vocab) != params.config.src_vocab):
        raise CheckpointError(f"{path}: vocabulary metadata does not match parameter shapes")
    return params, src_vocab, tgt_vocab


_WORKER = {}


def _worker_init(params, beam, max_len, length_norm):
    _WORKER.update(params=params, beam=beam, max_len=max_len, length_norm=length_norm)


def _decode_one(src):
    w = _WORKER
    if w["beam"] == 1:
        return greedy_decode(src, w["params"], max_len=w["max_len"])
    return beam_decode(src, w["params"], beam=w["beam"], max_len=w["max_len"], length_norm=w["length_norm"])


def cmd_translate(args) -> int:
    if args.beam < 1 or args.max_len < 1 or args.workers < 1:
        raise UsageError("--beam, --max-len and --workers must be >= 1")
    params, src_vocab, tgt_vocab = _load_model(args.model, lm=False)
    cfg = params.config
    if args.decoder and Variant.parse(args.decoder) is not cfg.variant:
        raise UsageError(f"--decoder {args.decoder} does not match checkpoint variant {cfg.variant.value}")
    if args.scoring and (cfg.scoring is None or Scoring.parse(args.scoring) is not cfg.scoring):
        raise UsageError(f"--scoring {args.scoring} does not match checkpoint")
    sources = [src_vocab.encode(line) for line in _read_lines(args.input)]
    init = (params, args.beam, args.max_len, args.length_norm)
    if args.workers > 1 and len(sources) > 1:
        with ProcessPoolExecutor(args.workers, initializer=_worker_init, initargs=init) as pool:
            hyps = list(pool.map(_decode_one, sources, chunksize=8))
    else:
        _worker_init(*init)
        hyps = [_decode_one(src) for src in sources]
    text = "".join(" ".join(tgt_vocab.decode(h.tokens)) + "\n" for h in hyps)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    if args.dump_attn:
        export_traces(hyps, args.dump_attn, tgt_vocab)
    return 0


def _emit(text: str, path) -> None:
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_hist(args) -> int:
    hist = max_attention_histogram(read_traces(args.traces))
    _emit("".join(line + "\n" for line in hist.lines()), args.output)
    return 0


def cmd_tree(args) -> int:
    out = []
    for tr in read_traces(args.traces):
        words = tr.words()
        if not words:
            out.append("")
            continue
        out.append(build_tree(binarize_attention(tr), words).bracket(words))
    _emit("".join(line + "\n" for line in out), args.output)
    return 0


def cmd_parseval(args) -> int:
    score = corpus_parseval(D.load_gold_trees(args.pred), D.load_gold_trees(args.gold))
    print(f"precision={score.precision:.6f} recall={score.recall:.6f}")
    return 0


def cmd_bleu(args) -> int:
    hyps = [line.split() for line in _read_lines(args.hyp)]
    refs = [line.split() for line in _read_lines(args.ref)]
    print(bleu(hyps, refs))
    return 0


def cmd_ppl(args) -> int:
    params, src_vocab, tgt_vocab = _load_model(args.model, lm=False)
    pairs = D.load_parallel_corpus(args.src, args.tgt, src_vocab, tgt_vocab, max_len=10**9)
    print(f"perplexity={perplexity(params, pairs):.6f}")
    return 0


def cmd_lm_ppl(args) -> int:
    params, _, vocab = _load_model(args.model, lm=True)
    seqs = D.lm_sequences(_read_lines(args.corpus), vocab, max_len=10**9)
    print(f"perplexity={perplexity(params, seqs):.6f}")
    return 0


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = expand_config(parser, argv)
    except UsageError as exc:
        print(f"resdec: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"resdec: error: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"resdec: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, OSError) as exc:
        print(f"resdec: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, ResdecError) as exc:
        print(f"resdec: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
