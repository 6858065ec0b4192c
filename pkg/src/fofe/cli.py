"""Command-line interface: ``fofe <command> ...``.

Exit codes: 0 success, 1 runtime or guard failure, 2 usage error.
Every report is TSV with a header row.
"""

from __future__ import annotations

import argparse
import contextlib
import os
import sys
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from . import nnlm, toy, uniqueness
from .core import FofeCode, TokenSequence, as_factor, decode, encode
from .errors import FofeError, VocabMismatchError

RANGE_TOL = 1e-12


# --- argument types -------------------------------------------------------------


def alpha_arg(text: str) -> float:
    try:
        return as_factor(float(text)).value
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"invalid forgetting factor {text!r}: {exc}") from None


def float_list(text: str) -> list[float]:
    """Comma-separated floats and ``start:stop:step`` ranges (both ends inclusive)."""
    values: list[float] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if ":" in part:
                start, stop, step = (float(x) for x in part.split(":"))
                if not step > 0 or stop < start:
                    raise ValueError
                k = 0
                while start + k * step <= stop + RANGE_TOL:
                    values.append(round(start + k * step, 12))
                    k += 1
            else:
                values.append(float(part))
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad number list or range {part!r} (expected e.g. 0.1,0.2 or 0.1:0.9:0.1)") from None
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def alpha_list(text: str) -> list[float]:
    values = float_list(text)
    for v in values:
        alpha_arg(repr(v))
    return values


def positive_list(text: str) -> list[float]:
    values = float_list(text)
    if any(not v > 0 for v in values):
        raise argparse.ArgumentTypeError("values must be positive")
    return values


def int_list(text: str) -> tuple[int, ...]:
    try:
        values = tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("expected positive integers")
    return values


def positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def existing_file(text: str) -> Path:
    p = Path(text)
    if not p.is_file():
        raise argparse.ArgumentTypeError(f"no such file: {text}")
    return p


# --- helpers ------------------------------------------------------------------------


def workers_from_env() -> int:
    raw = os.environ.get("FOFE_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise FofeError(f"FOFE_THREADS must be an integer, got {raw!r}") from None
    return n if n > 0 else (os.cpu_count() or 1)


@contextlib.contextmanager
def output(path):
    if path is None or str(path) == "-":
        yield sys.stdout
    else:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            yield f


def _read_tokens(args) -> str:
    return " ".join(args.tokens) if args.tokens else sys.stdin.read()


# --- commands --------------------------------------------------------------------------


def cmd_encode(args) -> int:
    vocab = corpus_mod.Vocabulary.read_tsv(args.vocab)
    words = _read_tokens(args).split()
    ids = []
    for w in words:
        try:
            ids.append(vocab.id_of(w))
        except KeyError as exc:
            raise FofeError(exc.args[0]) from None
    code = encode(TokenSequence(tuple(ids), len(vocab)), args.alpha)
    print("\t".join(uniqueness.format_float(x) for x in code.entries))
    return 0


def cmd_decode(args) -> int:
    vocab = corpus_mod.Vocabulary.read_tsv(args.vocab)
    text = " ".join(args.code) if args.code else sys.stdin.read()
    try:
        entries = np.array([float(x) for x in text.replace("\t", " ").split()], dtype=np.float64)
    except ValueError:
        raise FofeError("code must be a list of numbers") from None
    if entries.size != len(vocab):
        raise FofeError(f"code has {entries.size} entries but the vocabulary has {len(vocab)} tokens")
    seq = decode(FofeCode(entries, as_factor(args.alpha)), max_len=args.max_len, tol=args.tol)
    print(" ".join(vocab.decode_ids(seq.ids)))
    return 0


def cmd_collide(args) -> int:
    reports = uniqueness.sweep_collisions(args.k, args.t, args.alphas, args.eps, mode=args.mode,
                                          workers=min(workers_from_env(), len(args.alphas)))
    with output(args.out) as out:
        uniqueness.write_collision_tsv(reports, out)
    return 0


def cmd_critical_alphas(args) -> int:
    result = uniqueness.find_critical_alphas(args.t)
    with output(args.out) as out:
        result.write_tsv(out)
    return 0


def cmd_scan(args) -> int:
    lines = corpus_mod.read_lines(args.corpus)
    if args.vocab is not None:
        vocab = corpus_mod.Vocabulary.read_tsv(args.vocab)
    else:
        n_types = len({w for ln in lines for w in ln.split()})
        vocab = corpus_mod.build_vocab(lines, args.cap or n_types + len(corpus_mod.RESERVED))
    data = corpus_mod.tokenize(lines, vocab)
    reports = [uniqueness.scan_corpus_collisions(data.sentences, len(vocab), a, e)
               for a in args.alpha for e in args.eps]
    with output(args.out) as out:
        uniqueness.write_collision_tsv(reports, out)
    for r in reports:
        for x, y in r.example_pairs[:3]:
            print(f"alpha={r.alpha.value:g} eps={r.epsilon:g}: {' '.join(vocab.decode_ids(x))!r} ~ "
                  f"{' '.join(vocab.decode_ids(y))!r}", file=sys.stderr)
    return 0


def cmd_vocab(args) -> int:
    vocab = corpus_mod.build_vocab(corpus_mod.read_lines(args.corpus), args.cap)
    vocab.write_tsv(args.out)
    print(f"{len(vocab)} tokens written to {args.out}", file=sys.stderr)
    return 0


def cmd_toy_corpus(args) -> int:
    paths = toy.write_splits(args.out_dir, args.train_tokens, args.valid_tokens, args.test_tokens, seed=args.seed)
    for name, p in paths.items():
        print(f"{name}\t{p}")
    return 0


def _model_config(args, vocab_size: int, alpha: float | None) -> nnlm.ModelConfig:
    if args.mode != "ngram" and alpha is None:
        raise FofeError(f"--alpha is required for mode {args.mode}")
    return nnlm.ModelConfig(args.mode, vocab_size, args.embed_dim, args.hidden, alpha=alpha, order=args.order)


def _train_config(args) -> nnlm.TrainConfig:
    return nnlm.TrainConfig(initial_lr=args.lr, batch_capacity_words=args.batch_words, seed=args.seed,
                            min_valid_ppl_gain=args.min_gain, final_halving_epochs=args.halving_epochs,
                            max_epochs=args.max_epochs, deterministic=not args.fast)


def _load_splits(args, vocab, names):
    return [corpus_mod.load_corpus(getattr(args, n), vocab) for n in names]


def _progress(quiet):
    if quiet:
        return None
    return lambda r: print(f"epoch {r.epoch}\tlr={r.lr:g}\ttrain_nll={r.train_nll:.4f}\tvalid_ppl={r.valid_ppl:.2f}",
                           file=sys.stderr, flush=True)


def cmd_train(args) -> int:
    vocab = corpus_mod.Vocabulary.read_tsv(args.vocab)
    train_c, valid_c = _load_splits(args, vocab, ("train", "valid"))
    config = _model_config(args, len(vocab), args.alpha)
    params, log = nnlm.train(config, _train_config(args), train_c, valid_c, callback=_progress(args.quiet))
    nnlm.save_model(args.model, params, config)
    if args.log is not None:
        with output(args.log) as out:
            nnlm.write_log_tsv(log, out)
    return 0


def cmd_eval(args) -> int:
    params, config = nnlm.load_model(args.model)
    vocab = corpus_mod.Vocabulary.read_tsv(args.vocab)
    if len(vocab) != config.vocab_size:
        raise VocabMismatchError(f"model expects {config.vocab_size} tokens, vocabulary file has {len(vocab)}")
    with nnlm.blas_threads(True):
        reports = [nnlm.perplexity(params, config, corpus_mod.load_corpus(p, vocab), name=str(p))
                   for p in args.corpus]
    with output(args.out) as out:
        out.write("\t".join(nnlm.REPORT_HEADER) + "\n")
        for r in reports:
            out.write("\t".join(r.tsv_row()) + "\n")
    return 0


def cmd_sweep_alpha(args) -> int:
    if args.mode == "ngram":
        raise FofeError("sweep-alpha needs a FOFE mode (fofe1 or fofe2)")
    vocab = corpus_mod.Vocabulary.read_tsv(args.vocab)
    train_c, valid_c, test_c = _load_splits(args, vocab, ("train", "valid", "test"))
    rows = []
    for a in args.alphas:
        config = _model_config(args, len(vocab), a)
        if not args.quiet:
            print(f"alpha={a:g}", file=sys.stderr, flush=True)
        params, log = nnlm.train(config, _train_config(args), train_c, valid_c, callback=_progress(args.quiet))
        with nnlm.blas_threads(True):
            valid = nnlm.perplexity(params, config, valid_c, "valid").perplexity
            test = nnlm.perplexity(params, config, test_c, "test").perplexity
        rows.append((a, valid, test))
    with output(args.out) as out:
        out.write("alpha\tvalid_ppl\ttest_ppl\n")
        for a, v, t in rows:
            out.write(f"{uniqueness.format_float(a)}\t{v:.2f}\t{t:.2f}\n")
    return 0


# --- parser ------------------------------------------------------------------------------


def _add_model_flags(p, alpha_required=False):
    p.add_argument("--mode", choices=nnlm.MODES, default="fofe1", help="context representation (default fofe1)")
    p.add_argument("--order", type=int, default=2, help="n of an n-gram model (default 2, a bigram)")
    p.add_argument("--embed-dim", type=positive_int, default=200, help="projection layer width (default 200)")
    p.add_argument("--hidden", type=int_list, default=(400, 400), help="hidden layer widths (default 400,400)")
    p.add_argument("--lr", type=float, default=0.4, help="initial learning rate (default 0.4)")
    p.add_argument("--batch-words", type=positive_int, default=200, help="words per mini-batch (default 200)")
    p.add_argument("--min-gain", type=float, default=1.0,
                   help="validation perplexity gain below which halving starts (default 1.0)")
    p.add_argument("--halving-epochs", type=int, default=6, help="epochs trained after the plateau (default 6)")
    p.add_argument("--max-epochs", type=positive_int, default=None, help="hard cap on epochs")
    p.add_argument("--seed", type=int, default=42, help="seed for initialisation and shuffling (default 42)")
    p.add_argument("--fast", action="store_true",
                   help="let BLAS use FOFE_THREADS threads; results are then not bit-reproducible")
    p.add_argument("--quiet", action="store_true", help="no per-epoch progress on stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fofe", description="FOFE encoding, uniqueness experiments and FOFE language models.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("encode", help="print the FOFE code of a token sequence")
    p.add_argument("--alpha", type=alpha_arg, required=True, help="forgetting factor in (0, 1)")
    p.add_argument("--vocab", type=existing_file, required=True, help="vocabulary TSV (id, token, frequency)")
    p.add_argument("tokens", nargs="*", help="tokens (read from stdin when omitted)")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="recover the token sequence of a FOFE code")
    p.add_argument("--alpha", type=alpha_arg, required=True, help="forgetting factor in (0, 1)")
    p.add_argument("--vocab", type=existing_file, required=True, help="vocabulary TSV")
    p.add_argument("--max-len", type=positive_int, default=64, help="longest sequence to consider (default 64)")
    p.add_argument("--tol", type=float, default=1e-9, help="matching tolerance (default 1e-9)")
    p.add_argument("code", nargs="*", help="code entries (read from stdin when omitted)")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("collide", help="count collisions over all sequences of a given length")
    p.add_argument("--k", type=positive_int, required=True, help="alphabet size")
    p.add_argument("--t", type=positive_int, required=True, help="sequence length")
    p.add_argument("--alphas", type=alpha_list, required=True, help="forgetting factors, list or start:stop:step")
    p.add_argument("--eps", type=positive_list, required=True, help="max-norm thresholds, list or range")
    p.add_argument("--mode", choices=("exact-length", "up-to-length"), default="exact-length",
                   help="enumerate length exactly T (default) or all lengths 1..T")
    p.add_argument("--out", help="output TSV (default stdout)")
    p.set_defaults(func=cmd_collide)

    p = sub.add_parser("critical-alphas", help="list the critical forgetting factors in (0.5, 1) for length T")
    p.add_argument("--t", type=positive_int, required=True, help="sequence length (at most 20)")
    p.add_argument("--out", help="output TSV (default stdout)")
    p.set_defaults(func=cmd_critical_alphas)

    p = sub.add_parser("scan", help="count collisions among all sentence prefixes of a corpus")
    p.add_argument("--corpus", type=existing_file, required=True, help="text file, one sentence per line")
    p.add_argument("--vocab", type=existing_file, help="vocabulary TSV (default: built from the corpus)")
    p.add_argument("--cap", type=positive_int, help="vocabulary cap when building (default: keep every word)")
    p.add_argument("--alpha", type=alpha_list, required=True, help="forgetting factors, list or range")
    p.add_argument("--eps", type=positive_list, required=True, help="max-norm thresholds")
    p.add_argument("--out", help="output TSV (default stdout)")
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("vocab", help="build a frequency-capped vocabulary")
    p.add_argument("--corpus", type=existing_file, required=True, help="training text")
    p.add_argument("--cap", type=positive_int, required=True, help="vocabulary size including <unk> and </s>")
    p.add_argument("--out", required=True, help="vocabulary TSV to write")
    p.set_defaults(func=cmd_vocab)

    p = sub.add_parser("toy-corpus", help="write synthetic train/valid/test splits")
    p.add_argument("--out-dir", required=True, help="directory for train.txt, valid.txt, test.txt")
    p.add_argument("--train-tokens", type=positive_int, default=100_000)
    p.add_argument("--valid-tokens", type=positive_int, default=10_000)
    p.add_argument("--test-tokens", type=positive_int, default=10_000)
    p.add_argument("--seed", type=int, default=42)
    p.set_defaults(func=cmd_toy_corpus)

    p = sub.add_parser("train", help="train a language model and save it")
    p.add_argument("--train", type=existing_file, required=True, help="training text")
    p.add_argument("--valid", type=existing_file, required=True, help="validation text")
    p.add_argument("--vocab", type=existing_file, required=True, help="vocabulary TSV")
    p.add_argument("--alpha", type=alpha_arg, help="forgetting factor (FOFE modes)")
    p.add_argument("--model", required=True, help="model file to write")
    p.add_argument("--log", help="per-epoch TSV log to write")
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="report perplexity of a saved model")
    p.add_argument("--model", type=existing_file, required=True, help="model file")
    p.add_argument("--vocab", type=existing_file, required=True, help="vocabulary TSV used in training")
    p.add_argument("--corpus", type=existing_file, nargs="+", required=True, help="text files to score")
    p.add_argument("--out", help="output TSV (default stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-alpha", help="train one FOFE model per forgetting factor")
    p.add_argument("--alphas", type=alpha_list, required=True, help="forgetting factors, list or range")
    p.add_argument("--train", type=existing_file, required=True)
    p.add_argument("--valid", type=existing_file, required=True)
    p.add_argument("--test", type=existing_file, required=True)
    p.add_argument("--vocab", type=existing_file, required=True)
    p.add_argument("--out", help="output TSV (default stdout)")
    _add_model_flags(p)
    p.set_defaults(func=cmd_sweep_alpha)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FofeError as exc:
        print(f"fofe: {exc.kind}: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"fofe: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
