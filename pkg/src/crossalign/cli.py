"""Command-line interface.

Commands: ``gen-data``, ``train``, ``transfer``, ``eval``, ``grad-check``
and ``theory-demo``.  Settings resolve as command-line flag, then
``--config`` file, then built-in default.

Exit codes: 0 success, 1 failed diagnostic, 2 configuration error,
3 data error, 4 training diverged.
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from pathlib import Path

from . import gradcheck, theory
from .data import Vocabulary, build_vocab, load_and_filter
from .errors import ContractError, DataError, DimensionError, DivergenceError, ParameterError
from .evaluation import (
    SentenceClassifier,
    apply_mapping,
    bleu,
    classifier_accuracy,
    frequency_match,
    train_classifier,
)
from .model import transfer_corpus
from .persist import (
    FULL_DIMS,
    RunConfig,
    load_checkpoint,
    merge_config,
    read_config_file,
    save_checkpoint,
    write_config_file,
)
from .tasks import FILES, TASKS, make_task
from .training import VARIANTS, TrainState, format_metrics, train

log = logging.getLogger("crossalign")

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3, 4
CHECKPOINT_NAME = "checkpoint.ckpt"
METRICS_NAME = "metrics.log"
VOCAB_NAME = "vocab.txt"
CONFIG_NAME = "run.cfg"
DIRECTIONS = {"1to2": (1, 2), "2to1": (2, 1)}

# flag destination -> config key
_CONFIG_FLAGS = {
    "task": "task", "rate": "rate", "variant": "variant", "seed": "seed", "lam": "lam", "gamma": "gamma",
    "lr": "learning_rate", "batch_size": "batch_size", "max_epochs": "max_epochs", "max_steps": "max_steps",
    "out": "out", "data": "data", "n_vocab": "n_vocab", "n_train": "n_train", "n_dev": "n_dev",
    "n_test": "n_test", "max_len": "max_len", "disc_lr": "disc_learning_rate", "adv_gate": "adv_gate",
    "ae_warmup": "ae_warmup", "concentration": "concentration",
}


def resolve_config(args: argparse.Namespace, base: RunConfig | None = None) -> RunConfig:
    """Merge ``base`` (the defaults, or a resumed run's settings), the
    optional config file and the given flags."""
    file_values = read_config_file(args.config) if getattr(args, "config", None) else {}
    cli = {key: getattr(args, dest, None) for dest, key in _CONFIG_FLAGS.items()}
    if getattr(args, "paper_dims", False):
        cli.update(FULL_DIMS)
    return merge_config((base or RunConfig()).to_flat(), file_values, cli)


def _prepare_out_dir(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise ContractError(f"output directory {path} is not empty; pass --force to overwrite")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


# ------------------------------------------------------------------ gen-data


def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    if cfg.out is None:
        raise ContractError("gen-data needs --out")
    out = Path(cfg.out)
    _prepare_out_dir(out, args.force)
    task = make_task(cfg.task, cfg.rate, cfg.n_vocab, cfg.n_train, cfg.n_dev, cfg.n_test, cfg.max_len,
                     cfg.train.seed, cfg.concentration)
    task.write(out)
    task.vocab(cfg.train.min_count).save(out / VOCAB_NAME)
    write_config_file(cfg, out / CONFIG_NAME)
    print(f"task={cfg.task} rate={cfg.rate} seed={cfg.train.seed}")
    for attr in FILES:
        print(f"{FILES[attr]}: {len(getattr(task, attr))} sentences")
    if task.key is not None:
        print(f"key.tsv: {len(task.key.mapping)} substituted tokens")
    return EXIT_OK


# --------------------------------------------------------------------- train


def _load_corpora(data_dir: Path, max_len: int):
    for attr in ("x1", "x2"):
        if not (data_dir / FILES[attr]).exists():
            raise DataError(f"missing {FILES[attr]} in {data_dir}")
    x1 = load_and_filter(data_dir / FILES["x1"], max_len, 1)
    x2 = load_and_filter(data_dir / FILES["x2"], max_len, 2)
    if not len(x1) or not len(x2):
        raise DataError(f"empty training corpus in {data_dir}")
    return x1, x2


def cmd_train(args: argparse.Namespace) -> int:
    resume = load_checkpoint(args.resume) if args.resume else None
    cfg = resolve_config(args, resume.run if resume is not None else None)
    if cfg.data is None or cfg.out is None:
        raise ContractError("train needs --data and --out")
    data_dir, out = Path(cfg.data), Path(cfg.out)
    if not data_dir.is_dir():
        raise DataError(f"data directory {data_dir} does not exist")
    x1, x2 = _load_corpora(data_dir, cfg.max_len)
    if resume is not None:
        vocab = resume.vocab
    elif (data_dir / VOCAB_NAME).exists():
        vocab = Vocabulary.load(data_dir / VOCAB_NAME)
    else:
        vocab = build_vocab(x1.sentences + x2.sentences, cfg.train.min_count)
    if resume is None:
        _prepare_out_dir(out, args.force)
    else:
        out.mkdir(parents=True, exist_ok=True)
        if resume.run.train.variant != cfg.train.variant:
            raise ContractError("cannot resume a checkpoint with a different variant")
    corpora = ([vocab.encode(s) for s in x1], [vocab.encode(s) for s in x2])
    state = resume.state if resume is not None else TrainState.create(cfg.train, len(vocab))
    state.cfg = cfg.train
    ckpt = out / CHECKPOINT_NAME
    write_config_file(cfg, out / CONFIG_NAME)

    with open(out / METRICS_NAME, "a", encoding="utf-8") as metrics:
        def on_step(st, record):
            metrics.write(format_metrics(record) + "\n")
            if st.step % args.log_every == 0:
                log.info(format_metrics(record))

        def on_epoch(st, epoch):
            metrics.flush()
            save_checkpoint(ckpt, st, vocab, cfg)
            log.info("epoch %d done (step %d), checkpoint written", epoch, st.step)

        try:
            train(corpora, cfg.train, len(vocab), state=state, on_step=on_step, on_epoch=on_epoch)
        except DivergenceError as e:
            metrics.flush()
            where = f"; last good checkpoint: {ckpt}" if ckpt.exists() else ""
            print(f"training diverged: {e}{where}", file=sys.stderr)
            return EXIT_DIVERGED
    save_checkpoint(ckpt, state, vocab, cfg)
    print(f"trained {cfg.train.variant} for {state.step} steps; checkpoint {ckpt}")
    return EXIT_OK


# ------------------------------------------------------------------ transfer


def _read_lines(path: str | Path) -> list[list[str]]:
    try:
        text = Path(path).read_bytes().decode("utf-8")
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from None
    return [line.split() for line in text.splitlines()]


def _write_lines(sentences, path: str | Path) -> None:
    Path(path).write_bytes("".join(" ".join(s) + "\n" for s in sentences).encode("utf-8"))


def cmd_transfer(args: argparse.Namespace) -> int:
    ck = load_checkpoint(args.checkpoint)
    if args.vocab:
        vocab = Vocabulary.load(args.vocab)
        if vocab.content_hash() != ck.vocab.content_hash():
            raise ContractError(f"vocabulary {args.vocab} does not match the checkpoint's vocabulary")
    src, tgt = DIRECTIONS[args.direction]
    sentences = _read_lines(args.input)
    out = transfer_corpus(ck.state.params, sentences, ck.vocab, src, tgt, max_len=ck.run.train.max_decode)
    _write_lines(out, args.output)
    log.info("transferred %d sentences (%s)", len(out), args.direction)
    return EXIT_OK


# ---------------------------------------------------------------------- eval


def _row(label: str, report) -> str:
    """One report line: ``row=<label> bleu=… bp=… p1=… … p4=…``."""
    p = " ".join(f"p{n}={x:.6f}" for n, x in enumerate(report.precisions, 1))
    return f"row={label} bleu={report.score:.4f} bp={report.brevity_penalty:.6f} {p}"


def cmd_eval(args: argparse.Namespace) -> int:
    cands, refs = _read_lines(args.candidates), _read_lines(args.references)
    if len(cands) != len(refs):
        raise ContractError(f"{len(cands)} candidate lines but {len(refs)} reference lines")
    lines = [_row("transfer", bleu(cands, refs))]
    src_style, tgt_style = DIRECTIONS[args.direction]
    if args.source:
        source = _read_lines(args.source)
        if len(source) != len(refs):
            raise ContractError(f"{len(source)} source lines but {len(refs)} reference lines")
        lines.append(_row("copy", bleu(source, refs)))
        if args.data:
            data_dir = Path(args.data)
            sides = {1: _read_lines(data_dir / FILES["x1"]), 2: _read_lines(data_dir / FILES["x2"])}
            mapping = frequency_match(sides[tgt_style], sides[src_style])
        else:
            # no training corpora: match the frequencies of the two sides given
            mapping = frequency_match(refs, source)
        lines.append(_row("unigram-match", bleu(apply_mapping(source, mapping), refs)))
    if args.classifier:
        if not args.data:
            raise ContractError("--classifier needs --data to train on")
        data_dir = Path(args.data)
        x1, x2 = _read_lines(data_dir / FILES["x1"]), _read_lines(data_dir / FILES["x2"])
        vocab = Vocabulary.load(data_dir / VOCAB_NAME)
        clf: SentenceClassifier = train_classifier(x1, x2, vocab, steps=args.classifier_steps, seed=args.seed or 0)
        lines.append(f"row=classifier accuracy={classifier_accuracy(cands, clf, tgt_style):.4f}")
    text = "\n".join(lines) + "\n"
    if args.report:
        Path(args.report).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


# ------------------------------------------------------------- diagnostics


def cmd_grad_check(args: argparse.Namespace) -> int:
    base = args.seed or 0
    results = gradcheck.run_all(range(base, base + args.n_seeds), args.only or None)
    failed = 0
    for name, err in results.items():
        ok = err < gradcheck.TOLERANCE
        failed += not ok
        print(f"{name:<24} {err:.3e} {'ok' if ok else 'FAIL'}")
    print(f"{len(results) - failed}/{len(results)} checks below {gradcheck.TOLERANCE:g} over {args.n_seeds} seeds")
    return EXIT_OK if failed == 0 else EXIT_FAILED


def cmd_theory_demo(args: argparse.Namespace) -> int:
    rows = theory.demo_table(seed=args.seed or 0)
    print(f"{'claim':<34} {'passed':>9} note")
    for row in rows:
        print(row.format())
    return EXIT_OK if all(r.passed == r.trials for r in rows) else EXIT_FAILED


# -------------------------------------------------------------------- parser


def _add_run_flags(p: argparse.ArgumentParser, training: bool) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    if training:
        p.add_argument("--data", help="directory written by gen-data")
        p.add_argument("--variant", choices=VARIANTS)
        p.add_argument("--lambda", dest="lam", type=float, help="weight of the adversarial terms")
        p.add_argument("--gamma", type=float, help="softmax temperature of the self-fed generator")
        p.add_argument("--lr", type=float, help="learning rate")
        p.add_argument("--disc-lr", type=float, help="discriminator learning rate (default: --lr)")
        p.add_argument("--adv-gate", type=float,
                       help="apply the adversarial terms only while every discriminator loss is below this")
        p.add_argument("--ae-warmup", type=int, help="plain auto-encoder steps before adversarial training")
        p.add_argument("--batch-size", type=int)
        p.add_argument("--max-epochs", type=int)
        p.add_argument("--max-steps", type=int)
        p.add_argument("--paper-dims", action="store_true", help="use the full-size network dimensions")
        p.add_argument("--resume", help="continue from this checkpoint")
        p.add_argument("--log-every", type=int, default=100)
    else:
        p.add_argument("--task", choices=TASKS)
        p.add_argument("--rate", type=float, help="cipher substitution rate")
        p.add_argument("--n-vocab", type=int)
        p.add_argument("--n-train", type=int)
        p.add_argument("--n-dev", type=int)
        p.add_argument("--n-test", type=int)
        p.add_argument("--max-len", type=int)
        p.add_argument("--concentration", type=float, help="Dirichlet parameter of the bigram language")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crossalign", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic task to disk")
    _add_run_flags(p, training=False)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a gen-data directory")
    _add_run_flags(p, training=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("transfer", help="rewrite sentences into the other style")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--direction", choices=sorted(DIRECTIONS), default="2to1")
    p.add_argument("--vocab", help="refuse to run unless this vocabulary matches the checkpoint's")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("eval", help="BLEU of candidates against references, with baselines")
    p.add_argument("--candidates", required=True)
    p.add_argument("--references", required=True)
    p.add_argument("--source", help="untransferred input; adds the copy and unigram-match rows")
    p.add_argument("--data", help="gen-data directory for unigram matching and the classifier")
    p.add_argument("--direction", choices=sorted(DIRECTIONS), default="2to1")
    p.add_argument("--classifier", action="store_true", help="also report style-classifier accuracy")
    p.add_argument("--classifier-steps", type=int, default=300)
    p.add_argument("--seed", type=int)
    p.add_argument("--report", help="also write the report to this file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grad-check", help="finite-difference check of every op and loss")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-seeds", type=int, default=20)
    p.add_argument("--only", nargs="*", choices=sorted(gradcheck.CASES))
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("theory-demo", help="numeric identifiability demonstrations")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_theory_demo)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ContractError, ParameterError, DimensionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
