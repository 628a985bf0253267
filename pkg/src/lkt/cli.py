"""``lkt`` command line: data generation, training, evaluation and explanations.

Every command accepts ``--config FILE``; the file holds ``key = value`` lines
under ``[section]`` headers. Keys in ``[common]`` apply to every command and
keys in a section named after the command (``[train]``, ``[coldstart]`` ...)
apply to that command only. Flags given on the command line win over the
file. Keys that are not options of the command are rejected.

Exit codes: 0 success, 1 invalid input (flags, config, paths, data), 2 a
failure while running.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import numerics as nx
from .dataset import (DataValidationError, SyntheticParams, build_lkt_sequences, generate_synthetic,
                      group_by_student, load_interactions, mask_targets)
from .evaluation import (DktFamily, LktFamily, append_reports, coldstart_fraction_sweep, make_report,
                         seq_length_buckets, target_split, zero_shot_eval)
from .interpret import export_embeddings, lime_explain, mean_attention, write_embeddings_csv
from .models import load_checkpoint, save_checkpoint
from .tokenizer import Vocabulary, build_vocab
from .training import LktTask, MlmTask, TrainConfig, TrainingDiverged, train, write_history

log = logging.getLogger("lkt")

DATA_ENV = "LKT_DATA_DIR"


class UsageError(Exception):
    """Bad flags, config keys, paths or input data: exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- helpers ----------------------------------------------------------------------------

def _data_root() -> Path:
    return Path(os.environ.get(DATA_ENV, "."))


def _input_path(value, what) -> Path:
    """Resolve an input file; relative paths missing from the cwd are tried under $LKT_DATA_DIR."""
    if value is None:
        raise UsageError(f"--{what} is required")
    p = Path(value)
    if not p.exists() and not p.is_absolute() and DATA_ENV in os.environ:
        p = _data_root() / p
    if not p.is_file():
        raise UsageError(f"{what} file not found: {value}")
    return p


def _output_path(value, what) -> Path:
    if value is None:
        raise UsageError(f"--{what} is required")
    p = Path(value)
    parent = p.parent if str(p.parent) else Path(".")
    if not parent.exists():
        raise UsageError(f"directory for {what} does not exist: {parent}")
    if not os.access(parent, os.W_OK):
        raise UsageError(f"directory for {what} is not writable: {parent}")
    return p


def _floats(text):
    try:
        return [float(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text):
    try:
        return [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _load_groups(path):
    return group_by_student(load_interactions(path))


def _load_vocab(value):
    return Vocabulary.load(_input_path(value, "vocab"))


def _load_model(value, kind=None):
    model = load_checkpoint(_input_path(value, "checkpoint"))
    if kind is not None and model.kind != kind:
        raise UsageError(f"{value}: expected a {kind} checkpoint, found {model.kind}")
    return model


def _qindex_path(ckpt) -> Path:
    return Path(str(ckpt) + ".questions")


def _save_question_index(ckpt, qindex):
    ordered = sorted(qindex, key=qindex.get)
    _qindex_path(ckpt).write_text("".join(q + "\n" for q in ordered), encoding="utf-8")


def _load_question_index(ckpt):
    p = _qindex_path(ckpt)
    if not p.is_file():
        raise UsageError(f"question index not found next to the DKT checkpoint: {p}")
    return {q: i for i, q in enumerate(p.read_text(encoding="utf-8").splitlines())}


def _train_config(args) -> TrainConfig:
    return TrainConfig(max_epochs=args.epochs, patience=args.patience, batch_size=args.batch_size,
                       micro_batch_size=args.micro_batch_size or args.batch_size, peak_lr=args.lr,
                       warmup_steps=args.warmup, seed=args.seed, precision=args.precision)


def _lkt_family(args, vocab) -> LktFamily:
    return LktFamily(vocab, d_model=args.d_model, num_layers=args.layers, num_heads=args.heads,
                     d_ff=args.d_ff, max_len=args.max_len, dropout_p=args.dropout,
                     attention_bias=args.attention_bias)


def _as_response_model(model):
    if model.config.head_type != "response":
        model.config.head_type = "response"
    return model


def _split(args, groups):
    return target_split(list(groups), args.seed, args.test_fraction, args.val_fraction)


def _emit(reports, args):
    if args.reports:
        append_reports(reports, _output_path(args.reports, "reports"))
    for r in reports:
        print(r.summary())


# -- commands ---------------------------------------------------------------------------

def cmd_gen_data(args):
    out = Path(args.out) if args.out else _data_root()
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}")
    if not os.access(out, os.W_OK):
        raise UsageError(f"output directory is not writable: {out}")
    params = SyntheticParams(min_interactions=args.min_interactions, max_interactions=args.max_interactions,
                             ability_correlation=args.ability_correlation, domain=args.domain)
    data = generate_synthetic(args.students, args.questions, args.concepts, args.seed, params)
    manifest = data.save(out)
    print(f"gen-data students={args.students} rows={len(data.records)} "
          f"bayes_auc={manifest['bayes_auc']:.4f} out={out}")


def cmd_build_vocab(args):
    paths = [_input_path(p, "data") for p in args.data]
    out = _output_path(args.out, "out")
    corpus = []
    for p in paths:
        for r in load_interactions(p):
            corpus.append(r.concept_text)
            corpus.append(r.question_text)
    vocab = build_vocab(corpus, args.min_freq, args.max_size)
    vocab.save(out)
    print(f"build-vocab size={len(vocab)} out={out}")


def cmd_pretrain(args):
    vocab = _load_vocab(args.vocab)
    groups = _load_groups(_input_path(args.data, "data"))
    out = _output_path(args.out, "out")
    students = list(groups)
    order = np.random.default_rng(args.seed).permutation(len(students))
    n_val = max(1, int(round(args.val_fraction * len(students))))
    if n_val >= len(students):
        raise UsageError("not enough students for a validation split")
    val = [students[i] for i in order[:n_val]]
    tr = [students[i] for i in order[n_val:]]
    fam = _lkt_family(args, vocab)
    ids = lambda ss: [s.token_ids for s in build_lkt_sequences({k: groups[k] for k in ss}, vocab, args.max_len)]
    with nx.precision(args.precision):
        model = fam.new_model(args.seed)
        model.config.head_type = "mlm"
        result = train(model, ids(tr), ids(val), _train_config(args), MlmTask(len(vocab)))
    save_checkpoint(result.model, out)
    write_history(result.history, args.history or str(out) + ".history.jsonl")
    print(f"pretrain epochs={len(result.history)} best_epoch={result.best_epoch} "
          f"val_loss={result.best_val_loss:.4f} out={out}")


def _lkt_scores(model, fam, groups, students, protocol):
    examples = fam.examples(groups, students)
    if protocol == "sampled":
        return fam.task.sampled_predict(model, examples)
    return fam.predict(model, examples)


def cmd_train(args):
    groups = _load_groups(_input_path(args.data, "data"))
    out = _output_path(args.out, "out")
    split = _split(args, groups)
    config = _train_config(args)
    with nx.precision(args.precision):
        if args.model == "lkt":
            vocab = _load_vocab(args.vocab)
            fam = _lkt_family(args, vocab)
            fam.task = LktTask(val_protocol=args.val_protocol)
            init = _as_response_model(_load_model(args.init, "lkt")) if args.init else None
            if init is not None:
                fam.max_len = init.config.max_len
            model = init.copy() if init is not None else fam.new_model(args.seed)
            tr, va = fam.examples(groups, split.pool), fam.examples(groups, split.val)
        else:
            if args.init:
                raise UsageError("--init is only supported for lkt models")
            fam = DktFamily(args.hidden).fit(groups, split.pool)
            model = fam.new_model(args.seed)
            tr, va = fam.examples(groups, split.pool), fam.examples(groups, split.val)
        result = train(model, tr, va, config, fam.task)
        save_checkpoint(result.model, out)
        if args.model == "dkt":
            _save_question_index(out, fam.question_index)
        # score what was written to disk so that `eval` reproduces this number
        saved = load_checkpoint(out)
        if args.model == "lkt":
            s, y = _lkt_scores(saved, fam, groups, split.val, args.val_protocol)
        else:
            s, y = fam.predict(saved, fam.examples(groups, split.val))
    write_history(result.history, args.history or str(out) + ".history.jsonl")
    report = make_report(s, y, "val", args.model, args.seed, best_epoch=result.best_epoch,
                         epochs=len(result.history), checkpoint=str(out))
    _emit([report], args)


def cmd_eval(args):
    groups = _load_groups(_input_path(args.data, "data"))
    model = _load_model(args.checkpoint)
    split = _split(args, groups)
    students = {"val": split.val, "test": split.test, "all": list(groups)}[args.split]
    with nx.precision(args.precision):
        model = model.astype(nx.default_dtype())
        if model.kind == "lkt":
            fam = _lkt_family(args, _load_vocab(args.vocab))
            fam.max_len = model.config.max_len
            s, y = _lkt_scores(_as_response_model(model), fam, groups, students,
                               args.val_protocol if args.split == "val" else "each")
        else:
            fam = DktFamily(model.config.hidden, _load_question_index(args.checkpoint))
            s, y = fam.predict(model, fam.examples(groups, students))
    _emit([make_report(s, y, args.split, model.kind, args.seed, checkpoint=str(args.checkpoint))], args)


def cmd_coldstart(args):
    vocab = _load_vocab(args.vocab)
    groups = _load_groups(_input_path(args.data, "data"))
    pretrained = _as_response_model(_load_model(args.pretrained, "lkt"))
    if any(not 0.0 < f <= 1.0 for f in args.fractions):
        raise UsageError(f"fractions must lie in (0, 1], got {args.fractions}")
    with nx.precision(args.precision):
        fam = _lkt_family(args, vocab)
        fam.max_len = pretrained.config.max_len
        reports = coldstart_fraction_sweep(pretrained.astype(nx.default_dtype()), groups, args.fractions,
                                           fam, DktFamily(args.hidden), _train_config(args), args.seed,
                                           _split(args, groups))
    _emit(reports, args)


def cmd_seqlen(args):
    groups = _load_groups(_input_path(args.data, "data"))
    model = _load_model(args.checkpoint)
    with nx.precision(args.precision):
        model = model.astype(nx.default_dtype())
        if model.kind == "lkt":
            fam = _lkt_family(args, _load_vocab(args.vocab))
            fam.max_len = model.config.max_len
            model = _as_response_model(model)
        else:
            fam = DktFamily(model.config.hidden, _load_question_index(args.checkpoint))
        reports = seq_length_buckets(model, groups, fam, args.buckets, args.seed)
    _emit(reports, args)


def cmd_zeroshot(args):
    vocab = _load_vocab(args.vocab)
    groups = _load_groups(_input_path(args.data, "data"))
    lkt = _as_response_model(_load_model(args.checkpoint, "lkt"))
    dkt = _load_model(args.dkt_checkpoint, "dkt")
    with nx.precision(args.precision):
        fam = _lkt_family(args, vocab)
        fam.max_len = lkt.config.max_len
        dfam = DktFamily(dkt.config.hidden, _load_question_index(args.dkt_checkpoint))
        reports = zero_shot_eval(lkt.astype(nx.default_dtype()), groups, fam, dkt.astype(nx.default_dtype()),
                                 dfam, seed=args.seed)
    _emit(list(reports), args)


def _target_example(args, model, vocab, groups):
    if args.student not in groups:
        raise UsageError(f"student {args.student!r} not found in the data")
    seq = build_lkt_sequences({args.student: groups[args.student]}, vocab, model.config.max_len)[-1]
    t = seq.interaction_count - 1 if args.target is None else args.target
    if not 0 <= t < seq.interaction_count:
        raise UsageError(f"target interaction {t} outside 0..{seq.interaction_count - 1}")
    return mask_targets(seq, [t])


def cmd_explain(args):
    vocab = _load_vocab(args.vocab)
    groups = _load_groups(_input_path(args.data, "data"))
    model = _as_response_model(_load_model(args.checkpoint, "lkt"))
    ex = _target_example(args, model, vocab, groups)
    lines = []
    if args.method in ("attention", "both"):
        summary = mean_attention(model, ex.token_ids, args.layer, args.head, vocab)
        lines.append(summary.to_json())
        top = np.argsort(-summary.scores, kind="stable")[:5]
        print("attention top: " + " ".join(f"{summary.tokens[i]}={summary.scores[i]:.3f}" for i in top))
    if args.method in ("lime", "both"):
        expl = lime_explain(model, ex.token_ids, int(ex.mask_positions[0]), args.samples, seed=args.seed,
                            vocab=vocab)
        lines.append(expl.to_json())
        print("lime top: " + " ".join(f"{t}={w:+.3f}" for t, w in expl.ranked()[:5])
              + f" r2={expl.r2:.3f}")
    if args.out:
        with open(_output_path(args.out, "out"), "a", encoding="utf-8") as fh:
            for line in lines:
                fh.write(line + "\n")


def cmd_export_embeddings(args):
    vocab = _load_vocab(args.vocab)
    groups = _load_groups(_input_path(args.data, "data"))
    model = _as_response_model(_load_model(args.checkpoint, "lkt"))
    out = _output_path(args.out, "out")
    seqs = build_lkt_sequences(groups, vocab, model.config.max_len)
    examples = [mask_targets(s, [s.interaction_count - 1]) for s in seqs]
    rows = export_embeddings(model, examples, args.position)
    write_embeddings_csv(rows, out)
    print(f"export-embeddings rows={len(rows)} dim={model.config.d_model} out={out}")


# -- parser -----------------------------------------------------------------------------

def _common(p):
    p.add_argument("--config", help="key = value config file with [section] headers")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--precision", choices=("float32", "float64"), default="float32")
    p.add_argument("--reports", default="reports.jsonl", help="JSON-lines file that reports are appended to")
    p.add_argument("-v", "--verbose", action="store_true")


def _model_flags(p):
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--d-ff", type=int, default=256)
    p.add_argument("--max-len", type=int, default=512)
    p.add_argument("--dropout", type=float, default=0.2)
    p.add_argument("--attention-bias", choices=("alibi", "none"), default="alibi")
    p.add_argument("--hidden", type=int, default=64, help="DKT LSTM width")


def _train_flags(p):
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--micro-batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--warmup", type=int, default=50)
    p.add_argument("--history", help="JSON-lines training history (default: <out>.history.jsonl)")


def _split_flags(p):
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--val-protocol", choices=("sampled", "each"), default="sampled",
                   help="LKT validation scoring: fixed masked copies, or every interaction")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lkt", description="Language-model knowledge tracing experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="simulate students answering templated questions")
    _common(p)
    p.add_argument("--out", help=f"output directory (default: ${DATA_ENV} or .)")
    p.add_argument("--students", type=int, default=500)
    p.add_argument("--questions", type=int, default=50)
    p.add_argument("--concepts", type=int, default=10)
    p.add_argument("--domain", choices=("alpha", "beta"), default="alpha")
    p.add_argument("--min-interactions", type=int, default=40)
    p.add_argument("--max-interactions", type=int, default=60)
    p.add_argument("--ability-correlation", type=float, default=0.5)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("build-vocab", help="word vocabulary from one or more interaction CSVs")
    _common(p)
    p.add_argument("--data", nargs="+", default=["interactions.csv"])
    p.add_argument("--out", required=True)
    p.add_argument("--min-freq", type=int, default=1)
    p.add_argument("--max-size", type=int, default=30000)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("pretrain", help="masked-token pretraining of the encoder")
    _common(p)
    _model_flags(p)
    _train_flags(p)
    p.add_argument("--data", default="interactions.csv")
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="train an LKT or DKT model")
    _common(p)
    _model_flags(p)
    _train_flags(p)
    _split_flags(p)
    p.add_argument("--model", choices=("lkt", "dkt"), required=True)
    p.add_argument("--data", default="interactions.csv")
    p.add_argument("--vocab")
    p.add_argument("--init", help="LKT checkpoint to start from (pretrained or trained)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on the validation, test or full split")
    _common(p)
    _model_flags(p)
    _split_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default="interactions.csv")
    p.add_argument("--vocab")
    p.add_argument("--split", choices=("val", "test", "all"), default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("coldstart", help="fine-tune on growing fractions of a target domain")
    _common(p)
    _model_flags(p)
    _train_flags(p)
    _split_flags(p)
    p.add_argument("--pretrained", required=True)
    p.add_argument("--data", default="interactions.csv")
    p.add_argument("--vocab", required=True)
    p.add_argument("--fractions", type=_floats, default=[0.01, 0.05, 0.1, 0.5, 1.0])
    p.set_defaults(func=cmd_coldstart)

    p = sub.add_parser("seqlen", help="accuracy of the L-th prediction for several history lengths")
    _common(p)
    _model_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default="interactions.csv")
    p.add_argument("--vocab")
    p.add_argument("--buckets", type=_ints, default=[5, 10, 20, 50, 100])
    p.set_defaults(func=cmd_seqlen)

    p = sub.add_parser("zeroshot", help="score a new domain without any training")
    _common(p)
    _model_flags(p)
    p.add_argument("--checkpoint", required=True, help="LKT checkpoint")
    p.add_argument("--dkt-checkpoint", required=True)
    p.add_argument("--data", default="interactions.csv")
    p.add_argument("--vocab", required=True)
    p.set_defaults(func=cmd_zeroshot)

    p = sub.add_parser("explain", help="mean attention and LIME weights for one prediction")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default="interactions.csv")
    p.add_argument("--vocab", required=True)
    p.add_argument("--student", required=True)
    p.add_argument("--target", type=int, default=None, help="interaction index in the last window")
    p.add_argument("--method", choices=("attention", "lime", "both"), default="both")
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--head", type=int, default=0)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--out", help="JSON-lines file the explanations are appended to")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("export-embeddings", help="hidden states per student as CSV")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default="interactions.csv")
    p.add_argument("--vocab", required=True)
    p.add_argument("--position", choices=("mask", "cls"), default="mask")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_embeddings)
    return parser


def _apply_config(parser, argv):
    """Feed config-file values in as subcommand defaults, so flags still override them."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    path = Path(known.config)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise UsageError(f"{path}: {exc}")
    command = next((a for a in argv if not a.startswith("-")), None)
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    sub = subparsers.choices.get(command)
    if sub is None:
        return
    for section in cp.sections():
        if section not in ("common", *subparsers.choices):
            raise UsageError(f"{path}: unknown section [{section}]")
    actions = {a.dest: a for a in sub._actions}
    values = {}
    for section in ("common", command):
        if not cp.has_section(section):
            continue
        for key, raw in cp.items(section):
            dest = key.replace("-", "_")
            if dest not in actions or dest in ("config", "help", "func"):
                raise UsageError(f"{path}: unknown key {key!r} for command {command}")
            action = actions[dest]
            if isinstance(action, argparse._StoreTrueAction):
                values[dest] = raw.strip().lower() in ("1", "true", "yes", "on")
                continue
            if action.nargs in ("+", "*"):
                value = raw.split()
            else:
                value = raw.strip()
            if action.choices is not None and value not in action.choices:
                raise UsageError(f"{path}: {key} must be one of {sorted(action.choices)}, got {value!r}")
            if action.type is not None and not isinstance(value, list):
                try:
                    value = action.type(value)
                except (argparse.ArgumentTypeError, ValueError) as exc:
                    raise UsageError(f"{path}: bad value for {key}: {exc}")
            values[dest] = value
    sub.set_defaults(**values)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"lkt: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (UsageError, DataValidationError, FileNotFoundError) as exc:
        print(f"lkt: error: {exc}", file=sys.stderr)
        return 1
    except TrainingDiverged as exc:
        print(f"lkt: training diverged: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - the exit code carries the failure class
        log.debug("failure", exc_info=True)
        print(f"lkt: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
