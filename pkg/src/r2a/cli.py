"""Command-line interface: one subcommand per pipeline stage.

Every command reads the same flat config file (``--config``) plus
``--set key=value`` overrides.  Outputs are written to temporary names and
moved into place only when the command succeeds.

Exit status: 0 success, 1 invalid input or config, 2 failure while running.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import corpus
from .config import ConfigError, RunConfig
from .model import CheckpointError, invariant_summaries, load_model, r2a_train, save_model
from .pipeline import generate_attention
from .rationalizer import extract_rationales, token_f1, train_rationalizer
from .trainer import (
    EvalReport,
    attention_distance_report,
    classifier_attention,
    evaluate_accuracy,
    load_classifier,
    save_classifier,
    train_oracle_attention,
    train_target,
    tune_target,
)

log = logging.getLogger("r2a")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


# ---------------------------------------------------------------------------
# Output transactions
# ---------------------------------------------------------------------------

class Outputs:
    """Collects files written under temporary names; commits them together."""

    def __init__(self):
        self._pending = []

    def path(self, final):
        final = Path(final)
        final.parent.mkdir(parents=True, exist_ok=True)
        tmp = final.with_name(f".{final.name}.partial")
        self._pending.append((tmp, final))
        return tmp

    def commit(self):
        for tmp, final in self._pending:
            os.replace(tmp, final)
        self._pending = []

    def discard(self):
        for tmp, _ in self._pending:
            with contextlib.suppress(FileNotFoundError):
                tmp.unlink()
        self._pending = []


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Loading helpers
# ---------------------------------------------------------------------------

class Workspace:
    """Vocabulary, embeddings and tasks of one data directory."""

    def __init__(self, cfg, data_dir):
        self.cfg = cfg
        self.data_dir = Path(data_dir)
        cfg.require_paths(self.data_dir)
        vocab_path = Path(cfg.paths.vocab) if cfg.paths.vocab else self.data_dir / "vocab.txt"
        self.grow = not vocab_path.exists()
        self.vocab = corpus.Vocab() if self.grow else corpus.Vocab.load(vocab_path)
        self._tasks = {}
        self._embeddings = None

    def task(self, name):
        if name not in self._tasks:
            self._tasks[name] = corpus.load_task(self.data_dir, name, self.vocab,
                                                 self.cfg.data.kind, grow=self.grow)
        return self._tasks[name]

    def sources(self):
        return {t: self.task(t) for t in self.cfg.data.source_tasks}

    def target(self):
        return self.task(self.cfg.data.target_task)

    def target_train(self):
        train = self.target()["train"]
        n = self.cfg.data.target_train_size
        if n > len(train):
            raise ConfigError(f"data.target_train_size={n} exceeds the {len(train)} "
                              "target train examples")
        return train[:n]

    def embeddings(self):
        if self._embeddings is None:
            # load every task first so a growing vocabulary is complete
            self.sources(), self.target()
            path = self.cfg.paths.embeddings or self.data_dir / "embeddings.txt"
            if Path(path).exists():
                self._embeddings = corpus.load_embeddings(path, self.vocab, self.cfg.seed)
            elif self.cfg.paths.embeddings:
                raise ConfigError(f"required path does not exist: {path}")
            else:
                self._embeddings = corpus.random_embeddings(
                    len(self.vocab), self.cfg.model.embedding_dim, self.cfg.seed)
        return self._embeddings

    def oracle(self, split="train"):
        path = self.data_dir / f"{self.cfg.data.target_task}.{split}.oracle.jsonl"
        return corpus.read_attention(path) if path.exists() else None


def _out_dir(cfg):
    return Path(cfg.paths.output_dir)


def _load_r2a(ws, path):
    ws.cfg.require_paths(path)
    ws.embeddings()
    model, meta = load_model(path, ws.vocab.digest())
    return model, meta


def _attention_file(ws, path, n):
    ws.cfg.require_paths(path)
    rows = corpus.read_attention(path)
    if len(rows) < n:
        raise ConfigError(f"{path} has {len(rows)} rows, need {n}")
    return rows[:n]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(cfg, args, out):
    spec = cfg.synthetic
    try:
        suite = corpus.make_synthetic_suite(spec)
    except ValueError as err:
        raise ConfigError(str(err)) from err
    target_dir = Path(args.out or cfg.paths.data_dir)
    # write into a scratch directory, then move each file into place
    scratch = target_dir.parent / f".{target_dir.name}.partial"
    scratch.mkdir(parents=True, exist_ok=True)
    written = corpus.write_suite(suite, scratch)
    emb = corpus.synthetic_embeddings(suite.vocab, cfg.model.embedding_dim, spec.seed, spec)
    corpus.write_embeddings(scratch / "embeddings.txt", emb, suite.vocab)
    written.append(scratch / "embeddings.txt")
    for p in written:
        os.replace(p, out.path(target_dir / p.name))
    scratch.rmdir()
    log.info("wrote %d files to %s", len(written), target_dir)


def cmd_rationalize(cfg, args, out):
    ws = Workspace(cfg, args.data or cfg.paths.data_dir)
    emb = ws.embeddings()
    out_dir = Path(args.out or _out_dir(cfg) / "rationales")
    summary = {}
    for name, task in ws.sources().items():
        model, trace = train_rationalizer(task, emb, cfg.rationalizer_weights(),
                                          cfg.rationalizer_config())
        marked = extract_rationales(model, task["train"])
        corpus.write_examples(out.path(out_dir / f"{name}.train.jsonl"), marked, ws.vocab)
        row = {"trace": trace, "selected": float(np.mean([np.mean(e.rationale) for e in marked]))}
        if all(e.rationale is not None for e in task["train"]):
            row["token_f1"] = token_f1(marked, task["train"])
        summary[name] = row
    _write_json(out.path(out_dir / "rationalize.json"), summary)


def _machine_sources(ws, rationale_dir):
    ws.cfg.require_paths(rationale_dir)
    out = {}
    for name, task in ws.sources().items():
        path = Path(rationale_dir) / f"{name}.train.jsonl"
        ws.cfg.require_paths(path)
        marked = corpus.load_examples(path, ws.vocab, grow=ws.grow)
        out[name] = corpus.TaskDataset(task.task_id, task.kind, {**task.splits, "train": marked})
    return out


def cmd_train_r2a(cfg, args, out):
    ws = Workspace(cfg, args.data or cfg.paths.data_dir)
    emb = ws.embeddings()
    sources = _machine_sources(ws, args.rationales or _out_dir(cfg) / "rationales")
    model, trace = r2a_train(sources, ws.target()["unlabeled"], emb, cfg.loss, cfg.r2a_config())
    path = Path(args.out or _out_dir(cfg) / "r2a.ckpt")
    save_model(out.path(path), model, ws.vocab.digest(), cfg.seed, cfg.loss, cfg.r2a_config())
    _write_json(out.path(path.with_suffix(".trace.json")), trace)


def cmd_gen_attention(cfg, args, out):
    ws = Workspace(cfg, args.data or cfg.paths.data_dir)
    model, _ = _load_r2a(ws, args.checkpoint or _out_dir(cfg) / "r2a.ckpt")
    rows = generate_attention(model, ws.target_train())
    corpus.write_attention(out.path(args.out or _out_dir(cfg) / "generated.jsonl"), rows)


def _supervision(ws, mode, attention_path):
    n = ws.cfg.data.target_train_size
    if mode == "generated":
        return {"generated": _attention_file(
            ws, attention_path or _out_dir(ws.cfg) / "generated.jsonl", n)}
    if mode == "oracle":
        path = attention_path or _out_dir(ws.cfg) / "oracle.jsonl"
        return {"oracle": _attention_file(ws, path, n)}
    return {}


def cmd_train_target(cfg, args, out):
    ws = Workspace(cfg, args.data or cfg.paths.data_dir)
    mode = args.mode or cfg.target.supervision
    if mode not in ("none", "rationale", "generated", "oracle"):
        raise ConfigError(f"unknown supervision mode {mode!r}")
    r2a, _ = _load_r2a(ws, args.checkpoint or _out_dir(cfg) / "r2a.ckpt")
    train, target = ws.target_train(), ws.target()
    kwargs = dict(schedule=cfg.train_schedule(), dims=cfg.dims(), seed=cfg.seed,
                  dev=target.splits.get("dev"), encoder=r2a.enc, n_out=target.n_outputs,
                  **_supervision(ws, mode, args.attention))
    if cfg.target.tune and mode != "none":
        if kwargs["dev"] is None:
            raise ConfigError("lambda tuning needs a target dev split")
        grid = tune_target(train, ws.embeddings(), mode, cfg.target.lambda_grid, **kwargs)
        clf, lam, rows = grid.model, grid.best_lambda, grid.rows
    else:
        lam = cfg.target.lambda_att if mode != "none" else 0.0
        clf, history = train_target(train, ws.embeddings(), mode, lam, **kwargs)
        rows = [(lam, max(history) if history else None)]
    path = Path(args.out or _out_dir(cfg) / f"target-{mode}.ckpt")
    save_classifier(out.path(path), clf, ws.vocab.digest(),
                    {"mode": mode, "lambda_att": lam, "seed": cfg.seed})
    _write_json(out.path(path.with_suffix(".json")),
                {"mode": mode, "lambda_att": lam, "grid": [list(r) for r in rows]})


def cmd_train_oracle(cfg, args, out):
    ws = Workspace(cfg, args.data or cfg.paths.data_dir)
    target = ws.target()
    if "large" not in target.splits:
        raise ConfigError("train-oracle needs a target 'large' split")
    clf, rows = train_oracle_attention(target["large"], ws.target_train(), ws.embeddings(),
                                       cfg.train_schedule(), cfg.dims(), cfg.seed,
                                       target.splits.get("dev"), target.n_outputs)
    path = Path(args.out or _out_dir(cfg) / "oracle.jsonl")
    corpus.write_attention(out.path(path), rows)
    save_classifier(out.path(path.with_suffix(".ckpt")), clf, ws.vocab.digest(),
                    {"mode": "oracle-classifier", "seed": cfg.seed})


def cmd_eval(cfg, args, out):
    ws = Workspace(cfg, args.data or cfg.paths.data_dir)
    ws.embeddings()
    report = EvalReport()
    target = ws.target()
    split = args.split
    if split not in target.splits:
        raise ConfigError(f"target has no {split!r} split")
    for path in args.classifier or []:
        cfg.require_paths(path)
        clf, meta = load_classifier(path, ws.vocab.digest())
        name = meta.get("mode", Path(path).stem)
        report.add(f"accuracy:{name}", split, cfg.seed, evaluate_accuracy(clf, target[split]))
        if args.attention_of_classifiers:
            rows = classifier_attention(clf, ws.target_train())
            oracle = _oracle_for(ws, args.oracle)
            if oracle is not None:
                report.add(f"distance:{name}", "train", cfg.seed,
                           attention_distance_report(rows, oracle))
    oracle = _oracle_for(ws, args.oracle)
    train = ws.target_train()
    if oracle is not None:
        rat = [np.asarray(ex.rationale, dtype=float) for ex in train]
        report.add("distance:rationale", "train", cfg.seed, attention_distance_report(rat, oracle))
        for item in args.attention or []:
            name, _, path = item.rpartition("=")
            rows = _attention_file(ws, path, len(train))
            report.add(f"distance:{name or Path(path).stem}", "train", cfg.seed,
                       attention_distance_report(rows, oracle))
    elif args.attention:
        raise ConfigError("distances need oracle attention (--oracle)")
    path = Path(args.out or _out_dir(cfg) / "report.csv")
    report.write_csv(out.path(path))
    report.write_json(out.path(path.with_suffix(".json")))


def _oracle_for(ws, path):
    n = ws.cfg.data.target_train_size
    if path:
        return _attention_file(ws, path, n)
    rows = ws.oracle("train")
    return None if rows is None else rows[:n]


def cmd_export_reprs(cfg, args, out):
    ws = Workspace(cfg, args.data or cfg.paths.data_dir)
    model, _ = _load_r2a(ws, args.checkpoint or _out_dir(cfg) / "r2a.ckpt")
    task = ws.task(args.task or cfg.data.target_task)
    if args.split not in task.splits:
        raise ConfigError(f"task {task.task_id!r} has no {args.split!r} split")
    examples = task[args.split]
    reps = invariant_summaries(model, examples)
    path = Path(args.out or _out_dir(cfg) / f"reprs-{task.task_id}-{args.split}.csv")
    with open(out.path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "task", "label"] + [f"z{i}" for i in range(reps.shape[1])])
        for i, (ex, row) in enumerate(zip(examples, reps)):
            w.writerow([i, task.task_id, "" if ex.label is None else ex.label]
                       + [repr(float(v)) for v in row])


def cmd_learning_curve(cfg, args, out):
    ws = Workspace(cfg, args.data or cfg.paths.data_dir)
    r2a, _ = _load_r2a(ws, args.checkpoint or _out_dir(cfg) / "r2a.ckpt")
    target = ws.target()
    if "dev" not in target.splits or "test" not in target.splits:
        raise ConfigError("learning-curve needs target dev and test splits")
    report = EvalReport()
    for n in cfg.curve.sizes:
        if n > len(target["train"]):
            raise ConfigError(f"curve size {n} exceeds the target train split")
        train = target["train"][:n]
        generated = generate_attention(r2a, train) if "generated" in cfg.curve.modes else None
        for mode in cfg.curve.modes:
            if mode not in ("none", "rationale", "generated"):
                raise ConfigError(f"unsupported curve mode {mode!r}")
            grid = tune_target(train, ws.embeddings(), mode, cfg.target.lambda_grid,
                               schedule=cfg.train_schedule(), dims=cfg.dims(), seed=cfg.seed,
                               dev=target["dev"], encoder=r2a.enc, generated=generated,
                               n_out=target.n_outputs)
            report.add_curve(mode, n, cfg.seed, evaluate_accuracy(grid.model, target["test"]))
    report.write_curve_csv(out.path(Path(args.out or _out_dir(cfg) / "curve.csv")))


COMMANDS = {
    "synth": cmd_synth,
    "rationalize": cmd_rationalize,
    "train-r2a": cmd_train_r2a,
    "gen-attention": cmd_gen_attention,
    "train-target": cmd_train_target,
    "train-oracle": cmd_train_oracle,
    "eval": cmd_eval,
    "export-reprs": cmd_export_reprs,
    "learning-curve": cmd_learning_curve,
}

HELP = {
    "synth": "write the synthetic suite, vocabulary and embeddings",
    "rationalize": "train a rationalizer per source task and extract machine rationales",
    "train-r2a": "train the joint rationale-to-attention model",
    "gen-attention": "generate attention for the labeled target examples",
    "train-target": "train the target classifier under one supervision mode",
    "train-oracle": "derive oracle attention from a classifier trained on the large split",
    "eval": "score classifiers and attention files into report.csv/report.json",
    "export-reprs": "dump invariant encoder summaries as CSV",
    "learning-curve": "target accuracy as the labeled set grows",
}


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    common.add_argument("--data", help="data directory (default paths.data_dir)")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="r2a", description="Rationale-to-attention transfer pipeline.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    p = {name: sub.add_parser(name, parents=[common], help=HELP[name])
         for name in COMMANDS}
    p["train-r2a"].add_argument("--rationales", help="directory of machine-rationale files")
    for name in ("gen-attention", "train-target", "export-reprs", "learning-curve"):
        p[name].add_argument("--checkpoint", help="R2A checkpoint")
    p["train-target"].add_argument("--mode", choices=("none", "rationale", "generated", "oracle"))
    p["train-target"].add_argument("--attention", help="attention file for generated/oracle")
    p["eval"].add_argument("--classifier", action="append", help="classifier checkpoint")
    p["eval"].add_argument("--attention", action="append", metavar="[NAME=]PATH",
                           help="attention file to score against the oracle")
    p["eval"].add_argument("--oracle", help="oracle attention file")
    p["eval"].add_argument("--split", default="test")
    p["eval"].add_argument("--attention-of-classifiers", action="store_true",
                           help="also score each classifier's own attention")
    p["export-reprs"].add_argument("--task")
    p["export-reprs"].add_argument("--split", default="train")
    return parser


def load_config(args):
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.config:
        if not Path(args.config).exists():
            raise ConfigError(f"config file not found: {args.config}")
        return RunConfig.load(args.config, overrides)
    return RunConfig.from_text("", overrides)


def main(argv=None):
    out = Outputs()
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(name)s: %(message)s")
        cfg = load_config(args)
        COMMANDS[args.command](cfg, args, out)
        out.commit()
        return EXIT_OK
    except (ConfigError, corpus.DataError, CheckpointError) as err:
        out.discard()
        print(f"r2a: error: {err}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as err:  # noqa: BLE001 - report any failure as a runtime error
        out.discard()
        print(f"r2a: runtime error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME
