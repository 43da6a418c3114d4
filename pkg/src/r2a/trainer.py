"""Target-side training, the oracle classifier, evaluation and reports."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import corpus
from .model import CheckpointError, ModelDims, read_checkpoint, save_checkpoint, task_loss
from .nets import AttentionHead, BiLSTM, Module, Predictor, attend
from .numerics import Adam, Tensor, dropout, no_grad, soft_margin_cosine_distance, take_rows

log = logging.getLogger(__name__)

MODES = ("none", "rationale", "generated", "oracle")
LAMBDA_GRID = (100.0, 10.0, 1.0, 0.1, 0.01)


@dataclass
class TrainSchedule:
    lr: float = 1e-3
    divisor: float = 10.0
    patience: int = 5
    delta: float = 1e-4
    max_epochs: int = 40
    min_lr: float = 1e-5
    batch_size: int = 8

    def __post_init__(self):
        if self.divisor <= 1:
            raise ValueError("plateau divisor must exceed 1")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")


class AttentionClassifier(Module):
    """BiLSTM encoder, one attention head and an MLP predictor."""

    def __init__(self, embeddings, n_out=2, dims=None, seed=0):
        dims = dims or ModelDims()
        self.dims = dims
        self.embeddings = np.asarray(embeddings, dtype=np.float64)
        self.n_out = n_out
        rng = np.random.default_rng(seed)
        self.rng = np.random.default_rng([seed, 99])
        H, D = dims.hidden, self.embeddings.shape[1]
        self.enc = BiLSTM(D, H, rng)
        self.att = AttentionHead(2 * H, dims.attention, rng)
        self.pred = Predictor(2 * H, n_out, rng, dims.predictor_hidden, dims.dropout,
                              drop_rng=self.rng)

    def init_encoder(self, encoder):
        """Copy encoder weights (e.g. the R2A model's shared encoder)."""
        if (encoder.n_in, encoder.hidden) != (self.enc.n_in, self.enc.hidden):
            raise ValueError("encoder widths do not match the classifier")
        self.enc.load_state_dict(encoder.state_dict())

    def forward(self, batch):
        x = take_rows(Tensor(self.embeddings), batch.ids)
        x = dropout(x, self.dims.dropout, self.rng, self.training)
        h = self.enc(x, batch.lengths).h
        alpha = self.att(h, batch.mask)
        return self.pred(attend(h, alpha)), alpha


TargetClassifier = AttentionClassifier


def save_classifier(path, clf, vocab_digest, extra=None):
    arrays = {f"param.{k}": v for k, v in clf.state_dict().items()}
    arrays["embeddings"] = clf.embeddings
    meta = {"kind": "classifier", "vocab_sha256": vocab_digest, "dims": asdict(clf.dims),
            "n_out": clf.n_out, **(extra or {})}
    save_checkpoint(path, arrays, meta)


def load_classifier(path, vocab_digest=None):
    arrays, meta = read_checkpoint(path)
    if meta.get("kind") != "classifier":
        raise CheckpointError(f"{path}: not a classifier checkpoint")
    if vocab_digest is not None and meta["vocab_sha256"] != vocab_digest:
        raise CheckpointError(f"{path}: vocabulary hash mismatch")
    clf = AttentionClassifier(arrays["embeddings"], meta["n_out"], ModelDims(**meta["dims"]))
    clf.load_state_dict({k[len("param."):]: v for k, v in arrays.items()
                         if k.startswith("param.")})
    clf.eval()
    return clf, meta


# ---------------------------------------------------------------------------
# Schedule
# ---------------------------------------------------------------------------

def lr_plateau_step(history, schedule, lr):
    """Divide ``lr`` when the last ``patience`` evaluations did not improve.

    An evaluation improves when it beats the best earlier value by more than
    ``delta``; the first evaluation has nothing to beat.  The result never
    drops below ``schedule.min_lr``.
    """
    if not history:
        raise ValueError("empty dev history")
    stale, best = 0, None
    for v in history:
        if best is not None and v > best + schedule.delta:
            stale = 0
        else:
            stale += 1
        best = v if best is None else max(best, v)
    if stale >= schedule.patience and lr > schedule.min_lr:
        return max(lr / schedule.divisor, schedule.min_lr)
    return lr


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------

def _padded(vectors, lengths):
    out = np.zeros((len(vectors), int(max(lengths))))
    for i, v in enumerate(vectors):
        out[i, :len(v)] = v
    return out


def predict_labels(clf, examples, batch_size=64):
    clf.eval()
    preds = []
    with no_grad():
        for chunk in corpus.iterate_batches(examples, batch_size):
            logits, _ = clf.forward(corpus.make_batch(chunk))
            if clf.n_out == 1:
                preds.append((logits.data.reshape(-1) > 0.5).astype(int))
            else:
                preds.append(np.argmax(logits.data, axis=-1))
    return np.concatenate(preds)


def evaluate_accuracy(clf, examples):
    """Fraction of correct argmax predictions (ties go to the lower class)."""
    if not examples:
        raise ValueError("cannot evaluate on an empty split")
    labels = np.array([ex.label for ex in examples])
    if any(ex.label is None for ex in examples):
        raise ValueError("split is not labeled")
    if clf.n_out == 1:
        labels = (labels > 0.5).astype(int)
    return float(np.mean(predict_labels(clf, examples) == labels))


def evaluate_loss(clf, examples, batch_size=64):
    """Mean label loss over a labeled split (dropout off)."""
    clf.eval()
    total = 0.0
    with no_grad():
        for chunk in corpus.iterate_batches(examples, batch_size):
            batch = corpus.make_batch(chunk)
            logits, _ = clf.forward(batch)
            total += task_loss(logits, batch.labels, clf.n_out).item() * len(chunk)
    return total / len(examples)


def classifier_attention(clf, examples, batch_size=64):
    clf.eval()
    out = []
    with no_grad():
        for chunk in corpus.iterate_batches(examples, batch_size):
            batch = corpus.make_batch(chunk)
            _, alpha = clf.forward(batch)
            out.extend(alpha.data[b, :n].copy() for b, n in enumerate(batch.lengths))
    return out


def fit_classifier(clf, train, schedule, seed, supervision=None, lambda_att=0.0, dev=None):
    """Minimise label loss (+ lambda * attention distance) with plateau decay.

    The learning rate is cut when the dev label loss stops improving; the
    returned model is the epoch with the best dev accuracy (lower dev loss
    breaks ties).  Returns the dev-accuracy history.
    """
    opt = Adam(clf.parameters(), lr=schedule.lr)
    data_rng = np.random.default_rng([seed, 1])
    use_att = supervision is not None and lambda_att > 0
    best_key, best_state = None, None
    history, window = [], []
    for epoch in range(schedule.max_epochs):
        clf.train()
        for idx in corpus.iterate_batches(list(range(len(train))), schedule.batch_size, data_rng):
            batch = corpus.make_batch([train[i] for i in idx])
            logits, alpha = clf.forward(batch)
            loss = task_loss(logits, batch.labels, clf.n_out)
            if use_att:
                target = _padded([supervision[i] for i in idx], batch.lengths)
                loss = loss + lambda_att * soft_margin_cosine_distance(alpha, Tensor(target)).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
        if dev is None:
            continue
        acc, dev_loss = evaluate_accuracy(clf, dev), evaluate_loss(clf, dev)
        history.append(acc)
        if best_key is None or (acc, -dev_loss) > best_key:
            best_key, best_state = (acc, -dev_loss), clf.state_dict()
        window.append(-dev_loss)
        new_lr = lr_plateau_step(window, schedule, opt.lr)
        if new_lr != opt.lr:
            log.debug("epoch %d: lr %g -> %g", epoch, opt.lr, new_lr)
            opt.lr = new_lr
            window = []
        elif opt.lr <= schedule.min_lr and len(window) >= schedule.patience:
            break
    if best_state is not None:
        clf.load_state_dict(best_state)
    clf.eval()
    return history


def supervision_vectors(mode, examples, generated=None, oracle=None):
    """Per-example attention targets for ``mode`` (None for ``none``)."""
    if mode not in MODES:
        raise ValueError(f"unknown supervision mode {mode!r}")
    if mode == "none":
        return None
    if mode == "rationale":
        for i, ex in enumerate(examples):
            if ex.rationale is None:
                raise ValueError(f"example {i} has no rationale")
        return [corpus.normalize_mask(ex.rationale) for ex in examples]
    source = generated if mode == "generated" else oracle
    if source is None or len(source) < len(examples):
        raise ValueError(f"mode {mode!r} needs attention for every train example")
    return [np.asarray(source[i]) for i in range(len(examples))]


def train_target(train, embeddings, mode="generated", lambda_att=1.0, schedule=None,
                 dims=None, seed=0, dev=None, encoder=None, generated=None, oracle=None,
                 n_out=2):
    """Train a target classifier under one supervision mode.

    Modes: ``none`` (label loss only), ``rationale`` (normalised rationale
    masks), ``generated`` (R2A attention) and ``oracle``.  ``encoder``
    initialises the classifier's encoder.  Returns ``(classifier, history)``.
    """
    schedule = schedule or TrainSchedule()
    supervision = supervision_vectors(mode, train, generated, oracle)
    clf = AttentionClassifier(embeddings, n_out, dims, seed)
    if encoder is not None:
        clf.init_encoder(encoder)
    history = fit_classifier(clf, train, schedule, seed, supervision,
                             lambda_att if mode != "none" else 0.0, dev)
    return clf, history


def train_oracle_attention(large, examples, embeddings, schedule=None, dims=None, seed=0,
                           dev=None, n_out=2):
    """Train a plain attention classifier on ``large``; return it and its
    attention on ``examples``."""
    clf, _ = train_target(large, embeddings, "none", 0.0, schedule, dims, seed, dev,
                          n_out=n_out)
    return clf, classifier_attention(clf, examples)


@dataclass
class GridResult:
    best_lambda: float
    best_dev: float
    rows: list
    model: object = None


def grid_tune(candidates, fit):
    """Pick the candidate with the best dev accuracy; ties go to the smaller one.

    ``fit(lambda) -> (model, dev_accuracy)``.
    """
    candidates = list(candidates)
    if not candidates:
        raise ValueError("no candidates")
    rows, best = [], None
    for lam in sorted(candidates):
        model, acc = fit(lam)
        rows.append((lam, acc))
        if best is None or acc > best[1]:
            best = (lam, acc, model)
    return GridResult(best[0], best[1], rows, best[2])


def tune_target(train, embeddings, mode, candidates=LAMBDA_GRID, **kwargs):
    """train_target over a lambda grid, selected by best dev accuracy."""
    dev = kwargs.get("dev")
    if dev is None:
        raise ValueError("grid tuning needs a dev split")

    def fit(lam):
        clf, history = train_target(train, embeddings, mode, lam, **kwargs)
        return clf, max(history)

    if mode == "none":
        candidates = (0.0,)
    return grid_tune(candidates, fit)


def attention_distance_report(attentions, oracle):
    """Mean soft-margin cosine distance; masks are normalised first."""
    if len(attentions) != len(oracle):
        raise ValueError("attention and oracle lists differ in length")
    if not attentions:
        raise ValueError("empty attention list")
    dists = []
    for a, o in zip(attentions, oracle):
        a = corpus.normalize_mask(a)
        o = np.asarray(o, dtype=np.float64)
        if len(a) != len(o):
            raise ValueError("attention and oracle lengths differ")
        dists.append(soft_margin_cosine_distance(Tensor(a), Tensor(o)).item())
    return float(np.mean(dists))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    curve: list = field(default_factory=list)

    def add(self, metric, split, seed, value):
        self.rows.append((metric, split, seed, float(value)))

    def add_curve(self, mode, n, seed, accuracy):
        self.curve.append((mode, int(n), seed, float(accuracy)))

    def summary(self):
        groups = {}
        for metric, split, _, value in self.rows:
            groups.setdefault(f"{metric}/{split}", []).append(value)
        return {k: {"mean": float(np.mean(v)), "std": float(np.std(v)), "n": len(v)}
                for k, v in sorted(groups.items())}

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "split", "seed", "value"])
            for metric, split, seed, value in self.rows:
                w.writerow([metric, split, seed, repr(value)])

    def write_curve_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["mode", "n", "seed", "accuracy"])
            for row in self.curve:
                w.writerow([row[0], row[1], row[2], repr(row[3])])

    def write_json(self, path):
        doc = {"summary": self.summary()}
        if self.curve:
            doc["curve"] = [dict(zip(("mode", "n", "seed", "accuracy"), r)) for r in self.curve]
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def read_csv(cls, path):
        report = cls()
        with open(path, encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                seed = row["seed"]
                report.add(row["metric"], row["split"], int(seed) if seed.isdigit() else seed,
                           float(row["value"]))
        return report
