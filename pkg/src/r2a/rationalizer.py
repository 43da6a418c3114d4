"""Generator / CNN-classifier rationalizer used to mark source examples."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import corpus
from .model import task_loss
from .nets import BiLSTM, ConvClassifier, Linear, Module
from .numerics import Adam, Tensor, _sigmoid, dropout, no_grad, take_rows

log = logging.getLogger(__name__)


@dataclass
class RationalizerWeights:
    sparsity: float = 0.3
    coherence: float = 0.1

    def validate(self):
        if self.sparsity < 0 or self.coherence < 0:
            raise ValueError("rationalizer weights must be non-negative")
        return self


@dataclass
class RationalizerConfig:
    hidden: int = 200
    tau: float = 1.0
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    dropout: float = 0.1
    seed: int = 0


class Generator(Module):
    """BiLSTM over embeddings with a per-position rationale logit."""

    def __init__(self, n_in, hidden, rng, tau=1.0):
        if tau <= 0:
            raise ValueError("temperature must be positive")
        self.enc = BiLSTM(n_in, hidden, rng)
        self.head = Linear(2 * hidden, 1, rng)
        self.tau = tau

    def logits(self, emb, lengths):
        out = self.enc(emb, lengths)
        B, L = out.h.shape[:2]
        return self.head(out.h).reshape(B, L)


def generator_forward(emb, params, lengths, mode="relaxed", rng=None):
    """Return ``(p, z)`` with ``z`` zeroed past each sequence's length.

    relaxed: z = sigmoid((logit(p) + g) / tau), g ~ Logistic(0, 1)
    hard:    z = [p > 0.5]
    """
    logits = params.logits(emb, lengths)
    B, L = logits.shape
    mask = np.arange(L)[None, :] < np.asarray(lengths)[:, None]
    p = logits.sigmoid()
    if mode == "hard":
        return p, Tensor((p.data > 0.5) & mask)
    if mode != "relaxed":
        raise ValueError(f"unknown sampling mode {mode!r}")
    rng = rng if rng is not None else np.random.default_rng()
    u = np.clip(rng.random((B, L)), 1e-12, 1 - 1e-12)
    noise = np.log(u) - np.log1p(-u)
    z = ((logits + noise) * (1.0 / params.tau)).sigmoid() * mask
    return p, z


def rationalizer_loss(z, logits, labels, weights, lengths, n_out=2):
    """Task loss + sparsity * mean(z) + coherence * mean |z_i - z_{i-1}|.

    Means are per sequence over its real positions (L - 1 transitions for the
    coherence term) and then averaged over the batch.  Returns
    ``(total, parts)``.
    """
    lengths = np.asarray(lengths)
    B, L = z.shape
    mask = np.arange(L)[None, :] < lengths[:, None]
    loss = task_loss(logits, labels, n_out)
    sparsity = ((z * mask).sum(axis=1) / lengths).mean()
    if L > 1:
        tmask = mask[:, 1:]
        jumps = (z[:, 1:] - z[:, :L - 1]).abs() * tmask
        coherence = (jumps.sum(axis=1) / np.maximum(lengths - 1, 1)).mean()
    else:
        coherence = Tensor(0.0)
    total = loss + weights.sparsity * sparsity + weights.coherence * coherence
    return total, {"task": loss.item(), "sparsity": sparsity.item(),
                   "coherence": coherence.item()}


class Rationalizer(Module):
    def __init__(self, embeddings, n_out, config=None):
        config = config or RationalizerConfig()
        self.config = config
        self.embeddings = np.asarray(embeddings, dtype=np.float64)
        self.n_out = n_out
        rng = np.random.default_rng(config.seed)
        self.rng = np.random.default_rng([config.seed, 99])
        D = self.embeddings.shape[1]
        self.generator = Generator(D, config.hidden, rng, config.tau)
        self.classifier = ConvClassifier(D, n_out, rng, drop=config.dropout, drop_rng=self.rng)

    def embed(self, ids, training):
        x = take_rows(Tensor(self.embeddings), ids)
        return dropout(x, self.config.dropout, self.rng, training)

    def forward(self, batch, mode="relaxed"):
        emb = self.embed(batch.ids, self.training)
        p, z = generator_forward(emb, self.generator, batch.lengths, mode, self.rng)
        logits = self.classifier(emb, batch.lengths, z)
        return p, z, logits


def train_rationalizer(task, embeddings, weights=None, config=None):
    """Jointly train generator and CNN on ``task['train']``.

    Returns ``(rationalizer, trace)``; the trace has one row per epoch with
    the training loss terms and the dev task loss when a dev split exists.
    """
    weights = (weights or RationalizerWeights()).validate()
    config = config or RationalizerConfig()
    model = Rationalizer(embeddings, task.n_outputs, config)
    opt = Adam(model.parameters(), lr=config.lr)
    data_rng = np.random.default_rng([config.seed, 1])
    train = [ex for ex in task["train"] if ex.label is not None]
    if not train:
        raise ValueError("rationalizer needs a labeled train split")
    trace = []
    for epoch in range(config.epochs):
        model.train()
        sums, steps = {}, 0
        for chunk in corpus.iterate_batches(train, config.batch_size, data_rng):
            batch = corpus.make_batch(chunk)
            _, z, logits = model.forward(batch, "relaxed")
            total, parts = rationalizer_loss(z, logits, batch.labels, weights, batch.lengths,
                                             model.n_out)
            opt.zero_grad()
            total.backward()
            opt.step()
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
            steps += 1
        row = {"epoch": epoch, **{k: v / steps for k, v in sums.items()}}
        if "dev" in task.splits:
            row["dev_task"] = dev_task_loss(model, task["dev"])
        trace.append(row)
        log.info("rationalizer %s epoch %d %s", task.task_id, epoch, row)
    model.eval()
    return model, trace


def dev_task_loss(model, examples, batch_size=64):
    model.eval()
    total, n = 0.0, 0
    with no_grad():
        for chunk in corpus.iterate_batches(examples, batch_size):
            batch = corpus.make_batch(chunk)
            _, _, logits = model.forward(batch, "hard")
            total += task_loss(logits, batch.labels, model.n_out).item() * len(chunk)
            n += len(chunk)
    model.train()
    return total / n


def extract_rationales(model, examples, batch_size=64):
    """Hard-mode masks written onto copies of ``examples``.

    An example whose probabilities are all below 0.5 gets a one-hot mask at
    its most probable token.
    """
    was_training = model.training
    model.eval()
    out = []
    with no_grad():
        for chunk in corpus.iterate_batches(examples, batch_size):
            batch = corpus.make_batch(chunk)
            logits = model.generator.logits(model.embed(batch.ids, False), batch.lengths).data
            p = _sigmoid(logits)
            for b, ex in enumerate(chunk):
                n = len(ex)
                mask = (p[b, :n] > 0.5).astype(int)
                if not mask.any():
                    # logits, not p: p saturates to 0 for very negative logits
                    mask[int(np.argmax(logits[b, :n]))] = 1
                out.append(ex.with_rationale(mask))
    model.train(was_training)
    return out


def token_f1(predicted, gold):
    """Micro token-level F1 of predicted rationale masks against gold masks."""
    tp = fp = fn = 0
    for pe, ge in zip(predicted, gold):
        p = np.asarray(pe.rationale, dtype=bool)
        g = np.asarray(ge.rationale, dtype=bool)
        tp += int((p & g).sum())
        fp += int((p & ~g).sum())
        fn += int((~p & g).sum())
    if tp == 0:
        return 0.0
    precision, recall = tp / (tp + fp), tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)
