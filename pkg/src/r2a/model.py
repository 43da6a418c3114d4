"""Rationale-to-attention model: joint multi-task / invariant / generation training."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import corpus
from .nets import (
    AttentionHead,
    BiLSTM,
    Linear,
    Module,
    Predictor,
    attend,
)
from .numerics import (
    Adam,
    Tensor,
    concat,
    cross_entropy,
    dropout,
    mse,
    no_grad,
    parameter,
    soft_margin_cosine_distance,
    take_rows,
)

log = logging.getLogger(__name__)


@dataclass
class LossWeights:
    """Weights of the auxiliary objectives (all non-negative)."""

    att: float = 0.01
    lm: float = 0.1
    wd: float = 0.01
    att_target: float = 1.0
    cons: float = 0.01

    def validate(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be non-negative, got {v}")
        return self


@dataclass
class ModelDims:
    embedding_dim: int = 300
    hidden: int = 200
    r2a_hidden: int = 50
    attention: int = 50
    predictor_hidden: int = 50
    critic_hidden: int = 100
    bins: int = 100
    dropout: float = 0.1


@dataclass
class R2AConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    critic_lr: float = 1e-3
    critic_iters: int = 5
    penalty: float = 10.0
    mode: str = "domain-transfer"
    seed: int = 0
    dims: ModelDims = field(default_factory=ModelDims)

    def __post_init__(self):
        if self.mode not in ("domain-transfer", "aspect-transfer"):
            raise ValueError(f"unknown transfer mode {self.mode!r}")


def task_loss(logits, labels, n_out):
    if n_out == 1:
        return mse(logits.reshape(-1), np.asarray(labels, dtype=np.float64))
    return cross_entropy(logits, labels)


# ---------------------------------------------------------------------------
# Critic
# ---------------------------------------------------------------------------

class Critic(Module):
    """One-hidden-layer ReLU MLP with scalar output."""

    def __init__(self, n_in, hidden, rng):
        self.l1 = Linear(n_in, hidden, rng)
        self.l2 = Linear(hidden, 1, rng)

    def __call__(self, x):
        return self.l2(self.l1(x).relu()).reshape(-1)

    def input_gradient(self, x):
        """d f / d x per row, differentiable in the critic's weights.

        The ReLU pattern is piecewise constant in x, so only the weights carry
        gradient through this expression.
        """
        x = x.data if isinstance(x, Tensor) else np.asarray(x)
        active = (x @ self.l1.W.data + self.l1.b.data) > 0
        return (self.l2.W.reshape(1, -1) * active) @ self.l1.W.T


class AffineCritic(Module):
    """f(x) = <w, x> + b."""

    def __init__(self, w, b=0.0):
        self.w = parameter(np.atleast_1d(np.asarray(w, dtype=np.float64)))
        self.b = parameter(np.asarray(b, dtype=np.float64))

    def __call__(self, x):
        return x @ self.w + self.b

    def input_gradient(self, x):
        n = len(x.data if isinstance(x, Tensor) else x)
        return self.w.reshape(1, -1) + Tensor(np.zeros((n, len(self.w.data))))


def gradient_penalty(critic, points):
    """mean (||grad f(x)||_2 - 1)^2 over ``points``."""
    g = critic.input_gradient(points)
    norm = (g * g).sum(axis=-1).sqrt()
    gap = norm - 1.0
    return (gap * gap).mean()


def critic_update(critic, source, target, optimizer, rng, penalty=10.0, iters=5):
    """Ascend the penalised dual objective; return the post-update W1 estimate.

    ``source`` and ``target`` are summary arrays [n, d].  Interpolates are
    drawn uniformly on segments between randomly paired rows.
    """
    source = np.asarray(source.data if isinstance(source, Tensor) else source)
    target = np.asarray(target.data if isinstance(target, Tensor) else target)
    if len(source) == 0 or len(target) == 0:
        raise ValueError("critic_update needs non-empty source and target batches")
    n = max(len(source), len(target))
    for _ in range(iters):
        s = source[rng.integers(0, len(source), n)]
        t = target[rng.integers(0, len(target), n)]
        eps = rng.random((n, 1))
        interp = eps * s + (1.0 - eps) * t
        objective = (critic(Tensor(source)).mean() - critic(Tensor(target)).mean()
                     - penalty * gradient_penalty(critic, interp))
        optimizer.zero_grad()
        (-objective).backward()
        optimizer.step()
    with no_grad():
        return float(critic(Tensor(source)).mean().data - critic(Tensor(target)).mean().data)


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

class R2AModel(Module):
    """Shared encoder, per-task attention classifiers, invariant map, LM heads,
    rationale-to-attention generator and critic.

    Construction order of the shared encoder and per-task heads matches
    :class:`r2a.trainer.AttentionClassifier`, so a single-task model with a
    given seed starts from the same weights as a standalone classifier.
    """

    def __init__(self, embeddings, tasks, dims=None, seed=0):
        dims = dims or ModelDims()
        self.dims = dims
        self.embeddings = np.asarray(embeddings, dtype=np.float64)
        if self.embeddings.shape[1] != dims.embedding_dim:
            dims.embedding_dim = self.embeddings.shape[1]
        self.tasks = dict(sorted(tasks.items()))
        rng = np.random.default_rng(seed)
        self.rng = np.random.default_rng([seed, 99])
        H, D = dims.hidden, dims.embedding_dim
        self.enc = BiLSTM(D, H, rng)
        self.att, self.pred = {}, {}
        for name, n_out in self.tasks.items():
            self.att[name] = AttentionHead(2 * H, dims.attention, rng)
            self.pred[name] = Predictor(2 * H, n_out, rng, dims.predictor_hidden, dims.dropout,
                                        drop_rng=self.rng)
        self.inv = Linear(2 * H, 2 * H, rng)
        self.inv.W.data[...] = np.eye(2 * H)
        self.inv.b.data[...] = 0.0
        self.lm_fwd = Linear(H, dims.bins, rng, zero=True)
        self.lm_bwd = Linear(H, dims.bins, rng, zero=True)
        self.enc_r2a = BiLSTM(2 * H + 2, dims.r2a_hidden, rng)
        self.att_r2a = AttentionHead(2 * dims.r2a_hidden, dims.attention, rng)
        self.critic = Critic(4 * H, dims.critic_hidden, rng)

    # -- parameter groups
    def main_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("critic.")]

    def named_main_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if not n.startswith("critic.")]

    # -- forward pieces
    def embed(self, ids):
        x = take_rows(Tensor(self.embeddings), ids)
        return dropout(x, self.dims.dropout, self.rng, self.training)

    def encode(self, batch):
        return self.enc(self.embed(batch.ids), batch.lengths)

    def classify(self, task, h, mask):
        if task not in self.tasks:
            raise KeyError(f"unknown source task {task!r}")
        alpha = self.att[task](h, mask)
        return self.pred[task](attend(h, alpha)), alpha


def invariant_transform(model, h):
    """Position-wise affine map h_inv_i = W_inv h_i + b_inv."""
    return model.inv(h)


def summarize(h_inv, lengths):
    """[h_inv_1 ; h_inv_L] per sequence."""
    B = h_inv.shape[0]
    first = h_inv[:, 0]
    last = h_inv[np.arange(B), np.asarray(lengths) - 1]
    return concat([first, last], axis=-1)


def augmented_rationale(batch):
    if batch.rationale is None or batch.freq is None:
        raise ValueError("batch needs rationale masks and rationale frequencies")
    return np.stack([batch.rationale, batch.freq], axis=-1)


def attention_generate(model, h_inv, batch):
    """alpha_hat from [h_inv ; r ; freq] through the R2A encoder and head."""
    aug = augmented_rationale(batch)
    if aug.shape[:2] != h_inv.shape[:2]:
        raise ValueError(f"rationale shape {aug.shape[:2]} != representation {h_inv.shape[:2]}")
    u = model.enc_r2a(concat([h_inv, Tensor(aug)], axis=-1), batch.lengths)
    return model.att_r2a(u.h, batch.mask)


def attention_loss(alpha, alpha_hat):
    """Mean soft-margin cosine distance; ``alpha`` is treated as a constant."""
    target = alpha.data if isinstance(alpha, Tensor) else np.asarray(alpha)
    return soft_margin_cosine_distance(Tensor(target), alpha_hat).mean()


def consistency_loss(alpha_hat, rationale):
    r = np.asarray(rationale, dtype=np.float64)
    if np.any(r.sum(axis=-1) == 0):
        raise ValueError("consistency loss needs at least one rationale token per example")
    return soft_margin_cosine_distance(alpha_hat, Tensor(r)).mean()


def multitask_step(model, batches):
    """Label loss over ``[(task, Batch), ...]``; returns (L_lbl, alphas, encodings)."""
    losses, alphas, encoded = [], {}, {}
    for task, batch in batches:
        if task not in model.tasks:
            raise KeyError(f"unknown source task {task!r}")
        out = model.encode(batch)
        logits, alpha = model.classify(task, out.h, batch.mask)
        losses.append(task_loss(logits, batch.labels, model.tasks[task]))
        alphas[task] = alpha
        encoded[task] = out
    total = losses[0]
    for extra in losses[1:]:
        total = total + extra
    if len(losses) > 1:
        total = total * (1.0 / len(losses))
    return total, alphas, encoded


def lm_loss(model, out, batch, bin_map):
    """Bin-prediction LM loss from the shifted forward and backward states."""
    bin_map = np.asarray(bin_map)
    B, L = batch.ids.shape
    H = model.dims.hidden
    zeros = Tensor(np.zeros((B, 1, H)))
    weights = batch.mask.astype(np.float64)

    prev_f = concat([zeros, out.fwd[:, :L - 1]], axis=1)
    loss_f = cross_entropy(model.lm_fwd(prev_f), bin_map[batch.ids], weights)

    rev_ids = np.take_along_axis(batch.ids, out.rev_idx, axis=1)
    prev_b = concat([zeros, out.bwd_rev[:, :L - 1]], axis=1)
    loss_b = cross_entropy(model.lm_bwd(prev_b), bin_map[rev_ids], weights)
    return (loss_f + loss_b) * 0.5


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _cycle(examples, batch_size, rng):
    while True:
        yield from corpus.iterate_batches(examples, batch_size, rng)


def r2a_train(sources, target_unlabeled, embeddings, weights=None, config=None,
              bin_map=None, on_epoch=None):
    """Jointly train the R2A model.

    ``sources`` maps task id -> TaskDataset whose train split carries
    (machine) rationales.  Each step draws one batch per source task and one
    unlabeled target batch.  Returns ``(model, trace)`` where ``trace`` holds
    one dict of mean loss components per epoch.
    """
    weights = (weights or LossWeights()).validate()
    config = config or R2AConfig()
    if not sources:
        raise ValueError("r2a_train needs at least one source task")
    aspect = config.mode == "aspect-transfer"
    use_wd = (not aspect) and weights.wd > 0
    use_lm = weights.lm > 0
    use_att = weights.att > 0 or (aspect and weights.cons > 0)
    need_target = use_wd or use_lm

    vocab_size = len(embeddings)
    if bin_map is None:
        bin_map = corpus.assign_bins(vocab_size, config.dims.bins, config.seed)
    tasks = {t: d.n_outputs for t, d in sources.items()}
    model = R2AModel(embeddings, tasks, config.dims, seed=config.seed)
    freqs = {t: corpus.rationale_frequency(d["train"], vocab_size) for t, d in sources.items()}

    opt = Adam(model.main_parameters(), lr=config.lr)
    names = [n for n, _ in model.named_main_parameters()]
    for p, n in zip(opt.params, names):
        p.name = n
    critic_opt = Adam(model.critic.parameters(), lr=config.critic_lr)
    data_rng = np.random.default_rng([config.seed, 1])
    critic_rng = np.random.default_rng([config.seed, 2])

    task_names = sorted(sources)
    streams = {t: _cycle(sources[t]["train"], config.batch_size, data_rng) for t in task_names}
    target_stream = _cycle(target_unlabeled, config.batch_size, data_rng) if need_target else None
    steps = max(-(-len(sources[t]["train"]) // config.batch_size) for t in task_names)

    trace = []
    for epoch in range(config.epochs):
        model.train()
        sums = {}
        for _ in range(steps):
            parts = r2a_step(model, opt, critic_opt, critic_rng, streams, target_stream,
                             freqs, weights, config, bin_map, aspect, use_wd, use_lm, use_att)
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
        row = {"epoch": epoch, **{k: v / steps for k, v in sums.items()}}
        trace.append(row)
        log.info("r2a epoch %d %s", epoch, row)
        if on_epoch is not None:
            on_epoch(row)
    model.eval()
    return model, trace


def r2a_step(model, opt, critic_opt, critic_rng, streams, target_stream, freqs, weights,
             config, bin_map, aspect, use_wd, use_lm, use_att):
    batches = [(t, corpus.make_batch(next(streams[t]), freq=freqs[t])) for t in sorted(streams)]
    l_lbl, alphas, encoded = multitask_step(model, batches)
    total = l_lbl
    parts = {"lbl": l_lbl.item()}

    lm_terms, src_summaries, gen_alpha, gen_target, rats = [], [], [], [], []
    for task, batch in batches:
        out = encoded[task]
        if use_lm:
            lm_terms.append(lm_loss(model, out, batch, bin_map))
        if use_wd or use_att:
            h_inv = invariant_transform(model, out.h)
            if use_wd:
                src_summaries.append(summarize(h_inv, batch.lengths))
            if use_att:
                gen_alpha.append(attention_generate(model, h_inv, batch))
                gen_target.append(alphas[task])
                rats.append(batch.rationale)

    if target_stream is not None:
        tbatch = corpus.make_batch(next(target_stream))
        tout = model.encode(tbatch)
        if use_lm:
            lm_terms.append(lm_loss(model, tout, tbatch, bin_map))
        if use_wd:
            tgt_summary = summarize(invariant_transform(model, tout.h), tbatch.lengths)

    if use_att:
        l_att = concat([soft_margin_cosine_distance(Tensor(a.data), g)
                        for a, g in zip(gen_target, gen_alpha)], axis=0).mean()
        parts["att"] = l_att.item()
        if weights.att > 0:
            total = total + weights.att * l_att
        if aspect and weights.cons > 0:
            l_cons = concat([soft_margin_cosine_distance(g, Tensor(r))
                             for g, r in zip(gen_alpha, rats)], axis=0).mean()
            parts["cons"] = l_cons.item()
            total = total + weights.cons * l_cons
    if use_lm:
        l_lm = lm_terms[0]
        for extra in lm_terms[1:]:
            l_lm = l_lm + extra
        l_lm = l_lm * (1.0 / len(lm_terms))
        parts["lm"] = l_lm.item()
        total = total + weights.lm * l_lm
    if use_wd:
        src_summary = concat(src_summaries, axis=0)
        critic_update(model.critic, src_summary, tgt_summary, critic_opt, critic_rng,
                      config.penalty, config.critic_iters)
        l_wd = model.critic(src_summary).mean() - model.critic(tgt_summary).mean()
        parts["wd"] = l_wd.item()
        total = total + weights.wd * l_wd

    parts["total"] = total.item()
    opt.zero_grad()
    total.backward()
    opt.step()
    model.critic.zero_grad()
    return parts


def r2a_infer(model, examples, freq, batch_size=64):
    """Generated attention for each example from its rationale (dropout off)."""
    for i, ex in enumerate(examples):
        if ex.rationale is None:
            raise ValueError(f"example {i} has no rationale")
    was_training = model.training
    model.eval()
    out = []
    with no_grad():
        for chunk in corpus.iterate_batches(examples, batch_size):
            batch = corpus.make_batch(chunk, freq=freq, require_rationale=True)
            enc = model.encode(batch)
            alpha_hat = attention_generate(model, invariant_transform(model, enc.h), batch)
            for b, n in enumerate(batch.lengths):
                out.append(alpha_hat.data[b, :n].copy())
    model.train(was_training)
    return out


def invariant_summaries(model, examples, batch_size=64):
    """[h_inv_1 ; h_inv_L] per example (for export / visualisation)."""
    model.eval()
    rows = []
    with no_grad():
        for chunk in corpus.iterate_batches(examples, batch_size):
            batch = corpus.make_batch(chunk)
            h_inv = invariant_transform(model, model.encode(batch).h)
            rows.append(summarize(h_inv, batch.lengths).data)
    return np.concatenate(rows, axis=0)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"R2ACKPT1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays, meta):
    """Write named float64 arrays plus a JSON header to one binary file."""
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def read_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", raw[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    header = json.loads(raw[start:start + n])
    body = memoryview(raw)[start + n:]
    arrays = {}
    for e in header["arrays"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return arrays, header["meta"]


def save_model(path, model, vocab_digest, bin_seed, weights, config):
    arrays = {f"param.{k}": v for k, v in model.state_dict().items()}
    arrays["embeddings"] = model.embeddings
    meta = {
        "kind": "r2a",
        "vocab_sha256": vocab_digest,
        "bin_seed": bin_seed,
        "loss_weights": asdict(weights),
        "dims": asdict(model.dims),
        "tasks": model.tasks,
        "mode": config.mode,
        "seed": config.seed,
    }
    save_checkpoint(path, arrays, meta)


def load_model(path, vocab_digest=None):
    arrays, meta = read_checkpoint(path)
    if meta.get("kind") != "r2a":
        raise CheckpointError(f"{path}: not an R2A checkpoint")
    if vocab_digest is not None and meta["vocab_sha256"] != vocab_digest:
        raise CheckpointError(f"{path}: vocabulary hash mismatch")
    model = R2AModel(arrays["embeddings"], meta["tasks"], ModelDims(**meta["dims"]),
                     seed=meta["seed"])
    model.load_state_dict({k[len("param."):]: v for k, v in arrays.items()
                           if k.startswith("param.")})
    model.eval()
    return model, meta
