"""In-memory orchestration of the full transfer pipeline.

The command-line stages write each intermediate to disk; the functions here
run the same stages back to back without touching the filesystem, which is
what the demos and the end-to-end checks use.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import corpus
from .model import LossWeights, ModelDims, R2AConfig, r2a_infer, r2a_train
from .rationalizer import (
    RationalizerConfig,
    RationalizerWeights,
    extract_rationales,
    token_f1,
    train_rationalizer,
)
from .trainer import LAMBDA_GRID, TrainSchedule, attention_distance_report, evaluate_accuracy, tune_target

log = logging.getLogger(__name__)


@dataclass
class PipelineSettings:
    """Everything one end-to-end run needs besides the data."""

    seed: int = 0
    mode: str = "domain-transfer"
    n_labeled: int = 50
    dims: ModelDims = field(default_factory=ModelDims)
    weights: LossWeights = field(default_factory=LossWeights)
    r2a_epochs: int = 8
    r2a_batch_size: int = 32
    rationalizer: RationalizerConfig = field(default_factory=RationalizerConfig)
    rationalizer_weights: RationalizerWeights = field(default_factory=RationalizerWeights)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    lambda_grid: tuple = LAMBDA_GRID
    modes: tuple = ("none", "rationale", "generated")
    use_gold_source_rationales: bool = False

    def r2a_config(self):
        return R2AConfig(epochs=self.r2a_epochs, batch_size=self.r2a_batch_size,
                         mode=self.mode, seed=self.seed, dims=self.dims)

    @classmethod
    def desk(cls, seed=0, **overrides):
        """Reduced widths and epochs that fit a single CPU core.

        Encoders use 25 units per direction instead of 200 and the R2A
        encoder, attention and predictor widths drop from 50 to 25; the
        rationalizer gets 6 epochs and R2A 5 epochs at batch 16.  Everything
        else keeps its default.
        """
        dims = ModelDims(hidden=25, r2a_hidden=25, attention=25, predictor_hidden=25)
        base = dict(seed=seed, dims=dims, r2a_epochs=5, r2a_batch_size=16,
                    rationalizer=RationalizerConfig(hidden=25, epochs=6, seed=seed))
        return cls(**{**base, **overrides})


@dataclass
class PipelineResult:
    seed: int
    rationale_f1: dict
    r2a_trace: list
    generated: list
    distances: dict
    accuracy: dict
    lambdas: dict
    seconds: float
    sources: dict = None


def rationalize_sources(sources, embeddings, weights, config):
    """Replace each source train split's rationales with machine rationales.

    Returns ``(new_sources, f1_by_task)``; F1 is measured against the
    rationales the split carried before.
    """
    out, f1 = {}, {}
    for name in sorted(sources):
        task = sources[name]
        model, _ = train_rationalizer(task, embeddings, weights, config)
        marked = extract_rationales(model, task["train"])
        f1[name] = token_f1(marked, task["train"])
        out[name] = corpus.TaskDataset(task.task_id, task.kind, {**task.splits, "train": marked})
    return out, f1


def generate_attention(model, train):
    freq = corpus.rationale_frequency(train, model.embeddings.shape[0])
    return r2a_infer(model, train, freq)


def run_pipeline(suite, settings, embeddings=None, sources=None):
    """Rationalize, train R2A, generate attention and train the target.

    ``suite`` is a :class:`r2a.corpus.SyntheticSuite` (or anything with the
    same ``vocab``/``sources``/``target``/``oracle`` attributes).  Passing
    ``sources`` (e.g. the output of :func:`rationalize_sources` from an
    earlier run) skips the rationalizer.
    """
    t0 = time.perf_counter()
    s = settings
    if embeddings is None:
        embeddings = corpus.synthetic_embeddings(suite.vocab, s.dims.embedding_dim, s.seed,
                                                suite.spec)
    if sources is not None:
        f1 = {}
    elif s.use_gold_source_rationales:
        sources, f1 = suite.sources, {}
    else:
        rcfg = RationalizerConfig(**{**s.rationalizer.__dict__, "seed": s.seed})
        sources, f1 = rationalize_sources(suite.sources, embeddings, s.rationalizer_weights, rcfg)

    model, trace = r2a_train(sources, suite.target["unlabeled"], embeddings, s.weights,
                             s.r2a_config())
    train = suite.target["train"][:s.n_labeled]
    generated = generate_attention(model, train)

    distances = {}
    if suite.oracle is not None and "train" in suite.oracle:
        oracle = suite.oracle["train"][:s.n_labeled]
        distances["generated"] = attention_distance_report(generated, oracle)
        distances["rationale"] = attention_distance_report(
            [np.asarray(ex.rationale, dtype=float) for ex in train], oracle)

    accuracy, lambdas = {}, {}
    for mode in s.modes:
        grid = tune_target(train, embeddings, mode, s.lambda_grid, schedule=s.schedule,
                           dims=s.dims, seed=s.seed, dev=suite.target["dev"], encoder=model.enc,
                           generated=generated, n_out=suite.target.n_outputs)
        accuracy[mode] = evaluate_accuracy(grid.model, suite.target["test"])
        lambdas[mode] = grid.best_lambda
        log.info("seed %d mode %s lambda %g test %.4f", s.seed, mode, grid.best_lambda,
                 accuracy[mode])
    return PipelineResult(s.seed, f1, trace, generated, distances, accuracy, lambdas,
                          time.perf_counter() - t0, sources)
