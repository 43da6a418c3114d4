"""Why a rationale is not yet good attention.

Builds the synthetic review suite and prints one target review three ways:
the human-style rationale mask, that mask normalised into a distribution,
and the constructed oracle attention.  The rationale keeps the aspect
keyword; the oracle puts all its mass on sentiment words.  The soft-margin
cosine distance between the two is the gap the transfer model has to close.

    python demos/01_rationales_vs_attention.py
"""

import numpy as np

from r2a import corpus
from r2a.trainer import attention_distance_report

suite = corpus.make_synthetic_suite(corpus.SyntheticSpec(seed=0))
train = suite.target["train"]
oracle = suite.oracle["train"]

ex, att = train[0], oracle[0]
words = suite.vocab.decode(ex.tokens)
mask = np.asarray(ex.rationale, dtype=float)
print(f"label {ex.label}, {len(ex)} tokens\n")
print(f"{'token':>10} {'rationale':>10} {'normalised':>11} {'oracle':>8}")
for w, r, n, o in zip(words, mask, mask / mask.sum(), att):
    print(f"{w:>10} {int(r):>10} {n:>11.3f} {o:>8.3f}")

uniform = [np.full(len(e), 1.0 / len(e)) for e in train]
rationale = [np.asarray(e.rationale, dtype=float) for e in train]
print("\nmean distance to the oracle over the target train split")
print(f"  uniform attention     {attention_distance_report(uniform, oracle):.4f}")
print(f"  normalised rationale  {attention_distance_report(rationale, oracle):.4f}")
print(f"  oracle itself         {attention_distance_report(oracle, oracle):.4f}")
