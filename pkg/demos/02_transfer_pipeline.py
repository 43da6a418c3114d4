"""End-to-end transfer on the synthetic suite, in memory.

Two source aspects come with rationales; the third aspect, written in a
different noise vocabulary, is the target with only 50 labeled reviews.
The script:

1. trains a rationalizer per source aspect and swaps the planted rationales
   for machine-extracted ones,
2. trains the joint model on the sources plus unlabeled target reviews,
3. generates attention for the 50 labeled target reviews,
4. trains target classifiers with no attention supervision, with the raw
   rationales, and with the generated attention, tuning the supervision
   weight on the dev split.

    python demos/02_transfer_pipeline.py            # desk scale, a few minutes
    python demos/02_transfer_pipeline.py --quick    # smaller suite, a couple of minutes
"""

import argparse
import logging

from r2a import corpus
from r2a.pipeline import PipelineSettings, rationalize_sources, run_pipeline
from r2a.rationalizer import RationalizerConfig

ap = argparse.ArgumentParser()
ap.add_argument("--seed", type=int, default=0)
ap.add_argument("--quick", action="store_true")
args = ap.parse_args()
logging.basicConfig(level=logging.INFO, format="%(message)s")

if args.quick:
    spec = corpus.SyntheticSpec(seed=args.seed, source_train=600, target_unlabeled=600,
                                target_test=400)
    settings = PipelineSettings.desk(args.seed, r2a_epochs=5, rationalizer=RationalizerConfig(
        hidden=25, epochs=4, seed=args.seed))
else:
    spec = corpus.SyntheticSpec(seed=args.seed)
    settings = PipelineSettings.desk(args.seed)

suite = corpus.make_synthetic_suite(spec)
emb = corpus.synthetic_embeddings(suite.vocab, settings.dims.embedding_dim, args.seed, spec)

sources, f1 = rationalize_sources(suite.sources, emb, settings.rationalizer_weights,
                                  settings.rationalizer)
print("\nmachine rationales, token F1 against the planted ones")
for task, score in f1.items():
    print(f"  {task}: {score:.3f}")

result = run_pipeline(suite, settings, emb, sources=sources)

print("\ndistance to oracle attention on the labeled target reviews")
print(f"  normalised rationale  {result.distances['rationale']:.4f}")
print(f"  generated attention   {result.distances['generated']:.4f}")

names = {"none": "no supervision", "rationale": "raw rationales", "generated": "generated attention"}
print(f"\ntarget test accuracy with {settings.n_labeled} labeled reviews")
for mode, acc in result.accuracy.items():
    print(f"  {names[mode]:<20} {acc:.3f}   (lambda {result.lambdas[mode]:g})")
print(f"\n{result.seconds:.0f}s after rationalization")
