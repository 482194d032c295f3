#!/usr/bin/env python3
"""
Perplexity cost of mapping more layers, and of mapping one block at a time.

The toy large model gets an output head fitted on the bundled corpus so
that its predictions, and hence damage to them, are measurable.
"""

from importlib.resources import files

from iam.analysis import baseline_scorer, iam_scorer, log_perplexity, subblock_scan
from iam.fixtures import FixtureSpec, HeadFit, make_fixture_pair
from iam.mapping import IamConfig
from iam.similarity import SimilarityMetric
from iam.tokenizer import encode

data = files("iam").joinpath("data")
large, small = make_fixture_pair(FixtureSpec(sigma=0.02, head_fit=HeadFit(data.joinpath("corpus.txt").read_bytes())))
text = encode(data.joinpath("heldout.txt").read_bytes())

print(f"large model alone: {log_perplexity(baseline_scorer(large), text):.4f}")
for ratio in (0.25, 0.5, 0.75, 1.0):
    print(f"ratio {ratio:4.2f}:        {log_perplexity(iam_scorer(large, small, IamConfig(ratio=ratio)), text):.4f}")

for name in ("cosine", "pearson", "minkowski1", "minkowski2"):
    cfg = IamConfig(ratio=0.5, metric=SimilarityMetric.parse(name))
    print(f"{name:>10} @ 0.5: {log_perplexity(iam_scorer(large, small, cfg), text):.4f}")

scan = subblock_scan(large, small, text, 4, IamConfig())
print("\nblock scan (two layers mapped at a time):")
print(scan.to_csv())
