#!/usr/bin/env python3
"""
Does the best small-model match for each mapped head stay the same as the
sequence grows? The mapping is fixed at establishment; this only watches.
"""

from iam import IamConfig, iam_generate
from iam.fixtures import FixtureSpec, make_fixture_pair
from iam.tokenizer import encode

prompt = encode("Rain had been falling on the allotments since before breakfast, ")
for sigma in (0.01, 0.05, 0.2):
    large, small = make_fixture_pair(FixtureSpec(sigma=sigma))
    res = iam_generate(large, small, prompt, IamConfig(ratio=0.5, max_tokens=60, consistency_tracking=True))
    rep = res.consistency
    layers = ", ".join(f"L{k}: {v:.2f}" for k, v in rep.layer_rates().items())
    print(f"sigma={sigma:<5} overall {rep.overall_rate():.3f}   {layers}")
