#!/usr/bin/env python3
"""
Greedy generation with half of the large model's layers reading their
attention from the small model.
"""

from iam import IamConfig, baseline_generate, iam_generate
from iam.fixtures import FixtureSpec, make_fixture_pair
from iam.tokenizer import decode, encode

large, small = make_fixture_pair(FixtureSpec(sigma=0.01))
prompt = encode("The lighthouse keeper wrote in the log that ")

base = baseline_generate(large, prompt, max_tokens=40)
mapped = iam_generate(large, small, prompt, IamConfig(ratio=0.5, max_tokens=40))

print("baseline:", repr(decode(base.tokens)))
print("mapped:  ", repr(decode(mapped.tokens)))
same = sum(a == b for a, b in zip(base.tokens, mapped.tokens))
print(f"{same}/{len(base.tokens)} tokens agree")

print(f"\nmapping built at {mapped.established_at} tokens:")
for head, (src, s) in sorted(mapped.table.entries.items()):
    print(f"  large L{head.layer}H{head.head} <- small L{src.layer}H{src.head}  sim={s:.3f}")

# Mapped layers keep values but no keys.
cache = mapped.large_cache
print("\nkeys per layer:", [cache.k_length(i) for i in range(large.config.n_layers)])
print("values per layer:", [cache.v[i].shape[1] for i in range(large.config.n_layers)])
