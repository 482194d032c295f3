#!/usr/bin/env python3
"""
Back-of-the-envelope savings for a 72B/0.5B Qwen2 pair: KV-cache memory
and prefill attention FLOPs as the mapped share of layers grows.
"""

from iam.analysis import QWEN2_0_5B, QWEN2_72B, attention_flops_report, kv_memory_report
from iam.mapping import n_mapped_layers

print(" ratio  layers  KV memory  attention FLOPs (prefill 4096)")
for ratio in (0.0, 0.25, 0.5, 0.75, 1.0):
    m = n_mapped_layers(ratio, QWEN2_72B.n_layers)
    mem = kv_memory_report(QWEN2_72B, QWEN2_0_5B, m)
    flops = attention_flops_report(QWEN2_72B, QWEN2_0_5B, m, 4096)
    print(f"  {ratio:4.2f}  {m:6d}   {mem.ratio:7.2%}   {flops.iam_total / flops.default_total:7.2%}")

# Values stay cached for every layer, so even mapping all layers only
# halves the large model's cache; the small model's own cache is added on top.
