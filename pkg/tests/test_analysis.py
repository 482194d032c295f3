import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import TINY, tiny_model
from iam import analysis
from iam.analysis import (
    ATTN_TERMS,
    QWEN2_0_5B,
    QWEN2_72B,
    attention_flops_report,
    kv_memory_report,
    log_perplexity,
    mapping_histogram,
    similarity_stats,
)
from iam.fixtures import FixtureSpec, small_config
from iam.mapping import HeadId, IamConfig, MappingTable
from iam.model import InputError, ModelConfig, forward_prefill
from iam.numerics import causal_softmax_rows, count_flops


def test_memory_ratio_qwen():
    rep = kv_memory_report(QWEN2_72B, QWEN2_0_5B, 40)
    # 2*80*64*128 = 1310720 per token; minus 40*64*128, plus 2*24*14*64
    assert rep.default_elements == 1310720
    assert rep.iam_elements == 1310720 - 327680 + 43008
    assert rep.ratio == pytest.approx(0.7828, abs=1e-4)


def test_memory_ratio_toy_pair():
    cs = small_config(FixtureSpec())
    rep = kv_memory_report(FixtureSpec().large, cs, 4)
    # 2*8*4*16 = 1024, minus 4*4*16 = 256 saved, plus 2*4*2*16 = 256 for the
    # small model: at this scale the small cache eats the whole saving
    assert rep.ratio == 1.0
    assert kv_memory_report(FixtureSpec().large, cs, 8).ratio == pytest.approx(0.75)


def test_memory_scales_and_bounds():
    rep = kv_memory_report(QWEN2_72B, None, 0, seq=10, batch=2, dtype_bytes=2)
    assert rep.ratio == 1.0 and rep.default_bytes == 1310720 * 40
    with pytest.raises(ValueError):
        kv_memory_report(QWEN2_72B, None, 81)


configs = st.builds(
    lambda L, kv, g, hd, ffn: ModelConfig(L, kv * g, kv, hd, ffn),
    st.integers(1, 12), st.integers(1, 4), st.integers(1, 4), st.sampled_from([2, 4, 8, 16]), st.integers(1, 64))


@settings(max_examples=60, deadline=None)
@given(configs, configs, st.integers(1, 300), st.booleans(), st.data())
def test_flops_identity(cl, cs, n, causal, data):
    m = data.draw(st.integers(0, cl.n_layers))
    rep = attention_flops_report(cl, cs, m, n, causal)
    assert rep.iam_total + rep.savings == rep.default_total + rep.small_overhead
    full = attention_flops_report(cl, cs, cl.n_layers, n, causal)
    for t in ("q_proj", "k_proj", "qk", "softmax"):
        assert full.iam_terms[t] == 0
    for t in ("v_proj", "av", "o_proj"):
        assert full.iam_terms[t] == full.default_terms[t]


def test_flops_hand_values():
    cfg = ModelConfig(1, 1, 1, 2, 4)
    terms = attention_flops_report(cfg, None, 0, 3).default_terms
    # H=2, hd=2, causal scores = 6
    assert terms == {"q_proj": 24, "k_proj": 24, "v_proj": 24, "qk": 24, "softmax": 30, "av": 24, "o_proj": 24}


@pytest.mark.parametrize("mapped", [[], [2], [0, 1, 2]])
def test_dense_report_matches_instrumented_prefill(tiny, mapped):
    n = 7
    tokens = [256] + list(range(1, n))
    attn = causal_softmax_rows(np.zeros((n, n)), 1.0)
    overrides = {layer: np.broadcast_to(attn, (TINY.n_query_heads, n, n)) for layer in mapped}
    with count_flops() as c:
        forward_prefill(tiny, tokens, overrides=overrides, k_skip=mapped)
    rep = attention_flops_report(TINY, None, len(mapped), n, causal=False)
    counted = {t: c.counts.get(t, 0) for t in ATTN_TERMS}
    assert counted == rep.iam_terms


def test_uniform_logits_perplexity():
    m = tiny_model(0)
    m.lm_head[:] = 0.0
    tokens = [256] + list(range(40))
    assert log_perplexity(analysis.baseline_scorer(m), tokens, 16) == pytest.approx(math.log(258), abs=1e-6)


def test_perplexity_single_window_oracle(tiny):
    tokens = [256] + list(range(50, 80))
    lp = forward_prefill(tiny, tokens).logits.astype(np.float64)
    lp = lp - np.log(np.exp(lp).sum(axis=1, keepdims=True))
    expect = -np.mean([lp[t - 1, tokens[t]] for t in range(1, len(tokens))])
    assert log_perplexity(analysis.baseline_scorer(tiny), tokens, 64) == pytest.approx(expect, abs=1e-5)


def test_perplexity_scores_each_token_once():
    seen = []

    def scorer(chunk):
        seen.append(len(chunk))
        return np.zeros((len(chunk), 258), dtype=np.float32)

    log_perplexity(scorer, list(range(100)), window=32, stride=16)
    # windows starting at 0, 16, ..., 80 until the end is covered
    assert seen[0] == 32 and sum(1 for _ in seen) == 6
    with pytest.raises(InputError):
        log_perplexity(scorer, [1])


def test_similarity_stats():
    sim = np.array([[0.2, 0.8], [0.5, 0.1], [1.0, 0.0], [0.3, 0.3]])
    s = similarity_stats(sim, n_query_heads=2)
    assert s.row_max == [0.8, 0.5, 1.0, 0.3]
    assert s.global_mean == pytest.approx(0.65)
    assert s.layer_means == pytest.approx([0.65, 0.65])
    assert similarity_stats(sim, rows=[2]).global_mean == 1.0


def test_mapping_histogram():
    t1 = MappingTable({HeadId(1, 0): (HeadId(0, 1), 0.9), HeadId(1, 1): (HeadId(0, 1), 0.8)}, 20)
    t2 = MappingTable({HeadId(1, 0): (HeadId(1, 0), 0.7), HeadId(1, 1): (HeadId(0, 1), 0.8)}, 20)
    t3 = MappingTable({HeadId(1, 0): (HeadId(1, 0), 0.7)}, 20)
    h = mapping_histogram([t1, t2, t3], small_heads_per_layer=2, small_head_count=4)
    assert h.counts == [0, 3, 2, 0]
    assert h.modes == {"1,0": 2, "1,1": 1}
    with pytest.raises(InputError):
        mapping_histogram([], 2, 4)
    with pytest.raises(InputError):
        mapping_histogram([t1], 2, 1)


def test_subblock_scan_and_csv(pair):
    large, small = pair
    tokens = [256] + list(b"a short scan text for the block sweep, long enough for tau_e.")
    scan = analysis.subblock_scan(large, small, tokens, 4, IamConfig(), window=64)
    assert scan.blocks == [(0, 2), (2, 4), (4, 6), (6, 8)]
    csv = scan.to_csv().splitlines()
    assert csv[0] == "block_index,metric" and len(csv) == 5
    assert csv[1].startswith("0,") and float(csv[1].split(",")[1]) == scan.log_ppl[0]
    assert analysis.scan_correlation(scan.log_ppl, scan.log_ppl) == pytest.approx(1.0)


def test_json_is_stable():
    assert analysis.to_json({"b": 1, "a": [1, 2]}) == '{\n  "a": [\n    1,\n    2\n  ],\n  "b": 1\n}'


def test_memory_ratio_hand_example():
    cl = ModelConfig(8, 4, 2, 16, 32)
    cs = ModelConfig(2, 2, 1, 8, 16)
    # (1024 - 256 + 64) / 1024
    assert kv_memory_report(cl, cs, 4).ratio == pytest.approx(0.8125)


def test_qk_term_scaling():
    cfg = ModelConfig(2, 4, 2, 16, 32)
    dense = [attention_flops_report(cfg, None, 0, n, causal=False).default_terms["qk"] for n in (50, 100)]
    assert dense[1] == 4 * dense[0]
    causal = [attention_flops_report(cfg, None, 0, n).default_terms["qk"] for n in (50, 100)]
    # n(n+1)/2 scores
    assert causal[1] / causal[0] == pytest.approx(100 * 101 / (50 * 51))


def test_overfit_fixture_near_zero_perplexity():
    from iam.fixtures import HeadFit, make_fixture_pair

    text = bytes(range(65, 128))
    spec = FixtureSpec(large=ModelConfig(2, 4, 2, 16, 32), head_fit=HeadFit(text, steps=1000, lr=5.0, l2=0.0))
    large, _ = make_fixture_pair(spec)
    assert log_perplexity(analysis.baseline_scorer(large), [256] + list(text)) < 0.01


def test_ratio_zero_perplexity_equals_baseline(pair):
    large, small = pair
    tokens = [256] + list(b"plain words for a plain check of the scorer")
    base = log_perplexity(analysis.baseline_scorer(large), tokens)
    assert log_perplexity(analysis.iam_scorer(large, small, IamConfig(ratio=0.0)), tokens) == base
