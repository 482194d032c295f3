"""Evaluation and accounting: perplexity, KV-cache memory, attention FLOPs,
similarity statistics, mapping histograms and the sub-block scan."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from iam.engine import iam_logits
from iam.mapping import IamConfig, MappingTable, subblock_partition
from iam.model import InputError, Model, ModelConfig, forward_prefill
from iam.numerics import SOFTMAX_FLOPS_PER_SCORE, log_softmax
from iam.similarity import pearson

# Published shapes of the two Qwen2 checkpoints used for the memory table.
QWEN2_72B = ModelConfig(n_layers=80, n_query_heads=64, n_kv_heads=8, head_dim=128, ffn_dim=29568,
                        vocab_size=152064, rope_theta=1e6)
QWEN2_0_5B = ModelConfig(n_layers=24, n_query_heads=14, n_kv_heads=2, head_dim=64, ffn_dim=4864,
                         vocab_size=151936, rope_theta=1e6)


def to_json(obj) -> str:
    """Stable JSON: sorted keys, two-space indent."""
    return json.dumps(obj, sort_keys=True, indent=2)


# --------------------------------------------------------------------------- perplexity

def baseline_scorer(model: Model):
    return lambda tokens: forward_prefill(model, tokens).logits


def iam_scorer(large: Model, small: Model, cfg: IamConfig, layers=None):
    """Teacher-forced scorer that rebuilds the mapping on every window."""
    return lambda tokens: iam_logits(large, small, tokens, cfg, layers)[0]


def log_perplexity(scorer, tokens, window: int = 256, stride: int | None = None) -> float:
    """Mean natural-log NLL of each token given its prefix.

    Inputs longer than ``window`` are covered by windows starting every
    ``stride`` tokens; each token is scored once, by the first window that
    has it as a new target.
    """
    tokens = list(tokens)
    if len(tokens) < 2:
        raise InputError("need at least two tokens")
    stride = stride or window
    if not 1 <= stride <= window:
        raise ValueError("stride must lie in [1, window]")
    n = len(tokens)
    total, count, scored_to = 0.0, 0, 1
    begin = 0
    while scored_to < n:
        end = min(begin + window, n)
        logits = scorer(tokens[begin:end])
        lp = log_softmax(logits)
        for t in range(max(scored_to, begin + 1), end):
            total -= lp[t - 1 - begin, tokens[t]]
            count += 1
        scored_to = end
        begin += stride
    return float(total / count)


# --------------------------------------------------------------------------- memory

@dataclass
class MemoryReport:
    """Per-token KV-cache elements, counted per query head."""

    default_elements: int
    k_saved_elements: int
    small_elements: int
    iam_elements: int
    seq: int
    batch: int
    dtype_bytes: int
    default_bytes: int
    iam_bytes: int
    ratio: float
    accounting: str = "per-query-head"

    def to_dict(self) -> dict:
        return asdict(self)


def kv_memory_report(cfg_large: ModelConfig, cfg_small: ModelConfig | None, mapped_layers: int,
                     seq: int = 1, batch: int = 1, dtype_bytes: int = 2) -> MemoryReport:
    """KV memory of the large model alone versus with ``mapped_layers`` K-free layers plus the small model."""
    if not 0 <= mapped_layers <= cfg_large.n_layers:
        raise ValueError("mapped_layers out of range")
    per_layer = cfg_large.n_query_heads * cfg_large.head_dim
    default = 2 * cfg_large.n_layers * per_layer
    saved = mapped_layers * per_layer
    small = 0 if cfg_small is None else 2 * cfg_small.n_layers * cfg_small.n_query_heads * cfg_small.head_dim
    iam = default - saved + small
    scale = seq * batch * dtype_bytes
    return MemoryReport(default, saved, small, iam, seq, batch, dtype_bytes,
                        default * scale, iam * scale, iam / default)


# --------------------------------------------------------------------------- flops

ATTN_TERMS = ("q_proj", "k_proj", "v_proj", "qk", "softmax", "av", "o_proj")
SKIPPED_TERMS = ("q_proj", "k_proj", "qk", "softmax")


def _attention_terms(cfg: ModelConfig, n: int, causal: bool) -> dict[str, int]:
    """Attention FLOPs of one layer over a prefill of ``n`` tokens."""
    H, D, hd = cfg.hidden_dim, cfg.n_query_heads, cfg.head_dim
    kv = cfg.n_kv_heads * hd
    scores = n * (n + 1) // 2 if causal else n * n
    return {
        "q_proj": 2 * n * H * D * hd,
        "k_proj": 2 * n * H * kv,
        "v_proj": 2 * n * H * kv,
        "qk": 2 * scores * hd * D,
        "softmax": SOFTMAX_FLOPS_PER_SCORE * scores * D,
        "av": 2 * scores * hd * D,
        "o_proj": 2 * n * D * hd * H,
    }


@dataclass
class FlopsReport:
    prefill_len: int
    mapped_layers: int
    causal: bool
    default_terms: dict[str, int]
    iam_terms: dict[str, int]
    small_overhead: int
    default_total: int
    iam_total: int
    savings: int
    savings_ratio: float
    softmax_flops_per_score: int = SOFTMAX_FLOPS_PER_SCORE
    note: str = field(default="softmax counted as max, subtract, exp, sum, divide per score")

    def to_dict(self) -> dict:
        return asdict(self)


def attention_flops_report(cfg_large: ModelConfig, cfg_small: ModelConfig | None, mapped_layers: int,
                           prefill_len: int, causal: bool = True) -> FlopsReport:
    """Closed-form prefill attention FLOPs.

    Mapped layers drop Q/K projections, the score product and the softmax;
    the small model's whole attention is added as overhead, so
    ``iam_total + savings == default_total + small_overhead``. With
    ``causal`` only the lower-triangular scores are counted.
    """
    if not 0 <= mapped_layers <= cfg_large.n_layers:
        raise ValueError("mapped_layers out of range")
    per_layer = _attention_terms(cfg_large, prefill_len, causal)
    L = cfg_large.n_layers
    default_terms = {k: v * L for k, v in per_layer.items()}
    iam_terms = {
        k: v * (L - mapped_layers) if k in SKIPPED_TERMS else v * L for k, v in per_layer.items()
    }
    small = 0
    if cfg_small is not None:
        small = sum(_attention_terms(cfg_small, prefill_len, causal).values()) * cfg_small.n_layers
    default_total = sum(default_terms.values())
    savings = default_total - sum(iam_terms.values())
    iam_total = sum(iam_terms.values()) + small
    return FlopsReport(prefill_len, mapped_layers, causal, default_terms, iam_terms, small,
                       default_total, iam_total, savings, (default_total - iam_total) / default_total)


# --------------------------------------------------------------------------- similarity statistics

@dataclass
class SimilarityStats:
    row_max: list[float]
    global_mean: float
    layer_means: list[float]

    def to_dict(self) -> dict:
        return asdict(self)


def similarity_stats(sim: np.ndarray, n_query_heads: int | None = None, rows=None) -> SimilarityStats:
    """Best match per large head, averaged globally and per layer.

    ``rows`` restricts the statistics to a subset of large heads (flat
    indices); per-layer means need ``n_query_heads`` and the full matrix.
    """
    sim = np.asarray(sim, dtype=np.float64)
    if sim.size == 0:
        raise ValueError("empty similarity matrix")
    best = sim.max(axis=1)
    layer_means = []
    if n_query_heads and rows is None:
        layer_means = best.reshape(-1, n_query_heads).mean(axis=1).tolist()
    if rows is not None:
        best = best[list(rows)]
    return SimilarityStats(best.tolist(), float(best.mean()), layer_means)


# --------------------------------------------------------------------------- mapping histogram

@dataclass
class MappingHistogram:
    counts: list[int]  # per small flat head index
    modes: dict[str, int]  # "layer,head" of large head -> most frequent small flat index
    n_tables: int

    def to_dict(self) -> dict:
        return asdict(self)


def mapping_histogram(tables: list[MappingTable], small_heads_per_layer: int, small_head_count: int) -> MappingHistogram:
    """How often each small head serves as a source, plus each large head's modal source."""
    if not tables:
        raise InputError("no mapping tables")
    counts = np.zeros(small_head_count, dtype=np.int64)
    per_large: dict = {}
    for t in tables:
        for large, (small, _) in t.entries.items():
            j = small.flat(small_heads_per_layer)
            if not 0 <= j < small_head_count:
                raise InputError(f"small head index {j} out of range")
            counts[j] += 1
            per_large.setdefault(large, []).append(j)
    modes = {}
    for large in sorted(per_large):
        c = np.bincount(per_large[large], minlength=small_head_count)
        modes[f"{large.layer},{large.head}"] = int(np.argmax(c))
    return MappingHistogram(counts.tolist(), modes, len(tables))


# --------------------------------------------------------------------------- sub-block scan

@dataclass
class ScanResult:
    blocks: list[tuple[int, int]]
    log_ppl: list[float]
    baseline_log_ppl: float

    def to_dict(self) -> dict:
        return asdict(self)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["block_index", "metric"])
        for i, v in enumerate(self.log_ppl):
            w.writerow([i, repr(v)])
        return buf.getvalue()


def subblock_scan(large: Model, small: Model, tokens, n_blocks: int, cfg: IamConfig,
                  window: int = 256, stride: int | None = None) -> ScanResult:
    """Map one contiguous block of layers at a time and record log perplexity."""
    blocks = subblock_partition(large.config.n_layers, n_blocks)
    base = log_perplexity(baseline_scorer(large), tokens, window, stride)
    vals = [log_perplexity(iam_scorer(large, small, cfg, list(b)), tokens, window, stride) for b in blocks]
    return ScanResult([(b.start, b.stop) for b in blocks], vals, base)


def scan_correlation(a, b) -> float:
    """Pearson correlation between two per-block result vectors."""
    return pearson(a, b)
