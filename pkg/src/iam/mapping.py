"""Layer selection, mapping-table establishment and consistency tracking.

Large and small heads are both indexed layer-major: flat index
``layer * n_query_heads + head``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from iam.model import ModelConfig
from iam.similarity import COSINE, SimilarityMetric, batch_similarity, truncate_for_similarity


class ConfigurationError(ValueError):
    """Inconsistent mapping configuration."""


@dataclass(frozen=True, order=True)
class HeadId:
    layer: int
    head: int

    def flat(self, n_heads: int) -> int:
        return self.layer * n_heads + self.head

    @classmethod
    def from_flat(cls, idx: int, n_heads: int) -> "HeadId":
        return cls(int(idx) // n_heads, int(idx) % n_heads)


@dataclass(frozen=True)
class LayerSelectionStrategy:
    """How mapped layers are chosen.

    ``backend`` fills from the last layer down, ``frontend`` from layer 0 up,
    ``most_similar`` takes the best-scoring layers, and ``two_region`` fills
    ``region1`` from its top down and then ``region2`` (ascending unless
    ``region2_descending``).
    """

    kind: str = "backend"
    region1: tuple[int, int] | None = None
    region2: tuple[int, int] | None = None
    region2_descending: bool = False

    KINDS = ("backend", "frontend", "most_similar", "two_region")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown strategy {self.kind!r}")
        if self.kind == "two_region":
            if self.region1 is None or self.region2 is None:
                raise ValueError("two_region needs region1 and region2")
            (a0, a1), (b0, b1) = self.region1, self.region2
            if a0 > a1 or b0 > b1:
                raise ValueError("region bounds must be [lo, hi)")
            if max(a0, b0) < min(a1, b1):
                raise ValueError("regions overlap")

    @classmethod
    def qwen2_default(cls, n_layers: int = 80) -> "LayerSelectionStrategy":
        """Two regions at the same relative positions as layers [64, 80) and [16, 40) of an 80-layer model."""
        def at(x):
            return round(x * n_layers / 80)
        return cls("two_region", (at(64), n_layers), (at(16), at(40)))

    @classmethod
    def parse(cls, name: str, n_layers: int | None = None) -> "LayerSelectionStrategy":
        name = name.replace("-", "_")
        if name == "two_region":
            return cls.qwen2_default(n_layers or 80)
        return cls(name)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class IamConfig:
    ratio: float = 0.5
    tau_e: int = 20
    tau_t: int = 100
    metric: SimilarityMetric = COSINE
    strategy: LayerSelectionStrategy = LayerSelectionStrategy()
    max_tokens: int = 512
    repetition_penalty: float = 1.2
    norm_compensation: bool = False
    renormalize: bool = False
    consistency_tracking: bool = False

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError("ratio must lie in [0, 1]")
        if self.tau_e < 1 or self.tau_t < 1:
            raise ValueError("tau_e and tau_t must be >= 1")
        if self.max_tokens < 0:
            raise ValueError("max_tokens must be >= 0")
        if self.repetition_penalty < 1:
            raise ValueError("repetition_penalty must be >= 1")

    @property
    def compensate(self) -> bool:
        return self.norm_compensation or self.metric.kind == "cosine_norm"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["metric"] = self.metric.name
        return d


def pairwise_similarity(large, small, metric: SimilarityMetric = COSINE, tau_t: int | None = None) -> np.ndarray:
    """Similarity of every large head against every small head.

    ``large`` is a capture ``[L, D, N, N]``, ``small`` is ``[l, d, N, N]``;
    returns ``[L*D, l*d]`` in layer-major order. Matrices are cut to their
    leading ``tau_t`` block first when ``tau_t`` is given.
    """
    large = np.asarray(large)
    small = np.asarray(small)
    if large.shape[-1] != small.shape[-1]:
        raise ValueError(f"captures cover different prefixes: {large.shape[-1]} vs {small.shape[-1]} tokens")
    if tau_t is not None:
        large = truncate_for_similarity(large, tau_t)
        small = truncate_for_similarity(small, tau_t)
    n = large.shape[-1]
    return batch_similarity(large.reshape(-1, n, n), small.reshape(-1, n, n), metric)


def subblock_partition(n_layers: int, n_blocks: int) -> list[range]:
    """Split ``[0, n_layers)`` into ``n_blocks`` contiguous ranges, larger ones first."""
    if n_blocks < 1:
        raise ConfigurationError("need at least one block")
    if n_blocks > n_layers:
        raise ConfigurationError(f"{n_blocks} blocks for {n_layers} layers")
    base, extra = divmod(n_layers, n_blocks)
    out, start = [], 0
    for b in range(n_blocks):
        size = base + (1 if b < extra else 0)
        out.append(range(start, start + size))
        start += size
    return out


def layer_scores(sim: np.ndarray, n_layers: int) -> np.ndarray:
    """Per large layer: mean over its heads of the best similarity to any small head."""
    best = np.asarray(sim).max(axis=1)
    return best.reshape(n_layers, -1).mean(axis=1)


def n_mapped_layers(ratio: float, n_layers: int) -> int:
    # round half up; Python's round() is banker's rounding
    return int(np.floor(ratio * n_layers + 0.5))


def select_layers(strategy: LayerSelectionStrategy, ratio: float, n_layers: int,
                  sim: np.ndarray | None = None) -> list[int]:
    """Layers to map, in fill order. ``sim`` is required for ``most_similar``."""
    if not 0.0 <= ratio <= 1.0:
        raise ConfigurationError("ratio must lie in [0, 1]")
    k = n_mapped_layers(ratio, n_layers)
    if k == 0:
        return []
    if strategy.kind == "backend":
        return list(range(n_layers - 1, n_layers - 1 - k, -1))
    if strategy.kind == "frontend":
        return list(range(k))
    if strategy.kind == "most_similar":
        if sim is None:
            raise ConfigurationError("most_similar selection needs the similarity matrix")
        scores = layer_scores(sim, n_layers)
        order = sorted(range(n_layers), key=lambda i: (-scores[i], i))
        return order[:k]
    (a0, a1), (b0, b1) = strategy.region1, strategy.region2
    if not (0 <= a0 and a1 <= n_layers and 0 <= b0 and b1 <= n_layers):
        raise ConfigurationError("regions exceed the model's layers")
    second = range(b1 - 1, b0 - 1, -1) if strategy.region2_descending else range(b0, b1)
    order = list(range(a1 - 1, a0 - 1, -1)) + list(second)
    if k > len(order):
        raise ConfigurationError(f"{k} layers requested but regions hold {len(order)}")
    return order[:k]


@dataclass
class MappingTable:
    """Large head -> (small head, similarity at establishment)."""

    entries: dict[HeadId, tuple[HeadId, float]]
    established_at: int
    # norm-compensation factor per large head; empty unless compensation is on
    scales: dict[HeadId, float] = field(default_factory=dict)

    def layers(self) -> list[int]:
        return sorted({h.layer for h in self.entries})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def to_dict(self) -> dict:
        entries = []
        for large in sorted(self.entries):
            small, s = self.entries[large]
            e = {"large": [large.layer, large.head], "small": [small.layer, small.head], "sim": float(s)}
            if large in self.scales:
                e["scale"] = float(self.scales[large])
            entries.append(e)
        return {"established_at": int(self.established_at), "entries": entries}

    @classmethod
    def from_dict(cls, d: dict) -> "MappingTable":
        entries, scales = {}, {}
        for e in d["entries"]:
            large = HeadId(*e["large"])
            entries[large] = (HeadId(*e["small"]), float(e["sim"]))
            if "scale" in e:
                scales[large] = float(e["scale"])
        return cls(entries, int(d["established_at"]), scales)

    @classmethod
    def from_json(cls, s: str) -> "MappingTable":
        return cls.from_dict(json.loads(s))


def establish_mapping(sim: np.ndarray, selected, cfg_large: ModelConfig, cfg_small: ModelConfig,
                      established_at: int = 0) -> MappingTable:
    """For each query head of each selected layer, pick the most similar small head.

    The argmax runs over every small head of every layer; ties resolve to
    the lowest flat index.
    """
    sim = np.asarray(sim)
    if cfg_small.n_heads_total < 1:
        raise ConfigurationError("small model has no heads")
    if sim.shape != (cfg_large.n_heads_total, cfg_small.n_heads_total):
        raise ConfigurationError(
            f"similarity matrix {sim.shape} does not match "
            f"{cfg_large.n_heads_total}x{cfg_small.n_heads_total} heads")
    D, d = cfg_large.n_query_heads, cfg_small.n_query_heads
    entries = {}
    for layer in selected:
        if not 0 <= layer < cfg_large.n_layers:
            raise ConfigurationError(f"layer {layer} out of range")
        for head in range(D):
            i = layer * D + head
            j = int(np.argmax(sim[i]))
            entries[HeadId(layer, head)] = (HeadId.from_flat(j, d), float(sim[i, j]))
    return MappingTable(entries, established_at)


@dataclass
class ConsistencyReport:
    observed: dict[HeadId, int] = field(default_factory=dict)
    unchanged: dict[HeadId, int] = field(default_factory=dict)

    def head_rate(self, head: HeadId) -> float:
        n = self.observed.get(head, 0)
        return 1.0 if n == 0 else self.unchanged[head] / n

    def layer_rates(self) -> dict[int, float]:
        by_layer: dict[int, list[float]] = {}
        for h in self.observed:
            by_layer.setdefault(h.layer, []).append(self.head_rate(h))
        return {layer: float(np.mean(r)) for layer, r in sorted(by_layer.items())}

    def overall_rate(self) -> float:
        obs = sum(self.observed.values())
        return 1.0 if obs == 0 else sum(self.unchanged.values()) / obs

    def to_dict(self) -> dict:
        return {
            "overall_rate": self.overall_rate(),
            "layer_rates": {str(k): v for k, v in self.layer_rates().items()},
            "heads": [
                {"large": [h.layer, h.head], "observed": self.observed[h], "unchanged": self.unchanged[h]}
                for h in sorted(self.observed)
            ],
        }


def consistency_step(table: MappingTable, current_sim: np.ndarray, cfg_large: ModelConfig,
                     cfg_small: ModelConfig, report: ConsistencyReport | None = None
                     ) -> tuple[dict[HeadId, bool], ConsistencyReport]:
    """Re-derive each mapped head's argmax on ``current_sim`` and count agreements.

    ``current_sim`` may be the full ``[L*D, l*d]`` matrix or only the rows of
    the mapped heads in sorted order. The table itself is left untouched.
    """
    report = report if report is not None else ConsistencyReport()
    heads = sorted(table.entries)
    sim = np.asarray(current_sim)
    full = sim.shape[0] == cfg_large.n_heads_total
    flags = {}
    for r, h in enumerate(heads):
        row = sim[h.flat(cfg_large.n_query_heads)] if full else sim[r]
        j = HeadId.from_flat(int(np.argmax(row)), cfg_small.n_query_heads)
        same = j == table.entries[h][0]
        flags[h] = same
        report.observed[h] = report.observed.get(h, 0) + 1
        report.unchanged[h] = report.unchanged.get(h, 0) + int(same)
    return flags, report
