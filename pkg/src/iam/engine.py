"""Dual-model generation: the small model's attention stands in for selected layers of the large one."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from iam.mapping import (
    ConfigurationError,
    ConsistencyReport,
    HeadId,
    IamConfig,
    MappingTable,
    consistency_step,
    establish_mapping,
    n_mapped_layers,
    pairwise_similarity,
    select_layers,
)
from iam.model import KVCache, Model, forward_decode_step, forward_prefill, greedy_next
from iam.similarity import SimilarityMetric, truncate_for_similarity
from iam.tokenizer import EOS

log = logging.getLogger(__name__)


def logits_digest(logits: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(logits, dtype=np.float32).tobytes()).hexdigest()


@dataclass
class GenerationResult:
    tokens: list[int]  # generated ids, EOS excluded
    digests: list[str]  # one per sampled position
    prefill_len: int
    table: MappingTable | None = None
    consistency: ConsistencyReport | None = None
    established_at: int | None = None
    large_cache: KVCache | None = None
    small_cache: KVCache | None = None
    step_logits: list[np.ndarray] = field(default_factory=list, repr=False)

    @property
    def n_generated(self) -> int:
        return len(self.tokens)


def _sample_loop(first_logits, step, history: list[int], result: GenerationResult, budget: int,
                 rep_penalty: float, keep_logits: bool, stop=None) -> bool:
    """Greedy loop shared by every generator; returns True when EOS was produced.

    ``step(token)`` advances the model(s) and returns the next logits.
    ``stop()`` is checked after each appended token.
    """
    logits = first_logits
    while result.n_generated < budget:
        result.digests.append(logits_digest(logits))
        if keep_logits:
            result.step_logits.append(np.array(logits))
        y = greedy_next(logits, history, rep_penalty)
        if y == EOS:
            return True
        result.tokens.append(y)
        history.append(y)
        if result.n_generated >= budget or (stop is not None and stop()):
            return False
        logits = step(y)
    return False


def baseline_generate(model: Model, prompt, max_tokens: int = 512, repetition_penalty: float = 1.2,
                      keep_logits: bool = False) -> GenerationResult:
    """Plain greedy generation with one model."""
    history = list(prompt)
    res = forward_prefill(model, history)
    cache = res.cache
    out = GenerationResult([], [], len(history), large_cache=cache)
    _sample_loop(res.logits[-1], lambda y: forward_decode_step(model, y, cache).logits,
                 history, out, max_tokens, repetition_penalty, keep_logits)
    return out


class RunningSimilarity:
    """Similarity between growing attention matrices, updated one row at a time.

    Tracks the sufficient statistics of the flattened lower triangles so each
    decode step costs O(rows x cols x T) instead of recomputing from scratch.
    """

    def __init__(self, large: np.ndarray, small: np.ndarray, metric: SimilarityMetric):
        # large: [m, N, N], small: [n, N, N]
        self.metric = metric
        m, n = large.shape[0], small.shape[0]
        self.count = 0
        self.dot = np.zeros((m, n))
        self.sum_l = np.zeros(m)
        self.sum_s = np.zeros(n)
        self.sq_l = np.zeros(m)
        self.sq_s = np.zeros(n)
        self.pow = np.zeros((m, n))
        for r in range(large.shape[-1]):
            self.add_rows(large[:, r, : r + 1], small[:, r, : r + 1])

    def add_rows(self, rl: np.ndarray, rs: np.ndarray) -> None:
        rl = np.asarray(rl, dtype=np.float64)
        rs = np.asarray(rs, dtype=np.float64)
        self.count += rl.shape[1]
        self.dot += rl @ rs.T
        self.sum_l += rl.sum(axis=1)
        self.sum_s += rs.sum(axis=1)
        self.sq_l += (rl * rl).sum(axis=1)
        self.sq_s += (rs * rs).sum(axis=1)
        if self.metric.kind == "minkowski":
            self.pow += (np.abs(rl[:, None, :] - rs[None, :, :]) ** self.metric.p).sum(axis=2)

    def value(self) -> np.ndarray:
        kind = self.metric.kind
        if kind == "minkowski":
            return -self.pow ** (1.0 / self.metric.p)
        if kind == "pearson":
            n = self.count
            cov = self.dot - np.outer(self.sum_l, self.sum_s) / n
            var_l = self.sq_l - self.sum_l ** 2 / n
            var_s = self.sq_s - self.sum_s ** 2 / n
            return np.clip(cov / np.sqrt(np.outer(var_l, var_s)), -1.0, 1.0)
        return np.clip(self.dot / np.sqrt(np.outer(self.sq_l, self.sq_s)), -1.0, 1.0)


class DualSession:
    """One generation stream driven through a large and a small model.

    After :meth:`establish`, the large model's mapped layers hold values only
    and read their attention from the small model's heads.
    """

    def __init__(self, large: Model, small: Model, cfg: IamConfig, layers=None):
        if large.config.vocab_size != small.config.vocab_size:
            raise ConfigurationError("models must share a vocabulary")
        self.large = large
        self.small = small
        self.cfg = cfg
        self.forced_layers = None if layers is None else list(layers)
        self.table: MappingTable | None = None
        self.large_cache: KVCache | None = None
        self.small_cache: KVCache | None = None
        self.consistency: ConsistencyReport | None = None
        self._sources: dict[int, np.ndarray] = {}  # layer -> flat small-head index per query head
        self._scales: dict[int, np.ndarray] = {}
        self._tracker: RunningSimilarity | None = None

    @property
    def mapped_layers(self) -> list[int]:
        return sorted(self._sources)

    def prefill_dual(self, tokens) -> tuple[np.ndarray, np.ndarray]:
        """Attention captures of both models for similarity.

        The large model only sees the first ``tau_t`` tokens (its capture is
        discarded afterwards); the small model runs on the full sequence and
        keeps its cache. Returns ``(large_capture, small_capture)`` both cut
        to ``tau_t``.
        """
        if self.small_cache is not None or self.large_cache is not None:
            raise RuntimeError("session already prefilled")
        tokens = list(tokens)
        n_sim = min(len(tokens), self.cfg.tau_t)
        res_s = forward_prefill(self.small, tokens, capture=True)
        self.small_cache = res_s.cache
        self._small_capture = res_s.capture
        large_cap = forward_prefill(self.large, tokens[:n_sim], capture=True).capture
        return large_cap, truncate_for_similarity(res_s.capture, n_sim)

    def establish(self, tokens) -> np.ndarray:
        """Build the mapping on ``tokens`` and prefill the large model with it.

        Returns the large model's prefill logits ``[N, V]``.
        """
        cfg = self.cfg
        cl, cs = self.large.config, self.small.config
        tokens = list(tokens)
        large_cap, small_cap = self.prefill_dual(tokens)
        sim = pairwise_similarity(large_cap, small_cap, cfg.metric)
        if self.forced_layers is not None:
            layers = self.forced_layers
        else:
            layers = select_layers(cfg.strategy, cfg.ratio, cl.n_layers, sim)
            if cfg.ratio > 0 and not layers:
                raise ConfigurationError(f"ratio {cfg.ratio} selects no layers of {cl.n_layers}")
        self.table = establish_mapping(sim, layers, cl, cs, established_at=len(tokens))

        D, d = cl.n_query_heads, cs.n_query_heads
        for layer in layers:
            self._sources[layer] = np.array(
                [self.table.entries[HeadId(layer, h)][0].flat(d) for h in range(D)])
            if cfg.compensate:
                scales = []
                for h in range(D):
                    j = HeadId.from_flat(self._sources[layer][h], d)
                    a = large_cap[layer, h].astype(np.float64)
                    b = small_cap[j.layer, j.head].astype(np.float64)
                    scales.append(np.linalg.norm(a) / np.linalg.norm(b))
                    self.table.scales[HeadId(layer, h)] = scales[-1]
                self._scales[layer] = np.array(scales, dtype=np.float32)

        full_small = self._small_capture.reshape(cs.n_heads_total, len(tokens), len(tokens))
        overrides = {layer: self._substitute(layer, full_small) for layer in layers}
        tracking = cfg.consistency_tracking and bool(layers)
        res = forward_prefill(self.large, tokens, overrides=overrides, k_skip=layers,
                              strict_rows=not cfg.compensate, probe=tracking)
        self.large_cache = res.cache
        if tracking:
            mapped = np.concatenate([res.probe[layer] for layer in self.mapped_layers])
            self._tracker = RunningSimilarity(mapped, full_small, cfg.metric)
            self.consistency = ConsistencyReport()
        del self._small_capture
        log.debug("mapping established at %d tokens over layers %s", len(tokens), layers)
        return res.logits

    def _substitute(self, layer: int, small_attn: np.ndarray) -> np.ndarray:
        """Override for ``layer`` picked from small-head attention ``[l*d, ...]``."""
        a = small_attn[self._sources[layer]]
        if layer in self._scales:
            a = a * self._scales[layer].reshape((-1,) + (1,) * (a.ndim - 1))
            if self.cfg.renormalize:
                a = a / a.sum(axis=-1, keepdims=True)
        return a

    def decode_step_dual(self, token: int) -> np.ndarray:
        """Small model steps first; its new rows feed the large model's mapped heads."""
        if self.table is None:
            raise RuntimeError("mapping not established")
        cs = self.small.config
        rs = forward_decode_step(self.small, token, self.small_cache, capture=True)
        rows = rs.capture.reshape(cs.n_heads_total, -1)
        overrides = {layer: self._substitute(layer, rows) for layer in self.mapped_layers}
        tracking = self._tracker is not None
        rl = forward_decode_step(self.large, token, self.large_cache, overrides=overrides,
                                 strict_rows=not self.cfg.compensate, probe=tracking)
        if tracking:
            true_rows = np.concatenate([rl.probe[layer] for layer in self.mapped_layers])
            self._tracker.add_rows(true_rows, rows)
            consistency_step(self.table, self._tracker.value(), self.large.config, cs, self.consistency)
        return rl.logits


def iam_generate(large: Model, small: Model, prompt, cfg: IamConfig, layers=None,
                 keep_logits: bool = False) -> GenerationResult:
    """Greedy generation with attention mapping.

    Prompts shorter than ``tau_e`` are first extended by the large model
    alone; the mapping is then built once on the extended sequence and used
    until EOS or ``cfg.max_tokens`` generated tokens (delayed-phase tokens
    included). With no mapped layers this is exactly
    :func:`baseline_generate`.
    """
    if large.config.vocab_size != small.config.vocab_size:
        raise ConfigurationError("models must share a vocabulary")
    n_map = len(layers) if layers is not None else n_mapped_layers(cfg.ratio, large.config.n_layers)
    if n_map == 0:
        if cfg.ratio > 0 and layers is None:
            raise ConfigurationError(f"ratio {cfg.ratio} selects no layers of {large.config.n_layers}")
        return baseline_generate(large, prompt, cfg.max_tokens, cfg.repetition_penalty, keep_logits)

    history = list(prompt)
    out = GenerationResult([], [], len(history))
    if len(history) < cfg.tau_e:
        res = forward_prefill(large, history)
        cache = res.cache
        eos = _sample_loop(res.logits[-1], lambda y: forward_decode_step(large, y, cache).logits,
                           history, out, cfg.max_tokens, cfg.repetition_penalty, keep_logits,
                           stop=lambda: len(history) >= cfg.tau_e)
        if eos or out.n_generated >= cfg.max_tokens:
            out.large_cache = cache
            return out

    session = DualSession(large, small, cfg, layers)
    logits = session.establish(history)[-1]
    out.established_at = len(history)
    _sample_loop(logits, session.decode_step_dual, history, out, cfg.max_tokens,
                 cfg.repetition_penalty, keep_logits)
    out.table = session.table
    out.consistency = session.consistency
    out.large_cache = session.large_cache
    out.small_cache = session.small_cache
    return out


def iam_logits(large: Model, small: Model, tokens, cfg: IamConfig, layers=None) -> tuple[np.ndarray, MappingTable | None]:
    """Teacher-forced large-model logits ``[N, V]`` with the mapping built on ``tokens``."""
    tokens = list(tokens)
    n_map = len(layers) if layers is not None else n_mapped_layers(cfg.ratio, large.config.n_layers)
    if n_map == 0 and cfg.ratio > 0 and layers is None:
        raise ConfigurationError(f"ratio {cfg.ratio} selects no layers of {large.config.n_layers}")
    if n_map == 0 or len(tokens) < cfg.tau_e:
        return forward_prefill(large, tokens).logits, None
    session = DualSession(large, small, cfg, layers)
    logits = session.establish(tokens)
    return logits, session.table
