"""Decoder-only transformer (pre-RMSNorm, RoPE, GQA, SwiGLU) with a KV cache.

Two hooks serve attention mapping:

* ``capture`` returns the causal attention matrix of every query head;
* ``overrides`` supplies attention for whole layers from outside. Those
  layers (the ``k_skip`` set) skip the Q and K projections, the score
  product and the softmax, and keep no keys in the cache. Their values and
  output projection are still computed by this model.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from iam import numerics as nx
from iam.numerics import DTYPE, ShapeError
from iam.tokenizer import VOCAB_SIZE

MAGIC = b"IAMW"
FORMAT_VERSION = 1


class ModelLoadError(ValueError):
    """Weight file is malformed or does not match its header."""


class InputError(ValueError):
    """Bad token ids or empty inputs."""


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_query_heads: int
    n_kv_heads: int
    head_dim: int
    ffn_dim: int
    vocab_size: int = VOCAB_SIZE
    rope_theta: float = 10000.0
    norm_eps: float = 1e-6
    tie_embeddings: bool = False

    def __post_init__(self):
        for name in ("n_layers", "n_query_heads", "n_kv_heads", "head_dim", "ffn_dim", "vocab_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_query_heads % self.n_kv_heads:
            raise ValueError("n_query_heads must be divisible by n_kv_heads")

    @property
    def hidden_dim(self) -> int:
        return self.n_query_heads * self.head_dim

    @property
    def group_size(self) -> int:
        return self.n_query_heads // self.n_kv_heads

    @property
    def n_heads_total(self) -> int:
        return self.n_layers * self.n_query_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class LayerWeights:
    attn_norm: np.ndarray  # [H]
    wq: np.ndarray  # [H, D*hd]
    wk: np.ndarray  # [H, Dkv*hd]
    wv: np.ndarray  # [H, Dkv*hd]
    wo: np.ndarray  # [D*hd, H]
    ffn_norm: np.ndarray  # [H]
    w_gate: np.ndarray  # [H, F]
    w_up: np.ndarray  # [H, F]
    w_down: np.ndarray  # [F, H]

    FIELDS = ("attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w_gate", "w_up", "w_down")


@dataclass
class Model:
    config: ModelConfig
    embed: np.ndarray  # [V, H]
    layers: list[LayerWeights]
    final_norm: np.ndarray  # [H]
    lm_head: np.ndarray | None = None  # [H, V]; None when tied

    def __post_init__(self):
        check_shapes(self)

    @property
    def output_matrix(self) -> np.ndarray:
        return self.embed.T if self.config.tie_embeddings else self.lm_head


def expected_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Tensor names and shapes in file order."""
    H, F, V = cfg.hidden_dim, cfg.ffn_dim, cfg.vocab_size
    qd, kvd = cfg.n_query_heads * cfg.head_dim, cfg.n_kv_heads * cfg.head_dim
    per_layer = {
        "attn_norm": (H,), "wq": (H, qd), "wk": (H, kvd), "wv": (H, kvd), "wo": (qd, H),
        "ffn_norm": (H,), "w_gate": (H, F), "w_up": (H, F), "w_down": (F, H),
    }
    out = [("embed", (V, H))]
    for i in range(cfg.n_layers):
        out += [(f"layers.{i}.{n}", per_layer[n]) for n in LayerWeights.FIELDS]
    out.append(("final_norm", (H,)))
    if not cfg.tie_embeddings:
        out.append(("lm_head", (H, V)))
    return out


def _tensors(model: Model) -> list[np.ndarray]:
    out = [model.embed]
    for lw in model.layers:
        out += [getattr(lw, n) for n in LayerWeights.FIELDS]
    out.append(model.final_norm)
    if not model.config.tie_embeddings:
        out.append(model.lm_head)
    return out


def check_shapes(model: Model) -> None:
    cfg = model.config
    if len(model.layers) != cfg.n_layers:
        raise ShapeError(f"config declares {cfg.n_layers} layers, got {len(model.layers)}")
    if not cfg.tie_embeddings and model.lm_head is None:
        raise ShapeError("untied model needs lm_head")
    for (name, shape), t in zip(expected_shapes(cfg), _tensors(model)):
        if t.shape != shape:
            raise ShapeError(f"tensor {name}: expected {shape}, got {t.shape}")
        if t.dtype != DTYPE:
            raise ShapeError(f"tensor {name}: expected float32, got {t.dtype}")


def save_model(model: Model, path) -> None:
    """Write an IAMW v1 file.

    Layout: ``b"IAMW"``, u32 version, u64 JSON length, UTF-8 JSON config,
    then each tensor as u64 element count followed by little-endian float32
    data in row-major order. Tensor order is given by :func:`expected_shapes`.
    """
    blob = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<Q", len(blob)), blob]
    for t in _tensors(model):
        parts.append(struct.pack("<Q", t.size))
        parts.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_model(path) -> Model:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ModelLoadError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 16:
        raise ModelLoadError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise ModelLoadError(f"{path}: unsupported version {version}")
    (blob_len,) = struct.unpack_from("<Q", data, 8)
    pos = 16 + blob_len
    try:
        cfg = ModelConfig.from_dict(json.loads(data[16:pos].decode("utf-8")))
    except (ValueError, TypeError) as e:
        raise ModelLoadError(f"{path}: bad config blob: {e}") from e

    tensors = {}
    for name, shape in expected_shapes(cfg):
        if pos + 8 > len(data):
            raise ModelLoadError(f"{path}: missing tensor {name}")
        (count,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        if count != int(np.prod(shape)):
            raise ModelLoadError(f"{path}: tensor {name} has {count} elements, expected shape {shape}")
        end = pos + 4 * count
        if end > len(data):
            raise ModelLoadError(f"{path}: tensor {name} truncated")
        tensors[name] = np.frombuffer(data, dtype="<f4", count=count, offset=pos).astype(DTYPE).reshape(shape)
        pos = end
    if pos != len(data):
        raise ModelLoadError(f"{path}: {len(data) - pos} trailing bytes")

    layers = [
        LayerWeights(**{n: tensors[f"layers.{i}.{n}"] for n in LayerWeights.FIELDS})
        for i in range(cfg.n_layers)
    ]
    return Model(cfg, tensors["embed"], layers, tensors["final_norm"], tensors.get("lm_head"))


@dataclass
class KVCache:
    """Per-layer key/value store.

    ``k[layer]`` is ``None`` for layers in ``k_skip``; ``v`` is always kept.
    ``probe_k`` holds keys that a measurement run computed for skipped layers;
    it is not part of the inference footprint.
    """

    k: list[np.ndarray | None]  # [Dkv, T, hd]
    v: list[np.ndarray]  # [Dkv, T, hd]
    k_skip: frozenset[int] = frozenset()
    probe_k: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def length(self) -> int:
        return self.v[0].shape[1]

    def k_length(self, layer: int) -> int:
        k = self.k[layer]
        return 0 if k is None else k.shape[1]

    def drop_keys(self, layers) -> None:
        """Release keys of ``layers`` and mark them as skipped."""
        for i in layers:
            self.k[i] = None
        self.k_skip = self.k_skip | frozenset(layers)


@dataclass
class ForwardResult:
    logits: np.ndarray  # [N, V] for prefill, [V] for a decode step
    cache: KVCache
    capture: np.ndarray | None = None  # [L, D, N, N] or [L, D, T]
    probe: dict[int, np.ndarray] | None = None  # true attention of skipped layers
    hidden: np.ndarray | None = None  # final normed hidden states


def _check_tokens(cfg: ModelConfig, tokens) -> np.ndarray:
    t = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if t.size == 0:
        raise InputError("empty token sequence")
    if t.min() < 0 or t.max() >= cfg.vocab_size:
        raise InputError(f"token id out of range for vocab {cfg.vocab_size}")
    return t


def _check_overrides(cfg: ModelConfig, overrides, k_skip, shape, strict_rows: bool) -> dict:
    overrides = dict(overrides or {})
    k_skip = frozenset(k_skip)
    for layer in k_skip:
        if not 0 <= layer < cfg.n_layers:
            raise ShapeError(f"k_skip layer {layer} out of range")
        if layer not in overrides:
            raise ShapeError(f"layer {layer} skips keys but has no attention override")
    for layer, a in overrides.items():
        if layer not in k_skip:
            raise ShapeError(f"override for layer {layer} which is not in k_skip")
        a = np.asarray(a, dtype=DTYPE)
        want = (cfg.n_query_heads,) + shape
        if a.shape != want:
            raise ShapeError(f"override for layer {layer}: expected {want}, got {a.shape}")
        if not np.isfinite(a).all():
            raise ValueError(f"override for layer {layer} is not finite")
        if strict_rows and not np.allclose(a.sum(axis=-1), 1.0, atol=1e-4):
            raise ValueError(f"override rows for layer {layer} do not sum to 1")
        overrides[layer] = a
    return overrides


def _split_heads(x: np.ndarray, n_heads: int, hd: int) -> np.ndarray:
    # [T, n*hd] -> [n, T, hd]
    return x.reshape(x.shape[0], n_heads, hd).transpose(1, 0, 2)


def _ffn(x: np.ndarray, lw: LayerWeights, eps: float) -> np.ndarray:
    h = nx.rmsnorm(x, lw.ffn_norm, eps)
    g = nx.silu(nx.matmul(h, lw.w_gate, tag="ffn"))
    u = nx.matmul(h, lw.w_up, tag="ffn")
    return nx.matmul(g * u, lw.w_down, tag="ffn")


def forward_prefill(model: Model, tokens, capture: bool = False, overrides=None,
                    k_skip=(), strict_rows: bool = True, probe: bool = False) -> ForwardResult:
    """Full causal pass over ``tokens`` starting from an empty cache.

    ``overrides`` maps layer -> ``[n_query_heads, N, N]`` attention; each such
    layer must be in ``k_skip`` and vice versa. With ``probe`` the skipped
    layers additionally compute their own attention (returned in
    ``ForwardResult.probe``) and keys go to ``cache.probe_k``; the layer
    output still uses the override.
    """
    cfg = model.config
    toks = _check_tokens(cfg, tokens)
    n = toks.size
    overrides = _check_overrides(cfg, overrides, k_skip, (n, n), strict_rows)
    k_skip = frozenset(k_skip)
    D, Dkv, hd, g = cfg.n_query_heads, cfg.n_kv_heads, cfg.head_dim, cfg.group_size
    scale = 1.0 / np.sqrt(hd)
    positions = np.arange(n)

    x = model.embed[toks]
    cache = KVCache(k=[None] * cfg.n_layers, v=[None] * cfg.n_layers, k_skip=k_skip)
    cap = np.zeros((cfg.n_layers, D, n, n), dtype=DTYPE) if capture else None
    probes = {} if probe else None

    for li, lw in enumerate(model.layers):
        h = nx.rmsnorm(x, lw.attn_norm, cfg.norm_eps)
        v = _split_heads(nx.matmul(h, lw.wv, tag="v_proj"), Dkv, hd)
        cache.v[li] = v
        mapped = li in k_skip
        true_attn = None
        if not mapped or probe:
            q = nx.rope_apply(_split_heads(nx.matmul(h, lw.wq, tag=None if mapped else "q_proj"), D, hd),
                              positions, cfg.rope_theta)
            k = nx.rope_apply(_split_heads(nx.matmul(h, lw.wk, tag=None if mapped else "k_proj"), Dkv, hd),
                              positions, cfg.rope_theta)
            true_attn = np.empty((D, n, n), dtype=DTYPE)
            for hi in range(D):
                s = nx.matmul(q[hi], k[hi // g].T, tag=None if mapped else "qk")
                true_attn[hi] = nx.causal_softmax_rows(s, scale, tag=None if mapped else "softmax")
            if mapped:
                cache.probe_k[li] = k
                probes[li] = true_attn
            else:
                cache.k[li] = k
        attn = overrides[li] if mapped else true_attn
        if cap is not None:
            cap[li] = attn
        heads = [nx.matmul(attn[hi], v[hi // g], tag="av") for hi in range(D)]
        x = x + nx.matmul(np.concatenate(heads, axis=1), lw.wo, tag="o_proj")
        x = x + _ffn(x, lw, cfg.norm_eps)

    hf = nx.rmsnorm(x, model.final_norm, cfg.norm_eps)
    logits = nx.matmul(hf, model.output_matrix, tag="lm_head")
    return ForwardResult(logits, cache, cap, probes, hf)


def forward_decode_step(model: Model, token: int, cache: KVCache, capture: bool = False,
                        overrides=None, strict_rows: bool = True, probe: bool = False) -> ForwardResult:
    """Advance ``cache`` (in place) by one token and return next-token logits.

    Overrides are rows of length ``T + 1`` per query head, for exactly the
    layers in ``cache.k_skip``.
    """
    cfg = model.config
    toks = _check_tokens(cfg, [token])
    t = cache.length
    if t < 1:
        raise InputError("decode step needs a prefilled cache")
    overrides = _check_overrides(cfg, overrides, cache.k_skip, (t + 1,), strict_rows)
    D, Dkv, hd, g = cfg.n_query_heads, cfg.n_kv_heads, cfg.head_dim, cfg.group_size
    scale = 1.0 / np.sqrt(hd)
    pos = np.array([t])

    x = model.embed[toks]  # [1, H]
    cap = np.zeros((cfg.n_layers, D, t + 1), dtype=DTYPE) if capture else None
    probes = {} if probe else None

    for li, lw in enumerate(model.layers):
        h = nx.rmsnorm(x, lw.attn_norm, cfg.norm_eps)
        v_new = _split_heads(nx.matmul(h, lw.wv), Dkv, hd)
        v = np.concatenate([cache.v[li], v_new], axis=1)
        cache.v[li] = v
        mapped = li in cache.k_skip
        true_rows = None
        if not mapped or probe:
            q = nx.rope_apply(_split_heads(nx.matmul(h, lw.wq), D, hd), pos, cfg.rope_theta)
            k_new = nx.rope_apply(_split_heads(nx.matmul(h, lw.wk), Dkv, hd), pos, cfg.rope_theta)
            prev = cache.probe_k.get(li) if mapped else cache.k[li]
            if prev is None:
                raise InputError(f"layer {li} has no keys to probe")
            k = np.concatenate([prev, k_new], axis=1)
            if mapped:
                cache.probe_k[li] = k
            else:
                cache.k[li] = k
            true_rows = np.empty((D, t + 1), dtype=DTYPE)
            for hi in range(D):
                s = nx.matmul(q[hi], k[hi // g].T)
                true_rows[hi] = nx.causal_softmax_rows(s, scale, offset=t)[0]
            if mapped:
                probes[li] = true_rows
        rows = overrides[li] if mapped else true_rows
        if cap is not None:
            cap[li] = rows
        heads = [nx.matmul(rows[hi], v[hi // g]) for hi in range(D)]
        x = x + nx.matmul(np.concatenate(heads)[None, :], lw.wo)
        x = x + _ffn(x, lw, cfg.norm_eps)

    hf = nx.rmsnorm(x, model.final_norm, cfg.norm_eps)
    logits = nx.matmul(hf, model.output_matrix)[0]
    return ForwardResult(logits, cache, cap, probes, hf[0])


def greedy_next(logits: np.ndarray, history=(), repetition_penalty: float = 1.0) -> int:
    """Argmax with the usual repetition penalty; ties go to the lowest id.

    Logits of tokens seen in ``history`` are divided by the penalty when
    positive and multiplied when negative.
    """
    z = np.array(logits, dtype=DTYPE, copy=True).reshape(-1)
    if z.size == 0:
        raise InputError("empty logits")
    if repetition_penalty < 1:
        raise ValueError("repetition_penalty must be >= 1")
    if repetition_penalty != 1.0 and len(history):
        seen = np.unique(np.asarray(history, dtype=np.int64))
        seen = seen[(seen >= 0) & (seen < z.size)]
        p = DTYPE(repetition_penalty)
        z[seen] = np.where(z[seen] > 0, z[seen] / p, z[seen] * p)
    return int(np.argmax(z))


def init_model(cfg: ModelConfig, rng: np.random.Generator, std: float = 0.02,
               qk_std: float | None = None, vo_std: float | None = None) -> Model:
    """Random weights: normal(0, std) matrices, unit norm gains.

    ``qk_std`` overrides the scale of the query/key projections so heads get
    non-uniform attention patterns; ``vo_std`` that of the value/output
    projections.
    """
    qk_std = std if qk_std is None else qk_std
    vo_std = std if vo_std is None else vo_std

    def normal(shape, s):
        return rng.normal(0.0, s, size=shape).astype(DTYPE)

    shapes = dict(expected_shapes(cfg))
    layers = []
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        layers.append(LayerWeights(
            attn_norm=np.ones(shapes[p + "attn_norm"], DTYPE),
            wq=normal(shapes[p + "wq"], qk_std),
            wk=normal(shapes[p + "wk"], qk_std),
            wv=normal(shapes[p + "wv"], vo_std),
            wo=normal(shapes[p + "wo"], vo_std),
            ffn_norm=np.ones(shapes[p + "ffn_norm"], DTYPE),
            w_gate=normal(shapes[p + "w_gate"], std),
            w_up=normal(shapes[p + "w_up"], std),
            w_down=normal(shapes[p + "w_down"], std),
        ))
    embed = normal(shapes["embed"], std)
    lm_head = None if cfg.tie_embeddings else normal(shapes["lm_head"], std)
    return Model(cfg, embed, layers, np.ones(cfg.hidden_dim, DTYPE), lm_head)
