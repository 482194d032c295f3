"""Synthetic large/small model pairs with related attention.

The small model is carved out of the large one: every ``stride``-th layer
and the first ``subset`` query heads (with their key/value heads). The
large model's token embeddings live in the first ``subset * head_dim``
hidden dimensions, so the small model's first layer sees exactly the
input of the large model's first layer and, with ``sigma = 0``, reproduces
its copied heads' attention. Norm gains and epsilons of the small model are
rescaled to make that identity hold.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from iam.model import LayerWeights, Model, ModelConfig, forward_prefill, init_model, save_model
from iam.numerics import DTYPE
from iam.tokenizer import encode

DEFAULT_LARGE = ModelConfig(n_layers=8, n_query_heads=4, n_kv_heads=2, head_dim=16, ffn_dim=128)


@dataclass(frozen=True)
class FixtureSpec:
    large: ModelConfig = DEFAULT_LARGE
    stride: int = 2
    subset: int = 2
    sigma: float = 0.0
    seed: int = 0
    init_std: float = 0.02
    qk_std: float = 0.15
    embed_std: float = 0.2
    vo_std: float = 0.02
    # query columns of each head are scaled by exp(U(-spread, spread))
    temperature_spread: float = 1.0
    head_fit: "HeadFit | None" = None

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if not 1 <= self.subset <= self.large.n_query_heads:
            raise ValueError(f"subset {self.subset} outside 1..{self.large.n_query_heads}")
        if self.subset % self.large.group_size:
            raise ValueError("subset must cover whole key/value groups")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.head_fit is not None:
            d["head_fit"]["text"] = f"<{len(self.head_fit.text)} bytes>"
        return d


@dataclass(frozen=True)
class HeadFit:
    """Softmax-regression refit of the large model's output head on a text.

    Gives the otherwise random large model a head tuned to its own hidden
    states, so perturbing those states (e.g. by mapping) measurably hurts.
    """

    text: bytes = b""
    steps: int = 200
    lr: float = 0.5
    l2: float = 1e-4
    window: int = 256


def small_config(spec: FixtureSpec) -> ModelConfig:
    cl = spec.large
    frac = spec.subset / cl.n_query_heads
    return ModelConfig(
        n_layers=len(range(0, cl.n_layers, spec.stride)),
        n_query_heads=spec.subset,
        n_kv_heads=spec.subset // cl.group_size,
        head_dim=cl.head_dim,
        ffn_dim=max(1, int(round(cl.ffn_dim * frac))),
        vocab_size=cl.vocab_size,
        rope_theta=cl.rope_theta,
        norm_eps=cl.norm_eps * cl.n_query_heads / spec.subset,
        tie_embeddings=cl.tie_embeddings,
    )


def build_large(spec: FixtureSpec) -> Model:
    rng = np.random.default_rng(spec.seed)
    model = init_model(spec.large, rng, std=spec.init_std, qk_std=spec.qk_std, vo_std=spec.vo_std)
    hs = spec.subset * spec.large.head_dim
    model.embed[:] = 0.0
    model.embed[:, :hs] = rng.normal(0.0, spec.embed_std, size=(spec.large.vocab_size, hs))
    if spec.temperature_spread > 0:
        cfg = spec.large
        for lw in model.layers:
            f = np.exp(rng.uniform(-spec.temperature_spread, spec.temperature_spread, cfg.n_query_heads))
            lw.wq *= np.repeat(f, cfg.head_dim).astype(DTYPE)[None, :]
    if spec.head_fit is not None:
        fit_output_head(model, spec.head_fit)
    return model


def derive_small(large: Model, spec: FixtureSpec) -> Model:
    """Slice ``large`` into the small model and add N(0, sigma) noise to the copied matrices."""
    cl = large.config
    cs = small_config(spec)
    rng = np.random.default_rng([spec.seed, 1])
    hs = cs.hidden_dim
    qd, kvd, fs = cs.n_query_heads * cs.head_dim, cs.n_kv_heads * cs.head_dim, cs.ffn_dim
    gain = DTYPE(np.sqrt(cl.hidden_dim / hs))

    def noisy(a):
        a = np.array(a, dtype=DTYPE)
        if spec.sigma > 0:
            a += rng.normal(0.0, spec.sigma, size=a.shape).astype(DTYPE)
        return a

    layers = []
    for src in range(0, cl.n_layers, spec.stride):
        lw = large.layers[src]
        layers.append(LayerWeights(
            attn_norm=lw.attn_norm[:hs] * gain,
            wq=noisy(lw.wq[:hs, :qd]),
            wk=noisy(lw.wk[:hs, :kvd]),
            wv=noisy(lw.wv[:hs, :kvd]),
            wo=noisy(lw.wo[:qd, :hs]),
            ffn_norm=lw.ffn_norm[:hs] * gain,
            w_gate=noisy(lw.w_gate[:hs, :fs]),
            w_up=noisy(lw.w_up[:hs, :fs]),
            w_down=noisy(lw.w_down[:fs, :hs]),
        ))
    embed = np.array(large.embed[:, :hs])
    lm_head = None if cs.tie_embeddings else np.array(large.lm_head[:hs])
    return Model(cs, embed, layers, large.final_norm[:hs] * gain, lm_head)


def make_fixture_pair(spec: FixtureSpec, out_large=None, out_small=None) -> tuple[Model, Model]:
    """Build the pair; write IAMW files when paths are given."""
    large = build_large(spec)
    small = derive_small(large, spec)
    if out_large is not None:
        save_model(large, out_large)
    if out_small is not None:
        save_model(small, out_small)
    return large, small


def copied_head_rows(spec: FixtureSpec) -> list[int]:
    """Flat indices of large heads in layer 0 that have an exact copy in the small model."""
    return list(range(spec.subset))


def fit_output_head(model: Model, fit: HeadFit) -> None:
    """Refit ``model.lm_head`` in place by full-batch gradient descent on next-byte cross-entropy."""
    if model.config.tie_embeddings:
        raise ValueError("head fitting needs an untied output head")
    tokens = encode(fit.text)
    feats, targets = [], []
    for start in range(0, len(tokens) - 1, fit.window):
        chunk = tokens[start:start + fit.window + 1]
        if len(chunk) < 2:
            break
        feats.append(forward_prefill(model, chunk[:-1]).hidden)
        targets.extend(chunk[1:])
    x = np.concatenate(feats).astype(np.float64)
    n, V = x.shape[0], model.config.vocab_size
    onehot = np.zeros((n, V))
    onehot[np.arange(n), targets] = 1.0
    w = np.asarray(model.lm_head, dtype=np.float64) * 0.0
    for _ in range(fit.steps):
        z = x @ w
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        w -= fit.lr * (x.T @ (p - onehot) / n + fit.l2 * w)
    model.lm_head = w.astype(DTYPE)
