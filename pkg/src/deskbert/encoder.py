"""Bias-free bidirectional transformer encoder.

Blocks are pre-norm: ``x += attn(rmsnorm(x)); x += ffn(rmsnorm(x))``. Attention
is grouped-query with rotary position embeddings, the feed-forward is SwiGLU,
and the MLM head projects the final normalized hidden state onto the vocabulary.
Weights multiply from the right (``x @ W`` with ``W`` shaped [d_in, d_out]).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from typing import Iterator, Mapping, NamedTuple

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor


@dataclass(frozen=True)
class EncoderConfig:
    n_layers: int = 2
    d_model: int = 32
    d_ffn: int = 64
    n_heads: int = 4
    n_kv_heads: int = 2
    vocab_size: int = 1024
    rope_theta: float = 10_000.0
    rmsnorm_eps: float = 1e-5
    max_seq_len: int = 512
    init_std: float = 0.02
    tie_embeddings: bool = False

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def kv_dim(self) -> int:
        return self.n_kv_heads * self.head_dim

    def problems(self) -> list[str]:
        out = []
        for f in ("n_layers", "d_model", "d_ffn", "n_heads", "n_kv_heads", "vocab_size", "max_seq_len"):
            if getattr(self, f) < 1:
                out.append(f"{f} must be positive")
        for f in ("rope_theta", "rmsnorm_eps", "init_std"):
            if not getattr(self, f) > 0:
                out.append(f"{f} must be positive")
        if out:
            return out
        if self.n_heads % self.n_kv_heads:
            out.append(f"n_heads ({self.n_heads}) not divisible by n_kv_heads ({self.n_kv_heads})")
        if self.d_model % self.n_heads:
            out.append(f"d_model ({self.d_model}) not divisible by n_heads ({self.n_heads})")
        elif self.head_dim % 2:
            out.append(f"head_dim ({self.head_dim}) must be even for rotary embeddings")
        return out

    def validate(self) -> "EncoderConfig":
        problems = self.problems()
        if problems:
            raise ValueError("invalid encoder config: " + "; ".join(problems))
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "EncoderConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown encoder config keys: {', '.join(unknown)}")
        return cls(**dict(d))


# Full-scale geometry. Weight init is N(0, variance 0.2), hence std sqrt(0.2).
_FULL_SCALE = dict(vocab_size=128_000, rope_theta=250_000.0, rmsnorm_eps=1e-5, max_seq_len=8192, init_std=math.sqrt(0.2))

PRESETS: dict[str, EncoderConfig] = {
    "210m": EncoderConfig(n_layers=12, d_model=768, d_ffn=3072, n_heads=12, n_kv_heads=12, **_FULL_SCALE),
    "610m": EncoderConfig(n_layers=26, d_model=1152, d_ffn=4096, n_heads=18, n_kv_heads=6, **_FULL_SCALE),
    "2.1b": EncoderConfig(n_layers=32, d_model=2304, d_ffn=6144, n_heads=18, n_kv_heads=6, **_FULL_SCALE),
    "tiny": EncoderConfig(n_layers=2, d_model=32, d_ffn=64, n_heads=4, n_kv_heads=2, vocab_size=1024, max_seq_len=512),
}


def preset(name: str, **overrides) -> EncoderConfig:
    try:
        cfg = PRESETS[name.lower()]
    except KeyError:
        raise ValueError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(cfg, **overrides)


def count_params(config: EncoderConfig, include_mlm_head: bool = False) -> int:
    """Closed-form parameter count.

    Per layer: Wq and Wo (d*d each), Wk and Wv (d*kv_dim each), three FFN
    matrices (d*f each) and two RMSNorm gains (d each). Add the token embedding
    (V*d) and the final gain (d). The untied MLM projection (d*V) is counted only
    with ``include_mlm_head``; the published model sizes exclude it.
    """
    d, f, V = config.d_model, config.d_ffn, config.vocab_size
    per_layer = 2 * d * d + 2 * d * config.kv_dim + 3 * d * f + 2 * d
    total = V * d + config.n_layers * per_layer + d
    if include_mlm_head and not config.tie_embeddings:
        total += d * V
    return total


LAYER_PARAMS = ("attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w1", "w3", "w2")


class EncoderOutput(NamedTuple):
    hidden: Tensor
    logits: Tensor


class EncoderModel:
    """Parameter container plus forward pass."""

    def __init__(self, config: EncoderConfig, params: dict[str, Tensor]):
        self.config = config.validate()
        self.params = params

    @classmethod
    def init(cls, config: EncoderConfig, seed: int = 0, dtype=None) -> "EncoderModel":
        config.validate()
        rng = np.random.default_rng(seed)
        dtype = np.dtype(dtype or T.get_default_dtype())
        d, f, V, kv = config.d_model, config.d_ffn, config.vocab_size, config.kv_dim
        shapes: dict[str, tuple[int, ...] | None] = {"embed": (V, d)}
        for i in range(config.n_layers):
            shapes.update({
                f"layers.{i}.attn_norm": None,
                f"layers.{i}.wq": (d, d),
                f"layers.{i}.wk": (d, kv),
                f"layers.{i}.wv": (d, kv),
                f"layers.{i}.wo": (d, d),
                f"layers.{i}.ffn_norm": None,
                f"layers.{i}.w1": (d, f),
                f"layers.{i}.w3": (d, f),
                f"layers.{i}.w2": (f, d),
            })
        shapes["final_norm"] = None
        if not config.tie_embeddings:
            shapes["mlm_head"] = (d, V)
        params = {}
        for name, shape in shapes.items():
            data = np.ones(d) if shape is None else rng.normal(0.0, config.init_std, size=shape)
            params[name] = Tensor(data, requires_grad=True, dtype=dtype, name=name)
        return cls(config, params)

    # -- parameter plumbing -------------------------------------------------
    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise KeyError(f"state mismatch on: {', '.join(sorted(missing))}")
        for k, p in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise DimensionError(f"{k}: expected shape {p.shape}, got {arr.shape}")
            p.data = np.ascontiguousarray(arr, dtype=p.dtype)
            p.grad = None

    def astype(self, dtype) -> "EncoderModel":
        params = {k: Tensor(v.data.copy(), requires_grad=True, dtype=dtype, name=k) for k, v in self.params.items()}
        return EncoderModel(self.config, params)

    def copy(self) -> "EncoderModel":
        return self.astype(next(iter(self.params.values())).dtype)

    def layer(self, i: int) -> dict[str, Tensor]:
        return {n: self.params[f"layers.{i}.{n}"] for n in LAYER_PARAMS}

    def output_projection(self) -> Tensor:
        return self.params["embed"].T if self.config.tie_embeddings else self.params["mlm_head"]

    def __call__(self, ids, pad_mask=None, rope_theta: float | None = None) -> EncoderOutput:
        return forward(self, ids, pad_mask, rope_theta)


# -- building blocks ------------------------------------------------------

def rmsnorm(x: Tensor, gain: Tensor, eps: float) -> Tensor:
    if eps <= 0:
        raise ValueError("rmsnorm eps must be positive")
    if x.shape[-1] == 0:
        raise DimensionError("rmsnorm over a zero-width axis")
    ms = (x * x).mean(axis=-1, keepdims=True)
    return x * (ms + eps) ** -0.5 * gain


def rope_rotate(x: Tensor, positions, theta: float) -> Tensor:
    return T.rope(x, positions, theta)


def swish(z: Tensor) -> Tensor:
    return z * z.sigmoid()


def swiglu_ffn(x: Tensor, w1: Tensor, w2: Tensor, w3: Tensor) -> Tensor:
    return (swish(x @ w1) * (x @ w3)) @ w2


def _key_padding(pad_mask, batch: int, seq: int) -> np.ndarray | None:
    if pad_mask is None:
        return None
    pad = np.asarray(pad_mask, dtype=bool).reshape(batch, seq)
    full = np.flatnonzero(pad.all(axis=1))
    if full.size:
        raise ValueError(f"sequence {int(full[0])} in the batch is entirely padding")
    return pad


def gqa_attention(
    x: Tensor,
    weights: Mapping[str, Tensor],
    positions,
    pad_mask,
    n_heads: int,
    n_kv_heads: int,
    rope_theta: float,
) -> Tensor:
    """Bidirectional grouped-query attention.

    ``x`` is [seq, d] or [batch, seq, d]. Query head ``h`` reads key/value head
    ``h // (n_heads // n_kv_heads)``. Padded keys get a score of -inf.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
        pad_mask = None if pad_mask is None else np.asarray(pad_mask)[None]
    B, S, d = x.shape
    hd = d // n_heads
    group = n_heads // n_kv_heads
    pad = _key_padding(pad_mask, B, S)

    q = (x @ weights["wq"]).reshape(B, S, n_heads, hd)
    k = (x @ weights["wk"]).reshape(B, S, n_kv_heads, hd)
    v = (x @ weights["wv"]).reshape(B, S, n_kv_heads, hd)
    q = T.rope(q, positions, rope_theta)
    k = T.rope(k, positions, rope_theta)

    # [B, kv, group, S, hd] against [B, kv, 1, hd, S]
    q = q.reshape(B, S, n_kv_heads, group, hd).transpose(0, 2, 3, 1, 4)
    k = k.reshape(B, S, n_kv_heads, 1, hd).transpose(0, 2, 3, 4, 1)
    v = v.reshape(B, S, n_kv_heads, 1, hd).transpose(0, 2, 3, 1, 4)
    scores = (q @ k) * (1.0 / math.sqrt(hd))
    if pad is not None:
        bias = np.where(pad, -np.inf, 0.0).astype(x.dtype).reshape(B, 1, 1, 1, S)
        scores = scores + Tensor(bias, dtype=x.dtype)
    probs = T.softmax(scores, axis=-1)
    ctx = (probs @ v).transpose(0, 3, 1, 2, 4).reshape(B, S, d)
    out = ctx @ weights["wo"]
    return out.reshape(S, d) if squeeze else out


def forward(model: EncoderModel, ids, pad_mask=None, rope_theta: float | None = None) -> EncoderOutput:
    """Embed, run the blocks, normalize, project to vocabulary logits."""
    hidden = encode(model, ids, pad_mask, rope_theta)
    return EncoderOutput(hidden, hidden @ model.output_projection())


def encode(model: EncoderModel, ids, pad_mask=None, rope_theta: float | None = None) -> Tensor:
    """Final normalized hidden states [batch, seq, d_model]."""
    cfg = model.config
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None]
    B, S = ids.shape
    if S > cfg.max_seq_len:
        raise ValueError(f"sequence length {S} exceeds max_seq_len {cfg.max_seq_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ValueError(f"token ids must lie in [0, {cfg.vocab_size})")
    theta = cfg.rope_theta if rope_theta is None else rope_theta
    if pad_mask is not None:
        pad_mask = np.asarray(pad_mask, dtype=bool).reshape(B, S)
    positions = np.arange(S)

    x = T.embedding(model.params["embed"], ids)
    for i in range(cfg.n_layers):
        w = model.layer(i)
        h = rmsnorm(x, w["attn_norm"], cfg.rmsnorm_eps)
        x = x + gqa_attention(h, w, positions, pad_mask, cfg.n_heads, cfg.n_kv_heads, theta)
        h = rmsnorm(x, w["ffn_norm"], cfg.rmsnorm_eps)
        x = x + swiglu_ffn(h, w["w1"], w["w2"], w["w3"])
    return rmsnorm(x, model.params["final_norm"], cfg.rmsnorm_eps)
