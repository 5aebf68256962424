"""Desk-scale decoder-only transformer with an explicit, prunable KV cache.

The model exposes the hidden state after the final normalization (the LM
head input) as its "feature" output, accepts arbitrary boolean attention
masks so a whole draft tree can be scored in one forward pass, and applies
rotary position encodings from caller-supplied position indices so tree
siblings can share a position.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import checkpoint as ckpt
from .errors import CapacityError, DimensionError, UsageError, ValidationError
from .tensor import (
    Tensor,
    add,
    embedding,
    mask_fill,
    matmul,
    mul,
    reshape,
    rmsnorm,
    rotary,
    scale,
    silu,
    softmax,
    transpose,
)

RMS_EPS = 1e-5
ROPE_BASE = 10000.0


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    hidden_dim: int = 128
    num_layers: int = 4
    num_heads: int = 4
    ffn_dim: int = 512
    max_positions: int = 512
    seed: int = 0

    def __post_init__(self):
        for field in ("vocab_size", "hidden_dim", "num_layers", "num_heads", "ffn_dim", "max_positions"):
            if getattr(self, field) <= 0:
                raise ValidationError(f"ModelConfig.{field} must be positive")
        if self.hidden_dim % self.num_heads != 0:
            raise ValidationError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}"
            )

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "hidden_dim": self.hidden_dim,
            "num_layers": self.num_layers,
            "num_heads": self.num_heads,
            "ffn_dim": self.ffn_dim,
            "max_positions": self.max_positions,
            "seed": self.seed,
        }


@dataclass
class LayerWeights:
    """One pre-norm decoder block: attention + gated FFN + their norms."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    w_gate: Tensor
    w_up: Tensor
    w_down: Tensor
    norm_attn: Tensor
    norm_ffn: Tensor

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{name}": getattr(self, name) for name in (
            "wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down", "norm_attn", "norm_ffn"
        )}


def rope_tables(config: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-position cos/sin tables of shape (max_positions, head_dim)."""
    half = config.head_dim // 2
    inv_freq = 1.0 / (ROPE_BASE ** (np.arange(0, half, dtype=np.float64) * 2.0 / config.head_dim))
    angles = np.arange(config.max_positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    cos = np.concatenate([np.cos(angles), np.cos(angles)], axis=-1).astype(np.float32)
    sin = np.concatenate([np.sin(angles), np.sin(angles)], axis=-1).astype(np.float32)
    return cos, sin


def _init_layer(rng: np.random.Generator, config: ModelConfig, out_scale: float) -> LayerWeights:
    h, f = config.hidden_dim, config.ffn_dim

    def normal(shape, std):
        return Tensor(rng.standard_normal(shape).astype(np.float32) * np.float32(std), requires_grad=True)

    return LayerWeights(
        wq=normal((h, h), 0.02),
        wk=normal((h, h), 0.02),
        wv=normal((h, h), 0.02),
        wo=normal((h, h), out_scale),
        w_gate=normal((h, f), 0.02),
        w_up=normal((h, f), 0.02),
        w_down=normal((f, h), out_scale),
        norm_attn=Tensor(np.ones(h, dtype=np.float32), requires_grad=True),
        norm_ffn=Tensor(np.ones(h, dtype=np.float32), requires_grad=True),
    )


class TransformerWeights:
    """Named parameter collection for the target model.

    The token embedding and the LM head are distinct tensors (no tying), so
    both can be lent to a draft head as frozen modules independently.
    """

    def __init__(self, config: ModelConfig, embedding: Tensor, layers: list[LayerWeights],
                 final_norm: Tensor, lm_head: Tensor):
        self.config = config
        self.embedding = embedding
        self.layers = layers
        self.final_norm = final_norm
        self.lm_head = lm_head
        self.rope_cos, self.rope_sin = rope_tables(config)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"embedding": self.embedding}
        for i, layer in enumerate(self.layers):
            out.update(layer.named(f"layers.{i}"))
        out["final_norm"] = self.final_norm
        out["lm_head"] = self.lm_head
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def save(self, path) -> None:
        tensors = {name: p.data for name, p in self.named_parameters().items()}
        ckpt.save_checkpoint(path, tensors, meta={"kind": "target", "config": self.config.to_dict()})

    @classmethod
    def load(cls, path) -> "TransformerWeights":
        tensors, meta = ckpt.load_checkpoint(path)
        if meta.get("kind") != "target":
            raise ckpt.CheckpointError(f"{path} is not a target-model checkpoint")
        config = ModelConfig(**meta["config"])
        weights = init_target(config)
        for name, p in weights.named_parameters().items():
            if name not in tensors:
                raise ckpt.CheckpointError(f"{path} missing tensor {name!r}")
            if tuple(tensors[name].shape) != p.data.shape:
                raise ckpt.CheckpointError(f"{path}: tensor {name!r} has shape {tensors[name].shape}")
            p.data = tensors[name]
        return weights


def init_target(config: ModelConfig) -> TransformerWeights:
    """Seeded scaled-normal initialization; deterministic given config.seed."""
    rng = np.random.default_rng(config.seed)
    h, v = config.hidden_dim, config.vocab_size
    out_scale = 0.02 / math.sqrt(2.0 * config.num_layers)
    emb = Tensor(rng.standard_normal((v, h)).astype(np.float32) * np.float32(0.02), requires_grad=True)
    layers = [_init_layer(rng, config, out_scale) for _ in range(config.num_layers)]
    final_norm = Tensor(np.ones(h, dtype=np.float32), requires_grad=True)
    head = Tensor(rng.standard_normal((h, v)).astype(np.float32) * np.float32(0.02), requires_grad=True)
    return TransformerWeights(config, emb, layers, final_norm, head)


class KVCache:
    """Per-layer attention keys/values indexed by absolute cache slot.

    Slots [0, occupancy) are live.  ``prune`` compacts the live region down
    to a kept subset so subsequent forwards behave as if rejected draft
    tokens had never been processed.  Capacity overflow is a hard error.
    """

    def __init__(self, num_layers: int, num_heads: int, head_dim: int, capacity: int):
        self.capacity = capacity
        self.k = np.zeros((num_layers, capacity, num_heads, head_dim), dtype=np.float32)
        self.v = np.zeros((num_layers, capacity, num_heads, head_dim), dtype=np.float32)
        # Float64 mirrors of the same values (float32 payloads upcast exactly)
        # so attention reads skip the per-call cast; maintained on every write.
        self.k64 = np.zeros((num_layers, capacity, num_heads, head_dim), dtype=np.float64)
        self.v64 = np.zeros((num_layers, capacity, num_heads, head_dim), dtype=np.float64)
        self.positions = np.zeros(capacity, dtype=np.int64)
        self.occupancy = 0

    @classmethod
    def for_config(cls, config: ModelConfig, num_layers: int | None = None) -> "KVCache":
        return cls(
            num_layers if num_layers is not None else config.num_layers,
            config.num_heads,
            config.head_dim,
            config.max_positions,
        )

    def reserve(self, count: int) -> int:
        """Check capacity for ``count`` new slots; returns the first slot index."""
        if self.occupancy + count > self.capacity:
            raise CapacityError(
                f"KV cache overflow: {self.occupancy} + {count} > capacity {self.capacity}"
            )
        return self.occupancy

    def write(self, layer: int, start: int, k_rows: np.ndarray, v_rows: np.ndarray) -> None:
        n = k_rows.shape[0]
        self.k[layer, start : start + n] = k_rows
        self.v[layer, start : start + n] = v_rows
        self.k64[layer, start : start + n] = self.k[layer, start : start + n]
        self.v64[layer, start : start + n] = self.v[layer, start : start + n]

    def commit(self, positions: Sequence[int]) -> None:
        n = len(positions)
        self.positions[self.occupancy : self.occupancy + n] = positions
        self.occupancy += n

    def truncate(self, occupancy: int) -> None:
        """Roll back to a previous occupancy (slots beyond it are never read)."""
        if occupancy > self.occupancy:
            raise UsageError(f"cannot truncate from {self.occupancy} up to {occupancy}")
        self.occupancy = occupancy

    def prune(self, keep_slots: Sequence[int]) -> None:
        keep = np.asarray(keep_slots, dtype=np.int64)
        if keep.size and (keep.min() < 0 or keep.max() >= self.occupancy):
            raise UsageError(f"prune slots out of range [0, {self.occupancy})")
        pos = self.positions[keep]
        if keep.size > 1 and not np.all(np.diff(pos) > 0):
            raise UsageError("prune slots must be strictly increasing in position")
        # Slots already in place (the untouched prefix) need no copying;
        # only the accepted-path slots beyond it move.
        stable = int(np.argmin(keep == np.arange(keep.size))) if keep.size else 0
        if keep.size and bool((keep == np.arange(keep.size)).all()):
            stable = keep.size
        moved = keep[stable:]
        dest = slice(stable, keep.size)
        self.k[:, dest] = self.k[:, moved]
        self.v[:, dest] = self.v[:, moved]
        self.k64[:, dest] = self.k64[:, moved]
        self.v64[:, dest] = self.v64[:, moved]
        self.positions[: keep.size] = pos
        self.occupancy = int(keep.size)

    def clone(self) -> "KVCache":
        other = KVCache(self.k.shape[0], self.k.shape[2], self.k.shape[3], self.capacity)
        other.k[:, : self.occupancy] = self.k[:, : self.occupancy]
        other.v[:, : self.occupancy] = self.v[:, : self.occupancy]
        other.k64[:, : self.occupancy] = self.k64[:, : self.occupancy]
        other.v64[:, : self.occupancy] = self.v64[:, : self.occupancy]
        other.positions[: self.occupancy] = self.positions[: self.occupancy]
        other.occupancy = self.occupancy
        return other


def prune_cache(cache: KVCache, keep_slots: Sequence[int]) -> KVCache:
    """Retain only ``keep_slots`` (compacted); returns the same cache object."""
    cache.prune(keep_slots)
    return cache


def causal_mask(prev_len: int, new_len: int) -> np.ndarray:
    """Mask for ``new_len`` chain tokens appended after ``prev_len`` slots."""
    cols = prev_len + new_len
    mask = np.zeros((new_len, cols), dtype=bool)
    for i in range(new_len):
        mask[i, : prev_len + i + 1] = True
    return mask


def _check_mask(mask: np.ndarray, new_len: int, total_len: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (new_len, total_len):
        raise DimensionError(
            f"attention mask shape {mask.shape} does not match ({new_len}, {total_len})"
        )
    prev = total_len - new_len
    own = mask[np.arange(new_len), prev + np.arange(new_len)]
    if not own.all():
        raise ValidationError("every query must attend to its own slot")
    return mask


def decoder_block(
    x: Tensor,
    layer: LayerWeights,
    num_heads: int,
    rope_cos: np.ndarray,
    rope_sin: np.ndarray,
    positions: np.ndarray,
    mask: np.ndarray,
    cache: KVCache | None,
    layer_index: int,
    cache_start: int,
) -> Tensor:
    """One pre-norm decoder block over ``x`` of shape (t, hidden).

    With a cache, this call's keys/values are written at
    ``cache_start : cache_start + t`` of ``layer_index`` and attention runs
    over slots [0, cache_start + t); without one, attention runs over the
    call's own tokens only.
    """
    t, h = x.data.shape
    dh = h // num_heads
    cos = rope_cos[positions][:, None, :]
    sin = rope_sin[positions][:, None, :]

    h1 = rmsnorm(x, layer.norm_attn, RMS_EPS)
    q = rotary(reshape(matmul(h1, layer.wq), (t, num_heads, dh)), cos, sin)
    k = rotary(reshape(matmul(h1, layer.wk), (t, num_heads, dh)), cos, sin)
    v = reshape(matmul(h1, layer.wv), (t, num_heads, dh))

    if cache is not None:
        cache.write(layer_index, cache_start, k.data, v.data)
        keys = Tensor(cache.k[layer_index, : cache_start + t])
        keys._f64 = cache.k64[layer_index, : cache_start + t]
        values = Tensor(cache.v[layer_index, : cache_start + t])
        values._f64 = cache.v64[layer_index, : cache_start + t]
    else:
        keys, values = k, v

    scores = matmul(transpose(q, (1, 0, 2)), transpose(keys, (1, 2, 0)))
    scores = scale(scores, 1.0 / math.sqrt(dh))
    if not mask.all():
        # An all-visible mask is an identity fill; skipping it is bitwise
        # equivalent and saves a copy on every single-token decode step.
        scores = mask_fill(scores, mask[None, :, :])
    att = softmax(scores, 1.0)
    ctx = matmul(att, transpose(values, (1, 0, 2)))
    ctx = reshape(transpose(ctx, (1, 0, 2)), (t, h))
    x = add(x, matmul(ctx, layer.wo))

    h2 = rmsnorm(x, layer.norm_ffn, RMS_EPS)
    gated = mul(silu(matmul(h2, layer.w_gate)), matmul(h2, layer.w_up))
    return add(x, matmul(gated, layer.w_down))


def forward(
    weights: TransformerWeights,
    tokens: Sequence[int],
    positions: Sequence[int],
    mask: np.ndarray,
    cache: KVCache | None = None,
) -> tuple[Tensor, Tensor]:
    """Run the target model over ``tokens``.

    Returns (features, logits) where features is the post-final-norm hidden
    state per input token (the LM head input) and logits = features @ lm_head.
    With a cache, this call's keys/values are appended to it.
    """
    config = weights.config
    tokens = np.asarray(tokens, dtype=np.int64)
    positions = np.asarray(positions, dtype=np.int64)
    t = tokens.shape[0]
    if t == 0:
        raise UsageError("forward requires at least one token")
    if positions.shape[0] != t:
        raise DimensionError(f"positions length {positions.shape[0]} != token count {t}")
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        raise ValidationError("token id out of vocabulary range")
    if positions.max() >= config.max_positions:
        raise CapacityError(
            f"position {int(positions.max())} >= max_positions {config.max_positions}"
        )
    start = cache.reserve(t) if cache is not None else 0
    mask = _check_mask(mask, t, start + t)

    x = embedding(weights.embedding, tokens)
    for i, layer in enumerate(weights.layers):
        x = decoder_block(
            x, layer, config.num_heads, weights.rope_cos, weights.rope_sin,
            positions, mask, cache, i, start,
        )
    features = rmsnorm(x, weights.final_norm, RMS_EPS)
    logits = matmul(features, weights.lm_head)
    if cache is not None:
        cache.commit(list(positions))
    return features, logits


def lm_head(weights: TransformerWeights, features) -> Tensor:
    """Linear map from feature space to vocabulary logits (no bias)."""
    feats = features if isinstance(features, Tensor) else Tensor(features)
    if feats.data.shape[-1] != weights.config.hidden_dim:
        raise DimensionError(
            f"feature width {feats.data.shape[-1]} != hidden_dim {weights.config.hidden_dim}"
        )
    return matmul(feats, weights.lm_head)


def distribution(logits_row: np.ndarray, temperature: float) -> np.ndarray:
    """Token distribution for one logits row at the given temperature.

    temperature == 0 collapses to a one-hot at the argmax (lowest index on
    ties), matching greedy decoding.
    """
    return softmax(Tensor(np.asarray(logits_row, dtype=np.float32)), temperature).data


def sample_token(dist: np.ndarray, temperature: float, rng: np.random.Generator) -> int:
    """Draw one token id from ``dist``.

    ``dist`` must already be at the desired temperature; the temperature
    argument only selects between argmax (0) and an inverse-CDF draw that
    consumes exactly one uniform variate.
    """
    d = np.asarray(dist, dtype=np.float64)
    if d.min() < -1e-9:
        raise ValidationError("distribution has negative entries")
    if abs(d.sum() - 1.0) > 1e-4:
        raise ValidationError(f"distribution sums to {d.sum():.6f}, expected 1")
    if temperature == 0.0:
        return int(np.argmax(d))
    u = rng.random()
    cdf = np.cumsum(d)
    idx = int(np.searchsorted(cdf, u, side="right"))
    idx = min(idx, d.shape[0] - 1)
    while idx > 0 and d[idx] <= 0.0:
        idx -= 1
    return idx
