"""Feature-prediction draft head.

A single fully-connected fusion layer plus one decoder block that predicts
the target model's next feature from the running feature sequence and the
token sequence advanced by one step.  The token embedding and LM head are
borrowed from the target model and stay frozen; only the fusion layer and
the decoder block train.

Alternative input wirings (unshifted token, token only, feature only) are
supported as ablation modes; they share the block architecture and differ
only in how the input stream is assembled.
"""

from __future__ import annotations

import enum
from typing import Sequence

import numpy as np

from . import checkpoint as ckpt
from .errors import DimensionError, UsageError
from .model import KVCache, ModelConfig, TransformerWeights, _init_layer, decoder_block
from .tensor import Tensor, add, concat, embedding, matmul, softmax


class DraftInputMode(enum.Enum):
    """What the draft head consumes at each position.

    ``FEATURE_SHIFTED_TOKEN`` pairs feature f_i with token t_{i+1}, so the
    sampled continuation disambiguates which next feature to predict.  The
    other three are ablation wirings.
    """

    FEATURE_SHIFTED_TOKEN = "feature_shifted_token"
    FEATURE_UNSHIFTED_TOKEN = "feature_unshifted_token"
    TOKEN_ONLY = "token_only"
    FEATURE_ONLY = "feature_only"

    @property
    def uses_features(self) -> bool:
        return self is not DraftInputMode.TOKEN_ONLY

    @property
    def uses_tokens(self) -> bool:
        return self is not DraftInputMode.FEATURE_ONLY

    @property
    def fused(self) -> bool:
        return self.uses_features and self.uses_tokens


class DraftHead:
    """Trainable fusion + decoder block with frozen target embedding/LM head."""

    def __init__(self, config: ModelConfig, mode: DraftInputMode, fc_w: Tensor | None,
                 fc_b: Tensor | None, layer, target: TransformerWeights):
        self.config = config
        self.mode = mode
        self.fc_w = fc_w
        self.fc_b = fc_b
        self.layer = layer
        # Frozen views share the target's arrays; no gradient ever reaches them.
        self.embedding = Tensor(target.embedding.data)
        self.lm_head = Tensor(target.lm_head.data)
        self.rope_cos = target.rope_cos
        self.rope_sin = target.rope_sin

    def trainable_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if self.mode.fused:
            out["fc_w"] = self.fc_w
            out["fc_b"] = self.fc_b
        out.update(self.layer.named("layer"))
        return out

    def new_cache(self, capacity: int) -> KVCache:
        return KVCache(1, self.config.num_heads, self.config.head_dim, capacity)

    def save(self, path) -> None:
        tensors = {name: p.data for name, p in self.trainable_parameters().items()}
        meta = {"kind": "draft_head", "mode": self.mode.value, "config": self.config.to_dict()}
        ckpt.save_checkpoint(path, tensors, meta)

    @classmethod
    def load(cls, path, target: TransformerWeights) -> "DraftHead":
        tensors, meta = ckpt.load_checkpoint(path)
        if meta.get("kind") != "draft_head":
            raise ckpt.CheckpointError(f"{path} is not a draft-head checkpoint")
        config = ModelConfig(**meta["config"])
        if config.to_dict() != target.config.to_dict():
            raise ckpt.CheckpointError(f"{path}: draft head config does not match target config")
        head = init_draft_head(target, DraftInputMode(meta["mode"]), seed=0)
        for name, p in head.trainable_parameters().items():
            if name not in tensors:
                raise ckpt.CheckpointError(f"{path} missing tensor {name!r}")
            p.data = tensors[name]
        return head


def init_draft_head(target: TransformerWeights, mode: DraftInputMode = DraftInputMode.FEATURE_SHIFTED_TOKEN,
                    seed: int = 0) -> DraftHead:
    """Seeded draft head tied to ``target``'s embedding and LM head.

    In fused modes the fusion matrix starts as identity on the feature half
    (features pass through unchanged at step zero), which shortens training
    noticeably at toy scale.
    """
    config = target.config
    rng = np.random.default_rng(seed)
    h = config.hidden_dim
    fc_w = fc_b = None
    if mode.fused:
        w = np.zeros((2 * h, h), dtype=np.float32)
        w[:h] = np.eye(h, dtype=np.float32)
        w += rng.standard_normal((2 * h, h)).astype(np.float32) * np.float32(0.01)
        fc_w = Tensor(w, requires_grad=True)
        fc_b = Tensor(np.zeros(h, dtype=np.float32), requires_grad=True)
    layer = _init_layer(rng, config, 0.02)
    return DraftHead(config, mode, fc_w, fc_b, layer, target)


def build_draft_input(head: DraftHead, features, tokens) -> Tensor:
    """Assemble the per-position input stream for the head's mode.

    Fused modes concatenate each feature with its paired token embedding
    into width 2*hidden; single-stream modes pass width hidden through
    directly (no fusion projection).  Which token pairs with which feature
    (shifted or not) is the caller's contract.
    """
    if head.mode.uses_features:
        if features is None:
            raise UsageError(f"mode {head.mode.value} requires a feature stream")
        feats = features if isinstance(features, Tensor) else Tensor(np.asarray(features, dtype=np.float32))
        if feats.data.ndim != 2 or feats.data.shape[1] != head.config.hidden_dim:
            raise DimensionError(f"feature stream shape {feats.data.shape} invalid")
    if head.mode.uses_tokens:
        if tokens is None:
            raise UsageError(f"mode {head.mode.value} requires a token stream")
        toks = np.asarray(tokens, dtype=np.int64)
        emb = embedding(head.embedding, toks)
    if not head.mode.uses_tokens:
        return feats
    if not head.mode.uses_features:
        return emb
    if feats.data.shape[0] != emb.data.shape[0]:
        raise UsageError(
            f"feature count {feats.data.shape[0]} != token count {emb.data.shape[0]}"
        )
    return concat(feats, emb, axis=-1)


def draft_forward(
    head: DraftHead,
    features,
    tokens,
    positions: Sequence[int],
    mask: np.ndarray,
    cache: KVCache | None = None,
) -> Tensor:
    """Predict one next feature per input position.

    ``features``/``tokens`` are the mode-appropriate aligned streams (for
    the shifted mode, tokens advanced one step relative to features).
    """
    x = build_draft_input(head, features, tokens)
    if head.mode.fused:
        x = add(matmul(x, head.fc_w), head.fc_b)
    t = x.data.shape[0]
    positions = np.asarray(positions, dtype=np.int64)
    if positions.shape[0] != t:
        raise DimensionError(f"positions length {positions.shape[0]} != input count {t}")
    start = cache.reserve(t) if cache is not None else 0
    out = decoder_block(
        x, head.layer, head.config.num_heads, head.rope_cos, head.rope_sin,
        positions, np.asarray(mask, dtype=bool), cache, 0, start,
    )
    if cache is not None:
        cache.commit(list(positions))
    return out


def predict_distribution(head: DraftHead, feature: np.ndarray, temperature: float) -> np.ndarray:
    """Token distribution implied by a predicted feature via the frozen LM head."""
    feat = np.asarray(feature, dtype=np.float32)
    if feat.shape[-1] != head.config.hidden_dim:
        raise DimensionError(f"feature width {feat.shape[-1]} != hidden_dim {head.config.hidden_dim}")
    logits = matmul(Tensor(feat.reshape(1, -1)), head.lm_head)
    return softmax(logits, temperature).data[0]
