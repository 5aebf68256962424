"""Training: the toy target model and the feature-prediction draft head.

The draft head trains on teacher-forced material extracted from the target
in one pass per sequence: true features, input tokens, next-feature
regression targets, and soft next-next-token distributions through the
frozen LM head.  Input features are perturbed with uniform noise each time
a batch is assembled, so the head learns to tolerate its own prediction
error at draft time; regression targets stay clean.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .corpus import Corpus
from .draft import DraftHead, DraftInputMode, draft_forward, init_draft_head
from .errors import UsageError, ValidationError
from .model import ModelConfig, TransformerWeights, causal_mask, forward, init_target
from .tensor import (
    OptimizerState,
    Tensor,
    adamw_step,
    add,
    clip_grad_norm,
    cross_entropy_indices,
    matmul,
    no_grad,
    scale,
    smooth_l1,
    soft_cross_entropy,
    softmax,
)

SPLIT_OVERLAP = 16


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.01
    grad_clip: float = 0.5
    noise_magnitude: float = 0.1
    w_cls: float = 0.1
    epochs: int = 8
    batch_size: int = 16
    seed: int = 0
    data_mode: str = "fixed_dataset"

    def __post_init__(self):
        if self.w_cls < 0:
            raise ValidationError("w_cls must be >= 0")
        if self.noise_magnitude < 0:
            raise ValidationError("noise_magnitude must be >= 0")
        if self.data_mode not in ("fixed_dataset", "target_generated"):
            raise ValidationError(f"unknown data_mode {self.data_mode!r}")


@dataclass(eq=False)
class TrainingSequence:
    """Teacher-forced material for one corpus sequence."""

    tokens: np.ndarray    # (n,) int64
    features: np.ndarray  # (n, hidden) true target features

    @property
    def num_pairs(self) -> int:
        # Position i needs token i+1 as input and the position-(i+2)
        # distribution as its soft target, so a length-n sequence yields n-2.
        return max(0, len(self.tokens) - 2)


@dataclass
class CurveRow:
    epoch: int
    step: int
    l_reg: float
    l_cls: float
    l_total: float


def write_curve(rows: Iterable[CurveRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "step", "l_reg", "l_cls", "l_total"])
        for r in rows:
            writer.writerow([r.epoch, r.step, f"{r.l_reg:.6f}", f"{r.l_cls:.6f}", f"{r.l_total:.6f}"])


def _split_sequence(tokens: list[int], max_len: int) -> list[list[int]]:
    if len(tokens) <= max_len:
        return [tokens]
    chunks = []
    start = 0
    while start < len(tokens):
        chunk = tokens[start : start + max_len]
        if len(chunk) > SPLIT_OVERLAP or start == 0:
            chunks.append(chunk)
        start += max_len - SPLIT_OVERLAP
    return chunks


def collect_training_pairs(
    target: TransformerWeights,
    corpus: Corpus,
    data_mode: str = "fixed_dataset",
) -> list[TrainingSequence]:
    """Teacher-forced extraction of (features, tokens) per sequence.

    ``target_generated`` first replaces each sequence's continuation after
    a short prompt prefix with the target's own greedy generation, then
    extracts identically.
    """
    from .engine import Engine, GenerationParams  # local import to avoid a cycle

    config = target.config
    out: list[TrainingSequence] = []
    engine = Engine(target) if data_mode == "target_generated" else None
    for seq in corpus.sequences:
        seq = list(seq)
        if data_mode == "target_generated" and len(seq) >= 8:
            prefix = seq[: max(4, min(16, len(seq) // 4))]
            params = GenerationParams(mode="vanilla", temperature=0.0,
                                      max_new_tokens=len(seq) - len(prefix), seed=0)
            generated, _ = engine.generate(prefix, params)
            seq = prefix + generated
        for chunk in _split_sequence(seq, config.max_positions):
            if len(chunk) < 3:
                continue
            with no_grad():
                feats, _ = forward(target, chunk, list(range(len(chunk))),
                                   causal_mask(0, len(chunk)))
            out.append(TrainingSequence(np.asarray(chunk, dtype=np.int64), feats.data.copy()))
    if not out:
        raise ValidationError("corpus yielded no usable training sequences")
    return out


def augment_features(features: np.ndarray, magnitude: float, rng: np.random.Generator) -> np.ndarray:
    """Add i.i.d. uniform noise in [-magnitude, +magnitude] elementwise."""
    if magnitude < 0:
        raise UsageError("noise magnitude must be >= 0")
    if magnitude == 0:
        return features
    noise = rng.uniform(-magnitude, magnitude, size=features.shape).astype(features.dtype)
    return features + noise


def _mode_views(seq: TrainingSequence, mode: DraftInputMode):
    """Slice one sequence into (input features, input tokens, regression
    target rows, cls-target feature rows) for the head's wiring."""
    n = len(seq.tokens)
    if mode is DraftInputMode.FEATURE_SHIFTED_TOKEN:
        return seq.features[: n - 2], seq.tokens[1 : n - 1], seq.features[1 : n - 1], seq.features[1 : n - 1]
    if mode is DraftInputMode.FEATURE_UNSHIFTED_TOKEN:
        return seq.features[: n - 2], seq.tokens[: n - 2], seq.features[1 : n - 1], seq.features[1 : n - 1]
    if mode is DraftInputMode.TOKEN_ONLY:
        # Predicts the feature at its own position (standard LM alignment).
        return None, seq.tokens[: n - 2], seq.features[: n - 2], seq.features[: n - 2]
    return seq.features[: n - 2], None, seq.features[1 : n - 1], seq.features[1 : n - 1]


def combined_loss(
    predicted: Tensor,
    target_features: np.ndarray,
    target_dists: np.ndarray,
    lm_head: Tensor,
    w_cls: float,
) -> tuple[Tensor, float, float]:
    """Smooth-L1 feature regression plus weighted soft cross-entropy through
    the frozen LM head.  Returns (loss, l_reg value, l_cls value)."""
    reg = smooth_l1(predicted, Tensor(target_features))
    logits = matmul(predicted, lm_head)
    cls = soft_cross_entropy(Tensor(target_dists), logits)
    total = add(reg, scale(cls, w_cls))
    return total, reg.item(), cls.item()


def _cls_target_dists(target: TransformerWeights, feature_rows: np.ndarray) -> np.ndarray:
    with no_grad():
        logits = matmul(Tensor(feature_rows), target.lm_head)
        return softmax(logits, 1.0).data


def train_draft_head(
    target: TransformerWeights,
    corpus: Corpus,
    config: TrainConfig,
    mode: DraftInputMode = DraftInputMode.FEATURE_SHIFTED_TOKEN,
    head: DraftHead | None = None,
) -> tuple[DraftHead, list[CurveRow]]:
    """Train a draft head against the frozen target; returns (head, curve).

    The embedding and LM head are never touched.  Aborts with a diagnostic
    if the loss diverges to NaN.
    """
    sequences = collect_training_pairs(target, corpus, config.data_mode)
    if head is None:
        head = init_draft_head(target, mode, seed=config.seed)
    params = list(head.trainable_parameters().values())
    state = OptimizerState(params)
    rng = np.random.default_rng(config.seed)
    curve: list[CurveRow] = []

    for epoch in range(config.epochs):
        order = rng.permutation(len(sequences))
        step = 0
        for batch_start in range(0, len(order), config.batch_size):
            batch = [sequences[i] for i in order[batch_start : batch_start + config.batch_size]]
            batch = [s for s in batch if s.num_pairs > 0]
            if not batch:
                continue
            for p in params:
                p.zero_grad()
            reg_sum = cls_sum = 0.0
            for seq in batch:
                in_feats, in_toks, reg_rows, cls_rows = _mode_views(seq, mode)
                if in_feats is not None:
                    in_feats = augment_features(in_feats, config.noise_magnitude, rng)
                t = len(reg_rows)
                predicted = draft_forward(head, in_feats, in_toks, list(range(t)),
                                          causal_mask(0, t))
                cls_dists = _cls_target_dists(target, cls_rows)
                loss, l_reg, l_cls = combined_loss(predicted, reg_rows, cls_dists,
                                                   head.lm_head, config.w_cls)
                scale(loss, 1.0 / len(batch)).backward()
                reg_sum += l_reg
                cls_sum += l_cls
            grads = [p.grad for p in params if p.grad is not None]
            if any(not np.isfinite(g).all() for g in grads):
                raise RuntimeError(
                    f"draft-head training diverged (non-finite gradient) at epoch {epoch} step {step}"
                )
            clip_grad_norm(grads, config.grad_clip)
            adamw_step(state, config.learning_rate, config.betas, config.weight_decay)
            l_reg = reg_sum / len(batch)
            l_cls = cls_sum / len(batch)
            total = l_reg + config.w_cls * l_cls
            if not np.isfinite(total):
                raise RuntimeError(f"draft-head training diverged at epoch {epoch} step {step}")
            curve.append(CurveRow(epoch, step, l_reg, l_cls, total))
            step += 1
    return head, curve


def train_target_toy(
    corpus: Corpus,
    model_config: ModelConfig,
    config: TrainConfig,
) -> tuple[TransformerWeights, list[CurveRow]]:
    """Next-token cross-entropy training of the toy target transformer."""
    weights = init_target(model_config)
    params = weights.parameters()
    state = OptimizerState(params)
    rng = np.random.default_rng(config.seed)
    chunks: list[list[int]] = []
    for seq in corpus.sequences:
        for chunk in _split_sequence(list(seq), model_config.max_positions):
            if len(chunk) >= 2:
                chunks.append(chunk)
    curve: list[CurveRow] = []

    for epoch in range(config.epochs):
        order = rng.permutation(len(chunks))
        step = 0
        for batch_start in range(0, len(order), config.batch_size):
            batch = [chunks[i] for i in order[batch_start : batch_start + config.batch_size]]
            for p in params:
                p.zero_grad()
            ce_sum = 0.0
            for chunk in batch:
                n = len(chunk)
                _, logits = forward(weights, chunk, list(range(n)), causal_mask(0, n))
                targets = np.roll(np.asarray(chunk, dtype=np.int64), -1)
                mask = np.ones(n, dtype=bool)
                mask[-1] = False
                loss = cross_entropy_indices(logits, targets, row_mask=mask)
                scale(loss, 1.0 / len(batch)).backward()
                ce_sum += loss.item()
            grads = [p.grad for p in params if p.grad is not None]
            if any(not np.isfinite(g).all() for g in grads):
                raise RuntimeError(
                    f"target training diverged (non-finite gradient) at epoch {epoch} step {step}"
                )
            clip_grad_norm(grads, config.grad_clip)
            adamw_step(state, config.learning_rate, config.betas, config.weight_decay)
            ce = ce_sum / len(batch)
            if not np.isfinite(ce):
                raise RuntimeError(f"target training diverged at epoch {epoch} step {step}")
            curve.append(CurveRow(epoch, step, 0.0, ce, ce))
            step += 1
    return weights, curve


def perplexity(target: TransformerWeights, corpus: Corpus, max_sequences: int | None = None) -> float:
    """exp(mean next-token NLL) over the corpus."""
    total_nll = 0.0
    total_count = 0
    seqs = corpus.sequences[:max_sequences] if max_sequences else corpus.sequences
    for seq in seqs:
        seq = list(seq)[: target.config.max_positions]
        if len(seq) < 2:
            continue
        n = len(seq)
        with no_grad():
            _, logits = forward(target, seq, list(range(n)), causal_mask(0, n))
        z = logits.data.astype(np.float64)
        z -= z.max(axis=-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        ids = np.asarray(seq[1:], dtype=np.int64)
        total_nll += float(-logp[np.arange(n - 1), ids].sum())
        total_count += n - 1
    return float(np.exp(total_nll / max(total_count, 1)))


def mean_predictive_entropy(target: TransformerWeights, corpus: Corpus,
                            max_sequences: int | None = None) -> float:
    """Mean entropy (nats) of the target's next-token distributions."""
    total = 0.0
    count = 0
    seqs = corpus.sequences[:max_sequences] if max_sequences else corpus.sequences
    for seq in seqs:
        seq = list(seq)[: target.config.max_positions]
        if len(seq) < 2:
            continue
        n = len(seq)
        with no_grad():
            _, logits = forward(target, seq, list(range(n)), causal_mask(0, n))
        z = logits.data.astype(np.float64)
        z -= z.max(axis=-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        p = np.exp(logp)
        total += float(-(p * logp).sum(axis=-1).sum())
        count += n
    return total / max(count, 1)
