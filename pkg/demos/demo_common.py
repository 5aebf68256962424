"""Shared setup for the demo scripts: a small trained target + draft head.

Every demo trains (or reuses from a cache directory) the same micro-scale
pair so each script stays self-contained and runs in about a minute on a
laptop CPU.  Delete ``demos/_cache`` to retrain from scratch.
"""

from pathlib import Path

from specdec import (
    DraftHead,
    DraftInputMode,
    ModelConfig,
    TrainConfig,
    TransformerWeights,
    ingest_corpus,
    make_corpus,
    train_draft_head,
    train_target_toy,
    write_corpus,
)

CACHE = Path(__file__).parent / "_cache"

MODEL = ModelConfig(vocab_size=256, hidden_dim=64, num_layers=3, num_heads=4,
                    ffn_dim=128, max_positions=256, seed=0)
TARGET_TRAIN = TrainConfig(learning_rate=3e-3, epochs=8, batch_size=16, seed=0)
DRAFT_TRAIN = TrainConfig(learning_rate=2e-3, epochs=6, batch_size=16, seed=0)


def trained_pair(mode: DraftInputMode = DraftInputMode.FEATURE_SHIFTED_TOKEN):
    """Return (target, draft head, corpus), training and caching on first use."""
    CACHE.mkdir(exist_ok=True)
    corpus_path = CACHE / "corpus.jsonl"
    if not corpus_path.exists():
        write_corpus(make_corpus(seed=11, size_tokens=24000), corpus_path)
    corpus = ingest_corpus(corpus_path)

    target_path = CACHE / "target.eglc"
    if target_path.exists():
        target = TransformerWeights.load(target_path)
    else:
        print("training the toy target model (one-time, ~1 min)...")
        target, _ = train_target_toy(corpus, MODEL, TARGET_TRAIN)
        target.save(target_path)

    head_path = CACHE / f"draft_{mode.value}.eglc"
    if head_path.exists():
        head = DraftHead.load(head_path, target)
    else:
        print(f"training the {mode.value} draft head (one-time, ~30s)...")
        head, _ = train_draft_head(target, corpus, DRAFT_TRAIN, mode=mode)
        head.save(head_path)
    return target, head, corpus
