"""specdec: desk-scale speculative decoding with feature-level drafting.

A small decoder-only transformer (the target), a one-block draft head that
extrapolates the target's pre-LM-head features, chain and tree drafting
with lossless verification, and the training/benchmark harness around them.
"""

from .bench import (
    AlphaReport,
    AuditReport,
    BenchReport,
    compute_alpha_n,
    compute_tau,
    format_table,
    lossless_audit,
    speedup_benchmark,
    total_variation,
)
from .corpus import Corpus, decode_tokens, encode_text, ingest_corpus, make_corpus, write_corpus
from .draft import DraftHead, DraftInputMode, draft_forward, init_draft_head, predict_distribution
from .drafting import (
    ChainDraft,
    DraftNode,
    DraftState,
    DraftTree,
    TreeTopology,
    build_chain_draft,
    build_tree_draft,
    default_topology,
    linearize_tree,
    tree_attention_mask,
)
from .engine import (
    Engine,
    GenerationParams,
    GreedyOracleProposer,
    RoundRecord,
    RunLog,
    count_forwards,
)
from .errors import CapacityError, DimensionError, UsageError, ValidationError
from .model import (
    KVCache,
    ModelConfig,
    TransformerWeights,
    causal_mask,
    distribution,
    forward,
    init_target,
    lm_head,
    prune_cache,
    sample_token,
)
from .tensor import OptimizerState, Tensor, adamw_step, clip_grad_norm, gradient_check, no_grad
from .training import (
    TrainConfig,
    augment_features,
    collect_training_pairs,
    combined_loss,
    train_draft_head,
    train_target_toy,
)
from .verification import (
    AcceptanceOutcome,
    acceptance_probability,
    record_accepted_features,
    residual_distribution,
    verify_chain,
    verify_tree,
)

__version__ = "0.1.0"
