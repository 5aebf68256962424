"""Generation orchestration: vanilla, chain-speculative, and tree-speculative.

A speculative round is: draft (chain or tree) from the accepted history,
score pending token + all draft tokens in ONE target forward under the
appropriate mask, run the acceptance rule, prune the target cache to the
accepted path, and fold the true features of accepted positions back into
the draft state.  Every round emits the accepted tokens plus one bonus
token drawn from the target's (possibly residual-adjusted) distribution,
so the output stream always advances.

The prefill forward also emits one token (sampled directly from the
target's distribution after the prompt); it is logged as a draft-free
round so conservation holds: every emitted token is some round's
accepted-or-bonus output.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .draft import DraftHead
from .drafting import (
    ChainDraft,
    DraftState,
    DraftTree,
    TreeTopology,
    build_chain_draft,
    build_tree_draft,
    linearize_tree,
    tree_attention_mask,
)
from .errors import CapacityError, UsageError, ValidationError
from .model import (
    KVCache,
    TransformerWeights,
    causal_mask,
    distribution,
    forward,
    prune_cache,
    sample_token,
)
from .tensor import Tensor, no_grad, softmax
from .verification import record_accepted_features, verify_chain, verify_tree

MODES = ("vanilla", "chain", "tree")


@dataclass(frozen=True)
class GenerationParams:
    mode: str = "vanilla"
    temperature: float = 0.0
    max_new_tokens: int = 32
    gamma: int = 4
    tree: TreeTopology | None = None
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(f"unknown mode {self.mode!r}, expected one of {MODES}")
        if self.max_new_tokens < 1:
            raise ValidationError("max_new_tokens must be >= 1")
        if self.temperature < 0:
            raise ValidationError("temperature must be >= 0")
        if self.mode == "chain" and self.gamma < 1:
            raise ValidationError("chain mode requires gamma >= 1")
        if self.mode == "tree" and self.tree is None:
            raise ValidationError("tree mode requires a TreeTopology")


@dataclass
class RoundRecord:
    offered: int
    accepted: int
    bonus_token: int
    target_forwards: int
    draft_forwards: int
    is_prefill: bool = False

    def to_dict(self) -> dict:
        return {
            "offered": self.offered,
            "accepted": self.accepted,
            "bonus_token": self.bonus_token,
            "target_forwards": self.target_forwards,
            "draft_forwards": self.draft_forwards,
            "is_prefill": self.is_prefill,
        }


@dataclass
class RunLog:
    mode: str
    rounds: list[RoundRecord] = field(default_factory=list)
    tokens_emitted: int = 0
    wall_seconds: float = 0.0
    truncated: bool = False
    prompt_len: int = 0
    seed: int = 0
    temperature: float = 0.0

    def verification_rounds(self) -> list[RoundRecord]:
        return [r for r in self.rounds if not r.is_prefill]

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "rounds": [r.to_dict() for r in self.rounds],
            "tokens_emitted": self.tokens_emitted,
            "wall_seconds": self.wall_seconds,
            "truncated": self.truncated,
            "prompt_len": self.prompt_len,
            "seed": self.seed,
            "temperature": self.temperature,
        }


def count_forwards(log: RunLog) -> tuple[int, int]:
    """Exact (target, draft) forward counts accumulated in the log."""
    target = sum(r.target_forwards for r in log.rounds)
    draft = sum(r.draft_forwards for r in log.rounds)
    return target, draft


class ChainProposer:
    """Draft-head chain proposals (the production path)."""

    def __init__(self, head: DraftHead):
        self.head = head

    def propose_chain(self, state, gamma, temperature, rng) -> ChainDraft:
        return build_chain_draft(state, self.head, gamma, temperature, rng)

    def propose_tree(self, state, topology, temperature, rng) -> DraftTree:
        return build_tree_draft(state, self.head, topology, temperature, rng)


class Engine:
    """One generation stream over a (target, draft) pair.

    ``draft`` may be a DraftHead or any object with propose_chain /
    propose_tree (used by benchmarks to substitute oracles).
    """

    def __init__(self, target: TransformerWeights, draft=None):
        self.target = target
        if draft is None or hasattr(draft, "propose_chain"):
            self.proposer = draft
        else:
            self.proposer = ChainProposer(draft)

    def generate(self, prompt: Sequence[int], params: GenerationParams) -> tuple[list[int], RunLog]:
        """Generate exactly max_new_tokens continuation tokens.

        Chain/tree rounds may overshoot the budget; the returned list is
        truncated but the log keeps raw per-round counts so acceptance
        statistics stay undistorted.
        """
        prompt = [int(t) for t in prompt]
        if not prompt:
            raise UsageError("prompt must be non-empty")
        if params.mode in ("chain", "tree") and self.proposer is None:
            raise UsageError(f"mode {params.mode!r} requires a draft head")
        rng = np.random.default_rng(params.seed)
        log = RunLog(mode=params.mode, prompt_len=len(prompt), seed=params.seed,
                     temperature=params.temperature)
        start_time = time.perf_counter()
        cache = KVCache.for_config(self.target.config)
        with no_grad():
            feats, logits = forward(
                self.target, prompt, list(range(len(prompt))),
                causal_mask(0, len(prompt)), cache,
            )
        first_dist = distribution(logits.data[-1], params.temperature)
        first = sample_token(first_dist, params.temperature, rng)
        emitted: list[int] = [first]
        log.rounds.append(RoundRecord(0, 0, first, target_forwards=1, draft_forwards=0,
                                      is_prefill=True))
        try:
            if params.mode == "vanilla":
                self._run_vanilla(cache, emitted, params, rng, log)
            else:
                state = DraftState(feats.data.copy(), prompt + [first])
                self._run_speculative(cache, state, emitted, params, rng, log)
        except CapacityError:
            log.truncated = True
        log.tokens_emitted = len(emitted)
        log.wall_seconds = time.perf_counter() - start_time
        return emitted[: params.max_new_tokens], log

    def _run_vanilla(self, cache, emitted, params, rng, log):
        while len(emitted) < params.max_new_tokens:
            occ = cache.occupancy
            with no_grad():
                _, logits = forward(self.target, [emitted[-1]], [occ], causal_mask(occ, 1), cache)
            dist = distribution(logits.data[-1], params.temperature)
            tok = sample_token(dist, params.temperature, rng)
            emitted.append(tok)
            log.rounds.append(RoundRecord(0, 0, tok, target_forwards=1, draft_forwards=0))

    def _run_speculative(self, cache, state, emitted, params, rng, log):
        while len(emitted) < params.max_new_tokens:
            occ = cache.occupancy
            pending = state.tokens[-1]
            if params.mode == "chain":
                draft = self.proposer.propose_chain(state, params.gamma, params.temperature, rng)
                queries = [pending] + draft.tokens
                positions = list(range(occ, occ + 1 + len(draft.tokens)))
                mask = causal_mask(occ, len(queries))
                draft_forwards = draft.num_forwards
            else:
                tree = self.proposer.propose_tree(state, params.tree, params.temperature, rng)
                tokens, positions_tree, _ = linearize_tree(tree)
                queries = [pending] + tokens
                positions = [occ] + positions_tree
                node_mask = tree_attention_mask(tree, occ + 1)
                mask = np.zeros((len(queries), occ + len(queries)), dtype=bool)
                mask[0, : occ + 1] = True
                mask[1:] = node_mask
                draft_forwards = tree.num_forwards

            with no_grad():
                vfeats, vlogits = forward(self.target, queries, positions, mask, cache)
                dists = softmax(Tensor(vlogits.data), params.temperature).data

            if params.mode == "chain":
                outcome = verify_chain(dists, draft.dists, draft.tokens, rng, params.temperature)
            else:
                outcome = verify_tree(tree, dists, rng, params.temperature)

            keep = list(range(occ + 1)) + [occ + 1 + i for i in outcome.accepted_indices]
            prune_cache(cache, keep)
            record_accepted_features(state, outcome, vfeats.data)
            emitted.extend(outcome.emitted)
            log.rounds.append(RoundRecord(
                offered=outcome.offered,
                accepted=len(outcome.accepted_tokens),
                bonus_token=outcome.bonus_token,
                target_forwards=1,
                draft_forwards=draft_forwards,
            ))


class GreedyOracleProposer:
    """Perfect-draft stand-in: replays the target's own greedy continuation.

    Only valid at temperature 0, where the continuation is deterministic;
    proposals then carry the target's exact distributions, so verification
    hits the accept-certain path on every token.  Costs zero draft forwards
    by construction (the one-time recording pass is done at construction).
    """

    def __init__(self, target: TransformerWeights, prompt: Sequence[int], horizon: int):
        self.prompt_len = len(prompt)
        cache = KVCache.for_config(target.config)
        with no_grad():
            feats, logits = forward(target, list(prompt), list(range(len(prompt))),
                                    causal_mask(0, len(prompt)), cache)
            tokens: list[int] = []
            dists: list[np.ndarray] = []
            features: list[np.ndarray] = []
            last_logits = logits.data[-1]
            for _ in range(horizon):
                dist = distribution(last_logits, 0.0)
                tok = int(np.argmax(dist))
                tokens.append(tok)
                dists.append(dist)
                occ = cache.occupancy
                f, lg = forward(target, [tok], [occ], causal_mask(occ, 1), cache)
                features.append(f.data[0].copy())
                last_logits = lg.data[-1]
        self.tokens = tokens
        self.dists = dists
        self.features = features

    def _offset(self, state: DraftState) -> int:
        return len(state.tokens) - self.prompt_len

    def propose_chain(self, state, gamma, temperature, rng) -> ChainDraft:
        if temperature != 0.0:
            raise UsageError("greedy oracle proposer only supports temperature 0")
        at = self._offset(state)
        toks = self.tokens[at : at + gamma]
        dists = np.stack(self.dists[at : at + gamma])
        feats = np.stack(self.features[at - 1 : at - 1 + gamma])
        return ChainDraft(list(toks), dists, feats, num_forwards=0)

    def propose_tree(self, state, topology, temperature, rng) -> DraftTree:
        if temperature != 0.0:
            raise UsageError("greedy oracle proposer only supports temperature 0")
        from .drafting import DraftNode

        at = self._offset(state)
        nodes = []
        for d in range(topology.depth):
            nodes.append(DraftNode(
                node_id=d,
                parent=None if d == 0 else d - 1,
                token=self.tokens[at + d],
                draft_prob=1.0,
                dist=self.dists[at + d],
                feature=self.features[at + d - 1],
                depth=d + 1,
            ))
        return DraftTree(nodes, prefix_len=len(state.tokens), num_forwards=0)
