"""Chain and tree draft construction.

A draft round runs the draft head auto-regressively from the accepted
history.  The first forward of a round processes the whole accepted path
(the head's cache is rebuilt from scratch each round so predicted features
from rejected branches can never leak forward); each further forward
advances one chain step or expands one tree depth level, so a depth-m tree
costs exactly m head forwards regardless of node count.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .draft import DraftHead, DraftInputMode, draft_forward, predict_distribution
from .errors import UsageError, ValidationError
from .model import causal_mask, sample_token
from .tensor import no_grad


@dataclass(eq=False)
class DraftState:
    """Accepted history feeding the next draft round.

    ``tokens`` runs exactly one step ahead of ``features``: the newest token
    (the bonus from the last verification) has no feature yet.

    The head's KV cache is logically rebuilt from the accepted path every
    round so nothing predicted on a rejected branch can leak forward.  The
    rebuild is incremental: cache rows for previously verified pairs are
    bit-identical to what a from-scratch rebuild would produce (they were
    computed from the same true features, tokens, positions, and mask), so
    each round truncates away the draft-phase rows and processes only the
    newly accepted tail.
    """

    features: np.ndarray  # (j, hidden) true target features
    tokens: list[int]     # length j + 1
    draft_cache: object | None = None
    verified_pairs: int = 0

    def __post_init__(self):
        if len(self.tokens) != self.features.shape[0] + 1:
            raise UsageError(
                f"token stream must lead features by one: {len(self.tokens)} tokens, "
                f"{self.features.shape[0]} features"
            )

    def extend(self, new_features: np.ndarray, new_tokens: Sequence[int]) -> None:
        self.features = np.concatenate([self.features, new_features], axis=0)
        self.tokens.extend(int(t) for t in new_tokens)
        if len(self.tokens) != self.features.shape[0] + 1:
            raise UsageError("draft state alignment broken after extend")


@dataclass(frozen=True)
class TreeTopology:
    """Per-depth branching plan: entry d is the child count of the best
    depth-d parent; every other parent gets one child while the node budget
    lasts.  Construction fails unless the plan fills the budget exactly with
    at least one node per depth.
    """

    branching: tuple[int, ...]
    budget: int

    def __init__(self, branching: Sequence[int], budget: int | None = None):
        branching = tuple(int(k) for k in branching)
        if not branching or any(k < 1 for k in branching):
            raise ValidationError(f"branching factors must all be >= 1, got {branching}")
        counts = _depth_counts(branching, budget)
        natural = sum(counts)
        object.__setattr__(self, "branching", branching)
        object.__setattr__(self, "budget", natural if budget is None else int(budget))
        if budget is not None:
            if any(c == 0 for c in counts) or natural != self.budget:
                raise ValidationError(
                    f"branching {branching} cannot fill budget {budget} "
                    f"over {len(branching)} depths (allocates {counts})"
                )

    @property
    def depth(self) -> int:
        return len(self.branching)

    def depth_counts(self) -> list[int]:
        return _depth_counts(self.branching, self.budget)


def _depth_counts(branching: Sequence[int], budget: int | None) -> list[int]:
    remaining = budget if budget is not None else None
    counts: list[int] = []
    prev = 1
    for depth, k in enumerate(branching):
        want = k if depth == 0 else k + (prev - 1)
        got = want if remaining is None else min(want, remaining)
        counts.append(got)
        if remaining is not None:
            remaining -= got
        prev = got
    return counts


def default_topology() -> TreeTopology:
    """Ten nodes over three depth levels (three draft forwards)."""
    return TreeTopology([4, 2, 1], budget=10)


@dataclass(eq=False)
class DraftNode:
    node_id: int
    parent: int | None        # node_id of the parent, None for root children
    token: int
    draft_prob: float         # q(token) under the parent-step distribution
    dist: np.ndarray          # full parent-step distribution (shared by siblings)
    feature: np.ndarray       # parent-step predicted feature: this node's input when expanded
    depth: int
    path_prob: float = 1.0    # product of draft_prob along the ancestor chain


@dataclass(eq=False)
class DraftTree:
    nodes: list[DraftNode]    # topological: parents precede children
    prefix_len: int           # real tokens before the tree (prompt + accepted + pending)
    num_forwards: int

    def children(self, node_id: int | None) -> list[DraftNode]:
        return [n for n in self.nodes if n.parent == node_id]

    def ancestors(self, node_id: int) -> list[int]:
        chain = []
        seen = set()
        cur: int | None = node_id
        while cur is not None:
            if cur in seen:
                raise ValidationError("draft tree has a parent cycle")
            seen.add(cur)
            chain.append(cur)
            cur = self.nodes[cur].parent
        return chain[::-1]


@dataclass(eq=False)
class ChainDraft:
    tokens: list[int]
    dists: np.ndarray     # (gamma, vocab) full draft distributions
    features: np.ndarray  # (gamma, hidden) predicted features behind each dist
    num_forwards: int


def _initial_streams(state: DraftState, mode: DraftInputMode):
    """Mode-specific (features, tokens) streams for the round's first forward."""
    if mode is DraftInputMode.FEATURE_SHIFTED_TOKEN:
        return state.features, state.tokens[1:]
    if mode is DraftInputMode.FEATURE_UNSHIFTED_TOKEN:
        return state.features, state.tokens[:-1]
    if mode is DraftInputMode.TOKEN_ONLY:
        return None, list(state.tokens)
    return state.features, None


def _step_streams(mode: DraftInputMode, feature: np.ndarray, token: int | None):
    feats = None if mode is DraftInputMode.TOKEN_ONLY else feature.reshape(1, -1)
    toks = None if mode is DraftInputMode.FEATURE_ONLY else [token]
    return feats, toks


class _UnshiftedTokenQueue:
    """The unshifted wiring feeds each token one step later than shifted."""

    def __init__(self, pending: int):
        self.queue = [pending]

    def push(self, token: int) -> None:
        self.queue.append(token)

    def pop(self) -> int:
        return self.queue.pop(0)


def _round_cache_and_tail(state: DraftState, head: DraftHead, extra_capacity: int):
    """Prepare the head cache for a round and return the unprocessed tail.

    Truncates away last round's draft-phase rows, then reports which pair
    indices [tail_start, path_len) still need processing.  When everything
    is already verified (a round was started twice on one state), the last
    pair is reprocessed so the round still has a current output feature;
    by kernel determinism the recomputed row is bit-identical.
    """
    feats, toks = _initial_streams(state, head.mode)
    path_len = len(toks) if toks is not None else feats.shape[0]
    if state.draft_cache is None or state.draft_cache.capacity < path_len + extra_capacity:
        state.draft_cache = head.new_cache(path_len + extra_capacity + 64)
        state.verified_pairs = 0
    tail_start = min(state.verified_pairs, path_len - 1)
    state.draft_cache.truncate(tail_start)
    tail_feats = None if feats is None else feats[tail_start:path_len]
    tail_toks = None if toks is None else list(toks[tail_start:path_len])
    return state.draft_cache, tail_start, path_len, tail_feats, tail_toks


def build_chain_draft(
    state: DraftState,
    head: DraftHead,
    gamma: int,
    temperature: float,
    rng: np.random.Generator,
) -> ChainDraft:
    """Draft ``gamma`` tokens auto-regressively, recording every full
    distribution (the acceptance rule needs them) and predicted feature."""
    if gamma < 1:
        raise UsageError(f"gamma must be >= 1, got {gamma}")
    cache, tail_start, path_len, tail_feats, tail_toks = _round_cache_and_tail(state, head, gamma)
    unshifted = _UnshiftedTokenQueue(state.tokens[-1]) if head.mode is DraftInputMode.FEATURE_UNSHIFTED_TOKEN else None

    tokens: list[int] = []
    dists: list[np.ndarray] = []
    features: list[np.ndarray] = []
    with no_grad():
        out = draft_forward(head, tail_feats, tail_toks, list(range(tail_start, path_len)),
                            causal_mask(tail_start, path_len - tail_start), cache)
        state.verified_pairs = path_len
        f_cur = out.data[-1]
        for i in range(gamma):
            if i > 0:
                if head.mode is DraftInputMode.FEATURE_UNSHIFTED_TOKEN:
                    step_tok = unshifted.pop()
                elif head.mode is DraftInputMode.TOKEN_ONLY:
                    step_tok = tokens[-1]
                elif head.mode is DraftInputMode.FEATURE_SHIFTED_TOKEN:
                    step_tok = tokens[-1]
                else:
                    step_tok = None
                sf, st = _step_streams(head.mode, f_cur, step_tok)
                pos = path_len + i - 1
                out = draft_forward(head, sf, st, [pos], causal_mask(pos, 1), cache)
                f_cur = out.data[-1]
            dist = predict_distribution(head, f_cur, temperature)
            tok = sample_token(dist, temperature, rng)
            tokens.append(tok)
            dists.append(dist)
            features.append(f_cur.copy())
            if unshifted is not None:
                unshifted.push(tok)
    return ChainDraft(tokens, np.stack(dists), np.stack(features), num_forwards=gamma)


def _rank_candidates(dist: np.ndarray, ranking: np.ndarray, k: int, temperature: float,
                     rng: np.random.Generator) -> list[tuple[int, float]]:
    """Pick k candidate tokens from one node's distribution.

    temperature > 0 samples i.i.d. with replacement (one variate each),
    which the recursive acceptance rule is lossless for; temperature == 0
    takes the top-k distinct tokens of the head's unit-temperature ranking.
    """
    if temperature == 0.0:
        order = np.argsort(-ranking, kind="stable")[:k]
        return [(int(t), float(dist[t])) for t in order]
    picks = []
    for _ in range(k):
        tok = sample_token(dist, temperature, rng)
        picks.append((tok, float(dist[tok])))
    return picks


def build_tree_draft(
    state: DraftState,
    head: DraftHead,
    topology: TreeTopology,
    temperature: float,
    rng: np.random.Generator,
) -> DraftTree:
    """Build a draft tree depth level by depth level.

    Depth d is expanded by ONE head forward over all depth-d parents under
    the draft-side tree mask, so the whole tree costs len(branching)
    forwards.  Child counts follow the topology: the highest-probability
    parent at each depth gets the configured branching factor, the rest one
    child each while the budget lasts.
    """
    cache, tail_start, path_len, tail_feats, tail_toks = _round_cache_and_tail(
        state, head, topology.budget)
    nodes: list[DraftNode] = []
    forwards = 0

    with no_grad():
        out = draft_forward(head, tail_feats, tail_toks, list(range(tail_start, path_len)),
                            causal_mask(tail_start, path_len - tail_start), cache)
        state.verified_pairs = path_len
        forwards += 1
        root_feature = out.data[-1].copy()
        root_dist = predict_distribution(head, root_feature, temperature)
        root_rank = root_dist if temperature > 0 else predict_distribution(head, root_feature, 1.0)

        remaining = topology.budget
        take = min(topology.branching[0], remaining)
        for tok, prob in _rank_candidates(root_dist, root_rank, take, temperature, rng):
            nodes.append(DraftNode(len(nodes), None, tok, prob, root_dist, root_feature, 1,
                                   path_prob=prob))
        remaining -= take

        frontier = list(nodes)
        node_slot: dict[int, int] = {}
        for depth in range(2, topology.depth + 1):
            if remaining <= 0 or not frontier:
                break
            # One forward over the whole frontier under the draft tree mask.
            start = cache.occupancy
            for i, node in enumerate(frontier):
                node_slot[node.node_id] = start + i
            mask = np.zeros((len(frontier), start + len(frontier)), dtype=bool)
            f_rows = []
            t_rows = []
            for i, node in enumerate(frontier):
                mask[i, :path_len] = True
                for anc in _cache_ancestors(nodes, node, node_slot):
                    mask[i, anc] = True
                mask[i, start + i] = True
                f_rows.append(node.feature)
                if head.mode is DraftInputMode.FEATURE_UNSHIFTED_TOKEN:
                    t_rows.append(state.tokens[-1] if node.parent is None else nodes[node.parent].token)
                else:
                    t_rows.append(node.token)
            positions = [path_len + node.depth - 1 for node in frontier]
            sf = None if head.mode is DraftInputMode.TOKEN_ONLY else np.stack(f_rows)
            st = None if head.mode is DraftInputMode.FEATURE_ONLY else t_rows
            out = draft_forward(head, sf, st, positions, mask, cache)
            forwards += 1

            # Best parent = highest whole-path draft probability (ties by
            # creation order), so the topology's wide slots follow the
            # head's top-ranked chain.
            order = sorted(range(len(frontier)), key=lambda i: (-frontier[i].path_prob, i))
            alloc = [0] * len(frontier)
            budget_d = remaining
            for rank_pos, i in enumerate(order):
                want = topology.branching[depth - 1] if rank_pos == 0 else 1
                give = min(want, budget_d)
                alloc[i] = give
                budget_d -= give
                if budget_d == 0:
                    break
            new_nodes: list[DraftNode] = []
            for i, node in enumerate(frontier):
                if alloc[i] == 0:
                    continue
                feature = out.data[i].copy()
                dist = predict_distribution(head, feature, temperature)
                rank = dist if temperature > 0 else predict_distribution(head, feature, 1.0)
                for tok, prob in _rank_candidates(dist, rank, alloc[i], temperature, rng):
                    child = DraftNode(len(nodes), node.node_id, tok, prob, dist, feature,
                                      depth, path_prob=node.path_prob * prob)
                    nodes.append(child)
                    new_nodes.append(child)
                    remaining -= 1
            frontier = new_nodes

    tree = DraftTree(nodes, prefix_len=len(state.tokens), num_forwards=forwards)
    if len(nodes) != topology.budget:
        raise ValidationError(
            f"tree construction produced {len(nodes)} nodes for budget {topology.budget}"
        )
    return tree


def _cache_ancestors(nodes: list[DraftNode], node: DraftNode, node_slot: dict[int, int]) -> list[int]:
    slots = []
    cur = node.parent
    while cur is not None:
        if cur in node_slot:
            slots.append(node_slot[cur])
        cur = nodes[cur].parent
    return slots


def tree_attention_mask(tree: DraftTree, prefix_len: int) -> np.ndarray:
    """Verification mask: node row i sees every prefix slot plus exactly its
    ancestor chain (itself included)."""
    n = len(tree.nodes)
    mask = np.zeros((n, prefix_len + n), dtype=bool)
    for i, node in enumerate(tree.nodes):
        mask[i, :prefix_len] = True
        for anc in tree.ancestors(node.node_id):
            mask[i, prefix_len + anc] = True
    return mask


def linearize_tree(tree: DraftTree) -> tuple[list[int], list[int], list[int]]:
    """Stable topological flattening: (tokens, positions, node ids).

    Positions place depth-d nodes at prefix_len + d - 1, so siblings share a
    position index.
    """
    tokens = [n.token for n in tree.nodes]
    positions = [tree.prefix_len + n.depth - 1 for n in tree.nodes]
    order = [n.node_id for n in tree.nodes]
    return tokens, positions, order
