"""Lossless acceptance: chain and recursive tree speculative sampling.

A draft token sampled from q is kept with probability min(1, p(t)/q(t))
against the target distribution p; on rejection the replacement is drawn
from norm(max(0, p - q)).  Applied left to right over a chain, or
recursively over sibling candidates down a draft tree, the emitted tokens
are distributed exactly as if sampled from the target alone.

Randomness flows through a DecisionSource: one uniform per accept/reject
decision, one per residual/bonus draw, which keeps runs replayable and
lets tests enumerate every branch analytically through the same code path.
When p and q are bitwise equal, acceptance is forced without consuming a
variate (this also sidesteps 0/0 in the residual).

At temperature zero every distribution is one-hot; acceptance degenerates
to "candidate equals the target argmax" and consumes no randomness at all.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .drafting import DraftState, DraftTree
from .errors import UsageError


class RandomDecisions:
    """Decision source backed by a numpy Generator (one uniform per call)."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def bernoulli(self, prob: float) -> bool:
        return self.rng.random() < prob

    def categorical(self, dist: np.ndarray) -> int:
        u = self.rng.random()
        cdf = np.cumsum(dist)
        idx = int(np.searchsorted(cdf, u, side="right"))
        idx = min(idx, dist.shape[0] - 1)
        while idx > 0 and dist[idx] <= 0.0:
            idx -= 1
        return idx


def _decisions(rng) -> object:
    if hasattr(rng, "bernoulli") and hasattr(rng, "categorical"):
        return rng
    return RandomDecisions(rng)


@dataclass(eq=False)
class AcceptanceOutcome:
    """Result of one verification round."""

    accepted_tokens: list[int]
    bonus_token: int
    accepted_indices: list[int]   # draft query indices (chain step / tree node ids)
    trace: list[bool]             # accept/reject per candidate examined
    offered: int                  # draft tokens offered this round

    @property
    def emitted(self) -> list[int]:
        return self.accepted_tokens + [self.bonus_token]


def acceptance_probability(p: np.ndarray, q: np.ndarray, token: int) -> float:
    """min(1, p(token)/q(token)); the draft can never propose q(token) == 0."""
    qt = float(q[token])
    if qt <= 0.0:
        raise UsageError(f"draft token {token} has zero draft probability")
    return min(1.0, float(p[token]) / qt)


def residual_distribution(p: np.ndarray, q: np.ndarray) -> np.ndarray | None:
    """norm(max(0, p - q)), or None when the residual is empty (p == q),
    signalling that acceptance was already certain."""
    r = np.maximum(0.0, np.asarray(p, dtype=np.float64) - np.asarray(q, dtype=np.float64))
    total = r.sum()
    if total <= 0.0:
        return None
    return r / total


def _draw(dist: np.ndarray, temperature: float, decisions) -> int:
    if temperature == 0.0:
        return int(np.argmax(dist))
    return int(decisions.categorical(dist))


def verify_chain(
    target_dists: np.ndarray,
    draft_dists: np.ndarray,
    draft_tokens: list[int],
    rng,
    temperature: float,
) -> AcceptanceOutcome:
    """Scan a chain draft left to right.

    ``target_dists`` holds gamma + 1 rows (the extra row feeds the bonus
    draw when everything is accepted); ``draft_dists`` and ``draft_tokens``
    hold gamma entries.  Output distribution equals the target's.
    """
    gamma = len(draft_tokens)
    if len(draft_dists) != gamma or len(target_dists) != gamma + 1:
        raise UsageError(
            f"need gamma+1 target rows and gamma draft rows, got "
            f"{len(target_dists)}/{len(draft_dists)} for gamma={gamma}"
        )
    decisions = _decisions(rng)
    accepted: list[int] = []
    trace: list[bool] = []
    for i in range(gamma):
        p = np.asarray(target_dists[i], dtype=np.float64)
        q = np.asarray(draft_dists[i], dtype=np.float64)
        tok = int(draft_tokens[i])
        if temperature == 0.0:
            ok = tok == int(np.argmax(p))
        elif np.array_equal(p, q):
            ok = True  # accept-certain: no variate consumed
        else:
            ok = decisions.bernoulli(acceptance_probability(p, q, tok))
        trace.append(ok)
        if ok:
            accepted.append(tok)
            continue
        if temperature == 0.0:
            bonus = int(np.argmax(p))
        else:
            residual = residual_distribution(p, q)
            if residual is None:
                raise UsageError("rejection with an empty residual is impossible for p != q")
            bonus = _draw(residual, temperature, decisions)
        return AcceptanceOutcome(accepted, bonus, list(range(i)), trace, gamma)
    p_final = np.asarray(target_dists[gamma], dtype=np.float64)
    bonus = _draw(p_final, temperature, decisions)
    return AcceptanceOutcome(accepted, bonus, list(range(gamma)), trace, gamma)


def verify_tree(
    tree: DraftTree,
    node_target_dists: np.ndarray,
    rng,
    temperature: float,
) -> AcceptanceOutcome:
    """Recursive speculative sampling over a draft tree.

    ``node_target_dists`` row 0 is the target distribution at the tree root
    context; row 1 + node_id is the distribution computed at that node's
    context (all from the single tree-masked verification forward).
    Candidates at each level are examined in generation order; each
    rejection folds the candidate out of the working distribution via the
    residual before the next sibling is tried.
    """
    if len(node_target_dists) != len(tree.nodes) + 1:
        raise UsageError(
            f"need {len(tree.nodes) + 1} target rows, got {len(node_target_dists)}"
        )
    decisions = _decisions(rng)
    accepted_nodes: list[int] = []
    accepted_tokens: list[int] = []
    trace: list[bool] = []
    p = np.asarray(node_target_dists[0], dtype=np.float64)
    children = tree.children(None)
    while True:
        chosen = None
        for cand in children:
            q = np.asarray(cand.dist, dtype=np.float64)
            tok = cand.token
            if temperature == 0.0:
                ok = tok == int(np.argmax(p))
            elif np.array_equal(p, q):
                ok = True
            else:
                ok = decisions.bernoulli(acceptance_probability(p, q, tok))
            trace.append(ok)
            if ok:
                chosen = cand
                break
            if temperature > 0.0:
                residual = residual_distribution(p, q)
                if residual is None:
                    raise UsageError("rejection with an empty residual is impossible for p != q")
                p = residual
        if chosen is None:
            bonus = _draw(p, temperature, decisions)
            return AcceptanceOutcome(accepted_tokens, bonus, accepted_nodes, trace, len(tree.nodes))
        accepted_nodes.append(chosen.node_id)
        accepted_tokens.append(chosen.token)
        p = np.asarray(node_target_dists[1 + chosen.node_id], dtype=np.float64)
        children = tree.children(chosen.node_id)


def record_accepted_features(
    state: DraftState,
    outcome: AcceptanceOutcome,
    verify_features: np.ndarray,
) -> DraftState:
    """Fold a verification round back into the draft state.

    ``verify_features`` are the TRUE target features from the verification
    forward, row 0 for the pending token and row 1 + i for draft query i.
    The feature stream gains the pending + accepted rows; the token stream
    gains accepted + bonus, preserving the one-step-ahead alignment (the
    bonus token's feature arrives with the next verification forward).
    """
    rows = [0] + [1 + i for i in outcome.accepted_indices]
    state.extend(verify_features[rows], outcome.accepted_tokens + [outcome.bonus_token])
    return state
