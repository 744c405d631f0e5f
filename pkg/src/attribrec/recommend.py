"""Score, rank and explain items for a user from a frozen model snapshot.

The score of a warm item is the sum of its personalized similarities to every
item in the user's training history; a cold item (attribute-attached, no
history) is scored by its worst-case similarity instead. Explanations name the
attribute the user's attention favors most and the most similar history item.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import personalize as pers
from .errors import DataError
from .trainer import ModelState

log = logging.getLogger(__name__)

EXPLANATION_TEMPLATE = "We recommend {i} because it is similar to {j} on the attribute {k}."


@dataclass(frozen=True)
class Explanation:
    user: int
    item: int
    evidence_item: int
    attribute_index: int
    attribute_name: str
    attention_weight: float

    def sentence(self, user_ids, item_ids) -> str:
        return EXPLANATION_TEMPLATE.format(
            i=item_ids[self.item], j=item_ids[self.evidence_item], k=self.attribute_name
        )


@dataclass(frozen=True)
class RankedRecommendation:
    user: int
    items: tuple[int, ...]  # scores nonincreasing down the list
    scores: tuple[float, ...]
    profiles: tuple[pers.AttentionProfile, ...]
    truncated: bool  # fewer candidates than requested


def _user_points(u: int, idx: np.ndarray, state: ModelState, item_embeds: np.ndarray):
    return pers.personalized_points(state.user_table[u], item_embeds[idx])


def score_candidates(
    u: int,
    candidates: np.ndarray,
    state: ModelState,
    item_embeds: np.ndarray,
    positives,
) -> np.ndarray:
    """Vectorized sum-of-similarities score for many candidate items at once."""
    neighbors = np.asarray(list(positives), dtype=int)
    if neighbors.size == 0:
        raise DataError(f"user {u} has no training neighborhood; cannot score")
    cand = np.asarray(candidates, dtype=int)
    pts, _ = _user_points(u, cand, state, item_embeds)
    own, _ = _user_points(u, neighbors, state, item_embeds)
    d2 = (
        (pts * pts).sum(axis=1)[:, None]
        - 2.0 * pts @ own.T
        + (own * own).sum(axis=1)[None, :]
    )
    # A candidate inside the neighborhood is scored against the others only.
    self_mask = cand[:, None] == neighbors[None, :]
    d2 = np.where(self_mask, 0.0, d2)
    if np.any(self_mask.sum(axis=1) == neighbors.size):
        raise DataError("candidate's neighborhood R_u+ \\ {i} is empty")
    return -d2.sum(axis=1)


def score_item(
    u: int, i: int, state: ModelState, item_embeds: np.ndarray, positives
) -> float:
    """Sum of personalized similarities between item i and the user's history (minus i itself)."""
    return float(score_candidates(u, np.array([i]), state, item_embeds, positives)[0])


def score_cold_item(
    u: int,
    cold_embeds: np.ndarray,
    state: ModelState,
    item_embeds: np.ndarray,
    positives,
) -> float:
    """Worst-case (minimum) personalized similarity of a cold item to the user's history."""
    neighbors = np.asarray(list(positives), dtype=int)
    if neighbors.size == 0:
        raise DataError(f"user {u} has no training neighborhood; cannot score")
    z = state.user_table[u]
    cold = np.asarray(cold_embeds, dtype=np.float64)
    prof = pers.attention_scores(z, cold)
    p_x = pers.personalized_rep(prof, cold)
    own, _ = _user_points(u, neighbors, state, item_embeds)
    d2 = ((own - p_x[None, :]) ** 2).sum(axis=1)
    return float(-d2.max())


def top_k(
    u: int,
    candidates,
    k: int,
    state: ModelState,
    item_embeds: np.ndarray,
    positives,
) -> RankedRecommendation:
    """Top-k candidates by score; ties broken by ascending item index."""
    cand = np.asarray(sorted(set(int(c) for c in candidates)), dtype=int)
    overlap = set(cand.tolist()) & set(positives)
    if overlap:
        raise DataError(f"candidates overlap training positives: {sorted(overlap)[:5]}")
    truncated = cand.size < k
    if truncated:
        log.warning("user %d: only %d candidates for top-%d", u, cand.size, k)
    scores = score_candidates(u, cand, state, item_embeds, positives)
    order = np.lexsort((cand, -scores))[: min(k, cand.size)]
    chosen = cand[order]
    z = state.user_table[u]
    profiles = tuple(pers.attention_scores(z, item_embeds[i]) for i in chosen)
    return RankedRecommendation(
        user=u,
        items=tuple(int(i) for i in chosen),
        scores=tuple(float(s) for s in scores[order]),
        profiles=profiles,
        truncated=truncated,
    )


def explain(
    u: int,
    i: int,
    state: ModelState,
    item_embeds: np.ndarray,
    positives,
    field_names,
) -> Explanation:
    """Evidence for recommending i: the argmax-attention attribute and the nearest history item."""
    neighbors = np.asarray([p for p in positives if p != i], dtype=int)
    if neighbors.size == 0:
        raise DataError(f"user {u} has no neighborhood besides item {i}")
    z = state.user_table[u]
    prof = pers.attention_scores(z, item_embeds[i])
    k_star = int(np.argmax(prof.normalized))  # argmax; ties resolve to lowest index
    p_i, _ = _user_points(u, np.array([i]), state, item_embeds)
    own, _ = _user_points(u, neighbors, state, item_embeds)
    d2 = ((own - p_i) ** 2).sum(axis=1)
    best = np.lexsort((neighbors, d2))[0]
    return Explanation(
        user=u,
        item=i,
        evidence_item=int(neighbors[best]),
        attribute_index=k_star,
        attribute_name=field_names[k_star],
        attention_weight=float(prof.normalized[k_star]),
    )
