"""Evaluation protocols: leave-one-out ranking with 100 sampled negatives,
cold-start recall, attention-ablation groups, sensitivity sweeps, and a
synthetic generator that plants a per-user preferred attribute.

Each held-out item is ranked against 100 negatives never interacted with by
the user; P@K is 1/K when the held-out item lands in the top K and nDCG@K is
1/log2(rank+1). Cold-start holds items out of training entirely, trains a
fresh model, attaches the items by attributes, and measures how well their
true purchasers are recovered when ranking all users.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from . import encoder, netbuild, personalize as pers, recommend, trainer
from ._util import child_rng, stable_hash
from .errors import DataError
from .ingest import InteractionDataset, ItemAttributes
from .netbuild import AttributeNetworkSet

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EvalSlate:
    user: int
    heldout: int
    negatives: tuple[int, ...]  # distinct, never positive for the user
    seed: int


@dataclass
class MetricReport:
    ks: tuple[int, ...]
    precision: dict[int, float]
    ndcg: dict[int, float]
    per_user_rank: np.ndarray
    n_users: int
    seed: int
    config_hash: str = ""
    checkpoint_id: str = ""


def build_slates(
    ds: InteractionDataset, seed: int, n_negatives: int = 100
) -> list[EvalSlate]:
    """One slate per user: the held-out item plus sampled negatives, fixed per seed."""
    if ds.heldout is None:
        raise DataError("dataset has no held-out split; run leave_one_out_split first")
    rng = child_rng(seed, 4)
    slates = []
    for u in range(ds.n_users):
        exclude = set(ds.positives[u]) | {ds.heldout[u]}
        avail = np.array([i for i in range(ds.n_items) if i not in exclude], dtype=int)
        if avail.size < n_negatives:
            log.warning(
                "user %d has only %d candidate negatives (< %d); using all",
                u,
                avail.size,
                n_negatives,
            )
            chosen = avail[rng.permutation(avail.size)]
        else:
            chosen = avail[rng.permutation(avail.size)[:n_negatives]]
        slates.append(EvalSlate(u, ds.heldout[u], tuple(int(i) for i in chosen), seed))
    return slates


def precision_at_k(rank_of_heldout: int, k: int) -> float:
    """With a single relevant item, P@K is 1/K on a hit and 0 otherwise."""
    if rank_of_heldout < 1:
        raise ValueError(f"rank must be >= 1, got {rank_of_heldout}")
    return 1.0 / k if rank_of_heldout <= k else 0.0


def ndcg_at_k(rank_of_heldout: int, k: int) -> float:
    """Single relevant item: ideal DCG is 1, so nDCG@K = 1/log2(rank+1) on a hit."""
    if rank_of_heldout < 1:
        raise ValueError(f"rank must be >= 1, got {rank_of_heldout}")
    return 1.0 / math.log2(rank_of_heldout + 1) if rank_of_heldout <= k else 0.0


def rank_in_slate(
    slate: EvalSlate,
    state: trainer.ModelState,
    item_embeds: np.ndarray,
    positives,
) -> int:
    """1-based rank of the held-out item, ties broken by ascending item index."""
    cand = np.array([slate.heldout, *slate.negatives], dtype=int)
    scores = recommend.score_candidates(slate.user, cand, state, item_embeds, positives)
    order = np.lexsort((cand, -scores))
    return int(np.flatnonzero(cand[order] == slate.heldout)[0]) + 1


def evaluate_leave_one_out(
    state: trainer.ModelState,
    nets: AttributeNetworkSet,
    ds: InteractionDataset,
    slates: list[EvalSlate],
    ks: tuple[int, ...] = (5, 10, 15),
) -> MetricReport:
    """Mean P@K and nDCG@K over users, with per-user ranks retained."""
    item_embeds = pers.compute_item_embeddings(state.autoencoders, nets)
    ranks = np.array(
        [
            rank_in_slate(s, state, item_embeds, ds.positives[s.user])
            for s in slates
        ],
        dtype=int,
    )
    precision = {k: float(np.mean([precision_at_k(r, k) for r in ranks])) for k in ks}
    ndcg = {k: float(np.mean([ndcg_at_k(r, k) for r in ranks])) for k in ks}
    return MetricReport(
        ks=tuple(ks),
        precision=precision,
        ndcg=ndcg,
        per_user_rank=ranks,
        n_users=len(slates),
        seed=slates[0].seed if slates else 0,
        config_hash=stable_hash(trainer._config_doc(state.config)),
        checkpoint_id=state.checksum(),
    )


@dataclass(frozen=True)
class PlantedDataset:
    """Synthetic dataset where each user's co-purchases share one preferred attribute field."""

    dataset: InteractionDataset
    preferred_field: np.ndarray  # (n_users,)
    home_value: np.ndarray  # (n_users,) value id on the preferred field
    pool_prob: float  # per-draw probability of sampling inside the home pool
    n_values: int


def _pool_probability(p_high: float, n_values: int) -> float:
    """Per-draw pool probability q so that two history items share the preferred
    field's value with probability p_high: q^2 + (1-q)^2/(n_values-1) = p_high."""
    eps = 1.0 / (n_values - 1)
    a = 1.0 + eps
    b = -2.0 * eps
    c = eps - p_high
    disc = b * b - 4.0 * a * c
    return float((-b + math.sqrt(disc)) / (2.0 * a))


def make_planted_dataset(
    n_users: int,
    n_items: int,
    n_fields: int = 3,
    seed: int = 0,
    p_high: float = 0.9,
    p_low: float = 0.1,
    hist_range: tuple[int, int] = (8, 12),
) -> PlantedDataset:
    """Generate users whose histories share their preferred field's value.

    Attribute values are uniform over a vocabulary of ~1/p_low values per
    field, so unpreferred fields are shared at ~p_low by coincidence. Each
    history item is drawn from the user's home-value pool with probability q
    (solved so the pairwise sharing rate on the preferred field is p_high).
    With p_high=p_low the draw is exactly uniform: no planted preference.
    """
    if not 0.0 <= p_low <= p_high <= 1.0:
        raise ValueError("need 0 <= p_low <= p_high <= 1")
    rng = child_rng(seed, 6)
    n_values = n_items if p_low == 0 else max(2, round(1.0 / p_low))
    item_values = rng.integers(n_values, size=(n_items, n_fields))

    preferred = rng.integers(n_fields, size=n_users)
    home = np.zeros(n_users, dtype=int)
    q = 1.0 if p_high == 1.0 else _pool_probability(p_high, n_values)

    positives = []
    for u in range(n_users):
        anchor = int(rng.integers(n_items))
        v_star = int(item_values[anchor, preferred[u]])
        home[u] = v_star
        pool = np.flatnonzero(item_values[:, preferred[u]] == v_star)
        comp = np.flatnonzero(item_values[:, preferred[u]] != v_star)
        pool = pool[rng.permutation(pool.size)]
        comp = comp[rng.permutation(comp.size)]
        n_hist = int(rng.integers(hist_range[0], hist_range[1] + 1))
        take_pool = 0
        take_comp = 0
        hist = []
        for _ in range(n_hist):
            use_pool = rng.random() < q
            if use_pool and take_pool < pool.size:
                hist.append(int(pool[take_pool]))
                take_pool += 1
            elif take_comp < comp.size:
                hist.append(int(comp[take_comp]))
                take_comp += 1
            elif take_pool < pool.size:
                hist.append(int(pool[take_pool]))
                take_pool += 1
        positives.append(tuple(sorted(hist)))

    attributes = tuple(
        tuple(frozenset({f"v{item_values[i, k]}"}) for k in range(n_fields))
        for i in range(n_items)
    )
    ds = InteractionDataset(
        users=tuple(f"u{u}" for u in range(n_users)),
        items=tuple(f"i{i}" for i in range(n_items)),
        positives=tuple(positives),
        attributes=attributes,
        field_names=tuple(f"field{k}" for k in range(n_fields)),
    )
    return PlantedDataset(ds, preferred, home, q, n_values)


@dataclass
class ColdStartReport:
    held_items: tuple[int, ...]  # indices in the ORIGINAL dataset
    recall: dict[int, float]  # mean over held items
    per_item_recall: dict[int, np.ndarray]
    n_excluded: int  # held items with zero true purchasers
    seed: int


def coldstart_protocol(
    ds: InteractionDataset,
    cfg: trainer.TrainConfig,
    n_hold: int = 40,
    seed: int = 0,
    recall_ks: tuple[int, ...] = (5, 10, 20, 50),
    co_min: int = 1,
) -> ColdStartReport:
    """Hold items out of training entirely, train fresh, attach them by attributes,
    and rank all users by the minimum-similarity score.

    Recall@K for a held item is the fraction of its true purchasers found in
    the top-K ranked users. Held items never enter the training graphs; users
    left with an empty history are dropped from the ranking (logged).
    """
    if ds.heldout is not None:
        raise DataError("cold-start protocol expects a dataset without a leave-one-out split")
    rng = child_rng(seed, 5)
    purchasers = {
        i: frozenset(u for u in range(ds.n_users) if i in ds.positive_sets[u])
        for i in range(ds.n_items)
    }
    candidates = np.array([i for i in range(ds.n_items) if purchasers[i]], dtype=int)
    if candidates.size < n_hold:
        raise DataError(f"only {candidates.size} items have purchasers; cannot hold out {n_hold}")
    held = np.sort(candidates[rng.permutation(candidates.size)[:n_hold]])
    n_excluded = int(n_hold - held.size)
    held_set = set(held.tolist())

    keep = [i for i in range(ds.n_items) if i not in held_set]
    remap = {old: new for new, old in enumerate(keep)}
    new_positives = []
    for u in range(ds.n_users):
        new_positives.append(tuple(sorted(remap[i] for i in ds.positives[u] if i not in held_set)))
    empty_users = [u for u, p in enumerate(new_positives) if len(p) == 0]
    if empty_users:
        log.warning("%d users lost their whole history to the hold-out; excluded from ranking", len(empty_users))

    carved = InteractionDataset(
        users=ds.users,
        items=tuple(ds.items[i] for i in keep),
        positives=tuple(new_positives),
        attributes=tuple(ds.attributes[i] for i in keep),
        field_names=ds.field_names,
    )
    nets = netbuild.build_network_set(carved, co_min=co_min)
    result = trainer.train(carved, nets, cfg)
    state = result.state
    item_embeds = pers.compute_item_embeddings(state.autoencoders, nets)

    rankable = np.array([u for u in range(ds.n_users) if u not in set(empty_users)], dtype=int)
    per_item: dict[int, np.ndarray] = {}
    for x in held:
        attrs = ItemAttributes(ds.items[x], ds.attributes[x])
        rows = netbuild.attach_cold_item(nets, attrs)
        cold_embeds = np.stack(
            [encoder.encode_cold(state.autoencoders[k], rows[k]) for k in range(state.n_fields)]
        )
        scores = np.array(
            [
                recommend.score_cold_item(u, cold_embeds, state, item_embeds, carved.positives[u])
                for u in rankable
            ]
        )
        order = np.lexsort((rankable, -scores))
        ranked_users = rankable[order]
        true = purchasers[x] - set(empty_users)
        if not true:
            log.warning("held item %d has no rankable purchasers; excluded", x)
            n_excluded += 1
            continue
        recalls = []
        for k in recall_ks:
            top = set(ranked_users[:k].tolist())
            recalls.append(len(top & true) / len(true))
        per_item[int(x)] = np.array(recalls)

    if not per_item:
        raise DataError("no held item had any rankable purchaser")
    mean = np.mean(np.stack(list(per_item.values())), axis=0)
    return ColdStartReport(
        held_items=tuple(int(x) for x in held),
        recall={k: float(m) for k, m in zip(recall_ks, mean)},
        per_item_recall=per_item,
        n_excluded=n_excluded,
        seed=seed,
    )


def mean_attention_per_user(
    state: trainer.ModelState,
    nets: AttributeNetworkSet,
    ds: InteractionDataset,
) -> np.ndarray:
    """Each user's mean attention profile over their TRAINING items (n_users, K)."""
    item_embeds = pers.compute_item_embeddings(state.autoencoders, nets)
    out = np.zeros((ds.n_users, state.n_fields))
    for u in range(ds.n_users):
        idx = np.asarray(ds.positives[u], dtype=int)
        if idx.size == 0:
            out[u] = 1.0 / state.n_fields
            continue
        _, w = pers.personalized_points(state.user_table[u], item_embeds[idx])
        out[u] = w.mean(axis=0)
    return out


@dataclass
class AblationReport:
    field_index: int
    groups: dict[str, np.ndarray]  # Max / Min / Random user index arrays
    group_precision: dict[str, dict[int, float]]
    group_ndcg: dict[str, dict[int, float]]
    group_mean_attention: dict[str, float]
    seed: int


def attention_ablation(
    ds: InteractionDataset,
    nets: AttributeNetworkSet,
    base_state: trainer.ModelState,
    cfg: trainer.TrainConfig,
    field_index: int,
    group_size: int = 40,
    seed: int = 0,
    ks: tuple[int, ...] = (5, 10, 15),
) -> AblationReport:
    """Retrain without one attribute network and compare user groups selected by
    their attention on it (largest / smallest / random)."""
    if ds.heldout is None:
        raise DataError("attention ablation needs a leave-one-out split for evaluation")
    if not 0 <= field_index < nets.n_fields:
        raise DataError(f"field_index {field_index} out of range")
    att = mean_attention_per_user(base_state, nets, ds)[:, field_index]

    size = group_size
    if 3 * group_size > ds.n_users:
        size = ds.n_users // 3
        log.warning(
            "only %d users; shrinking ablation groups from %d to %d",
            ds.n_users,
            group_size,
            size,
        )
    order = np.lexsort((np.arange(ds.n_users), -att))
    groups = {"Max": np.sort(order[:size]), "Min": np.sort(order[-size:])}
    rest = np.array(
        [u for u in range(ds.n_users) if u not in set(groups["Max"]) | set(groups["Min"])]
    )
    rng = child_rng(seed, 9)
    groups["Random"] = np.sort(rest[rng.permutation(rest.size)[:size]])

    keep_fields = [k for k in range(nets.n_fields) if k != field_index]
    reduced = InteractionDataset(
        users=ds.users,
        items=ds.items,
        positives=ds.positives,
        attributes=tuple(tuple(item[k] for k in keep_fields) for item in ds.attributes),
        field_names=tuple(ds.field_names[k] for k in keep_fields),
        timestamps=ds.timestamps,
        heldout=ds.heldout,
        split_seed=ds.split_seed,
    )
    reduced_nets = netbuild.build_network_set(reduced, co_min=1)
    result = trainer.train(reduced, reduced_nets, cfg)
    slates = build_slates(reduced, seed)
    report = evaluate_leave_one_out(result.state, reduced_nets, reduced, slates, ks)

    group_precision = {}
    group_ndcg = {}
    group_attention = {}
    for name, members in groups.items():
        ranks = report.per_user_rank[members]
        group_precision[name] = {
            k: float(np.mean([precision_at_k(r, k) for r in ranks])) for k in ks
        }
        group_ndcg[name] = {k: float(np.mean([ndcg_at_k(r, k) for r in ranks])) for k in ks}
        group_attention[name] = float(att[members].mean())
    return AblationReport(
        field_index=field_index,
        groups=groups,
        group_precision=group_precision,
        group_ndcg=group_ndcg,
        group_mean_attention=group_attention,
        seed=seed,
    )


def sensitivity_sweep(
    ds: InteractionDataset,
    nets: AttributeNetworkSet,
    base_cfg: trainer.TrainConfig,
    param: str,
    values,
    seed: int = 0,
    ks: tuple[int, ...] = (5, 10, 15),
) -> dict[float, MetricReport]:
    """Train and evaluate once per value of ``embedding_size`` or ``alpha``."""
    if param not in ("embedding_size", "alpha"):
        raise DataError(f"unknown sweep parameter {param!r}")
    out = {}
    slates = build_slates(ds, seed)
    for value in values:
        if param == "alpha":
            cfg = replace(base_cfg, alpha=float(value))
        else:
            dims = tuple(base_cfg.hidden_dims[:-1]) + (int(value),)
            cfg = replace(base_cfg, hidden_dims=dims)
        result = trainer.train(ds, nets, cfg)
        out[float(value)] = evaluate_leave_one_out(result.state, nets, ds, slates, ks)
    return out
