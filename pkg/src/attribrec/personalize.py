"""User embeddings, per-attribute attention, and personalized item similarity.

A user's attention over an item's K attribute embeddings is the softmax of the
dot products with the user vector; the personalized item representation is the
resulting convex combination; similarity between two items for that user is
the negative squared Euclidean distance between their personalized
representations. The per-triple ranking term and its analytic gradients live
here too (the trainer runs a batched equivalent).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy.special import expit as _sigmoid

from ._util import atomic_write_text
from .encoder import AutoencoderModel, _forward_layers


@dataclass(frozen=True)
class AttentionProfile:
    raw: np.ndarray  # (K,) dot products
    normalized: np.ndarray  # (K,) softmax weights, positive, sum 1


@dataclass(frozen=True)
class TripleGradients:
    """Gradients of log sigmoid(d2_pos - d2_neg) for one (user, i, j, n) triple."""

    loss: float
    grad_user: np.ndarray  # (d,)
    grad_h_i: np.ndarray  # (K, d)
    grad_h_j: np.ndarray  # (K, d)
    grad_h_n: np.ndarray  # (K, d)


def init_user_table(n_users: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Seeded uniform init in [-0.1, 0.1]."""
    return rng.uniform(-0.1, 0.1, size=(n_users, dim))


def softmax(a: np.ndarray, axis: int = -1) -> np.ndarray:
    z = a - a.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def attention_scores(z_u: np.ndarray, item_embeds: np.ndarray) -> AttentionProfile:
    """Dot-product attention of a user over an item's K attribute embeddings."""
    z_u = np.asarray(z_u, dtype=np.float64)
    item_embeds = np.asarray(item_embeds, dtype=np.float64)
    if item_embeds.ndim != 2 or item_embeds.shape[1] != z_u.shape[0]:
        raise ValueError(
            f"item_embeds shape {item_embeds.shape} incompatible with user dim {z_u.shape}"
        )
    raw = item_embeds @ z_u
    return AttentionProfile(raw=raw, normalized=softmax(raw))


def personalized_rep(profile: AttentionProfile, item_embeds: np.ndarray) -> np.ndarray:
    """Attention-weighted convex combination of the K attribute embeddings."""
    return profile.normalized @ np.asarray(item_embeds, dtype=np.float64)


def personalized_similarity(h_ui: np.ndarray, h_uj: np.ndarray) -> float:
    """Negative squared Euclidean distance; 0 is maximal similarity."""
    h_ui = np.asarray(h_ui, dtype=np.float64)
    h_uj = np.asarray(h_uj, dtype=np.float64)
    if h_ui.shape != h_uj.shape:
        raise ValueError(f"shape mismatch {h_ui.shape} vs {h_uj.shape}")
    diff = h_ui - h_uj
    return float(-np.dot(diff, diff))


def triple_rank_loss(
    z_u: np.ndarray,
    h_i: np.ndarray,
    h_j: np.ndarray,
    h_n: np.ndarray,
    corrective: bool = False,
) -> float:
    """Per-triple ranking term under the user's attention.

    Default: log sigmoid(||p_i - p_j||^2 - ||p_i - p_n||^2), the literal form.
    corrective=True negates the argument, -log sigmoid(d2_neg - d2_pos).
    """
    reps = [
        personalized_rep(attention_scores(z_u, h), h) for h in (h_i, h_j, h_n)
    ]
    u = -personalized_similarity(reps[0], reps[1]) + personalized_similarity(reps[0], reps[2])
    if corrective:
        return float(np.logaddexp(0.0, u))
    return float(-np.logaddexp(0.0, -u))


def _attention_backward(g_p: np.ndarray, h: np.ndarray, w: np.ndarray, z: np.ndarray):
    """Backprop an upstream gradient on the personalized rep through softmax attention.

    Returns (grad on the K embeddings, grad on the user vector).
    """
    c = h @ g_p  # (K,) per-attribute dot with the upstream gradient
    centered = w * (c - np.dot(w, c))  # softmax Jacobian applied to c
    g_h = w[:, None] * g_p[None, :] + centered[:, None] * z[None, :]
    g_z = centered @ h
    return g_h, g_z


def personalize_gradients(
    z_u: np.ndarray,
    h_i: np.ndarray,
    h_j: np.ndarray,
    h_n: np.ndarray,
    corrective: bool = False,
) -> TripleGradients:
    """Analytic gradients of the per-triple ranking term.

    At K=1 the softmax is constant, so the user vector receives an exactly
    zero gradient (its only path is through the attention weights).
    """
    z_u = np.asarray(z_u, dtype=np.float64)
    embeds = [np.asarray(h, dtype=np.float64) for h in (h_i, h_j, h_n)]
    profiles = [attention_scores(z_u, h) for h in embeds]
    reps = [personalized_rep(p, h) for p, h in zip(profiles, embeds)]
    p_i, p_j, p_n = reps

    d_pos = p_i - p_j
    d_neg = p_i - p_n
    u = float(np.dot(d_pos, d_pos) - np.dot(d_neg, d_neg))
    if corrective:
        loss = float(np.logaddexp(0.0, u))
        coef = float(_sigmoid(u))
    else:
        loss = float(-np.logaddexp(0.0, -u))
        coef = float(_sigmoid(-u))  # d loss / d u

    g_pi = 2.0 * coef * (p_n - p_j)
    g_pj = -2.0 * coef * d_pos
    g_pn = 2.0 * coef * d_neg

    grad_z = np.zeros_like(z_u)
    grads_h = []
    for g_p, h, prof in zip((g_pi, g_pj, g_pn), embeds, profiles):
        g_h, g_z = _attention_backward(g_p, h, prof.normalized, z_u)
        grads_h.append(g_h)
        grad_z += g_z
    return TripleGradients(loss, grad_z, grads_h[0], grads_h[1], grads_h[2])


def compute_item_embeddings(
    autoencoders: list[AutoencoderModel], nets, chunk: int = 1024
) -> np.ndarray:
    """Encode every item's adjacency row in every attribute network.

    Returns an array (n_items, K, d); rows are processed in chunks to bound
    memory at full scale.
    """
    n = nets.n_items
    k_count = len(autoencoders)
    d = autoencoders[0].embedding_dim
    out = np.empty((n, k_count, d), dtype=np.float64)
    for k, model in enumerate(autoencoders):
        adj = nets.graphs[k].adjacency
        for start in range(0, n, chunk):
            stop = min(start + chunk, n)
            X = adj[start:stop].toarray()
            out[start:stop, k, :] = _forward_layers(model.encoder_layers, X)[-1]
    return out


def personalized_points(z_u: np.ndarray, H: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Personalized representations for many items at once.

    H is (n, K, d); returns (reps (n, d), attention weights (n, K)).
    """
    a = np.einsum("nkd,d->nk", H, z_u)
    w = softmax(a, axis=1)
    return np.einsum("nk,nkd->nd", w, H), w


def export_embeddings(
    user_table: np.ndarray,
    user_ids,
    item_embeds: np.ndarray,
    item_ids,
    field_names,
    out_dir: str,
) -> list[str]:
    """Write user and per-attribute item embeddings as tab-delimited text."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []

    def fmt(vec):
        return "\t".join(repr(float(v)) for v in vec)

    lines = [f"{uid}\t{fmt(user_table[u])}" for u, uid in enumerate(user_ids)]
    path = os.path.join(out_dir, "user_embeddings.tsv")
    atomic_write_text(path, "\n".join(lines) + "\n")
    paths.append(path)

    for k, name in enumerate(field_names):
        lines = [f"{iid}\t{fmt(item_embeds[i, k])}" for i, iid in enumerate(item_ids)]
        path = os.path.join(out_dir, f"item_embeddings_{name}.tsv")
        atomic_write_text(path, "\n".join(lines) + "\n")
        paths.append(path)
    return paths
