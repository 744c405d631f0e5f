"""Joint mini-batch optimization of the attribute autoencoders and user embeddings.

The objective is the weighted reconstruction loss over the adjacency rows of
the items appearing in each batch, plus ``alpha`` times the pairwise ranking
loss over sampled (user, positive pair, negative) triples; both are minimized
with bias-corrected Adam. Modes: ``full`` (both terms), ``l1`` (ranking loss
only), ``l2`` (reconstruction only, user embeddings frozen at 1.0).

Training is deterministic for a fixed seed when run single-threaded.
"""

from __future__ import annotations

import copy
import io
import json
import math
import os
import tempfile
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit as _sigmoid

from . import encoder as enc
from . import personalize as pers
from ._util import array_checksum, atomic_write_text, child_rng, stable_hash
from .errors import DataError, NumericalError
from .ingest import InteractionDataset
from .netbuild import AttributeNetworkSet

CHECKPOINT_SCHEMA_VERSION = 1
MODES = ("full", "l1", "l2")


RANK_LOSS_VARIANTS = ("corrective", "literal")


@dataclass(frozen=True)
class TrainConfig:
    """``rank_loss_variant`` picks the sign convention of the ranking term.

    Both variants prefer a user's positive pairs closer than sampled negatives;
    they differ in where the gradient concentrates. The default ``corrective``
    minimizes -log sigmoid(d2_neg - d2_pos), pushing hardest on violated
    triples. ``literal`` minimizes log sigmoid(d2_pos - d2_neg) exactly as a
    loss, whose gradient instead keeps pushing on already-satisfied triples; it
    is kept as a diagnostic (the CLI exposes it as --flip-rank-sign).
    """

    batch_size: int = 2000
    learning_rate: float = 0.001
    alpha: float = 1500.0
    beta: float = 0.2
    epochs: int = 200
    negatives_per_pair: int = 1
    seed: int = 0
    mode: str = "full"
    hidden_dims: tuple[int, ...] = (1024, 256, 32)
    rank_loss_variant: str = "corrective"
    validation: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.rank_loss_variant not in RANK_LOSS_VARIANTS:
            raise ValueError(
                f"rank_loss_variant must be one of {RANK_LOSS_VARIANTS}, "
                f"got {self.rank_loss_variant!r}"
            )
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.negatives_per_pair < 1:
            raise ValueError("negatives_per_pair must be >= 1")


@dataclass(frozen=True)
class TrainingTriple:
    user: int
    pos_i: int
    pos_j: int
    neg: int


@dataclass
class ModelState:
    """All trainable parameters plus the provenance needed to reuse them."""

    autoencoders: list[enc.AutoencoderModel]
    user_table: np.ndarray
    field_names: tuple[str, ...]
    config: TrainConfig

    @property
    def n_fields(self) -> int:
        return len(self.autoencoders)

    @property
    def n_items(self) -> int:
        return self.autoencoders[0].n_items

    @property
    def embedding_dim(self) -> int:
        return self.autoencoders[0].embedding_dim

    def checksum(self) -> str:
        return array_checksum([a for _, a in param_blocks(self)])


def init_state(nets: AttributeNetworkSet, n_users: int, cfg: TrainConfig) -> ModelState:
    """Seeded parameter init; l2 mode freezes the user table at the constant 1.0."""
    autoencoders = [
        enc.init_autoencoder(nets.n_items, cfg.hidden_dims, k, child_rng(cfg.seed, 1, k))
        for k in range(nets.n_fields)
    ]
    d = autoencoders[0].embedding_dim
    if cfg.mode == "l2":
        user_table = np.ones((n_users, d), dtype=np.float64)
    else:
        user_table = pers.init_user_table(n_users, d, child_rng(cfg.seed, 2))
    return ModelState(autoencoders, user_table, nets.field_names, cfg)


def param_blocks(state: ModelState) -> list[tuple[str, np.ndarray]]:
    """Named views of every trainable array, in a fixed order."""
    blocks = []
    for k, ae in enumerate(state.autoencoders):
        for t, layer in enumerate(ae.encoder_layers):
            blocks.append((f"ae{k}.enc{t}.W", layer.weights))
            blocks.append((f"ae{k}.enc{t}.b", layer.bias))
        for t, layer in enumerate(ae.decoder_layers):
            blocks.append((f"ae{k}.dec{t}.W", layer.weights))
            blocks.append((f"ae{k}.dec{t}.b", layer.bias))
    blocks.append(("user_table", state.user_table))
    return blocks


def sample_batch(
    ds: InteractionDataset, cfg: TrainConfig, rng: np.random.Generator
) -> list[TrainingTriple]:
    """Draw batch_size triples: uniform user, uniform ordered positive pair, rejection-sampled negative."""
    lengths = np.fromiter((len(p) for p in ds.positives), dtype=int, count=ds.n_users)
    eligible = np.flatnonzero(lengths >= 2)
    if eligible.size == 0:
        raise DataError("no user has >= 2 training positives; cannot sample pairs")
    n_items = ds.n_items
    m = cfg.negatives_per_pair
    n_pairs = math.ceil(cfg.batch_size / m)

    triples: list[TrainingTriple] = []
    users = eligible[rng.integers(eligible.size, size=n_pairs)]
    for u in users:
        pos = ds.positives[u]
        pos_set = ds.positive_sets[u]
        if len(pos) == n_items:
            raise DataError(
                f"user {ds.users[u]!r} has every item as a positive; no negative exists"
            )
        a = int(rng.integers(len(pos)))
        b = int(rng.integers(len(pos) - 1))
        if b >= a:
            b += 1
        for _ in range(m):
            while True:
                n = int(rng.integers(n_items))
                if n not in pos_set:
                    break
            triples.append(TrainingTriple(int(u), pos[a], pos[b], n))
            if len(triples) == cfg.batch_size:
                return triples
    return triples


@dataclass
class BatchRows:
    """Adjacency rows of the distinct items in a batch, one row matrix per network."""

    uniq_items: np.ndarray  # (U,)
    rows: list[np.ndarray]  # per attribute network: (U, n_items)
    users: np.ndarray  # (B,)
    pos_i: np.ndarray  # (B,) positions into uniq_items
    pos_j: np.ndarray
    pos_n: np.ndarray


def batch_rows(nets: AttributeNetworkSet, batch: list[TrainingTriple]) -> BatchRows:
    users = np.array([t.user for t in batch], dtype=int)
    items = np.array([[t.pos_i, t.pos_j, t.neg] for t in batch], dtype=int)
    uniq, inv = np.unique(items.ravel(), return_inverse=True)
    inv = inv.reshape(items.shape)
    rows = [g.dense_rows(uniq) for g in nets.graphs]
    return BatchRows(uniq, rows, users, inv[:, 0], inv[:, 1], inv[:, 2])


def _rank_pass(
    Z: np.ndarray,
    Hi: np.ndarray,
    Hj: np.ndarray,
    Hn: np.ndarray,
    want_grads: bool,
    corrective: bool = False,
):
    """Ranking loss (and optionally gradients) for a batch of triples.

    Z is (B, d); Hi/Hj/Hn are (B, K, d). Returns
    (loss_sum, grad_Z, grad_Hi, grad_Hj, grad_Hn).

    corrective=False: sum of log sigmoid(d2_pos - d2_neg) (the literal term).
    corrective=True: sum of -log sigmoid(d2_neg - d2_pos). Both are minimized
    and both prefer positives closer than negatives.
    """
    weights = []
    points = []
    for H in (Hi, Hj, Hn):
        a = np.einsum("bkd,bd->bk", H, Z)
        w = pers.softmax(a, axis=1)
        weights.append(w)
        points.append(np.einsum("bk,bkd->bd", w, H))
    p_i, p_j, p_n = points

    d_pos = p_i - p_j
    d_neg = p_i - p_n
    u = np.einsum("bd,bd->b", d_pos, d_pos) - np.einsum("bd,bd->b", d_neg, d_neg)
    if corrective:
        loss = float(np.logaddexp(0.0, u).sum())
    else:
        loss = float(-np.logaddexp(0.0, -u).sum())
    if not want_grads:
        return loss, None, None, None, None

    coef = (_sigmoid(u) if corrective else _sigmoid(-u))[:, None]  # d loss / d u
    g_points = (2.0 * coef * (p_n - p_j), -2.0 * coef * d_pos, 2.0 * coef * d_neg)

    grad_Z = np.zeros_like(Z)
    grads_H = []
    for g_p, H, w in zip(g_points, (Hi, Hj, Hn), weights):
        c = np.einsum("bkd,bd->bk", H, g_p)
        centered = w * (c - np.einsum("bk,bk->b", w, c)[:, None])
        grads_H.append(w[:, :, None] * g_p[:, None, :] + centered[:, :, None] * Z[:, None, :])
        grad_Z += np.einsum("bk,bkd->bd", centered, H)
    return loss, grad_Z, grads_H[0], grads_H[1], grads_H[2]


@dataclass(frozen=True)
class LossParts:
    net: float  # reconstruction term, unscaled
    rank: float  # sum of log sigmoid terms, unscaled
    rec: float  # the mode's combined objective


def _combined(parts_net: float, parts_rank: float, cfg: TrainConfig) -> float:
    if cfg.mode == "l1":
        return cfg.alpha * parts_rank
    if cfg.mode == "l2":
        return parts_net
    return parts_net + cfg.alpha * parts_rank


def _forward_embeddings(state: ModelState, rows: BatchRows, keep_acts: bool):
    acts_per_k = []
    H = np.empty(
        (len(rows.uniq_items), state.n_fields, state.embedding_dim), dtype=np.float64
    )
    for k, ae in enumerate(state.autoencoders):
        acts = enc.forward_pass(ae, rows.rows[k])
        H[:, k, :] = acts[len(ae.encoder_layers)]
        acts_per_k.append(acts if keep_acts else None)
    return H, acts_per_k


def ranking_loss(batch: list[TrainingTriple], rows: BatchRows, state: ModelState) -> float:
    """Sum over triples of the literal term log sigmoid(d2_pos - d2_neg).

    This is the printed form of the pairwise objective; the training default
    optimizes the corrective variant instead (see TrainConfig).
    """
    H, _ = _forward_embeddings(state, rows, keep_acts=False)
    Z = state.user_table[rows.users]
    loss, *_ = _rank_pass(Z, H[rows.pos_i], H[rows.pos_j], H[rows.pos_n], want_grads=False)
    return loss


def joint_loss(
    batch: list[TrainingTriple], rows: BatchRows, state: ModelState, cfg: TrainConfig
) -> float:
    """The mode's objective on one batch; alpha=0 in full mode reduces it to the reconstruction term."""
    return _combined(*_loss_parts(batch, rows, state, cfg)[:2], cfg)


def _loss_parts(batch, rows, state, cfg) -> tuple[float, float]:
    penalty = enc.ReconPenalty(cfg.beta)
    H, acts_per_k = _forward_embeddings(state, rows, keep_acts=True)
    net = sum(
        enc.batch_recon_loss(rows.rows[k], acts_per_k[k][-1], penalty)
        for k in range(state.n_fields)
    )
    Z = state.user_table[rows.users]
    rank, *_ = _rank_pass(
        Z,
        H[rows.pos_i],
        H[rows.pos_j],
        H[rows.pos_n],
        want_grads=False,
        corrective=cfg.rank_loss_variant == "corrective",
    )
    return float(net), float(rank)


def joint_gradients(
    batch: list[TrainingTriple], rows: BatchRows, state: ModelState, cfg: TrainConfig
) -> tuple[list[np.ndarray], LossParts]:
    """Analytic gradients of the mode's objective for every parameter block.

    Returns gradients aligned with ``param_blocks(state)`` plus the loss parts.
    The reconstruction term covers each distinct batch item once per network;
    the ranking term backpropagates through the softmax attention into the
    encoders and the user table.
    """
    penalty = enc.ReconPenalty(cfg.beta)
    H, acts_per_k = _forward_embeddings(state, rows, keep_acts=True)

    net = sum(
        enc.batch_recon_loss(rows.rows[k], acts_per_k[k][-1], penalty)
        for k in range(state.n_fields)
    )

    Z = state.user_table[rows.users]
    want_rank_grads = cfg.mode != "l2"
    rank, g_Z, g_Hi, g_Hj, g_Hn = _rank_pass(
        Z,
        H[rows.pos_i],
        H[rows.pos_j],
        H[rows.pos_n],
        want_grads=want_rank_grads,
        corrective=cfg.rank_loss_variant == "corrective",
    )

    rank_scale = 0.0 if cfg.mode == "l2" else cfg.alpha

    g_H = None
    user_grad = np.zeros_like(state.user_table)
    if want_rank_grads and rank_scale != 0.0:
        g_H = np.zeros_like(H)
        np.add.at(g_H, rows.pos_i, g_Hi)
        np.add.at(g_H, rows.pos_j, g_Hj)
        np.add.at(g_H, rows.pos_n, g_Hn)
        g_H *= rank_scale
        np.add.at(user_grad, rows.users, g_Z)
        user_grad *= rank_scale

    grads: list[np.ndarray] = []
    include_recon = cfg.mode != "l1"
    for k, ae in enumerate(state.autoencoders):
        extra = g_H[:, k, :] if g_H is not None else None
        enc_g, dec_g = enc.backward_pass(
            ae,
            acts_per_k[k],
            penalty=penalty if include_recon else None,
            extra_embed_grad=extra,
        )
        for layer in enc_g:
            grads.extend((layer.weights, layer.bias))
        for layer in dec_g:
            grads.extend((layer.weights, layer.bias))
    if cfg.mode == "l2":
        user_grad = np.zeros_like(state.user_table)
    grads.append(user_grad)

    return grads, LossParts(float(net), float(rank), _combined(net, rank, cfg))


@dataclass
class AdamState:
    """Bias-corrected Adam accumulators, one pair per parameter block."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(params: list[np.ndarray]) -> AdamState:
    return AdamState(
        m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params]
    )


def adam_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    state: AdamState,
    lr: float,
    names: list[str] | None = None,
) -> tuple[list[np.ndarray], AdamState]:
    """One in-place Adam update across all blocks; rejects non-finite gradients."""
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameter blocks but {len(grads)} gradients")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for idx, (p, g) in enumerate(zip(params, grads)):
        if not np.all(np.isfinite(g)):
            where = names[idx] if names else f"block {idx}"
            raise NumericalError(f"non-finite gradient in {where}")
        m = state.m[idx]
        v = state.v[idx]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    l_net: float
    l_rank: float
    l_rec: float
    wall_time: float


@dataclass
class TrainResult:
    state: ModelState
    trace: list[EpochStats]
    adam: AdamState
    best_epoch: int | None = None


TRACE_HEADER = "epoch\tl_net\tl_rank\tl_rec\twall_time"


def format_trace(trace: list[EpochStats]) -> str:
    lines = [TRACE_HEADER]
    for row in trace:
        lines.append(
            f"{row.epoch}\t{row.l_net!r}\t{row.l_rank!r}\t{row.l_rec!r}\t{row.wall_time:.3f}"
        )
    return "\n".join(lines) + "\n"


def _snapshot(state: ModelState) -> ModelState:
    return ModelState(
        autoencoders=copy.deepcopy(state.autoencoders),
        user_table=state.user_table.copy(),
        field_names=state.field_names,
        config=state.config,
    )


def _carve_validation(ds: InteractionDataset, seed: int):
    """Hold one extra training positive per eligible user for checkpoint selection."""
    rng = child_rng(seed, 7)
    val_items = {}
    new_pos = []
    for u in range(ds.n_users):
        pos = ds.positives[u]
        if len(pos) >= 3:
            pick = pos[int(rng.integers(len(pos)))]
            val_items[u] = pick
            new_pos.append(tuple(i for i in pos if i != pick))
        else:
            new_pos.append(pos)
    carved = InteractionDataset(
        users=ds.users,
        items=ds.items,
        positives=tuple(new_pos),
        attributes=ds.attributes,
        field_names=ds.field_names,
        timestamps=ds.timestamps,
        heldout=ds.heldout,
        split_seed=ds.split_seed,
    )
    return carved, val_items


def _validation_p5(state: ModelState, nets, ds, val_items, seed: int) -> float:
    """P@5 of each validation item against 100 sampled negatives."""
    H = pers.compute_item_embeddings(state.autoencoders, nets)
    rng = child_rng(seed, 8)
    hits = 0
    for u, target in sorted(val_items.items()):
        exclude = set(ds.positives[u]) | {target}
        avail = np.array([i for i in range(ds.n_items) if i not in exclude])
        negs = avail[rng.permutation(avail.size)[:100]] if avail.size else avail
        cand = np.concatenate([[target], negs])
        z = state.user_table[u]
        pts, _ = pers.personalized_points(z, H[cand])
        own, _ = pers.personalized_points(z, H[np.array(ds.positives[u])])
        d2 = (
            (pts * pts).sum(axis=1)[:, None] - 2 * pts @ own.T + (own * own).sum(axis=1)[None, :]
        )
        scores = -d2.sum(axis=1)
        order = np.lexsort((cand, -scores))
        rank = int(np.flatnonzero(cand[order] == target)[0]) + 1
        if rank <= 5:
            hits += 1
    return hits / max(1, len(val_items))


def train(
    ds: InteractionDataset,
    nets: AttributeNetworkSet,
    cfg: TrainConfig,
    out_dir: str | None = None,
) -> TrainResult:
    """Run the optimization loop; returns the final (or best-validation) state.

    Per epoch: record the per-batch means of the loss terms, snapshot the last
    good parameters, and (when ``out_dir`` is set) refresh a rolling checkpoint
    and the loss trace. A non-finite loss or gradient aborts with the last good
    checkpoint preserved.
    """
    if ds.n_items != nets.n_items:
        raise DataError("dataset and networks disagree on the item space")
    val_ds, val_items = (ds, None)
    if cfg.validation:
        val_ds, val_items = _carve_validation(ds, cfg.seed)

    state = init_state(nets, ds.n_users, cfg)
    blocks = param_blocks(state)
    names = [n for n, _ in blocks]
    params = [a for _, a in blocks]
    adam = init_adam(params)
    rng = child_rng(cfg.seed, 3)

    total_pos = sum(len(p) for p in val_ds.positives)
    iters = max(1, math.ceil(total_pos / cfg.batch_size))

    trace: list[EpochStats] = []
    last_good = _snapshot(state)
    best: tuple[float, int, ModelState] | None = None

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        sums = np.zeros(3)
        for _ in range(iters):
            batch = sample_batch(val_ds, cfg, rng)
            rows = batch_rows(nets, batch)
            try:
                grads, parts = joint_gradients(batch, rows, state, cfg)
                if not np.isfinite(parts.rec):
                    raise NumericalError(f"non-finite loss at epoch {epoch}")
                adam_step(params, grads, adam, cfg.learning_rate, names)
            except NumericalError as exc:
                if out_dir is not None:
                    save_checkpoint(last_good, os.path.join(out_dir, "checkpoint_last_good.npz"))
                    atomic_write_text(os.path.join(out_dir, "loss_trace.tsv"), format_trace(trace))
                exc.last_good = last_good
                raise
            sums += (parts.net, parts.rank, parts.rec)
        wall = time.perf_counter() - t0
        trace.append(EpochStats(epoch, sums[0] / iters, sums[1] / iters, sums[2] / iters, wall))
        last_good = _snapshot(state)
        if val_items:
            p5 = _validation_p5(state, nets, val_ds, val_items, cfg.seed)
            if best is None or p5 > best[0]:
                best = (p5, epoch, _snapshot(state))
        if out_dir is not None:
            save_checkpoint(state, os.path.join(out_dir, "checkpoint_last.npz"), adam)
            atomic_write_text(os.path.join(out_dir, "loss_trace.tsv"), format_trace(trace))

    best_epoch = None
    if best is not None:
        best_epoch = best[1]
        state = best[2]
    if out_dir is not None:
        save_checkpoint(state, os.path.join(out_dir, "checkpoint.npz"), adam)
        atomic_write_text(os.path.join(out_dir, "loss_trace.tsv"), format_trace(trace))
    return TrainResult(state, trace, adam, best_epoch)


def save_checkpoint(state: ModelState, path: str, adam: AdamState | None = None) -> None:
    """Versioned binary dump: layer shapes, row-major matrices, seeds; bit-exact round-trip."""
    arrays: dict[str, np.ndarray] = {}
    for name, arr in param_blocks(state):
        arrays[name.replace(".", "__")] = arr
    meta = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "field_names": list(state.field_names),
        "layer_dims": state.autoencoders[0].layer_dims,
        "config": _config_doc(state.config),
        "n_users": int(state.user_table.shape[0]),
    }
    if adam is not None:
        for i, (m, v) in enumerate(zip(adam.m, adam.v)):
            arrays[f"adam_m_{i}"] = m
            arrays[f"adam_v_{i}"] = v
        meta["adam_step"] = adam.step
    buf = io.BytesIO()
    np.savez(buf, meta=np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8), **arrays)
    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".npz")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(buf.getvalue())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _config_doc(cfg: TrainConfig) -> dict:
    doc = dict(cfg.__dict__)
    doc["hidden_dims"] = list(cfg.hidden_dims)
    return doc


def config_from_doc(doc: dict) -> TrainConfig:
    doc = dict(doc)
    doc["hidden_dims"] = tuple(doc["hidden_dims"])
    return TrainConfig(**doc)


def load_checkpoint(path: str) -> tuple[ModelState, AdamState | None]:
    try:
        data = np.load(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read checkpoint {path!r}: {exc}") from exc
    meta = json.loads(bytes(data["meta"]).decode("utf-8"))
    if meta.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise DataError(
            f"checkpoint {path!r} has schema_version {meta.get('schema_version')}, "
            f"expected {CHECKPOINT_SCHEMA_VERSION}"
        )
    cfg = config_from_doc(meta["config"])
    dims = meta["layer_dims"]
    field_names = tuple(meta["field_names"])

    autoencoders = []
    for k in range(len(field_names)):
        enc_layers = []
        dec_layers = []
        for t in range(len(dims) - 1):
            enc_layers.append(
                enc.LayerParams(data[f"ae{k}__enc{t}__W"], data[f"ae{k}__enc{t}__b"])
            )
            dec_layers.append(
                enc.LayerParams(data[f"ae{k}__dec{t}__W"], data[f"ae{k}__dec{t}__b"])
            )
        autoencoders.append(enc.AutoencoderModel(k, enc_layers, dec_layers, list(dims)))
    state = ModelState(autoencoders, data["user_table"], field_names, cfg)

    adam = None
    if "adam_step" in meta:
        n_blocks = len(param_blocks(state))
        adam = AdamState(
            m=[data[f"adam_m_{i}"] for i in range(n_blocks)],
            v=[data[f"adam_v_{i}"] for i in range(n_blocks)],
            step=int(meta["adam_step"]),
        )
    return state, adam
