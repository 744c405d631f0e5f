"""Load raw interactions and item attributes into an indexed implicit-feedback dataset.

File formats
------------
Interactions: delimited text (default comma), one interaction per row with
user, item, rating and an optional integer timestamp column; positions are
given by a ColumnMap. A header row is skipped when ``has_header`` is set.

Attributes: delimited text, one row per item: the item id first, then one
column per attribute field. Multi-valued fields pack their values with a
secondary separator (default ``|``), e.g. ``actor1|actor2|actor3``.

Filtering keeps interactions whose rating is strictly above the threshold,
drops items with missing attribute values, collapses duplicate (user, item)
pairs into a single positive, and removes users with too little history,
iterating until nothing changes. The result is an InteractionDataset over
dense integer indices; a leave-one-out split then moves exactly one positive
per user into the held-out test slot.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from ._util import atomic_write_text, child_rng
from .errors import DataError

log = logging.getLogger(__name__)

MANIFEST_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class RawInteraction:
    user_id: str
    item_id: str
    rating: float
    timestamp: int | None = None


@dataclass(frozen=True)
class ColumnMap:
    """Column positions in a delimited interactions file."""

    user: int = 0
    item: int = 1
    rating: int = 2
    timestamp: int | None = None
    delimiter: str = ","
    has_header: bool = False


@dataclass(frozen=True)
class ItemAttributes:
    """One item's attribute values: a value set per field (multi-valued fields allowed)."""

    item_id: str
    values: tuple[frozenset[str], ...]


@dataclass(eq=False)
class InteractionDataset:
    """Indexed positives plus per-item attributes; treat as immutable once built.

    ``positives`` holds each user's training items (sorted indices). Before the
    leave-one-out split ``heldout`` is None; after it, ``heldout[u]`` is the one
    test item of user ``u`` and is absent from ``positives[u]``.
    """

    users: tuple[str, ...]
    items: tuple[str, ...]
    positives: tuple[tuple[int, ...], ...]
    attributes: tuple[tuple[frozenset[str], ...], ...]
    field_names: tuple[str, ...]
    timestamps: tuple[dict[int, int], ...] | None = None
    heldout: tuple[int, ...] | None = None
    split_seed: int | None = None
    positive_sets: tuple[frozenset[int], ...] = field(init=False, repr=False)

    def __post_init__(self):
        self.positive_sets = tuple(frozenset(p) for p in self.positives)

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_items(self) -> int:
        return len(self.items)

    @property
    def n_fields(self) -> int:
        return len(self.field_names)


@dataclass(frozen=True)
class DatasetStats:
    n_users: int
    n_items: int
    n_actions: int
    n_features: int

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.n_users, self.n_items, self.n_actions, self.n_features)


def load_interactions(path: str, fmt: ColumnMap) -> list[RawInteraction]:
    """Parse a delimited interactions file; count and skip malformed rows.

    A row is malformed when it is too short for the configured columns or its
    rating is not a finite number. An unparsable timestamp is treated as
    missing, not malformed. More than 50% malformed rows aborts, since that
    almost always means a wrong column mapping.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read interactions file {path!r}: {exc}") from exc

    if fmt.has_header and lines:
        lines = lines[1:]

    needed = max(fmt.user, fmt.item, fmt.rating, fmt.timestamp if fmt.timestamp is not None else 0)
    out: list[RawInteraction] = []
    malformed = 0
    n_rows = 0
    for line in lines:
        if not line.strip():
            continue
        n_rows += 1
        cols = line.split(fmt.delimiter)
        if len(cols) <= needed:
            malformed += 1
            continue
        try:
            rating = float(cols[fmt.rating])
        except ValueError:
            malformed += 1
            continue
        if not np.isfinite(rating):
            malformed += 1
            continue
        ts: int | None = None
        if fmt.timestamp is not None:
            try:
                ts = int(float(cols[fmt.timestamp]))
            except ValueError:
                ts = None
        out.append(RawInteraction(cols[fmt.user].strip(), cols[fmt.item].strip(), rating, ts))

    if n_rows == 0:
        log.warning("interactions file %s contains no data rows", path)
        return []
    if malformed > 0:
        log.warning("skipped %d malformed rows of %d in %s", malformed, n_rows, path)
    if malformed * 2 > n_rows:
        raise DataError(
            f"{malformed}/{n_rows} rows malformed in {path!r}; check the column mapping"
        )
    return out


def load_attributes(
    path: str,
    delimiter: str = ",",
    value_sep: str = "|",
    has_header: bool = False,
) -> tuple[list[ItemAttributes], tuple[str, ...]]:
    """Parse a delimited attributes file into per-item value sets.

    Returns the records and the field names (taken from the header when
    present, else ``field0..field{K-1}``). Empty value cells produce empty
    sets here; items with any empty field are removed by filter_and_binarize.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read attributes file {path!r}: {exc}") from exc

    field_names: tuple[str, ...] | None = None
    if has_header and lines:
        header = lines[0].split(delimiter)
        field_names = tuple(h.strip() for h in header[1:])
        lines = lines[1:]
    if not lines:
        raise DataError(f"attributes file {path!r} has no item rows")

    n_fields = len(lines[0].split(delimiter)) - 1
    if n_fields < 1:
        raise DataError(f"attributes file {path!r} has no attribute columns")
    if field_names is None:
        field_names = tuple(f"field{k}" for k in range(n_fields))
    elif len(field_names) != n_fields:
        raise DataError(
            f"attributes header names {len(field_names)} fields but rows carry {n_fields}"
        )

    records: dict[str, ItemAttributes] = {}
    for line in lines:
        cols = line.split(delimiter)
        if len(cols) != n_fields + 1:
            raise DataError(
                f"attribute row for {cols[0]!r} has {len(cols) - 1} fields, expected {n_fields}"
            )
        item_id = cols[0].strip()
        values = tuple(
            frozenset(v.strip() for v in cell.split(value_sep) if v.strip())
            for cell in cols[1:]
        )
        if item_id in records:
            log.warning("duplicate attribute row for item %s; keeping the last", item_id)
        records[item_id] = ItemAttributes(item_id, values)
    return list(records.values()), field_names


def bin_numeric_fields(
    attrs: list[ItemAttributes], field_indices: list[int], n_bins: int = 10
) -> list[ItemAttributes]:
    """Replace numeric attribute fields with quantile-bin labels.

    Continuous fields (page counts, prices) would otherwise almost never
    intersect between items; binning gives them a shared categorical vocabulary.
    """
    if not field_indices:
        return attrs
    edges_per_field: dict[int, np.ndarray] = {}
    for k in field_indices:
        vals = []
        for rec in attrs:
            for v in rec.values[k]:
                try:
                    vals.append(float(v))
                except ValueError:
                    raise DataError(
                        f"field {k} of item {rec.item_id!r} has non-numeric value {v!r}"
                    ) from None
        if not vals:
            edges_per_field[k] = np.array([])
            continue
        qs = np.linspace(0.0, 1.0, n_bins + 1)[1:-1]
        edges_per_field[k] = np.quantile(np.asarray(vals, dtype=float), qs)

    out = []
    for rec in attrs:
        values = list(rec.values)
        for k in field_indices:
            edges = edges_per_field[k]
            binned = frozenset(
                f"bin{int(np.searchsorted(edges, float(v), side='right'))}" for v in rec.values[k]
            )
            values[k] = binned
        out.append(ItemAttributes(rec.item_id, tuple(values)))
    return out


def filter_and_binarize(
    raw: list[RawInteraction],
    attrs: list[ItemAttributes],
    min_history: int = 5,
    rating_threshold: float = 3.0,
    field_names: tuple[str, ...] | None = None,
) -> InteractionDataset:
    """Apply the filtering rules and build the indexed dataset (no hold-out yet).

    Order: rating threshold (strictly greater keeps), missing-attribute item
    removal, duplicate collapse, then user/item pruning iterated to a fixed
    point. Duplicate pairs keep the latest known timestamp.
    """
    if not attrs:
        raise DataError("no attribute records supplied")
    n_fields = len(attrs[0].values)
    for rec in attrs:
        if len(rec.values) != n_fields:
            raise DataError(
                f"item {rec.item_id!r} has {len(rec.values)} attribute fields, expected {n_fields}"
            )
    if field_names is None:
        field_names = tuple(f"field{k}" for k in range(n_fields))

    counts = {"raw": len(raw)}
    kept = [r for r in raw if r.rating > rating_threshold]
    counts["after_rating_threshold"] = len(kept)

    complete = {rec.item_id: rec for rec in attrs if all(len(s) > 0 for s in rec.values)}
    kept = [r for r in kept if r.item_id in complete]
    counts["after_missing_attributes"] = len(kept)

    pairs: dict[tuple[str, str], int | None] = {}
    for r in kept:
        key = (r.user_id, r.item_id)
        prev = pairs.get(key, None)
        if key not in pairs or (r.timestamp is not None and (prev is None or r.timestamp > prev)):
            pairs[key] = r.timestamp
    counts["after_dedup"] = len(pairs)

    by_user: dict[str, dict[str, int | None]] = {}
    for (u, i), ts in pairs.items():
        by_user.setdefault(u, {})[i] = ts

    # Fixed point: dropping short-history users can orphan items, and item
    # removal rules could in turn shrink histories, so iterate until stable.
    while True:
        short = [u for u, hist in by_user.items() if len(hist) < min_history]
        for u in short:
            del by_user[u]
        live_items = {i for hist in by_user.values() for i in hist}
        changed = bool(short)
        if not changed:
            break
    counts["users_final"] = len(by_user)
    counts["items_final"] = len(live_items)
    counts["actions_final"] = sum(len(h) for h in by_user.values())

    if not by_user:
        raise DataError(f"dataset empty after filtering; stage counts: {counts}")

    users = tuple(sorted(by_user))
    items = tuple(sorted(live_items))
    item_index = {i: idx for idx, i in enumerate(items)}

    positives = []
    timestamps = []
    any_ts = False
    for u in users:
        hist = by_user[u]
        idxs = tuple(sorted(item_index[i] for i in hist))
        positives.append(idxs)
        ts_map = {item_index[i]: ts for i, ts in hist.items() if ts is not None}
        any_ts = any_ts or bool(ts_map)
        timestamps.append(ts_map)

    attributes = tuple(complete[i].values for i in items)
    log.info("filter_and_binarize: %s", counts)
    return InteractionDataset(
        users=users,
        items=items,
        positives=tuple(positives),
        attributes=attributes,
        field_names=field_names,
        timestamps=tuple(timestamps) if any_ts else None,
    )


def leave_one_out_split(ds: InteractionDataset, seed: int) -> InteractionDataset:
    """Move one positive per user into the held-out slot.

    Selection is the latest interaction by timestamp when the user has any
    timestamps (ties broken by lowest item index), else a uniform draw from
    the seeded generator. Deterministic for a fixed (dataset, seed).
    """
    rng = child_rng(seed, 0)
    heldout = []
    new_positives = []
    for u in range(ds.n_users):
        pos = ds.positives[u]
        if len(pos) < 2:
            raise DataError(
                f"user {ds.users[u]!r} has {len(pos)} positives; leave-one-out needs >= 2 "
                "(filtering contract violated)"
            )
        ts_map = ds.timestamps[u] if ds.timestamps is not None else {}
        stamped = [i for i in pos if i in ts_map]
        if stamped:
            best_ts = max(ts_map[i] for i in stamped)
            choice = min(i for i in stamped if ts_map[i] == best_ts)
        else:
            choice = pos[int(rng.integers(len(pos)))]
        heldout.append(choice)
        new_positives.append(tuple(i for i in pos if i != choice))

    return InteractionDataset(
        users=ds.users,
        items=ds.items,
        positives=tuple(new_positives),
        attributes=ds.attributes,
        field_names=ds.field_names,
        timestamps=ds.timestamps,
        heldout=tuple(heldout),
        split_seed=int(seed),
    )


def dataset_stats(ds: InteractionDataset) -> DatasetStats:
    """Post-filter counts: users, items, positive actions (incl. held-out), fields."""
    actions = sum(len(p) for p in ds.positives)
    if ds.heldout is not None:
        actions += len(ds.heldout)
    return DatasetStats(ds.n_users, ds.n_items, actions, ds.n_fields)


def save_manifest(ds: InteractionDataset, path: str) -> None:
    """Serialize the dataset (index maps, split, attributes) for downstream stages."""
    doc = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "split_seed": ds.split_seed,
        "field_names": list(ds.field_names),
        "users": list(ds.users),
        "items": list(ds.items),
        "positives": [list(p) for p in ds.positives],
        "attributes": [[sorted(s) for s in item] for item in ds.attributes],
        "timestamps": None
        if ds.timestamps is None
        else [sorted(m.items()) for m in ds.timestamps],
        "heldout": None if ds.heldout is None else list(ds.heldout),
    }
    atomic_write_text(path, json.dumps(doc))


def load_manifest(path: str) -> InteractionDataset:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read dataset manifest {path!r}: {exc}") from exc
    if doc.get("schema_version") != MANIFEST_SCHEMA_VERSION:
        raise DataError(
            f"manifest {path!r} has schema_version {doc.get('schema_version')}, "
            f"expected {MANIFEST_SCHEMA_VERSION}"
        )
    return InteractionDataset(
        users=tuple(doc["users"]),
        items=tuple(doc["items"]),
        positives=tuple(tuple(p) for p in doc["positives"]),
        attributes=tuple(
            tuple(frozenset(vals) for vals in item) for item in doc["attributes"]
        ),
        field_names=tuple(doc["field_names"]),
        timestamps=None
        if doc["timestamps"] is None
        else tuple({int(i): int(t) for i, t in entries} for entries in doc["timestamps"]),
        heldout=None if doc["heldout"] is None else tuple(doc["heldout"]),
        split_seed=doc["split_seed"],
    )
