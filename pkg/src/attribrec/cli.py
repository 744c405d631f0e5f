"""Command-line surface tying the pipeline together.

Commands compose through file artifacts only: ``ingest`` writes a dataset
manifest, ``build`` the attribute networks, ``train`` a checkpoint and loss
trace, and ``eval`` / ``coldstart`` / ``recommend`` / ``export-embeddings``
consume them. Configuration comes from an INI file, overridden by
``ATTRIBREC_<SECTION>_<KEY>`` environment variables, then ``--set`` pairs and
dedicated flags; the effective config is written next to every command's
outputs. All randomness flows from one ``--seed``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys

import numpy as np

from . import evalkit, ingest, netbuild, personalize, recommend, trainer
from ._util import atomic_write_text
from .errors import ConfigError, DataError, NumericalError

log = logging.getLogger(__name__)

CONFIG_SCHEMA: dict[str, dict[str, tuple[type, object]]] = {
    "data": {
        "interactions": (str, ""),
        "attributes": (str, ""),
        "delimiter": (str, ","),
        "value_sep": (str, "|"),
        "has_header": (bool, False),
        "user_col": (int, 0),
        "item_col": (int, 1),
        "rating_col": (int, 2),
        "timestamp_col": (int, -1),  # -1 means no timestamp column
        "min_history": (int, 5),
        "rating_threshold": (float, 3.0),
        "numeric_fields": (str, ""),  # comma-separated field indices to quantile-bin
        "n_bins": (int, 10),
    },
    "netbuild": {"co_min": (int, 1)},
    "train": {
        "batch_size": (int, 2000),
        "learning_rate": (float, 0.001),
        "alpha": (float, 1500.0),
        "beta": (float, 0.2),
        "epochs": (int, 200),
        "negatives_per_pair": (int, 1),
        "mode": (str, "full"),
        "hidden_dims": (str, "1024,256,32"),
        "rank_loss_variant": (str, "corrective"),
        "validation": (bool, False),
    },
    "eval": {
        "eval_ks": (str, "5,10,15"),
        "n_negatives": (int, 100),
        "cold_recall_ks": (str, "5,10,20,50"),
        "n_hold": (int, 40),
    },
    "output": {"dir": (str, "runs/out"), "seed": (int, 0)},
}


def _coerce(section: str, key: str, value: str):
    typ, _ = CONFIG_SCHEMA[section][key]
    try:
        if typ is bool:
            low = str(value).strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        return typ(value)
    except ValueError:
        raise ConfigError(f"cannot parse [{section}] {key} = {value!r} as {typ.__name__}") from None


def load_config(path: str | None, overrides: list[str], env=None) -> dict[str, dict]:
    """Resolve the effective config: defaults < file < environment < --set pairs."""
    cfg = {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in CONFIG_SCHEMA.items()}
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"cannot read config file {path!r}")
        for sec in parser.sections():
            if sec not in CONFIG_SCHEMA:
                raise ConfigError(f"unknown config section [{sec}]")
            for key, value in parser.items(sec):
                if key not in CONFIG_SCHEMA[sec]:
                    raise ConfigError(f"unknown config key [{sec}] {key}")
                cfg[sec][key] = _coerce(sec, key, value)
    env = os.environ if env is None else env
    for sec, keys in CONFIG_SCHEMA.items():
        for key in keys:
            var = f"ATTRIBREC_{sec.upper()}_{key.upper()}"
            if var in env:
                cfg[sec][key] = _coerce(sec, key, env[var])
    for pair in overrides:
        if "=" not in pair or "." not in pair.split("=", 1)[0]:
            raise ConfigError(f"--set expects section.key=value, got {pair!r}")
        target, value = pair.split("=", 1)
        sec, key = target.split(".", 1)
        if sec not in CONFIG_SCHEMA or key not in CONFIG_SCHEMA[sec]:
            raise ConfigError(f"unknown config key [{sec}] {key}")
        cfg[sec][key] = _coerce(sec, key, value)
    return cfg


def write_effective_config(cfg: dict[str, dict], path: str) -> None:
    parser = configparser.ConfigParser()
    for sec, keys in cfg.items():
        parser[sec] = {k: str(v) for k, v in keys.items()}
    import io

    buf = io.StringIO()
    parser.write(buf)
    atomic_write_text(path, buf.getvalue())


def _int_list(text: str) -> tuple[int, ...]:
    parts = [p.strip() for p in str(text).split(",") if p.strip()]
    try:
        return tuple(int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"expected a comma-separated integer list, got {text!r}") from None


def _train_config(cfg: dict[str, dict], seed: int) -> trainer.TrainConfig:
    t = cfg["train"]
    try:
        return trainer.TrainConfig(
            batch_size=t["batch_size"],
            learning_rate=t["learning_rate"],
            alpha=t["alpha"],
            beta=t["beta"],
            epochs=t["epochs"],
            negatives_per_pair=t["negatives_per_pair"],
            seed=seed,
            mode=t["mode"],
            hidden_dims=_int_list(t["hidden_dims"]),
            rank_loss_variant=t["rank_loss_variant"],
            validation=t["validation"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _require_file(path: str, what: str) -> str:
    if not os.path.exists(path):
        raise DataError(f"{what} not found: {path!r}")
    return path


def _load_dataset(args, cfg) -> ingest.InteractionDataset:
    path = args.dataset or os.path.join(cfg["output"]["dir"], "dataset.json")
    return ingest.load_manifest(_require_file(path, "dataset manifest"))


def _load_networks(args, cfg) -> netbuild.AttributeNetworkSet:
    path = args.networks or os.path.join(cfg["output"]["dir"], "networks.json")
    return netbuild.load_networks(_require_file(path, "networks artifact"))


def _load_checkpoint(args, cfg) -> trainer.ModelState:
    path = args.checkpoint or os.path.join(cfg["output"]["dir"], "checkpoint.npz")
    state, _ = trainer.load_checkpoint(_require_file(path, "checkpoint"))
    return state


def _unsplit(ds: ingest.InteractionDataset) -> ingest.InteractionDataset:
    """Merge the held-out items back into the positives (the cold-start protocol
    carves its own hold-out from the full data)."""
    if ds.heldout is None:
        return ds
    positives = tuple(
        tuple(sorted(set(p) | {h})) for p, h in zip(ds.positives, ds.heldout)
    )
    return ingest.InteractionDataset(
        users=ds.users,
        items=ds.items,
        positives=positives,
        attributes=ds.attributes,
        field_names=ds.field_names,
        timestamps=ds.timestamps,
    )


def cmd_ingest(args, cfg) -> int:
    d = cfg["data"]
    if not d["interactions"] or not d["attributes"]:
        raise ConfigError("config needs [data] interactions and attributes paths")
    fmt = ingest.ColumnMap(
        user=d["user_col"],
        item=d["item_col"],
        rating=d["rating_col"],
        timestamp=None if d["timestamp_col"] < 0 else d["timestamp_col"],
        delimiter=d["delimiter"],
        has_header=d["has_header"],
    )
    raw = ingest.load_interactions(_require_file(d["interactions"], "interactions file"), fmt)
    attrs, field_names = ingest.load_attributes(
        _require_file(d["attributes"], "attributes file"),
        delimiter=d["delimiter"],
        value_sep=d["value_sep"],
        has_header=d["has_header"],
    )
    numeric = [int(x) for x in _int_list(d["numeric_fields"])]
    attrs = ingest.bin_numeric_fields(attrs, numeric, d["n_bins"])
    ds = ingest.filter_and_binarize(
        raw, attrs, d["min_history"], d["rating_threshold"], field_names
    )
    ds = ingest.leave_one_out_split(ds, args.seed)
    out = cfg["output"]["dir"]
    ingest.save_manifest(ds, os.path.join(out, "dataset.json"))
    stats = ingest.dataset_stats(ds)
    print(
        f"users={stats.n_users} items={stats.n_items} "
        f"actions={stats.n_actions} features={stats.n_features}"
    )
    print(f"wrote {os.path.join(out, 'dataset.json')}")
    return 0


def cmd_build(args, cfg) -> int:
    ds = _load_dataset(args, cfg)
    nets = netbuild.build_network_set(ds, co_min=cfg["netbuild"]["co_min"])
    out = cfg["output"]["dir"]
    netbuild.save_networks(nets, os.path.join(out, "networks.json"))
    if args.export_edges:
        netbuild.export_edge_lists(nets, os.path.join(out, "edges"))
    n_edges = [int(g.adjacency.nnz // 2) for g in nets.graphs]
    print(f"co-purchase edges={len(nets.co_graph.edges)} per-attribute edges={n_edges}")
    print(f"wrote {os.path.join(out, 'networks.json')}")
    return 0


def cmd_train(args, cfg) -> int:
    ds = _load_dataset(args, cfg)
    nets = _load_networks(args, cfg)
    train_cfg = _train_config(cfg, args.seed)
    out = cfg["output"]["dir"]
    result = trainer.train(ds, nets, train_cfg, out_dir=out)
    last = result.trace[-1] if result.trace else None
    if last is not None:
        print(
            f"epoch {last.epoch}: l_net={last.l_net:.6g} "
            f"l_rank={last.l_rank:.6g} l_rec={last.l_rec:.6g}"
        )
    print(f"wrote {os.path.join(out, 'checkpoint.npz')}")
    return 0


def cmd_eval(args, cfg) -> int:
    ds = _load_dataset(args, cfg)
    nets = _load_networks(args, cfg)
    state = _load_checkpoint(args, cfg)
    ks = _int_list(cfg["eval"]["eval_ks"])
    slates = evalkit.build_slates(ds, args.seed, cfg["eval"]["n_negatives"])
    report = evalkit.evaluate_leave_one_out(state, nets, ds, slates, ks)
    out = cfg["output"]["dir"]
    lines = ["metric\tk\tvalue"]
    for k in ks:
        lines.append(f"precision\t{k}\t{report.precision[k]!r}")
    for k in ks:
        lines.append(f"ndcg\t{k}\t{report.ndcg[k]!r}")
    atomic_write_text(os.path.join(out, "metrics.tsv"), "\n".join(lines) + "\n")
    doc = {
        "ks": list(ks),
        "precision": {str(k): report.precision[k] for k in ks},
        "ndcg": {str(k): report.ndcg[k] for k in ks},
        "per_user_rank": report.per_user_rank.tolist(),
        "n_users": report.n_users,
        "seed": args.seed,
        "config_hash": report.config_hash,
        "checkpoint_id": report.checkpoint_id,
    }
    atomic_write_text(os.path.join(out, "metrics.json"), json.dumps(doc))
    for k in ks:
        print(f"P@{k}={report.precision[k]:.4f} nDCG@{k}={report.ndcg[k]:.4f}")
    return 0


def cmd_coldstart(args, cfg) -> int:
    ds = _unsplit(_load_dataset(args, cfg))
    train_cfg = _train_config(cfg, args.seed)
    report = evalkit.coldstart_protocol(
        ds,
        train_cfg,
        n_hold=cfg["eval"]["n_hold"],
        seed=args.seed,
        recall_ks=_int_list(cfg["eval"]["cold_recall_ks"]),
        co_min=cfg["netbuild"]["co_min"],
    )
    out = cfg["output"]["dir"]
    lines = ["k\trecall"]
    for k, r in report.recall.items():
        lines.append(f"{k}\t{r!r}")
    atomic_write_text(os.path.join(out, "coldstart.tsv"), "\n".join(lines) + "\n")
    doc = {
        "held_items": list(report.held_items),
        "recall": {str(k): v for k, v in report.recall.items()},
        "per_item_recall": {str(i): r.tolist() for i, r in report.per_item_recall.items()},
        "n_excluded": report.n_excluded,
        "seed": report.seed,
    }
    atomic_write_text(os.path.join(out, "coldstart.json"), json.dumps(doc))
    for k, r in report.recall.items():
        print(f"Recall@{k}={r:.4f}")
    return 0


def cmd_recommend(args, cfg) -> int:
    ds = _load_dataset(args, cfg)
    nets = _load_networks(args, cfg)
    state = _load_checkpoint(args, cfg)
    try:
        u = ds.users.index(args.user)
    except ValueError:
        raise DataError(f"unknown user {args.user!r}") from None
    item_embeds = personalize.compute_item_embeddings(state.autoencoders, nets)
    positives = ds.positives[u]
    candidates = [i for i in range(ds.n_items) if i not in ds.positive_sets[u]]
    ranked = recommend.top_k(u, candidates, args.top_k, state, item_embeds, positives)

    out = cfg["output"]["dir"]
    lines = ["user\trank\titem\tscore\tattribute\tweight\tevidence"]
    doc_items = []
    for rank, (item, score) in enumerate(zip(ranked.items, ranked.scores), start=1):
        expl = recommend.explain(u, item, state, item_embeds, positives, ds.field_names)
        lines.append(
            f"{ds.users[u]}\t{rank}\t{ds.items[item]}\t{score!r}\t"
            f"{expl.attribute_name}\t{expl.attention_weight!r}\t{ds.items[expl.evidence_item]}"
        )
        doc_items.append(
            {
                "rank": rank,
                "item": ds.items[item],
                "score": score,
                "attribute": expl.attribute_name,
                "attention_weight": expl.attention_weight,
                "evidence_item": ds.items[expl.evidence_item],
                "attention_profile": {
                    name: float(w)
                    for name, w in zip(ds.field_names, ranked.profiles[rank - 1].normalized)
                },
                "explanation": expl.sentence(ds.users, ds.items),
            }
        )
        print(expl.sentence(ds.users, ds.items))
    atomic_write_text(os.path.join(out, "recommendations.tsv"), "\n".join(lines) + "\n")
    atomic_write_text(
        os.path.join(out, "recommendations.json"),
        json.dumps({"user": ds.users[u], "items": doc_items}),
    )
    return 0


def cmd_export_embeddings(args, cfg) -> int:
    nets = _load_networks(args, cfg)
    state = _load_checkpoint(args, cfg)
    ds = _load_dataset(args, cfg)
    item_embeds = personalize.compute_item_embeddings(state.autoencoders, nets)
    out = os.path.join(cfg["output"]["dir"], "embeddings")
    paths = personalize.export_embeddings(
        state.user_table, ds.users, item_embeds, nets.item_ids, nets.field_names, out
    )
    for p in paths:
        print(f"wrote {p}")
    return 0


COMMANDS = {
    "ingest": cmd_ingest,
    "build": cmd_build,
    "train": cmd_train,
    "eval": cmd_eval,
    "coldstart": cmd_coldstart,
    "recommend": cmd_recommend,
    "export-embeddings": cmd_export_embeddings,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="attribrec",
        description="Attribute-network recommender pipeline",
    )
    parser.add_argument("--config", default=None, help="INI config file")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override a config value (repeatable)",
    )
    parser.add_argument("--seed", type=int, default=None, help="master random seed")
    parser.add_argument("--out", default=None, help="output directory (overrides [output] dir)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--dataset", default=None, help="dataset manifest path")
        p.add_argument("--networks", default=None, help="networks artifact path")
        p.add_argument("--checkpoint", default=None, help="model checkpoint path")
        return p

    add("ingest", "parse, filter and split the raw data")
    build_p = add("build", "build the co-purchase graph and attribute networks")
    build_p.add_argument("--export-edges", action="store_true", help="also write edge lists")
    train_p = add("train", "train the model")
    train_p.add_argument("--mode", choices=trainer.MODES, default=None)
    train_p.add_argument("--epochs", type=int, default=None)
    train_p.add_argument(
        "--flip-rank-sign",
        action="store_true",
        default=None,
        help="diagnostic: optimize the literal log-sigmoid ranking term instead "
        "of the default corrective variant",
    )
    add("eval", "leave-one-out evaluation with sampled negatives")
    add("coldstart", "held-out cold item protocol (retrains internally)")
    rec_p = add("recommend", "rank items for one user with explanations")
    rec_p.add_argument("--user", required=True, help="user id")
    rec_p.add_argument("--top-k", type=int, default=10)
    add("export-embeddings", "write user and item embeddings as delimited text")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(args.config, args.overrides)
        if args.out is not None:
            cfg["output"]["dir"] = args.out
        if args.seed is not None:
            cfg["output"]["seed"] = args.seed
        args.seed = cfg["output"]["seed"]
        if getattr(args, "mode", None) is not None:
            cfg["train"]["mode"] = args.mode
        if getattr(args, "epochs", None) is not None:
            cfg["train"]["epochs"] = args.epochs
        if getattr(args, "flip_rank_sign", None):
            cfg["train"]["rank_loss_variant"] = "literal"

        out = cfg["output"]["dir"]
        os.makedirs(out, exist_ok=True)
        write_effective_config(cfg, os.path.join(out, f"{args.command.replace('-', '_')}_config.ini"))
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return ConfigError.exit_code
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return DataError.exit_code
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return NumericalError.exit_code


if __name__ == "__main__":
    sys.exit(main())
