"""Command-line interface: prepare, train, recommend, rerank, evaluate, bench.

Settings resolve in three layers: built-in defaults, then a JSON config file
of flat dotted keys (``--config``), then command-line flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import torch

from .catalog import CatalogError, ItemCatalog, build_catalog, load_catalog, write_catalog
from .checkpoint import CheckpointError, ModelCheckpoint
from .encoder import EncoderConfig, SASRecEncoder
from .evaluation import bench_latency, evaluate_lists, machine_description
from .inference import METHODS, Recommender, RerankRecommender
from .ingest import (
    DatasetSplit,
    IngestError,
    behavior_filter,
    check_coverage,
    kcore_filter,
    read_interactions,
    read_pairs,
    split_and_augment,
    split_stats,
    write_pairs,
)
from .rerank import calirec, calirec_gc, read_candidates
from .trainer import (
    TrainConfig,
    TrainingError,
    model_from_checkpoint,
    train,
    train_dacsr,
)

log = logging.getLogger("dacsr")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SPLIT_FILES = {"train": "train.tsv", "valid": "valid.tsv", "test": "test.tsv"}


class ConfigError(ValueError):
    pass


def _bool(v: Any) -> bool:
    if isinstance(v, bool):
        return v
    if str(v).lower() in ("1", "true", "yes"):
        return True
    if str(v).lower() in ("0", "false", "no"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _ks(v: Any) -> tuple[int, ...]:
    if isinstance(v, (list, tuple)):
        ks = tuple(int(x) for x in v)
    else:
        ks = tuple(int(x) for x in str(v).split(",") if x.strip())
    if not ks or min(ks) < 1:
        raise ValueError(f"cutoffs must be positive integers, got {v!r}")
    return ks


def _opt_str(v: Any) -> str | None:
    return None if v is None else str(v)


def _opt_float(v: Any) -> float | None:
    return None if v is None else float(v)


@dataclass(frozen=True)
class Option:
    key: str
    flag: str
    type: Callable
    default: Any
    help: str
    commands: tuple[str, ...]
    choices: tuple | None = None

    @property
    def dest(self) -> str:
        return self.key.replace(".", "__")


_ALL_DATA = ("train", "recommend", "rerank", "evaluate", "bench")

OPTIONS = [
    Option("data.interactions", "--interactions", _opt_str, None,
           "interaction log: MovieLens ratings.dat or a delimited file with a header", ("prepare",)),
    Option("data.attributes", "--attributes", _opt_str, None,
           "item attributes: item<TAB>A|B lines or MovieLens movies.dat", ("prepare",)),
    Option("data.min_user_core", "--min-user-core", int, 5, "minimum interactions per user", ("prepare",)),
    Option("data.min_item_core", "--min-item-core", int, 5, "minimum interactions per item", ("prepare",)),
    Option("data.max_len", "--max-len", int, 200, "keep at most this many recent items per sequence", ("prepare",)),
    Option("data.keep_behavior", "--keep-behavior", _opt_str, None,
           "keep only interactions with this behavior label", ("prepare",)),
    Option("data.dir", "--data", _opt_str, None, "prepared dataset directory", _ALL_DATA),
    Option("data.split", "--split", str, "test", "which held-out split to score",
           ("recommend", "rerank", "evaluate", "bench"), ("valid", "test")),
    Option("checkpoint", "--checkpoint", _opt_str, None, "trained model checkpoint",
           ("recommend", "rerank", "evaluate", "bench")),
    Option("bench.baseline", "--baseline", _opt_str, None,
           "checkpoint supplying candidates for re-ranking (default: --checkpoint)", ("bench",)),
    Option("rerank.candidates_file", "--candidates-file", _opt_str, None,
           "re-rank candidates from this file instead of a checkpoint", ("rerank",)),
    Option("lists", "--lists", _opt_str, None, "recommendation lists to evaluate", ("evaluate",)),
    Option("out", "--out", _opt_str, None, "output path (directory for prepare)",
           ("prepare", "train", "recommend", "rerank", "evaluate", "bench")),
    Option("model.type", "--model", str, "dacsr", "model to train", ("train",), ("sasrec", "dacsr")),
    Option("model.hidden_dim", "--hidden-dim", int, 64, "embedding width d", ("train",)),
    Option("model.blocks", "--blocks", int, 2, "self-attention blocks", ("train",)),
    Option("model.heads", "--heads", int, 1, "attention heads", ("train",)),
    Option("model.dropout", "--dropout", float, 0.2, "dropout rate", ("train",)),
    Option("model.lambda", "--lambda", float, 0.5, "accuracy/calibration trade-off of the aggregated loss", ("train",)),
    Option("model.tau", "--tau", float, 1.0, "temperature of the soft list distribution", ("train",)),
    Option("model.extractor_layers", "--extractor-layers", int, 2, "layers per extractor net", ("train",)),
    Option("model.detach_encoders", "--detach-encoders", _bool, True,
           "stop the aggregated loss from updating the encoders", ("train",)),
    Option("dist.mode", "--dist-mode", str, "raw", "calibration target distribution", ("train",),
           ("raw", "diversity", "masked")),
    Option("dist.tau_div", "--tau-div", _opt_float, None,
           "temperature of the modified target (default 0.5 diversity, 2 masked)", ("train",)),
    Option("train.learning_rate", "--learning-rate", float, 1e-3, "Adam step size", ("train",)),
    Option("train.batch_size", "--batch-size", int, 256, "mini-batch size", ("train",)),
    Option("train.max_epochs", "--max-epochs", int, 100, "training epochs", ("train",)),
    Option("train.pretrain_epochs", "--pretrain-epochs", int, 20, "encoder pre-training epochs", ("train",)),
    Option("train.patience", "--patience", int, 10, "epochs without validation gain before stopping", ("train",)),
    Option("train.select_metric", "--select-metric", str, "recall", "validation selection metric", ("train",),
           ("recall", "mrr")),
    Option("train.select_k", "--select-k", int, 20, "cutoff of the selection metric", ("train",)),
    Option("seed", "--seed", int, 0, "random seed", ("train",)),
    Option("rerank.method", "--method", str, "calirec", "re-ranking method", ("rerank", "bench"), METHODS),
    Option("rerank.lambda", "--lambda", float, 0.5,
           "re-ranking trade-off (upper bound for calirec-gc)", ("rerank", "bench")),
    Option("rerank.z", "--candidates", int, 100, "candidate list length Z", ("rerank", "bench")),
    Option("k", "--k", int, 20, "list length", ("recommend", "rerank", "bench")),
    Option("eval.ks", "--k", _ks, (10, 20), "comma-separated cutoffs", ("evaluate",)),
    Option("bench.sequences", "--sequences", int, 1000, "sequences to time (held-out ones are cycled)", ("bench",)),
    Option("bench.repetitions", "--repetitions", int, 3, "timed passes over the sequences", ("bench",)),
]

COMMANDS = {
    "prepare": "filter an interaction log and write leave-one-out splits",
    "train": "train a SASRec encoder or a DACSR model",
    "recommend": "write top-K lists from a checkpoint",
    "rerank": "re-rank top-Z candidates with CaliRec or CaliRec-GC",
    "evaluate": "compute Recall, MRR, C_KL and ILD at each cutoff",
    "bench": "time end-to-end inference against greedy re-ranking",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dacsr", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    _add_common(parser, {"config": None, "threads": 1, "log_level": "INFO"})
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in COMMANDS.items():
        p = sub.add_parser(name, help=text, description=text)
        # accepted after the subcommand too; the top-level defaults stand unless given
        _add_common(p, None)
        for opt in OPTIONS:
            if name not in opt.commands:
                continue
            help_text = f"{opt.help} (default: {_show(opt.default)}; config key {opt.key})"
            kwargs: dict = {"dest": opt.dest, "default": argparse.SUPPRESS, "help": help_text}
            if opt.type is _bool:
                kwargs["action"] = argparse.BooleanOptionalAction
            else:
                kwargs["type"] = opt.type
                if opt.choices:
                    kwargs["choices"] = opt.choices
            p.add_argument(opt.flag, **kwargs)
    return parser


def _add_common(parser: argparse.ArgumentParser, defaults: dict | None) -> None:
    d = defaults or {}
    kw = (lambda key: {"default": d[key]}) if defaults else (lambda key: {"default": argparse.SUPPRESS})
    parser.add_argument("--config", help="JSON file of dotted keys, e.g. {\"model.lambda\": 0.3} (default: none)",
                        **kw("config"))
    parser.add_argument("--threads", type=int, help="torch threads (default: 1)", **kw("threads"))
    parser.add_argument("--log-level", help="logging level (default: INFO)", **kw("log_level"))


def _show(v: Any) -> str:
    if isinstance(v, tuple):
        return ",".join(map(str, v))
    return "none" if v is None else str(v)


def resolve(command: str, args: argparse.Namespace, config_path: str | None) -> dict[str, Any]:
    """Merge defaults, config-file values and flags for one subcommand."""
    file_values: dict[str, Any] = {}
    if config_path:
        try:
            with open(config_path, encoding="utf-8") as fh:
                file_values = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{config_path}: invalid JSON: {exc}") from None
        if not isinstance(file_values, dict):
            raise ConfigError(f"{config_path}: expected an object of dotted keys")
        known = {o.key for o in OPTIONS}
        unknown = sorted(set(file_values) - known)
        if unknown:
            raise ConfigError(f"{config_path}: unknown keys {', '.join(unknown)}")
    out = {}
    for opt in OPTIONS:
        if command not in opt.commands:
            continue
        if hasattr(args, opt.dest):
            value = getattr(args, opt.dest)
        elif opt.key in file_values:
            try:
                value = opt.type(file_values[opt.key])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"config key {opt.key}: {exc}") from None
        else:
            value = opt.default
        if opt.choices and value not in opt.choices:
            raise ConfigError(f"{opt.key} must be one of {opt.choices}, got {value!r}")
        out[opt.key] = value
    return out


def _require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if cfg.get(k) is None]
    if missing:
        flags = {o.key: o.flag for o in OPTIONS}
        raise ConfigError("missing required setting(s): " + ", ".join(f"{flags[k]} ({k})" for k in missing))


# --------------------------------------------------------------------------
# dataset directory


def load_dataset(directory: str | Path) -> DatasetSplit:
    d = Path(directory)
    for name in ("catalog.tsv", "stats.json", *SPLIT_FILES.values()):
        if not (d / name).exists():
            raise FileNotFoundError(f"{d / name}: no such file (run `dacsr prepare` first)")
    catalog = load_catalog(d / "catalog.tsv")
    stats = json.loads((d / "stats.json").read_text(encoding="utf-8"))
    return DatasetSplit(
        read_pairs(d / SPLIT_FILES["train"], catalog),
        read_pairs(d / SPLIT_FILES["valid"], catalog),
        read_pairs(d / SPLIT_FILES["test"], catalog),
        catalog,
        int(stats["max_len"]),
        int(stats.get("dropped_users", 0)),
    )


def _held_out(ds: DatasetSplit, split: str):
    return ds.test if split == "test" else ds.validation


def write_lists(lists: dict[str, list[int]], catalog: ItemCatalog, path: str | Path | None) -> None:
    lines = "".join(f"{uid}\t{','.join(catalog.item_ids[i] for i in rl)}\n" for uid, rl in lists.items())
    if path is None:
        sys.stdout.write(lines)
        return
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(lines)


def read_lists(path: str | Path, catalog: ItemCatalog) -> dict[str, list[int]]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                uid, body = line.split("\t")
                out[uid] = [catalog.index_of(x) for x in body.split(",") if x]
            except (ValueError, KeyError, CatalogError) as exc:
                raise IngestError(f"{path}:{lineno}: {exc}") from None
    return out


def _load_model(path: str, catalog: ItemCatalog):
    return model_from_checkpoint(ModelCheckpoint.load(path), catalog.item_count)


# --------------------------------------------------------------------------
# subcommands


def cmd_prepare(cfg: dict) -> int:
    _require(cfg, "data.interactions", "data.attributes", "out")
    for key in ("data.min_user_core", "data.min_item_core", "data.max_len"):
        if cfg[key] < 1:
            raise ConfigError(f"{key} must be >= 1")
    catalog_full = load_catalog(cfg["data.attributes"])
    inter = read_interactions(cfg["data.interactions"])
    inter = behavior_filter(inter, cfg["data.keep_behavior"])
    inter = kcore_filter(inter, cfg["data.min_user_core"], cfg["data.min_item_core"])
    check_coverage(inter, catalog_full)
    used = {r.item_id for r in inter}
    catalog = build_catalog(
        (x, [catalog_full.attribute_names[g] for g in sorted(catalog_full.attribute_set(i))])
        for i, x in enumerate(catalog_full.item_ids)
        if x in used
    )
    split = split_and_augment(inter, cfg["data.max_len"], catalog)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_catalog(catalog, out / "catalog.tsv")
    write_pairs(split.train, catalog, out / SPLIT_FILES["train"])
    write_pairs(split.validation, catalog, out / SPLIT_FILES["valid"])
    write_pairs(split.test, catalog, out / SPLIT_FILES["test"])
    stats = split_stats(split)
    (out / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(stats, indent=2, sort_keys=True))
    return EXIT_OK


def _train_config(cfg: dict) -> TrainConfig:
    try:
        tc = TrainConfig(
            learning_rate=cfg["train.learning_rate"],
            batch_size=cfg["train.batch_size"],
            max_epochs=cfg["train.max_epochs"],
            pretrain_epochs=cfg["train.pretrain_epochs"],
            patience=cfg["train.patience"],
            seed=cfg["seed"],
            select_metric=cfg["train.select_metric"],
            select_k=cfg["train.select_k"],
            dist_mode=cfg["dist.mode"],
            tau_div=cfg["dist.tau_div"],
        )
        if tc.max_epochs < 0 or tc.pretrain_epochs < 0 or tc.patience < 1:
            raise ValueError("epoch counts must be nonnegative and patience positive")
        if not 0.0 <= cfg["model.lambda"] <= 1.0 or cfg["model.tau"] <= 0:
            raise ValueError("lambda must lie in [0, 1] and tau must be positive")
        return tc
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_train(cfg: dict) -> int:
    _require(cfg, "data.dir", "out")
    tc = _train_config(cfg)
    ds = load_dataset(cfg["data.dir"])
    try:
        ec = EncoderConfig(cfg["model.hidden_dim"], cfg["model.blocks"], cfg["model.heads"], cfg["model.dropout"],
                           ds.max_len)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    torch.manual_seed(tc.seed)
    if cfg["model.type"] == "dacsr":
        ckpt, res = train_dacsr(ds, tc, ec, cfg["model.lambda"], cfg["model.tau"], cfg["model.extractor_layers"],
                                cfg["model.detach_encoders"])
    else:
        enc = SASRecEncoder(ds.catalog.item_count, ec, torch.Generator().manual_seed(tc.seed))
        ckpt, res = train(enc, ds, tc)
    ckpt.save(cfg["out"])
    summary = {"checkpoint": cfg["out"], "model": cfg["model.type"], "best_epoch": res.best_epoch,
               f"valid_{tc.select_metric}@{tc.select_k}": res.best_value}
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_recommend(cfg: dict) -> int:
    _require(cfg, "data.dir", "checkpoint")
    ds = load_dataset(cfg["data.dir"])
    rec = Recommender(_load_model(cfg["checkpoint"], ds.catalog), ds.max_len)
    lists = {seq.user_id: rec.recommend(seq, cfg["k"]) for seq, _ in _held_out(ds, cfg["data.split"])}
    write_lists(lists, ds.catalog, cfg["out"])
    return EXIT_OK


def cmd_rerank(cfg: dict) -> int:
    _require(cfg, "data.dir")
    if not 0.0 <= cfg["rerank.lambda"] <= 1.0:
        raise ConfigError("--lambda must lie in [0, 1]")
    if cfg["k"] > cfg["rerank.z"]:
        raise ConfigError(f"--k {cfg['k']} exceeds --candidates {cfg['rerank.z']}")
    ds = load_dataset(cfg["data.dir"])
    pairs = _held_out(ds, cfg["data.split"])
    if cfg["rerank.candidates_file"]:
        cands = read_candidates(cfg["rerank.candidates_file"], ds.catalog)
        fn = calirec if cfg["rerank.method"] == "calirec" else calirec_gc
        lists = {}
        for seq, _ in pairs:
            if seq.user_id not in cands:
                raise IngestError(f"no candidates for user {seq.user_id}")
            lists[seq.user_id] = fn(cands[seq.user_id], seq, ds.catalog, cfg["rerank.lambda"], cfg["k"])
    else:
        _require(cfg, "checkpoint")
        base = Recommender(_load_model(cfg["checkpoint"], ds.catalog), ds.max_len)
        rr = RerankRecommender(base, ds.catalog, cfg["rerank.method"], cfg["rerank.lambda"], cfg["rerank.z"])
        lists = {seq.user_id: rr.recommend(seq, cfg["k"]) for seq, _ in pairs}
    write_lists(lists, ds.catalog, cfg["out"])
    return EXIT_OK


def cmd_evaluate(cfg: dict) -> int:
    _require(cfg, "data.dir")
    ds = load_dataset(cfg["data.dir"])
    pairs = _held_out(ds, cfg["data.split"])
    ks = cfg["eval.ks"]
    if cfg["lists"]:
        by_user = read_lists(cfg["lists"], ds.catalog)
        missing = [s.user_id for s, _ in pairs if s.user_id not in by_user]
        if missing:
            raise IngestError(f"{cfg['lists']}: no list for {len(missing)} users, e.g. {missing[0]}")
        lists = [by_user[s.user_id] for s, _ in pairs]
        source = cfg["lists"]
    else:
        _require(cfg, "checkpoint")
        rec = Recommender(_load_model(cfg["checkpoint"], ds.catalog), ds.max_len)
        lists = [rec.recommend(seq, max(ks)) for seq, _ in pairs]
        source = cfg["checkpoint"]
    report = evaluate_lists(lists, pairs, ds.catalog, ks, config={"source": source, "split": cfg["data.split"]})
    print(report.to_table())
    if cfg["out"]:
        Path(cfg["out"]).write_text(report.to_json() + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_bench(cfg: dict) -> int:
    _require(cfg, "data.dir", "checkpoint")
    ds = load_dataset(cfg["data.dir"])
    pairs = _held_out(ds, cfg["data.split"])
    n = cfg["bench.sequences"]
    seqs = [pairs[i % len(pairs)][0] for i in range(n)]
    model = _load_model(cfg["checkpoint"], ds.catalog)
    base_model = _load_model(cfg["bench.baseline"], ds.catalog) if cfg["bench.baseline"] else model
    e2e = Recommender(model, ds.max_len)
    rr = RerankRecommender(Recommender(base_model, ds.max_len), ds.catalog, cfg["rerank.method"],
                           cfg["rerank.lambda"], min(cfg["rerank.z"], ds.catalog.item_count))
    k = cfg["k"]
    reps = cfg["bench.repetitions"]
    t_e2e = bench_latency(lambda s: e2e.recommend(s, k), seqs, reps)
    t_rr = bench_latency(lambda s: rr.recommend(s, k), seqs, reps)
    rows = [
        ("end-to-end", type(model).__name__, t_e2e),
        (cfg["rerank.method"], type(base_model).__name__, t_rr),
    ]
    lines = [f"# {machine_description()}; threads={torch.get_num_threads()}; sequences={n}; repetitions={reps}",
             "method\tmodel\tseconds_per_sequence"]
    lines += [f"{m}\t{b}\t{t:.6e}" for m, b, t in rows]
    lines.append(f"ratio\t-\t{t_rr / t_e2e:.2f}")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if cfg["out"]:
        Path(cfg["out"]).write_text(text, encoding="utf-8")
    return EXIT_OK


HANDLERS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "recommend": cmd_recommend,
    "rerank": cmd_rerank,
    "evaluate": cmd_evaluate,
    "bench": cmd_bench,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    torch.set_num_threads(args.threads)
    try:
        cfg = resolve(args.command, args, args.config)
        return HANDLERS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CatalogError, IngestError, CheckpointError, ValueError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
