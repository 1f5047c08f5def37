"""Command-line entry point: ``damgt <command> [flags]``.

Every flag can also be given in a JSON file passed with ``--config``; keys
are the names shown in ``--help``.  Flags on the command line win.  One JSON
summary line goes to stdout, everything else to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, DamgtError, DataError
from .graph import edge_homophily, random_split
from .io import atomic_write, dataset_paths, load_graph, save_graph
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .pipeline import PrepConfig, prepare, prepare_cached
from .synth import sbm_graph
from .training import TrainConfig, TrainingDiverged, evaluate, macro_f1, predict_logits, train

log = logging.getLogger("damgt")

COMMANDS = ("synth", "preprocess", "train", "eval", "attn-dump", "ablate", "sweep-s", "bench")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(ConfigError.exit_code)


class Options:
    """Registers flags with a config key and resolves defaults < config file < command line."""

    def __init__(self, parser: argparse.ArgumentParser):
        self.parser = parser
        self.defaults: dict[str, object] = {}
        self.types: dict[str, object] = {}

    def add(self, flag: str, default=None, type=str, help: str = "", choices=None, key: str | None = None):
        key = key or flag.lstrip("-").replace("-", "_")
        self.defaults[key] = default
        self.types[key] = type
        shown = f" (default: {default})" if default is not None else ""
        self.parser.add_argument(flag, dest=key, type=type, choices=choices, default=None,
                                 help=f"{help}{shown} [config key: {key}]")

    def resolve(self, args: argparse.Namespace) -> dict:
        file_cfg: dict = {}
        if args.config:
            try:
                file_cfg = json.loads(Path(args.config).read_text())
            except FileNotFoundError:
                raise ConfigError(f"config file {args.config} not found") from None
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file {args.config} is not valid JSON: {exc}") from None
            if not isinstance(file_cfg, dict):
                raise ConfigError("config file must hold a JSON object")
            unknown = set(file_cfg) - set(self.defaults)
            if unknown:
                raise ConfigError(f"unknown config keys for '{args.command}': {sorted(unknown)}")
        out = {}
        for key, default in self.defaults.items():
            cli = getattr(args, key)
            if cli is not None:
                out[key] = cli
            elif key in file_cfg:
                v = file_cfg[key]
                try:
                    out[key] = v if v is None or self.types[key] is str else self.types[key](v)
                except (TypeError, ValueError, argparse.ArgumentTypeError) as exc:
                    raise ConfigError(f"config key {key!r}: {exc}") from None
            else:
                out[key] = default
        return out


def _bool(s) -> bool:
    if isinstance(s, bool):
        return s
    if str(s).lower() in ("1", "true", "yes", "on"):
        return True
    if str(s).lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}")


def _int_list(s) -> list[int]:
    if isinstance(s, list):
        return [int(v) for v in s]
    try:
        return [int(v) for v in str(s).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None


def _fractions(s) -> tuple[float, float, float]:
    vals = s if isinstance(s, (list, tuple)) else [float(v) for v in str(s).split(",")]
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("split fractions need three comma-separated values")
    return tuple(float(v) for v in vals)


def _data_opts(o: Options):
    o.add("--data", help="dataset directory holding edges.txt, features.dmat, labels.txt")
    o.add("--graph", help="edge-list file (overrides --data)")
    o.add("--features", help="feature matrix file, DMAT or .csv (overrides --data)")
    o.add("--labels", help="label file, one integer per line (overrides --data)")


def _prep_opts(o: Options):
    o.add("--m", 10, int, "number of Laplacian eigenvectors in the topology encoding")
    o.add("--S", 3, int, "number of propagation hops")
    o.add("--pe", "dup", str, "positional encoding variant", choices=("dup", "ap", "tp", "none"))
    o.add("--kmeans-seed", 0, int, "k-means++ seed")
    o.add("--kmeans-max-iter", 100, int, "k-means iteration cap")


def _model_opts(o: Options):
    o.add("--d-m", 128, int, "hidden width")
    o.add("--layers", 1, int, "number of transformer layers", key="L")
    o.add("--heads", 8, int, "attention heads", key="H")
    o.add("--keep-prob", 0.9, float, "dropout keep probability")
    o.add("--mask", "full", str, "attention mask variant", choices=("full", "none", "H", "V", "D"), key="mask_variant")
    o.add("--attention", "auto", str, "attention kernel", choices=("auto", "dense", "sparse"))


def _train_opts(o: Options):
    o.add("--lr", 5e-3, float, "AdamW learning rate", key="learning_rate")
    o.add("--weight-decay", 1e-5, float, "decoupled weight decay")
    o.add("--batch-size", 2000, int, "mini-batch size")
    o.add("--epochs", 200, int, "maximum epochs", key="max_epochs")
    o.add("--patience", 50, int, "epochs without validation improvement before stopping", key="early_stop_patience")
    o.add("--seed", 0, int, "training seed (initialisation, shuffling, dropout)")
    o.add("--precision", "64", str, "float width", choices=("64", "32"))
    o.add("--split", (0.6, 0.2, 0.2), _fractions, "train,val,test fractions")
    o.add("--split-seed", None, int, "split seed (defaults to --seed)")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, Options]]:
    parser = _Parser(prog="damgt", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"damgt {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    opts: dict[str, Options] = {}

    def command(name, help):
        p = sub.add_parser(name, help=help, description=help)
        p.add_argument("--config", help="JSON file with flag values keyed by config key")
        p.add_argument("-v", "--verbose", action="store_true", help="per-epoch progress on stderr")
        o = opts[name] = Options(p)
        return o

    o = command("synth", "generate a stochastic-block-model dataset")
    o.add("--kind", "sbm", str, "class-mean layout", choices=("sbm", "blobs"))
    o.add("--nodes", 1000, int, "number of nodes")
    o.add("--classes", 4, int, "number of classes")
    o.add("--homophily", 0.8, float, "target edge homophily")
    o.add("--pattern", "uniform", str, "inter-class block layout", choices=("uniform", "cyclic"))
    o.add("--avg-degree", 10.0, float, "expected average degree")
    o.add("--feature-dim", 32, int, "feature dimension")
    o.add("--feature-noise", 1.0, float, "feature noise standard deviation")
    o.add("--seed", 0, int, "generator seed")
    o.add("--out", None, str, "output directory")

    o = command("preprocess", "build the dual positional encoding and hop-token cache")
    _data_opts(o)
    _prep_opts(o)
    o.add("--out", None, str, "cache directory")
    o.add("--workers", 1, int, "threads for feature propagation")

    for name, help in (("train", "train a model and write checkpoint, report and split"),
                       ("ablate", "run an ablation suite"), ("sweep-s", "sweep the number of hops")):
        o = command(name, help)
        _data_opts(o)
        _prep_opts(o)
        _model_opts(o)
        _train_opts(o)
        o.add("--out", None, str, "output directory")
        o.add("--workers", 1, int, "threads for feature propagation")
    opts["ablate"].add("--suite", "mask", str, "ablation suite", choices=("mask", "pe", "mask-variants"))
    opts["ablate"].add("--seeds", 5, int, "number of seeds (0..N-1)")
    opts["ablate"].add("--resplit", True, _bool, "draw a fresh split for every seed")
    opts["sweep-s"].add("--values", [2, 3, 4, 5, 6, 7, 8, 9, 10], _int_list, "comma-separated hop counts")

    for name, help in (("eval", "evaluate a checkpoint"), ("attn-dump", "dump node-averaged attention matrices")):
        o = command(name, help)
        _data_opts(o)
        o.add("--checkpoint", None, str, "checkpoint file written by train")
        o.add("--cache", None, str, "preprocess cache directory to reuse")
        o.add("--nodes", "test", str, "node set", choices=("train", "val", "test", "all"))
        o.add("--workers", 1, int, "threads for feature propagation")
    opts["attn-dump"].add("--out", None, str, "output directory for CSV and heat maps")
    opts["attn-dump"].add("--images", True, _bool, "render one heat map per layer and head")

    o = command("bench", "time dense against structured attention")
    o.add("--S-values", [1, 5, 10, 20], _int_list, "comma-separated hop counts")
    o.add("--d-m", 512, int, "hidden width")
    o.add("--heads", 8, int, "attention heads", key="H")
    o.add("--batch", 256, int, "sequences per timing call")
    o.add("--trials", 5, int, "timed repetitions (median reported)")
    o.add("--seed", 0, int, "input seed")
    o.add("--out", None, str, "optional CSV output file")
    return parser, opts


@contextmanager
def stage(name: str):
    """Tag errors escaping this block with the pipeline stage that raised them."""
    try:
        yield
    except DamgtError as exc:
        if not getattr(exc, "stage", None):
            exc.stage = name
        raise
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        err = DataError(f"{exc.filename}: {exc.strerror}")
        err.stage = name
        raise err from None


def _require(cfg, *keys):
    for k in keys:
        if cfg.get(k) in (None, ""):
            raise ConfigError(f"--{k.replace('_', '-')} is required")


def _load(cfg):
    with stage("load"):
        if cfg.get("data"):
            paths = list(dataset_paths(cfg["data"]))
        else:
            paths = [None, None, None]
        for i, k in enumerate(("graph", "features", "labels")):
            if cfg.get(k):
                paths[i] = cfg[k]
        if any(p is None for p in paths):
            raise ConfigError("give --data or all of --graph, --features, --labels")
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            g = load_graph(*paths)
        for w in caught:
            log.warning("%s", w.message)
        log.info("loaded graph: %d nodes, %d edges, %d classes", g.n, g.num_edges, g.c)
        return g


def _prep_cfg(cfg) -> PrepConfig:
    return PrepConfig(m=cfg["m"], S=cfg["S"], pe=cfg["pe"], kmeans_seed=cfg["kmeans_seed"],
                      kmeans_max_iter=cfg["kmeans_max_iter"])


def _model_cfg(cfg) -> ModelConfig:
    return ModelConfig(S=cfg["S"], d_m=cfg["d_m"], L=cfg["L"], H=cfg["H"], keep_prob=cfg["keep_prob"],
                       mask_variant=cfg["mask_variant"], pe_variant=cfg["pe"], attention=cfg["attention"])


def _train_cfg(cfg) -> TrainConfig:
    return TrainConfig(learning_rate=cfg["learning_rate"], weight_decay=cfg["weight_decay"],
                       batch_size=cfg["batch_size"], max_epochs=cfg["max_epochs"],
                       early_stop_patience=cfg["early_stop_patience"], seed=cfg["seed"], precision=cfg["precision"])


def _prepare(g, cfg, out=None):
    with stage("preprocess"):
        pcfg = _prep_cfg(cfg)
        prep = prepare_cached(g, pcfg, out, cfg["workers"]) if out else prepare(g, pcfg, cfg["workers"])
        log.info("token levels %s (%s)", prep.levels.shape, "reused cache" if prep.reused else "computed")
        return prep


def cmd_synth(cfg):
    _require(cfg, "out")
    with stage("synth"):
        g = sbm_graph(cfg["nodes"], cfg["classes"], cfg["homophily"], avg_degree=cfg["avg_degree"],
                      feature_dim=cfg["feature_dim"], feature_noise=cfg["feature_noise"], seed=cfg["seed"],
                      kind=cfg["kind"], pattern=cfg["pattern"])
    with stage("write"):
        save_graph(g, *dataset_paths(cfg["out"]))
    h = edge_homophily(g) if g.num_edges else None
    log.info("wrote %s: %d nodes, %d edges, edge homophily %s", cfg["out"], g.n, g.num_edges, h)
    return {"nodes": g.n, "edges": g.num_edges, "classes": g.c, "edge_homophily": h, "out": cfg["out"]}


def cmd_preprocess(cfg):
    _require(cfg, "out")
    g = _load(cfg)
    prep = _prepare(g, cfg, cfg["out"])
    return {"out": cfg["out"], "reused": prep.reused, "source_hash": prep.source.hex(),
            "tokens_sha256": prep.checksum(), "shape": list(prep.levels.shape)}


def _split(g, cfg):
    seed = cfg["split_seed"] if cfg["split_seed"] is not None else cfg["seed"]
    with stage("split"):
        return random_split(g, cfg["split"], seed), seed


def cmd_train(cfg):
    _require(cfg, "out")
    g = _load(cfg)
    out = Path(cfg["out"])
    prep = _prepare(g, cfg, out)
    split, split_seed = _split(g, cfg)
    mcfg, tcfg = _model_cfg(cfg), _train_cfg(cfg)
    progress = log.debug if not cfg.get("verbose") else log.info
    with stage("train"):
        try:
            params, report = train(prep.levels, g.Y, split, mcfg, tcfg, n_classes=g.c, log=progress)
        except TrainingDiverged as exc:
            save_checkpoint(out / "checkpoint.dmgt", exc.params, mcfg, {"diverged": True})
            raise
    meta = {"prep": _prep_cfg(cfg).to_dict(), "split": list(cfg["split"]), "split_seed": split_seed,
            "train": tcfg.to_dict(), "tokens_sha256": prep.checksum()}
    with stage("write"):
        save_checkpoint(out / "checkpoint.dmgt", params, mcfg, meta)
        atomic_write(out / "report.jsonl", report.to_jsonl().encode())
        atomic_write(out / "split.json", (json.dumps(split.to_dict(), sort_keys=True) + "\n").encode())
    log.info("best epoch %d  val %.4f  test %.4f", report.best_epoch, report.best_val_acc, report.test_acc or 0)
    return {"test_acc": report.test_acc, "test_macro_f1": report.test_macro_f1, "best_val_acc": report.best_val_acc,
            "best_epoch": report.best_epoch, "epochs_run": len(report.epochs), "n_params": params.count(),
            "checkpoint": str(out / "checkpoint.dmgt"), "timing": report.timing}


def _checkpoint_context(cfg):
    _require(cfg, "checkpoint")
    with stage("checkpoint"):
        params, mcfg, meta = load_checkpoint(cfg["checkpoint"])
    g = _load(cfg)
    if "prep" not in meta:
        raise ConfigError(f"{cfg['checkpoint']} carries no preprocessing metadata")
    pcfg = PrepConfig(**meta["prep"])
    with stage("preprocess"):
        prep = (prepare_cached(g, pcfg, cfg["cache"], cfg["workers"]) if cfg["cache"]
                else prepare(g, pcfg, cfg["workers"]))
    with stage("split"):
        split = random_split(g, tuple(meta.get("split", (0.6, 0.2, 0.2))), meta.get("split_seed", 0))
    nodes = np.arange(g.n) if cfg["nodes"] == "all" else getattr(split, cfg["nodes"])
    return params, mcfg, g, prep, nodes


def cmd_eval(cfg):
    params, mcfg, g, prep, nodes = _checkpoint_context(cfg)
    with stage("eval"):
        acc = evaluate(params, prep.levels, g.Y, nodes, mcfg)
        pred = np.argmax(predict_logits(params, prep.levels, nodes, mcfg), axis=1)
    log.info("%s accuracy %.4f on %d nodes", cfg["nodes"], acc, len(nodes))
    return {"nodes": cfg["nodes"], "count": int(len(nodes)), "accuracy": acc,
            "macro_f1": macro_f1(pred, g.Y[nodes], g.c)}


def cmd_attn_dump(cfg):
    from .analysis import dump_attention, write_attention_dump

    _require(cfg, "out")
    params, mcfg, g, prep, nodes = _checkpoint_context(cfg)
    with stage("attn-dump"):
        dump = dump_attention(params, prep.levels, nodes, mcfg)
        files = write_attention_dump(dump, cfg["out"], images=cfg["images"])
    log.info("wrote %d files to %s", len(files), cfg["out"])
    return {"matrices": len(dump.matrices), "files": [str(f) for f in files]}


def cmd_ablate(cfg):
    from .analysis import run_ablation

    _require(cfg, "out")
    g = _load(cfg)
    with stage("ablate"):
        table = run_ablation(cfg["suite"], g, _model_cfg(cfg), _train_cfg(cfg), _prep_cfg(cfg),
                             seeds=range(cfg["seeds"]), fractions=cfg["split"], resplit=cfg["resplit"], log=log.info)
    out = Path(cfg["out"])
    with stage("write"):
        atomic_write(out / f"ablation_{cfg['suite']}.csv", table.to_csv().encode())
        detail = [{"variant": r.variant, "accuracies": r.accuracies, "median": r.median,
                   "tokens_sha256": r.token_checksum} for r in table.rows]
        atomic_write(out / f"ablation_{cfg['suite']}.json", (json.dumps(detail, indent=2) + "\n").encode())
    return {"suite": cfg["suite"], "rows": [{"variant": r.variant, "accuracy": r.accuracy, "median": r.median,
                                             "gain": table.gain(r)} for r in table.rows]}


def cmd_sweep_s(cfg):
    from .analysis import sweep_S, write_series

    _require(cfg, "out")
    g = _load(cfg)
    with stage("sweep-s"):
        series = sweep_S(g, cfg["values"], _model_cfg(cfg), _train_cfg(cfg), _prep_cfg(cfg), fractions=cfg["split"],
                         log=log.info)
        write_series(series, cfg["out"])
    best = max(series, key=lambda t: (t[1], -t[0]))
    return {"series": [[s, a] for s, a in series], "best_S": best[0]}


def cmd_bench(cfg):
    from .analysis import bench_attention, bench_table_csv

    with stage("bench"):
        rows = bench_attention(cfg["S_values"], d_m=cfg["d_m"], H=cfg["H"], batch=cfg["batch"], trials=cfg["trials"],
                               seed=cfg["seed"])
    text = bench_table_csv(rows)
    sys.stderr.write(text)
    if cfg["out"]:
        atomic_write(cfg["out"], text.encode())
    return {"rows": [{"S": r.S, "dense_logits": r.dense_logits, "sparse_logits": r.sparse_logits,
                      "dense_s": r.dense_s, "sparse_s": r.sparse_s, "max_abs_diff": r.max_abs_diff} for r in rows]}


HANDLERS = {"synth": cmd_synth, "preprocess": cmd_preprocess, "train": cmd_train, "eval": cmd_eval,
            "attn-dump": cmd_attn_dump, "ablate": cmd_ablate, "sweep-s": cmd_sweep_s, "bench": cmd_bench}


def main(argv=None) -> int:
    parser, opts = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(message)s", force=True)
    try:
        cfg = opts[args.command].resolve(args)
        cfg["verbose"] = args.verbose
        summary = HANDLERS[args.command](cfg)
    except DamgtError as exc:
        where = getattr(exc, "stage", None)
        print(f"damgt {args.command}: {where + ': ' if where else ''}{exc}", file=sys.stderr)
        return exc.exit_code
    print(json.dumps({"command": args.command, "ok": True, **summary}, sort_keys=True, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
