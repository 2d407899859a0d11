"""Command-line surface: build-graph, train, eval, predict, report.

Every failure exits nonzero after printing one line to stderr of the form
``amfstgcn: error: <kind>: <message>``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .data import DataError, DatasetManifest, load_dataset, make_windows, split_lengths
from .decoders import forecast
from .graph import (GraphError, TrafficGraph, build_adjacency_distance, build_adjacency_spearman,
                    read_adjacency_csv, write_edge_list)
from .model import ConfigError
from .training import TrainConfig, TrainingError, evaluate, ha_baseline, predict, train

log = logging.getLogger("amfstgcn")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------- csv helpers

def write_csv(path, header: list[str], rows) -> None:
    """Atomic write; floats use repr so they re-parse bit-exactly."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    tmp.replace(path)


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


# ---------------------------------------------------------------- shared loading

def _load_series(manifest_path):
    manifest = DatasetManifest.load(manifest_path)
    ids, series = load_dataset(manifest)
    return manifest, ids, series


def _load_graph(path, ids) -> TrafficGraph:
    g = read_adjacency_csv(path, ids)
    if g.n != len(ids):
        raise GraphError(f"graph has {g.n} nodes, dataset has {len(ids)}")
    return g


def _split(manifest, series):
    return make_windows(series, manifest.input_length, manifest.output_length, manifest.split)


def _train_config(args) -> tuple[TrainConfig, dict]:
    doc = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise ConfigError(f"{args.config}: cannot read config ({exc.strerror})") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{args.config}: config must be a JSON object")
    tc = TrainConfig.from_dict(doc)
    if args.seed is not None:
        tc.seed = args.seed
    if args.epochs is not None:
        tc.epochs = args.epochs
    if args.two_phase:
        tc.two_phase = True
    model = dict(tc.model)
    if args.no_mask:
        model["use_mask"] = False
    if args.no_attention:
        model["use_attention"] = False
    if args.ts_light:
        model["ts_light"] = True
    tc.model = model
    if tc.epochs < 1 or tc.batch_size < 1 or tc.lr < 0:
        raise ConfigError("epochs and batch_size must be positive, lr nonnegative")
    return tc, doc


def _checkpoint_for(args, ids, g):
    ck = load_checkpoint(args.checkpoint, g.fingerprint())
    if ck.node_ids and ck.node_ids != list(ids):
        raise CheckpointError("checkpoint node ids differ from the dataset")
    return ck


# ---------------------------------------------------------------- commands

def cmd_build_graph(args) -> None:
    manifest, ids, series = _load_series(args.manifest)
    if args.method == "spearman":
        n_train = split_lengths(len(series), manifest.split)[0]
        g = build_adjacency_spearman(series[:n_train, :, 0], args.threshold, ids)
    else:
        if args.distances is None or args.sigma is None or args.epsilon is None:
            raise UsageError("--method distance needs --distances, --sigma and --epsilon")
        head, rows = read_csv(args.distances)
        if [h.strip() for h in head] != ids:
            raise GraphError("distance matrix header must list the dataset node ids in order")
        try:
            d = np.array([[float(c) for c in r] for r in rows])
        except ValueError as exc:
            raise GraphError(f"{args.distances}: non-numeric distance ({exc})") from None
        g = build_adjacency_distance(d, args.sigma, args.epsilon, ids)
    write_edge_list(g, args.out)
    log.info("wrote %d edges to %s", len(g.edges()), args.out)


def cmd_train(args) -> None:
    manifest, ids, series = _load_series(args.manifest)
    g = _load_graph(args.graph, ids)
    tc, doc = _train_config(args)
    data = _split(manifest, series)
    if data.out_of_range:
        log.warning("validation/test values fall outside the training range")
    res = train(tc, data, g.adjacency)
    echo = {"source": doc, "effective": tc.to_dict()}
    save_checkpoint(Checkpoint(res.params, res.model_config, data.bounds, g.fingerprint(), echo, ids),
                    args.checkpoint)
    if args.loss_csv:
        write_csv(args.loss_csv, ["epoch", "train_mse", "val_mse"], res.history)


def _eval_split(data, name):
    w = {"train": data.train, "val": data.val, "test": data.test}[name]
    if len(w) == 0:
        raise DataError(f"{name} split has no windows")
    return w


def cmd_eval(args) -> None:
    manifest, ids, series = _load_series(args.manifest)
    g = _load_graph(args.graph, ids)
    ck = _checkpoint_for(args, ids, g)
    data = _split(manifest, series)
    w = _eval_split(data, args.split)
    period = args.period or manifest.default_period()
    model = evaluate(ck.params, ck.model_config, g.adjacency, w, data.bounds)
    ha = ha_baseline(data, w, period)
    write_csv(args.out, ["model", "horizon", "mae", "rmse"], model.rows("model") + ha.rows("HA"))


def cmd_predict(args) -> None:
    manifest, ids, series = _load_series(args.manifest)
    g = _load_graph(args.graph, ids)
    ck = _checkpoint_for(args, ids, g)
    t = ck.model_config.t_in
    if len(series) < t:
        raise DataError(f"need at least {t} steps for a forecast, have {len(series)}")
    x = ck.bounds.normalize(series[-t:])[None]
    y = ck.bounds.denormalize(predict(ck.params, ck.model_config, g.adjacency, x))[0]
    rows = [[m + 1, ids[n], manifest.channels[c], float(y[m, n, c])]
            for m in range(y.shape[0]) for n in range(y.shape[1]) for c in range(y.shape[2])]
    write_csv(args.out, ["step", "node", "channel", "value"], rows)


def cmd_report(args) -> None:
    manifest, ids, series = _load_series(args.manifest)
    g = _load_graph(args.graph, ids)
    ck = _checkpoint_for(args, ids, g)
    data = _split(manifest, series)
    w = _eval_split(data, args.split)
    period = args.period or manifest.default_period()
    model = evaluate(ck.params, ck.model_config, g.adjacency, w, data.bounds)
    ha = ha_baseline(data, w, period)
    out = Path(args.out_dir)
    write_csv(out / "horizon_curves.csv", ["horizon", "model_mae", "ha_mae", "model_rmse", "ha_rmse"],
              [[h + 1, model.mae[h], ha.mae[h], model.rmse[h], ha.rmse[h]] for h in range(len(model.mae))])
    cfg = ck.model_config
    sums = np.zeros((cfg.n_blocks, cfg.n_nodes, cfg.n_branches))
    for i in range(0, len(w), 64):
        trace = {}
        forecast(w.x[i:i + 64], g.adjacency, ck.params, cfg, trace=trace)
        for l, s in enumerate(trace["scores"][:cfg.n_blocks]):
            sums[l] += s.sum(axis=0)
    mean = sums / len(w)
    labels = [f"{kt}x{ks}" for kt, ks in cfg.kernels]
    rows = [[l, ids[n]] + [float(v) for v in mean[l, n]] + [labels[int(np.argmax(mean[l, n]))]]
            for l in range(cfg.n_blocks) for n in range(cfg.n_nodes)]
    write_csv(out / "branch_attention.csv", ["block", "node"] + labels + ["dominant"], rows)


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="amfstgcn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    b = sub.add_parser("build-graph", help="adjacency from series correlation or distances")
    b.add_argument("--manifest", required=True)
    b.add_argument("--method", choices=["spearman", "distance"], default="spearman")
    b.add_argument("--threshold", type=float, default=0.92)
    b.add_argument("--distances")
    b.add_argument("--sigma", type=float)
    b.add_argument("--epsilon", type=float)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_build_graph)

    t = sub.add_parser("train", help="fit a model and write a checkpoint")
    t.add_argument("--manifest", required=True)
    t.add_argument("--graph", required=True)
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--checkpoint", required=True)
    t.add_argument("--loss-csv")
    t.add_argument("--no-mask", action="store_true")
    t.add_argument("--no-attention", action="store_true")
    t.add_argument("--two-phase", action="store_true")
    t.add_argument("--ts-light", action="store_true")
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "per-horizon metrics with the HA baseline"),
                                 ("predict", cmd_predict, "forecast from the latest window"),
                                 ("report", cmd_report, "horizon curves and branch attention")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--manifest", required=True)
        s.add_argument("--graph", required=True)
        s.add_argument("--checkpoint", required=True)
        if name == "report":
            s.add_argument("--out-dir", required=True)
        else:
            s.add_argument("--out", required=True)
        if name != "predict":
            s.add_argument("--split", choices=["train", "val", "test"], default="test")
            s.add_argument("--period", type=int)
        s.set_defaults(func=func)
    return p


_KINDS = ((UsageError, "usage"), (CheckpointError, "checkpoint"), (GraphError, "graph"),
          (DataError, "data"), (ConfigError, "config"), (TrainingError, "training"),
          (ValueError, "config"), (OSError, "io"))


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.func(args)
    except Exception as exc:
        kind = next((k for cls, k in _KINDS if isinstance(exc, cls)), None)
        if kind is None:
            raise
        msg = " ".join(str(exc).split())
        print(f"amfstgcn: error: {kind}: {msg}", file=sys.stderr)
        return 2 if kind == "usage" else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
