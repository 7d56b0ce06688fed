"""Command-line front end: config parsing, metrics CSV, gnuplot emission.

`fedcomp` runs one experiment; `fedcomp-plot` turns one or more metrics CSVs
into a self-contained gnuplot script.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import federation
from .data import load_idx, make_blobs
from .models import ModelSpec
from .sfc import SfcConfig

CSV_HEADER = "round,compressor,train_loss,test_acc,bytes_up,comp_rate,cos_eff,wall_ms"

IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class CliError(Exception):
    pass


def _onoff(value):
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError(f"expected on/off, got {value!r}")
    return value == "on"


def build_arg_parser():
    p = argparse.ArgumentParser(
        prog="fedcomp",
        description="Federated-learning simulator with gradient compression",
    )
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--dataset", choices=["mnist", "fmnist", "blobs"])
    p.add_argument("--data-dir", help="directory holding the IDX files")
    p.add_argument("--model", default="mlp:64", help="architecture, e.g. mlp:64 or mlp:128,64")
    p.add_argument("--clients", type=int, default=10)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--compressor", choices=["none", "topk", "sign", "stc", "3sfc"],
                   default="none")
    p.add_argument("--budget", type=int, help="3SFC budget in 32-bit scalars")
    p.add_argument("--topk", type=int, help="kept coordinates for topk/stc")
    p.add_argument("--rounds", type=int, default=60)
    p.add_argument("--local-iters", type=int, default=5)
    p.add_argument("--sfc-steps", type=int, default=100)
    p.add_argument("--sfc-lr", type=float, default=0.1)
    p.add_argument("--lambda", dest="lam", type=float, default=0.0)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--ef", type=_onoff, default=True, metavar="{on,off}")
    p.add_argument("--warm-start", type=_onoff, default=False, metavar="{on,off}")
    p.add_argument("--agg", choices=["uniform", "weighted"], default="weighted")
    p.add_argument("--ef-variant", choices=["eq6", "alg1"], default="eq6")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--timing", type=_onoff, default=True, metavar="{on,off}",
                   help="off writes wall_ms as 0 for byte-reproducible CSVs")
    p.add_argument("--out", help="output directory for metrics CSV + config sidecar")
    return p


def _parse_model(text):
    if not text.startswith("mlp:"):
        raise CliError(f"unsupported model spec {text!r}; expected mlp:<h1[,h2...]>")
    try:
        hidden = [int(h) for h in text[4:].split(",") if h]
    except ValueError:
        raise CliError(f"bad hidden sizes in {text!r}") from None
    if not hidden:
        raise CliError("model needs at least one hidden width")
    return hidden


def parse_config(argv):
    """Resolve flags (over an optional JSON config file) into a run setup."""
    parser = build_arg_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        raise SystemExit(2)
    ns = parser.parse_args(argv)
    if ns.config:
        try:
            file_values = json.loads(Path(ns.config).read_text())
        except OSError as exc:
            raise CliError(f"cannot read config file: {exc}") from exc
        defaults = {}
        for key, value in file_values.items():
            dest = key.replace("-", "_")
            if dest == "lambda":
                dest = "lam"
            if not any(a.dest == dest for a in parser._actions):
                raise CliError(f"unknown config key {key!r}")
            defaults[dest] = value
        parser.set_defaults(**defaults)
        ns = parser.parse_args(argv)
    if ns.dataset is None:
        raise CliError("--dataset is required")
    return ns


def load_datasets(ns):
    if ns.dataset == "blobs":
        train = make_blobs(n_per_class=150, classes=4, dim=20, spread=0.6, seed=ns.seed)
        test = make_blobs(n_per_class=50, classes=4, dim=20, spread=0.6, seed=ns.seed + 7919)
        return train, test
    data_dir = ns.data_dir or os.environ.get("FEDCOMP_DATA")
    if not data_dir:
        raise CliError(f"--data-dir (or FEDCOMP_DATA) required for dataset {ns.dataset}")
    root = Path(data_dir)
    for split in ("train", "test"):
        for name in IDX_FILES[split]:
            if not (root / name).exists():
                raise CliError(f"missing dataset file {root / name}")
    train = load_idx(root / IDX_FILES["train"][0], root / IDX_FILES["train"][1])
    test = load_idx(root / IDX_FILES["test"][0], root / IDX_FILES["test"][1])
    return train, test


def scalars_to_k(compressor, budget):
    """Largest k whose payload fits in `budget` 32-bit scalars.

    topk spends 2 scalars per kept coordinate (index + value); stc spends a
    4-byte index plus 1 sign bit per coordinate and one shared 4-byte scale.
    """
    if compressor == "topk":
        k = budget // 2
    else:  # stc: 4k + ceil(k/8) + 4 bytes <= 4*budget
        k = (4 * budget - 4) * 8 // 33
        while 4 * k + (k + 7) // 8 + 4 > 4 * budget:
            k -= 1
    if k < 1:
        raise CliError(f"budget {budget} too small for one {compressor} coordinate")
    return k


def make_run_config(ns, input_dim, classes):
    hidden = _parse_model(ns.model)
    model = ModelSpec((input_dim, *hidden, classes))
    sfc_cfg = None
    if ns.compressor == "3sfc":
        if ns.budget is None:
            raise CliError("3sfc needs --budget")
        min_scalars = input_dim + classes + 1
        if ns.budget < min_scalars:
            raise CliError(
                f"budget {ns.budget} below one synthetic sample ({min_scalars} scalars)"
            )
        sfc_cfg = SfcConfig(
            budget=ns.budget, steps=ns.sfc_steps, synth_lr=ns.sfc_lr, lam=ns.lam,
            warm_start=ns.warm_start, ef_variant=ns.ef_variant,
        )
    topk = ns.topk
    if ns.compressor in ("topk", "stc"):
        if topk is None:
            if ns.budget is None:
                raise CliError(f"{ns.compressor} needs --topk or --budget")
            topk = scalars_to_k(ns.compressor, ns.budget)
        if not 1 <= topk <= model.n_params:
            raise CliError(f"top-k size {topk} out of range for {model.n_params} parameters")
    return federation.RunConfig(
        model=model,
        n_clients=ns.clients,
        alpha=ns.alpha,
        compressor=ns.compressor,
        topk=topk,
        sfc=sfc_cfg,
        rounds=ns.rounds,
        local_iters=ns.local_iters,
        lr=ns.lr,
        batch_size=ns.batch_size,
        aggregation=ns.agg,
        error_feedback=ns.ef,
        seed=ns.seed,
    )


def _fmt(x):
    return format(float(x), ".6g")


class MetricsWriter:
    """Appends one CSV row per round; header first, flushed per write."""

    def __init__(self, path, compressor_name, timing=True):
        self.path = Path(path)
        self.compressor_name = compressor_name
        self.timing = timing
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w") as f:
            f.write(CSV_HEADER + "\n")

    def write(self, report):
        wall = report.wall_ms if self.timing else 0.0
        row = ",".join([
            str(report.round),
            self.compressor_name,
            _fmt(report.train_loss),
            _fmt(report.test_acc),
            str(report.bytes_up),
            _fmt(report.comp_rate),
            _fmt(report.cos_eff),
            _fmt(wall),
        ])
        with open(self.path, "a") as f:
            f.write(row + "\n")
            f.flush()


def write_metrics(reports, path, compressor_name, timing=True):
    """Write a full metrics CSV in one go (same format as incremental writes)."""
    writer = MetricsWriter(path, compressor_name, timing=timing)
    for report in reports:
        writer.write(report)


def write_config_sidecar(ns, run_config, path):
    payload = {k: v for k, v in vars(ns).items() if k != "config"}
    payload["model_layers"] = list(run_config.model.layer_sizes)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def emit_plot_script(csv_paths, out_path):
    """Emit a gnuplot script: test_acc and cos_eff vs round and vs total bytes."""
    csv_paths = [str(p) for p in csv_paths]
    for p in csv_paths:
        with open(p) as f:
            header = f.readline().strip()
        if header != CSV_HEADER:
            raise CliError(f"{p}: header {header!r} != expected {CSV_HEADER!r}")
    lines = [
        "# generated by fedcomp-plot",
        'set datafile separator ","',
        "set terminal pngcairo size 1200,900",
        "set output 'fedcomp.png'",
        "set multiplot layout 2,2",
        "set key bottom right",
    ]
    def series(using, title_suffix=""):
        parts = []
        for p in csv_paths:
            name = Path(p).stem
            parts.append(f"'{p}' every ::1 using {using} with lines title '{name}{title_suffix}'")
        return "plot " + ", \\\n     ".join(parts)

    lines += ["set xlabel 'round'", "set ylabel 'test accuracy'", series("1:4")]
    lines += ["set xlabel 'round'", "set ylabel 'cosine efficiency'", series("1:7")]
    # accuracy/efficiency against cumulative uplink traffic
    lines += ["set xlabel 'cumulative uplink bytes'", "set ylabel 'test accuracy'", "cum=0",
              series("(cum=cum+column(5), cum):4")]
    lines += ["set xlabel 'cumulative uplink bytes'", "set ylabel 'cosine efficiency'", "cum=0",
              series("(cum=cum+column(5), cum):7")]
    lines += ["unset multiplot"]
    Path(out_path).write_text("\n".join(lines) + "\n")


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    try:
        ns = parse_config(argv)
        train, test = load_datasets(ns)
        run_config = make_run_config(ns, train.dim, train.class_count)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    resolved = {k: v for k, v in vars(ns).items() if k != "config"}
    print("resolved config:", json.dumps(resolved, sort_keys=True))
    writer = None
    if ns.out:
        out_dir = Path(ns.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        tagname = f"{ns.dataset}_{ns.compressor}_seed{ns.seed}"
        writer = MetricsWriter(out_dir / f"{tagname}.csv", ns.compressor, timing=ns.timing)
        write_config_sidecar(ns, run_config, out_dir / f"{tagname}.json")

    def on_round(report):
        if writer is not None:
            writer.write(report)
        print(
            f"round {report.round:4d}  loss {report.train_loss:.4f}  "
            f"acc {report.test_acc:.4f}  bytes {report.bytes_up}  "
            f"cos_eff {report.cos_eff:.4f}"
        )

    try:
        federation.run(run_config, train, test, on_round=on_round)
    except federation.FederationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def plot_main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    p = argparse.ArgumentParser(prog="fedcomp-plot",
                                description="Emit a gnuplot script from metrics CSVs")
    p.add_argument("csvs", nargs="+", help="metrics CSV files")
    p.add_argument("-o", "--out", required=True, help="output .gp path")
    ns = p.parse_args(argv)
    try:
        emit_plot_script(ns.csvs, ns.out)
    except (CliError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
