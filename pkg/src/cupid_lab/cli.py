"""Command-line entry point.

Every command reads a JSON config (``--config``; omitted means the defaults
for ``--task``), writes CSV/JSON into ``--out`` and exits 0.  Failures print
one JSON object on stderr, ``{"error": ..., "message": ...}``, and exit 2 for
bad input or 1 for runtime failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import cupid as cp
from . import data as dt
from . import harness as hs
from . import nn
from . import uncertainty as un
from .config import TASKS, ConfigError, default_config, load_config

BASE_FILE = "base.json"
CUPID_FILE = "cupid.json"


class UsageError(Exception):
    pass


def _config(args):
    cfg = load_config(args.config) if args.config else default_config(args.task)
    if args.seed is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    return cfg


def _single_seed(cfg) -> int:
    return cfg.seeds[0]


def _write(out: Path, name: str, text: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(text)


def _losses_csv(losses) -> str:
    return "epoch,loss\n" + "".join(f"{i + 1},{dt.fmt(v)}\n" for i, v in enumerate(losses))


def cmd_gen_data(cfg, args):
    seed = _single_seed(cfg)
    if cfg.is_regression:
        train, test = hs.toy_sets(cfg, seed)
        _write(args.out, "train.csv", dt.regression_csv(train))
        _write(args.out, "test.csv", dt.regression_csv(test))
        return
    task = hs.prepare(cfg, seed)
    n_train = task.x_train.shape[0]
    is_ood = np.zeros(n_train, dtype=bool)
    _write(args.out, "train.csv",
           dt.classification_csv(dt.ClassificationData(task.x_train, task.y_train, is_ood)))
    label = np.zeros(task.y_test.size, dtype=bool) if task.label_test is None else task.label_test > 0
    _write(args.out, "test.csv",
           dt.classification_csv(dt.ClassificationData(task.x_test, task.y_test, label)))


def cmd_train_base(cfg, args):
    seed = _single_seed(cfg)
    res = hs.train_host(cfg, hs.prepare(cfg, seed), seed)
    args.out.mkdir(parents=True, exist_ok=True)
    nn.save_checkpoint(res.network, args.out / BASE_FILE)
    _write(args.out, "base_losses.csv", _losses_csv(res.losses))


def _load_base(args) -> nn.Mlp:
    path = Path(args.base) if args.base else args.out / BASE_FILE
    if not path.exists():
        raise UsageError(f"no base checkpoint at {path}; run train-base first or pass --base")
    return nn.load_checkpoint(path)


def _load_cupid(args) -> cp.CupidModule:
    path = Path(args.cupid) if args.cupid else args.out / CUPID_FILE
    if not path.exists():
        raise UsageError(f"no plug-in checkpoint at {path}; run train-cupid first or pass --cupid")
    return cp.load_checkpoint(path)


def cmd_train_cupid(cfg, args):
    seed = _single_seed(cfg)
    network = _load_base(args)
    trained = hs.train_plugin(cfg, network, hs.prepare(cfg, seed), seed)
    cp.save_checkpoint(trained.module, args.out / CUPID_FILE)
    _write(args.out, "cupid_losses.csv", _losses_csv(trained.cupid_losses))


def cmd_eval(cfg, args):
    seed = _single_seed(cfg)
    network = _load_base(args)
    module = _load_cupid(args)
    task = hs.prepare(cfg, seed)
    trained = hs.Trained(network, network.split_at(module.layer), module)
    records = hs.score(trained, task.x_test, task.y_test, task.label_test)
    _write(args.out, "records.csv", un.records_csv(records))
    rows = [
        (f"{name}.{metric}", value, len(records), f"seed={seed}")
        for (name, metric), value in hs.score_metrics(cfg, records).items()
    ]
    _write(args.out, "metrics.csv", hs.mt.metrics_csv(rows))


def cmd_run(cfg, args):
    report = hs.run(cfg)
    report.write(args.out)
    if report.failed:
        raise RuntimeError(f"seeds failed: {report.provenance()['failed_seeds']}")


def cmd_sweep(cfg, args):
    layers = args.layers or list(range(1, cfg.model.n_layers))
    reports = hs.sweep_placement(cfg, layers)
    for layer, report in reports.items():
        report.write(args.out, prefix=f"layer{layer}_")
    hs.emit_plotdata(reports, args.out / "sweep.csv", kind="sweep")


def cmd_ablate(cfg, args):
    reports = hs.ablate(cfg)
    for variant, report in reports.items():
        report.write(args.out, prefix=f"{variant}_")
    _write(args.out, "ablation.csv", hs.comparison_csv(reports, "variant"))


def cmd_plot_data(cfg, args):
    if not cfg.is_regression:
        raise UsageError(f"plot-data needs a toy regression task, got {cfg.task!r}")
    seed = _single_seed(cfg)
    task = hs.prepare(cfg, seed)
    network = hs.train_host(cfg, task, seed).network
    trained = hs.train_plugin(cfg, network, task, seed)
    hs.emit_plotdata(trained, args.out / f"plot_seed{seed}.csv")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-base": cmd_train_base,
    "train-cupid": cmd_train_cupid,
    "eval": cmd_eval,
    "run": cmd_run,
    "sweep": cmd_sweep,
    "ablate": cmd_ablate,
    "plot-data": cmd_plot_data,
}


def _layers(text: str) -> list:
    try:
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cupid-lab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="experiment config (JSON)")
        p.add_argument("--task", choices=TASKS, default="toy2",
                       help="task whose defaults apply when --config is omitted")
        p.add_argument("--seed", type=int, help="run this seed only")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        if name in ("train-cupid", "eval"):
            p.add_argument("--base", help=f"host checkpoint (default <out>/{BASE_FILE})")
        if name == "eval":
            p.add_argument("--cupid", help=f"plug-in checkpoint (default <out>/{CUPID_FILE})")
        if name == "sweep":
            p.add_argument("--layers", type=_layers, help="comma-separated insertion layers")
    return parser


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message}, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = _config(args)
        COMMANDS[args.command](cfg, args)
    except (UsageError, ConfigError, FileNotFoundError, json.JSONDecodeError) as exc:
        return _fail(type(exc).__name__, str(exc), 2)
    except Exception as exc:  # noqa: BLE001 - any failure becomes an error line
        return _fail(type(exc).__name__, str(exc), 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
