"""End-to-end experiment runner.

A run trains the host network, inserts and trains the plug-in module, scores
every test input and reduces the per-seed metrics into a report.  Everything
written to disk is a deterministic function of (config, seed).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import cupid as cp
from . import data as dt
from . import metrics as mt
from . import nn
from . import uncertainty as un
from .config import ConfigError, ExperimentConfig
from .rng import Rng

VARIANTS = ("joint", "no-max", "separate")
PLOT_GRID = (4.5, 14.5, 0.01)


# --- task data ----------------------------------------------------------------


@dataclass
class TaskData:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    # detection label per test input (OOD flag), or None
    label_test: np.ndarray | None = None


def _blobs_config(cfg: ExperimentConfig) -> dt.BlobsConfig:
    d = cfg.data
    return dt.BlobsConfig(d.classes, d.n_per_class, d.dim, d.spread, d.radius)


def _sub_seed(seed: int, key: str) -> int:
    return Rng(seed).child(key).seed


def toy_sets(cfg: ExperimentConfig, seed: int):
    """Training set and an independent test set from the same generator."""
    branches = dt.TOYS[cfg.task]
    density = list(cfg.data.density) or None
    train = dt.gen_toy(branches, cfg.data.n_per_region, seed, density)
    test = dt.gen_toy(branches, cfg.data.n_test_per_region, _sub_seed(seed, "toy-test"), density)
    return train, test


def ood_set(cfg: ExperimentConfig, seed: int, shift: float, n: int) -> dt.ClassificationData:
    """``n`` class-balanced-in-expectation draws from the shifted generator."""
    ood = dt.gen_ood_shift(_blobs_config(cfg), shift, seed)
    pick = np.sort(Rng(seed).child("ood-pick").permutation(len(ood))[:n])
    return ood.subset(pick)


def prepare(cfg: ExperimentConfig, seed: int) -> TaskData:
    if cfg.is_regression:
        train, test = toy_sets(cfg, seed)
        return TaskData(train.x.reshape(-1, 1), train.y, test.x.reshape(-1, 1), test.y)
    blobs = dt.gen_blobs(_blobs_config(cfg), seed)
    tr, te = dt.train_test_split(len(blobs), seed, cfg.data.train_fraction)
    y_train = blobs.labels[tr]
    if cfg.data.label_noise > 0:
        # corrupt training labels only; test labels stay clean
        y_train = dt.inject_label_noise(y_train, cfg.data.classes, cfg.data.label_noise, seed)
    if cfg.task != "ood":
        return TaskData(blobs.features[tr], y_train, blobs.features[te], blobs.labels[te])
    ood = ood_set(cfg, seed, cfg.data.shift, te.size)
    return TaskData(
        blobs.features[tr], y_train,
        np.concatenate([blobs.features[te], ood.features]),
        np.concatenate([blobs.labels[te], ood.labels]),
        np.r_[np.zeros(te.size), np.ones(len(ood))],
    )


def model_spec(cfg: ExperimentConfig, x_train: np.ndarray) -> nn.MlpSpec:
    if not cfg.standardize_inputs:
        return cfg.model
    mean = x_train.mean(axis=0)
    std = x_train.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return replace(cfg.model, input_offset=tuple(mean), input_scale=tuple(std))


# --- per-seed pipeline -------------------------------------------------------


class FrozenHostViolation(RuntimeError):
    pass


@dataclass
class Trained:
    network: nn.Mlp
    split: nn.SplitNetwork
    module: cp.CupidModule
    # second module for the separate-branches variant (uncertainty branch)
    unc_module: cp.CupidModule | None = None
    base_losses: list = field(default_factory=list)
    cupid_losses: list = field(default_factory=list)


def train_host(cfg: ExperimentConfig, task: TaskData, seed: int) -> nn.TrainResult:
    net = nn.Mlp.build(model_spec(cfg, task.x_train), seed)
    return nn.train_base(net, task.x_train, task.y_train, cfg.base, seed)


def train_plugin(
    cfg: ExperimentConfig, network: nn.Mlp, task: TaskData, seed: int,
    layer: int | None = None, variant: str = "joint",
) -> Trained:
    """Insert and train the module; fails loudly if the host changes."""
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
    digest = network.parameter_digest()
    split = network.split_at(cfg.layer if layer is None else layer)
    module = cp.build_for(split, cfg.trunk_depth, seed)
    args = (split, module, task.x_train, task.y_train, cfg.cupid, cfg.weights, seed)
    unc_module = None
    if variant == "separate":
        res = cp.train_cupid(*args, train_only="recon")
        unc_res = cp.train_cupid(*args, train_only="unc")
        unc_module = unc_res.module
    else:
        res = cp.train_cupid(*args, no_max=(variant == "no-max"))
    if network.parameter_digest() != digest:
        raise FrozenHostViolation("host parameters changed during plug-in training")
    return Trained(network, split, res.module, unc_module, cupid_losses=res.losses)


def score(trained: Trained, x, y=None, labels=None) -> list[un.UncertaintyRecord]:
    records = un.estimate(trained.split, trained.module, x, y)
    if trained.unc_module is not None:
        alea = un.estimate(trained.split, trained.unc_module, x)
        for r, a in zip(records, alea):
            r.u_alea = a.u_alea
    if labels is not None:
        for r, lab in zip(records, labels):
            r.label = int(lab)
    return records


def score_metrics(cfg: ExperimentConfig, records, extra_scores=None) -> dict:
    """``{(score_name, metric_name): value}`` using the task's metric suite."""
    scores = {"u_alea": un.column(records, "u_alea"), "u_epis": un.column(records, "u_epis")}
    scores.update(extra_scores or {})
    out = {}
    for name, s in scores.items():
        if cfg.is_regression:
            suite = mt.regression_suite(s, un.column(records, "error"))
        elif cfg.task == "ood":
            suite = mt.ood_suite(s, un.column(records, "label"))
        else:
            suite = mt.misclassification_suite(s, un.column(records, "error"))
        for metric, value in suite.items():
            out[(name, metric)] = value
    return out


@dataclass
class SeedResult:
    seed: int
    ok: bool
    metrics: dict = field(default_factory=dict)
    n_test: int = 0
    diagnostic: str = ""
    theta_digest: str = ""
    records: list = field(default_factory=list)


def run_seed(cfg: ExperimentConfig, seed: int, variant: str = "joint", layer=None, host=None) -> SeedResult:
    """One seed end to end.  ``host`` optionally supplies an already trained
    network so several placements can share it.
    """
    task = prepare(cfg, seed)
    try:
        network = host if host is not None else train_host(cfg, task, seed).network
        trained = train_plugin(cfg, network, task, seed, layer, variant)
        labels = task.label_test
        records = score(trained, task.x_test, task.y_test, labels)
        extra = {}
        if cfg.ablations.mc_dropout_baseline:
            extra["mc_dropout"] = un.mc_dropout_estimate(
                network, task.x_test, cfg.mc_dropout_passes, seed
            )
        metrics = score_metrics(cfg, records, extra)
    except nn.TrainingDiverged as exc:
        return SeedResult(seed, False, diagnostic=f"training diverged: {exc}")
    except mt.MetricError as exc:
        return SeedResult(seed, False, diagnostic=f"metric undefined: {exc}")
    return SeedResult(seed, True, metrics, len(records), "", network.parameter_digest(), records)


# --- reports -------------------------------------------------------------------


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    seeds: list  # SeedResult per seed, in config order
    variant: str = "joint"
    layer: int | None = None

    @property
    def keys(self) -> list:
        keys = []
        for r in self.seeds:
            for k in r.metrics:
                if k not in keys:
                    keys.append(k)
        return keys

    def values(self, key) -> np.ndarray:
        return np.array([r.metrics[key] for r in self.seeds if r.ok and key in r.metrics])

    def summary(self) -> dict:
        """``{key: (mean, std or None, n_seeds)}``; std needs two or more seeds."""
        out = {}
        for key in self.keys:
            v = self.values(key)
            std = float(v.std(ddof=1)) if v.size >= 2 else None
            out[key] = (float(v.mean()), std, int(v.size))
        return out

    @property
    def failed(self) -> list:
        return [r.seed for r in self.seeds if not r.ok]

    def provenance(self) -> dict:
        return {
            "config_hash": self.config.digest(),
            "code_version": __version__,
            "variant": self.variant,
            "layer": self.config.layer if self.layer is None else self.layer,
            "seeds": [r.seed for r in self.seeds],
            "failed_seeds": {str(r.seed): r.diagnostic for r in self.seeds if not r.ok},
            "theta_digests": {str(r.seed): r.theta_digest for r in self.seeds if r.ok},
        }

    def metrics_csv(self) -> str:
        rows = []
        for r in self.seeds:
            for (name, metric), value in r.metrics.items():
                rows.append((f"{name}.{metric}", value, r.n_test, f"seed={r.seed}"))
        return mt.metrics_csv(rows)

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["score", "metric", "mean", "std", "n_seeds"])
        for (name, metric), (mean, std, n) in self.summary().items():
            w.writerow([name, metric, dt.fmt(mean), "" if std is None else dt.fmt(std), n])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {
            "config": self.config.to_dict(),
            "provenance": self.provenance(),
            "summary": [
                {"score": n, "metric": m, "mean": mean, "std": std, "n_seeds": k}
                for (n, m), (mean, std, k) in self.summary().items()
            ],
        }
        return json.dumps(doc, sort_keys=True, indent=1) + "\n"

    def write(self, out, prefix: str = "") -> list:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        files = {
            f"{prefix}report.json": self.to_json(),
            f"{prefix}metrics.csv": self.metrics_csv(),
            f"{prefix}summary.csv": self.summary_csv(),
        }
        for r in self.seeds:
            if r.ok:
                files[f"{prefix}records_seed{r.seed}.csv"] = un.records_csv(r.records)
        for name, text in files.items():
            (out / name).write_text(text)
        return sorted(files)


def run(cfg: ExperimentConfig, variant: str = "joint") -> ExperimentReport:
    return ExperimentReport(cfg, [run_seed(cfg, s, variant) for s in cfg.seeds], variant)


def sweep_placement(cfg: ExperimentConfig, layers) -> dict:
    """One report per insertion layer; each seed's host network is trained once."""
    layers = list(layers)
    for layer in layers:
        if not 1 <= layer < cfg.model.n_layers:
            raise ConfigError(f"insertion layer must be in [1, {cfg.model.n_layers - 1}], got {layer}")
    per_layer = {layer: [] for layer in layers}
    for seed in cfg.seeds:
        task = prepare(cfg, seed)
        try:
            host = train_host(cfg, task, seed).network
        except nn.TrainingDiverged as exc:
            for layer in layers:
                per_layer[layer].append(SeedResult(seed, False, diagnostic=f"training diverged: {exc}"))
            continue
        for layer in layers:
            per_layer[layer].append(run_seed(replace(cfg, layer=layer), seed, host=host))
    return {
        layer: ExperimentReport(replace(cfg, layer=layer), results, layer=layer)
        for layer, results in per_layer.items()
    }


def comparison_csv(reports: dict, key_name: str) -> str:
    """One row per (key, score, metric) with mean and std across seeds."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([key_name, "score", "metric", "mean", "std", "n_seeds"])
    for key, report in reports.items():
        for (name, metric), (mean, std, n) in report.summary().items():
            w.writerow([key, name, metric, dt.fmt(mean), "" if std is None else dt.fmt(std), n])
    return buf.getvalue()


def ablate(cfg: ExperimentConfig) -> dict:
    """Default joint run plus every flagged variant, all on the same seeds."""
    variants = ["joint"]
    if cfg.ablations.no_max:
        variants.append("no-max")
    if cfg.ablations.separate_branches:
        variants.append("separate")
    if len(variants) == 1:
        raise ConfigError("no ablation flagged: set ablations.no_max or ablations.separate_branches")
    return {v: run(cfg, v) for v in variants}


def ood_ladder(cfg: ExperimentConfig, seed: int, shifts=None) -> list:
    """Epistemic AUC of in-distribution test data vs shifted data, per shift.

    Host and module are trained once; only the OOD set changes.
    """
    if cfg.task != "ood":
        raise ConfigError("the shift ladder needs an 'ood' config")
    shifts = cfg.data.shift_ladder if shifts is None else shifts
    task = prepare(cfg, seed)
    n_id = int((task.label_test == 0).sum())
    trained = train_plugin(cfg, train_host(cfg, task, seed).network, task, seed)
    u_id = un.column(score(trained, task.x_test[:n_id]), "u_epis")
    out = []
    for shift in shifts:
        ood = ood_set(cfg, seed, shift, n_id)
        u_ood = un.column(score(trained, ood.features), "u_epis")
        auc = mt.roc_auc(np.r_[u_id, u_ood], np.r_[np.zeros(n_id), np.ones(len(ood))])
        out.append((float(shift), auc))
    return out


# --- plot data -----------------------------------------------------------------


def plot_grid() -> np.ndarray:
    lo, hi, step = PLOT_GRID
    n = int(round((hi - lo) / step)) + 1
    # index-based so the grid has no accumulated rounding drift
    return lo + np.arange(n) * step


def plotdata_csv(trained: Trained) -> str:
    x = plot_grid()
    records = score(trained, x.reshape(-1, 1))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "y_hat", "u_alea", "u_epis"])
    for xi, r in zip(x, records):
        w.writerow([dt.fmt(xi), dt.fmt(r.y_hat[0]), dt.fmt(r.u_alea), dt.fmt(r.u_epis)])
    return buf.getvalue()


def emit_plotdata(source, out, kind: str = "toy") -> Path:
    """Write plot-ready CSV.

    ``kind="toy"``: ``source`` is a trained regression pipeline; writes the
    dense x-grid.  ``kind="sweep"``: ``source`` maps layer to report; writes
    the comparison table.
    """
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if kind == "toy":
        if source.network.spec.head != "regression" or source.network.spec.widths[0] != 1:
            raise ValueError("grid plot data needs a 1-d regression model")
        out.write_text(plotdata_csv(source))
    elif kind == "sweep":
        out.write_text(comparison_csv(source, "layer"))
    else:
        raise ValueError(f"kind must be 'toy' or 'sweep', got {kind!r}")
    return out


def finite_report(report: ExperimentReport) -> bool:
    return all(math.isfinite(v) for r in report.seeds for v in r.metrics.values())
