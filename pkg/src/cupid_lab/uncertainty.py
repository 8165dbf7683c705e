"""Inference-time uncertainty estimates from a trained plug-in module."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .cupid import CupidModule, perturbed_predict
from .data import fmt
from .nn import Mlp, SplitNetwork
from .rng import Rng


@dataclass
class UncertaintyRecord:
    input_id: int
    y_hat: np.ndarray
    y_hat_prime: np.ndarray
    u_alea: float
    u_epis: float
    y_true: np.ndarray | None = None
    error: float | None = None
    label: int | None = None  # positive-class flag (e.g. OOD) for detection metrics


def estimate(split: SplitNetwork, module: CupidModule, x, y=None, ids=None) -> list[UncertaintyRecord]:
    """One record per input.

    ``u_epis`` is the L1 distance between original and perturbed predictions
    (probabilities for classification).  ``u_alea`` sums the predicted
    variances over output coordinates.  ``error`` is the L1 error for
    regression and a 0/1 misclassification flag for classification.
    """
    pred = perturbed_predict(split, module, x)
    n = pred.y_hat.shape[0]
    ids = np.arange(n) if ids is None else np.asarray(ids)
    u_epis = np.abs(pred.y_hat - pred.y_hat_prime).sum(axis=1)
    u_alea = np.exp(pred.s).sum(axis=1)
    classification = split.network.spec.head == "softmax-classification"
    errors = targets = None
    if y is not None:
        if classification:
            targets = np.asarray(y, dtype=np.int64).reshape(n, 1)
            errors = (pred.y_hat.argmax(axis=1) != targets[:, 0]).astype(np.float64)
        else:
            targets = np.asarray(y, dtype=np.float64).reshape(n, -1)
            errors = np.abs(targets - pred.y_hat).sum(axis=1)
    return [
        UncertaintyRecord(
            int(ids[i]),
            pred.y_hat[i],
            pred.y_hat_prime[i],
            float(u_alea[i]),
            float(u_epis[i]),
            None if targets is None else targets[i],
            None if errors is None else float(errors[i]),
        )
        for i in range(n)
    ]


def column(records, name: str) -> np.ndarray:
    return np.array([getattr(r, name) for r in records], dtype=np.float64)


# --- Jacobian / Taylor check -------------------------------------------------


def suffix_jacobian(split: SplitNetwork, m: np.ndarray) -> np.ndarray:
    """``J[n, j, :]`` = d suffix_j / d m at row ``n``, one reverse pass per output."""
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    n, d = m.shape
    k = split.network.spec.widths[-1]
    jac = np.empty((n, k, d))
    for j in range(k):
        tape = ad.Tape()
        leaf = tape.leaf(m)
        out = split.suffix(leaf)
        select = np.zeros((n, k))
        select[:, j] = 1.0
        jac[:, j, :] = tape.backward(ad.total(out * select))[leaf.node]
    return jac


@dataclass
class TaylorCheck:
    exact: np.ndarray
    linear: np.ndarray
    rel_err: np.ndarray


def taylor_check(split: SplitNetwork, module: CupidModule, x, alpha: float) -> TaylorCheck:
    """Compare the suffix's output change under ``alpha * (m' - m)`` with its
    first-order prediction ``J (alpha * (m' - m))``, both in L1, per input.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    pred = perturbed_predict(split, module, x)
    step = alpha * (pred.m_prime - pred.m)
    base = split.suffix(pred.m).data
    moved = split.suffix(pred.m + step).data
    exact = np.abs(moved - base).sum(axis=1)
    jac = suffix_jacobian(split, pred.m)
    linear = np.abs(np.einsum("nkd,nd->nk", jac, step)).sum(axis=1)
    rel_err = np.abs(exact - linear) / np.maximum(linear, 1e-12)
    return TaylorCheck(exact, linear, rel_err)


# --- MC dropout baseline -----------------------------------------------------


def mc_dropout_estimate(network: Mlp, x, passes: int = 10, seed: int = 0) -> np.ndarray:
    """Per-input mean (over output coordinates) of the sample variance across
    ``passes`` stochastic forward passes with dropout on.
    """
    if passes < 2:
        raise ValueError("MC dropout needs at least 2 passes")
    if not network.has_dropout():
        raise ValueError("MC dropout needs a network with dropout layers")
    rng = Rng(seed).child("mc-dropout")
    draws = np.stack([network.predict(x, rng=rng) for _ in range(passes)])
    return draws.var(axis=0, ddof=1).mean(axis=1)


# --- CSV ---------------------------------------------------------------------


def records_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    k = records[0].y_hat.size if records else 0
    w.writerow(
        ["input_id", "u_alea", "u_epis", "error", "label"]
        + [f"y_hat_{j}" for j in range(k)]
        + [f"y_hat_prime_{j}" for j in range(k)]
    )
    for r in records:
        w.writerow(
            [r.input_id, fmt(r.u_alea), fmt(r.u_epis),
             "" if r.error is None else fmt(r.error),
             "" if r.label is None else int(r.label)]
            + [fmt(v) for v in r.y_hat]
            + [fmt(v) for v in r.y_hat_prime]
        )
    return buf.getvalue()


def read_records_csv(text: str) -> list[UncertaintyRecord]:
    rows = list(csv.DictReader(io.StringIO(text)))
    out = []
    for r in rows:
        k = sum(1 for key in r if key.startswith("y_hat_") and not key.startswith("y_hat_prime_"))
        out.append(
            UncertaintyRecord(
                int(r["input_id"]),
                np.array([float(r[f"y_hat_{j}"]) for j in range(k)]),
                np.array([float(r[f"y_hat_prime_{j}"]) for j in range(k)]),
                float(r["u_alea"]),
                float(r["u_epis"]),
                error=float(r["error"]) if r["error"] != "" else None,
                label=int(r["label"]) if r["label"] != "" else None,
            )
        )
    return out
