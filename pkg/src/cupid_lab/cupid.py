"""The plug-in module: shared trunk, reconstruction branch, uncertainty branch.

The reconstruction branch adds a residual to the host's pre-activation at the
insertion layer and re-applies the host activation, so the reconstructed
feature lives in the same range as the original one.  Its last layer starts
at (almost) zero, which makes a fresh module an identity map on features.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logit

from . import autodiff as ad
from .losses import LossWeights, alea_loss, epis_loss, total_loss
from .nn import (
    SplitNetwork,
    TrainHyper,
    TrainingDiverged,
    layer_params_from_json,
    layer_params_to_json,
    one_hot,
    xavier_uniform,
)
from .rng import Rng

BRANCHES = ("recon", "unc")
# Scale of the reconstruction head's initial weights relative to Xavier.
# Small enough that |m' - m| stays far below 1e-6, large enough that the
# L1 terms have a non-zero subgradient from the first step.
IDENTITY_INIT_SCALE = 1e-9


@dataclass
class CupidOutput:
    m_prime: ad.Tensor
    s: ad.Tensor


@dataclass
class CupidModule:
    d: int
    k: int
    trunk_depth: int
    layer: int
    activation: str
    params: dict
    branches: tuple = BRANCHES
    seed: int | None = None

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def branch_params(self, branch: str) -> dict:
        return {n: p for n, p in self.params.items() if n.startswith(branch)}

    def _pre_from_feature(self, m: np.ndarray) -> np.ndarray:
        if self.activation == "sigmoid":
            return logit(m)
        if self.activation == "leaky-relu":
            return np.where(m > 0, m, m / 0.01)
        # relu(m) == m for m >= 0, and "none" is the identity
        return m

    def forward(self, m, pre=None, params=None) -> CupidOutput:
        """Reconstructed feature and log-variance for a batch of features ``m``.

        ``pre`` is the host pre-activation matching ``m``; when omitted it is
        recovered by inverting the host activation.
        """
        p = self.params if params is None else params
        m = np.asarray(m.data if isinstance(m, ad.Tensor) else m, dtype=np.float64)
        if m.ndim == 1:
            m = m.reshape(1, -1)
        if m.ndim != 2 or m.shape[1] != self.d:
            raise ad.ShapeError(f"feature width {m.shape[-1]} does not match module width {self.d}")
        h = ad.Tensor(m)
        for i in range(1, self.trunk_depth + 1):
            h = ad.leaky_relu(ad.bias_add(h @ p[f"trunk{i}.weight"], p[f"trunk{i}.bias"]))

        if "recon" in self.branches:
            if pre is None:
                pre = self._pre_from_feature(m)
            r = ad.relu(ad.bias_add(h @ p["recon1.weight"], p["recon1.bias"]))
            r = ad.bias_add(r @ p["recon2.weight"], p["recon2.bias"])
            # residual lives in pre-activation space so m' keeps the layer's range
            m_prime = ad.ACTIVATIONS[self.activation](r + np.asarray(pre, dtype=np.float64))
        else:
            m_prime = ad.Tensor(m)

        if "unc" in self.branches:
            u = ad.relu(ad.bias_add(h @ p["unc1.weight"], p["unc1.bias"]))
            s = ad.bias_add(u @ p["unc2.weight"], p["unc2.bias"])
        else:
            s = ad.Tensor(np.zeros((m.shape[0], self.k)))
        return CupidOutput(m_prime, s)


def build_cupid(
    d: int,
    k: int,
    trunk_depth: int,
    seed: int,
    layer: int = 1,
    activation: str = "sigmoid",
    branches=BRANCHES,
) -> CupidModule:
    if d < 1 or k < 1 or trunk_depth < 1:
        raise ValueError(f"need d, k, trunk_depth >= 1, got {d}, {k}, {trunk_depth}")
    branches = tuple(b for b in BRANCHES if b in branches)
    rng = Rng(seed).child("cupid-init")
    params = {}
    for i in range(1, trunk_depth + 1):
        params[f"trunk{i}.weight"] = xavier_uniform(rng, d, d)
        params[f"trunk{i}.bias"] = np.zeros(d)
    if "recon" in branches:
        params["recon1.weight"] = xavier_uniform(rng, d, d)
        params["recon1.bias"] = np.zeros(d)
        params["recon2.weight"] = IDENTITY_INIT_SCALE * xavier_uniform(rng, d, d)
        params["recon2.bias"] = np.zeros(d)
    if "unc" in branches:
        params["unc1.weight"] = xavier_uniform(rng, d, d)
        params["unc1.bias"] = np.zeros(d)
        params["unc2.weight"] = np.zeros((d, k))
        params["unc2.bias"] = np.zeros(k)
    return CupidModule(d, k, trunk_depth, layer, activation, params, branches, seed)


def build_for(split: SplitNetwork, trunk_depth: int, seed: int, branches=BRANCHES) -> CupidModule:
    spec = split.network.spec
    return build_cupid(
        split.width,
        spec.widths[-1],
        trunk_depth,
        seed,
        layer=split.layer,
        activation=spec.activations[split.layer - 1],
        branches=branches,
    )


@dataclass
class PerturbedPrediction:
    y_hat: np.ndarray
    y_hat_prime: np.ndarray
    s: np.ndarray
    m: np.ndarray
    m_prime: np.ndarray


def _check_layers(split: SplitNetwork, module: CupidModule):
    if module.layer != split.layer:
        raise ValueError(
            f"module was built for layer {module.layer}, network is split at {split.layer}"
        )


def perturbed_predict(split: SplitNetwork, module: CupidModule, x) -> PerturbedPrediction:
    """Original and perturbed predictions, both in head space, dropout off."""
    _check_layers(split, module)
    m, pre = split.prefix(x)
    out = module.forward(m, pre)
    y_hat = split.suffix(m).data
    y_hat_prime = split.suffix(out.m_prime).data
    return PerturbedPrediction(y_hat, y_hat_prime, out.s.data, m, out.m_prime.data)


@dataclass
class CupidTrainResult:
    module: CupidModule
    losses: list = field(default_factory=list)


def cupid_batch_loss(
    split, module, params, m, pre, y_hat, y, weights: LossWeights, no_max=False, active=None
):
    """Training objective on one batch.

    ``active`` names the branches whose loss terms apply (default: all of the
    module's branches).  With both active this is the joint total loss; a lone
    uncertainty branch keeps its ``lambda2`` weight.
    """
    active = module.branches if active is None else active
    out = module.forward(m, pre, params)
    y_prime = split.suffix(out.m_prime)
    epis = alea = None
    if "recon" in active:
        epis = epis_loss(y_hat, y_prime, m, out.m_prime, weights.lambda1, no_max)
    if "unc" in active:
        alea = alea_loss(y, y_prime, out.s)
    if epis is not None and alea is not None:
        return total_loss(epis, alea, weights.lambda2)
    if alea is not None:
        return weights.lambda2 * alea
    if epis is None:
        raise ValueError("no active branch to train")
    return epis


def targets_for(split: SplitNetwork, y) -> np.ndarray:
    spec = split.network.spec
    k = spec.widths[-1]
    if spec.head == "softmax-classification":
        return one_hot(y, k)
    return np.asarray(y, dtype=np.float64).reshape(-1, k)


def train_cupid(
    split: SplitNetwork,
    module: CupidModule,
    x,
    y,
    hyper: TrainHyper,
    weights: LossWeights,
    seed: int,
    no_max: bool = False,
    train_only=None,
) -> CupidTrainResult:
    """Fit the module's parameters with Adam; the host network is only read.

    ``train_only`` restricts training to one branch (plus the shared trunk):
    only that branch's loss term is used and the other branch's parameters
    are returned bit-identical.
    """
    _check_layers(split, module)
    active = module.branches if train_only is None else (train_only,)
    unknown = set(active) - set(module.branches)
    if unknown:
        raise ValueError(f"module has no branch {sorted(unknown)}")
    frozen = {n for b in module.branches if b not in active for n in module.branch_params(b)}
    m_all, pre_all = split.prefix(x)
    y_hat_all = split.suffix(m_all).data
    y_all = targets_for(split, y)
    n = m_all.shape[0]
    if n == 0:
        raise ValueError("empty training set")
    rng = Rng(seed).child("train-cupid")
    params = {name: p.copy() for name, p in module.params.items() if name not in frozen}
    fixed = {name: module.params[name].copy() for name in frozen}
    state = ad.AdamState()
    losses = []
    for epoch in range(hyper.epochs):
        order = rng.permutation(n)
        running = 0.0
        for start in range(0, n, hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            tape = ad.Tape()
            leaves = tape.leaves(params)
            try:
                loss = cupid_batch_loss(
                    split, module, {**leaves, **fixed}, m_all[idx], pre_all[idx],
                    y_hat_all[idx], y_all[idx], weights, no_max, active,
                )
            except ad.NonFiniteError as exc:
                raise TrainingDiverged(f"epoch {epoch}, batch at {start}: {exc}") from exc
            grads = tape.grad(loss, leaves)
            params = ad.adam_step(params, grads, state, hyper.lr)
            running += loss.item() * idx.size
        mean_loss = running / n
        if not math.isfinite(mean_loss):
            raise TrainingDiverged(f"epoch {epoch}: mean loss {mean_loss}")
        losses.append(mean_loss)
    trained = CupidModule(
        module.d, module.k, module.trunk_depth, module.layer, module.activation,
        {name: params[name] if name in params else fixed[name] for name in module.params},
        module.branches, module.seed,
    )
    return CupidTrainResult(trained, losses)


def to_checkpoint(module: CupidModule) -> dict:
    return {
        "d": module.d,
        "k": module.k,
        "trunk_depth": module.trunk_depth,
        "layer": module.layer,
        "activation": module.activation,
        "branches": list(module.branches),
        "seed": module.seed,
        "omega": layer_params_to_json(module.params),
    }


def from_checkpoint(doc: dict) -> CupidModule:
    return CupidModule(
        doc["d"], doc["k"], doc["trunk_depth"], doc["layer"], doc["activation"],
        layer_params_from_json(doc["omega"]), tuple(doc["branches"]), doc.get("seed"),
    )


def save_checkpoint(module: CupidModule, path) -> None:
    Path(path).write_text(json.dumps(to_checkpoint(module), indent=1) + "\n")


def load_checkpoint(path) -> CupidModule:
    return from_checkpoint(json.loads(Path(path).read_text()))
