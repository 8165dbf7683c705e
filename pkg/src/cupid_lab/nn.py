"""Dense MLPs that can be cut at any layer into a prefix and a suffix."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .rng import Rng

HEADS = ("regression", "softmax-classification")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    """Layer ``i`` (1-based) maps ``widths[i-1] -> widths[i]``, then applies
    ``activations[i-1]`` and dropout at ``dropout[i-1]``.

    An empty ``dropout`` means the network has no dropout layers at all.
    ``input_offset``/``input_scale`` are a fixed standardisation applied to
    the raw input before layer 1.
    """

    widths: tuple
    activations: tuple
    dropout: tuple = ()
    head: str = "regression"
    input_offset: tuple = ()
    input_scale: tuple = ()

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        n = len(widths) - 1
        object.__setattr__(self, "widths", widths)
        object.__setattr__(self, "activations", tuple(self.activations))
        object.__setattr__(self, "dropout", tuple(float(p) for p in self.dropout))
        object.__setattr__(self, "input_offset", tuple(float(v) for v in self.input_offset))
        object.__setattr__(self, "input_scale", tuple(float(v) for v in self.input_scale))
        if n < 2:
            raise ValueError(f"an MLP needs at least 2 layers, got widths {list(widths)}")
        if any(w < 1 for w in widths):
            raise ValueError(f"layer widths must be positive, got {list(widths)}")
        if len(self.activations) != n:
            raise ValueError("activations need one entry per layer")
        if self.dropout and len(self.dropout) != n:
            raise ValueError("dropout needs one entry per layer (or none at all)")
        unknown = set(self.activations) - set(ad.ACTIVATIONS)
        if unknown:
            raise ValueError(f"unknown activations {sorted(unknown)}")
        if self.activations[-1] != "none":
            raise ValueError("the final layer must be linear (activation 'none')")
        if any(not 0.0 <= p < 1.0 for p in self.dropout):
            raise ValueError(f"dropout rates must lie in [0, 1), got {list(self.dropout)}")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")
        for name in ("input_offset", "input_scale"):
            vals = getattr(self, name)
            if vals and len(vals) != widths[0]:
                raise ValueError(f"{name} needs {widths[0]} entries")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def xavier_uniform(rng: Rng, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform((fan_in, fan_out), -limit, limit)


@dataclass
class Mlp:
    spec: MlpSpec
    params: dict
    seed: int | None = None

    @classmethod
    def build(cls, spec: MlpSpec, seed: int) -> "Mlp":
        rng = Rng(seed).child("mlp-init")
        params = {}
        for i in range(1, spec.n_layers + 1):
            fan_in, fan_out = spec.widths[i - 1], spec.widths[i]
            params[f"layer{i}.weight"] = xavier_uniform(rng, fan_in, fan_out)
            params[f"layer{i}.bias"] = np.zeros(fan_out)
        return cls(spec, params, seed)

    @property
    def n_layers(self) -> int:
        return self.spec.n_layers

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def has_dropout(self) -> bool:
        """True when the spec declares dropout layers, even at rate 0."""
        return len(self.spec.dropout) > 0

    def normalize(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(-1, self.spec.widths[0])
        if self.spec.input_offset:
            x = x - np.asarray(self.spec.input_offset)
        if self.spec.input_scale:
            x = x / np.asarray(self.spec.input_scale)
        return x

    def run_layers(self, h, start: int, stop: int, params=None, rng: Rng | None = None):
        """Apply layers ``start+1 .. stop``; returns ``(output, pre_activation)``.

        Dropout is active only when ``rng`` is given.
        """
        p = self.params if params is None else params
        h = ad.as_tensor(h)
        pre = None
        for i in range(start + 1, stop + 1):
            pre = ad.bias_add(h @ p[f"layer{i}.weight"], p[f"layer{i}.bias"])
            h = ad.ACTIVATIONS[self.spec.activations[i - 1]](pre)
            rate = self.spec.dropout[i - 1] if self.spec.dropout else 0.0
            if rng is not None and rate > 0:
                keep = rng.uniform(h.shape) >= rate
                h = h * (keep / (1.0 - rate))
        return h, pre

    def head(self, out):
        if self.spec.head == "softmax-classification":
            return ad.softmax(out)
        return out

    def forward(self, x, params=None, rng: Rng | None = None):
        """Raw output (logits for classification) as a Tensor."""
        out, _ = self.run_layers(self.normalize(x), 0, self.n_layers, params, rng)
        return out

    def predict(self, x, rng: Rng | None = None) -> np.ndarray:
        """Head output: probabilities for classification, values for regression."""
        return self.head(self.forward(x, rng=rng)).data

    def split_at(self, layer: int) -> "SplitNetwork":
        return SplitNetwork(self, layer)

    def parameter_digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name]).tobytes())
        return h.hexdigest()


@dataclass
class SplitNetwork:
    """``network`` factored as ``suffix(prefix(x))`` at insertion layer ``layer``.

    The prefix covers layers ``1..layer`` and exposes the post-activation
    feature of width ``d``; the suffix covers the rest plus the head.
    """

    network: Mlp
    layer: int

    def __post_init__(self):
        if not 1 <= self.layer < self.network.n_layers:
            raise ValueError(
                f"insertion layer must be in [1, {self.network.n_layers - 1}], got {self.layer}"
            )

    @property
    def width(self) -> int:
        return self.network.spec.widths[self.layer]

    @property
    def prefix_layers(self) -> tuple:
        return tuple(range(1, self.layer + 1))

    @property
    def suffix_layers(self) -> tuple:
        return tuple(range(self.layer + 1, self.network.n_layers + 1))

    def prefix(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Feature ``m`` and its pre-activation at the insertion layer."""
        m, pre = self.network.run_layers(self.network.normalize(x), 0, self.layer)
        return m.data, pre.data

    def suffix_raw(self, m, params=None):
        out, _ = self.network.run_layers(m, self.layer, self.network.n_layers, params)
        return out

    def suffix(self, m, params=None):
        """Head output of the suffix; differentiable with respect to ``m``."""
        return self.network.head(self.suffix_raw(m, params))


@dataclass(frozen=True)
class TrainHyper:
    epochs: int = 50
    batch_size: int = 16
    lr: float = 1e-3

    @classmethod
    def from_dict(cls, d: dict) -> "TrainHyper":
        return cls(**d)


@dataclass
class TrainResult:
    network: Mlp
    losses: list = field(default_factory=list)


def one_hot(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, k))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _base_loss(net: Mlp, out, y):
    n = y.shape[0]
    if net.spec.head == "softmax-classification":
        return -ad.total(ad.log_softmax(out) * y) / n
    diff = out - y
    return ad.mean(diff * diff)


def train_base(net: Mlp, x, y, hyper: TrainHyper, seed: int) -> TrainResult:
    """Minibatch Adam on MSE (regression) or cross-entropy (classification).

    ``y`` holds targets of shape ``[n, k]`` for regression and integer class
    labels for classification.  Returns a new network; ``net`` is untouched.
    """
    x = net.normalize(x)
    k = net.spec.widths[-1]
    if net.spec.head == "softmax-classification":
        y = one_hot(y, k)
    else:
        y = np.asarray(y, dtype=np.float64).reshape(-1, k)
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty training set")
    rng = Rng(seed).child("train-base")
    params = {name: p.copy() for name, p in net.params.items()}
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
                out, _ = net.run_layers(x[idx], 0, net.n_layers, leaves, rng)
                loss = _base_loss(net, out, y[idx])
            except ad.NonFiniteError as exc:
                raise TrainingDiverged(f"epoch {epoch}, batch at {start}: {exc}") from exc
            grads = tape.grad(loss, leaves)
            params = ad.adam_step(params, grads, state, hyper.lr)
            running += loss.item() * idx.size
        mean_loss = running / n
        if not math.isfinite(mean_loss):
            raise TrainingDiverged(f"epoch {epoch}: mean loss {mean_loss}")
        losses.append(mean_loss)
    return TrainResult(Mlp(net.spec, params, net.seed), losses)


# --- checkpoints ------------------------------------------------------------


def layer_params_to_json(params: dict) -> dict:
    layers: dict = {}
    for name, arr in params.items():
        layer, kind = name.rsplit(".", 1)
        key = "weights" if kind == "weight" else kind
        layers.setdefault(layer, {})[key] = [float(v) for v in arr.ravel()]
        layers[layer][key + "_shape"] = list(arr.shape)
    return layers


def layer_params_from_json(layers: dict) -> dict:
    params = {}
    for layer, entry in layers.items():
        for key, kind in (("weights", "weight"), ("bias", "bias")):
            if key in entry:
                shape = tuple(entry[key + "_shape"])
                params[f"{layer}.{kind}"] = np.array(entry[key], dtype=np.float64).reshape(shape)
    return params


def to_checkpoint(net: Mlp) -> dict:
    return {
        "spec": net.spec.to_dict(),
        "seed": net.seed,
        "layers": layer_params_to_json(net.params),
    }


def from_checkpoint(doc: dict) -> Mlp:
    return Mlp(MlpSpec.from_dict(doc["spec"]), layer_params_from_json(doc["layers"]), doc.get("seed"))


def save_checkpoint(net: Mlp, path) -> None:
    # json writes floats with repr(), the shortest string that round-trips exactly
    Path(path).write_text(json.dumps(to_checkpoint(net), indent=1) + "\n")


def load_checkpoint(path) -> Mlp:
    return from_checkpoint(json.loads(Path(path).read_text()))
