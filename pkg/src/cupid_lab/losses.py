"""Training objectives for the plug-in module.

All losses reduce over the batch with an arithmetic mean and sum over the
output coordinates within a sample.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import autodiff as ad


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1e-3
    lambda2: float = 1e-2

    def __post_init__(self):
        if not (self.lambda1 > 0 and self.lambda2 > 0):
            raise ValueError(f"loss weights must be positive, got {self}")


def _same_shape(name, *tensors):
    shapes = [ad.as_tensor(t).shape for t in tensors]
    if len(set(shapes)) != 1:
        raise ad.ShapeError(f"{name}: shapes differ: {' vs '.join(str(list(s)) for s in shapes)}")
    return shapes[0]


def alea_loss(y, y_prime, s):
    """Heteroscedastic Gaussian NLL with log-variance ``s`` (constants dropped).

    mean_n sum_j [ 0.5 * exp(-s_nj) * (y_nj - y'_nj)**2 + 0.5 * s_nj ]

    For classification pass one-hot ``y`` and softmax ``y_prime``.
    """
    shape = _same_shape("alea_loss", y, y_prime, s)
    n = shape[0] if shape else 1
    diff = ad.as_tensor(y) - y_prime
    per_entry = 0.5 * ad.exp(-ad.as_tensor(s)) * (diff * diff) + 0.5 * ad.as_tensor(s)
    return ad.total(per_entry) / n


def epis_loss(y_hat, y_hat_prime, m, m_prime, lambda1: float, no_max: bool = False):
    """Prediction-consistency minus scaled feature deviation, both L1.

    mean_n [ |y_hat - y_hat'|_1 - lambda1 * |m' - m|_1 ]

    ``no_max`` drops the deviation reward.
    """
    shape = _same_shape("epis_loss", y_hat, y_hat_prime)
    m_shape = _same_shape("epis_loss", m, m_prime)
    if shape[:1] != m_shape[:1]:
        raise ad.ShapeError(f"epis_loss: batch sizes differ: {shape[0]} vs {m_shape[0]}")
    n = shape[0] if shape else 1
    consistency = ad.l1(ad.as_tensor(y_hat) - y_hat_prime) / n
    if no_max:
        return consistency
    deviation = ad.l1(ad.as_tensor(m_prime) - m) / n
    return consistency - lambda1 * deviation


def total_loss(epis, alea, lambda2: float):
    return ad.as_tensor(epis) + lambda2 * ad.as_tensor(alea)
