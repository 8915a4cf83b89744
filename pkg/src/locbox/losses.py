"""In-Out and Borders logistic losses with gradients w.r.t. pre-sigmoid logits.

Losses are negative log-likelihoods summed over rows and columns of one
sample. ``grad_logits`` holds ``dloss/dz`` for ``p = sigmoid(z)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .inference import EPS, ProbMaps
from .targets import TargetVectors


@dataclass
class LossReport:
    value: float
    grad_logits: dict[str, np.ndarray] = field(default_factory=dict)

    def __add__(self, other: "LossReport") -> "LossReport":
        grads = dict(self.grad_logits)
        for k, g in other.grad_logits.items():
            grads[k] = grads[k] + g if k in grads else g
        return LossReport(self.value + other.value, grads)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def lambda_weights(M: int) -> tuple[float, float]:
    """Border / non-border weights ``(lambda_plus, lambda_minus)``."""
    if M < 2:
        raise ValueError(f"lambda weights need M >= 2, got {M}")
    # lambda_minus = 0.5 M / (M - 1) and lambda_plus = (M - 1) lambda_minus = M / 2;
    # evaluated in this order so lambda_plus is exact for every M.
    lam_plus = 0.5 * M
    lam_minus = lam_plus / (M - 1)
    return lam_plus, lam_minus


def weighted_logistic(q: np.ndarray, t: np.ndarray, w_pos: float, w_neg: float):
    """Elementwise weighted logistic loss and its gradient w.r.t. the logit.

    Works on any broadcastable shapes. Only the logarithms see ``q`` clamped to
    ``[EPS, 1 - EPS]``; the gradient uses ``q`` as given, so it vanishes at a
    saturated fit instead of stalling at ``EPS``.
    """
    qc = np.clip(q, EPS, 1.0 - EPS)
    value = -(w_pos * t * np.log(qc) + w_neg * (1.0 - t) * np.log1p(-qc))
    grad = -w_pos * t * (1.0 - q) + w_neg * (1.0 - t) * q
    return value, grad


def _probs(p, name: str) -> np.ndarray:
    v = p[name] if isinstance(p, ProbMaps) else np.asarray(p[name], dtype=np.float64)
    return np.clip(v, 0.0, 1.0)


def _check(p, T: TargetVectors, names: Sequence[str]) -> None:
    for n in names:
        if n not in T.vectors:
            raise ValueError(f"target has no {n!r} vector")
        if np.shape(p[n]) != T[n].shape:
            raise ValueError(f"dimension mismatch for {n}: {np.shape(p[n])} vs {T[n].shape}")


def inout_loss(p, T: TargetVectors) -> LossReport:
    """Binary cross-entropy over ``p_x`` and ``p_y``.

    ``p`` may be a :class:`ProbMaps` or any mapping of head name to vector.
    """
    _check(p, T, ("px", "py"))
    value = 0.0
    grads = {}
    for name in ("px", "py"):
        val, grads[name] = weighted_logistic(_probs(p, name), T[name], 1.0, 1.0)
        value += float(np.sum(val))
    return LossReport(value, grads)


def borders_loss(p, T: TargetVectors) -> LossReport:
    _check(p, T, ("pl", "pr", "pt", "pb"))
    lam_plus, lam_minus = lambda_weights(T.M)
    value = 0.0
    grads = {}
    for name in ("pl", "pr", "pt", "pb"):
        val, grads[name] = weighted_logistic(_probs(p, name), T[name], lam_plus, lam_minus)
        value += float(np.sum(val))
    return LossReport(value, grads)


def sample_loss(p, T: TargetVectors) -> LossReport:
    """Per-sample loss for the target's kind; Combined adds both terms with unit weight."""
    if T.kind == "inout":
        return inout_loss(p, T)
    if T.kind == "borders":
        return borders_loss(p, T)
    return inout_loss(p, T) + borders_loss(p, T)


def total_loss(samples: Sequence, model: Callable[[object], object]) -> float:
    """Mean per-sample loss.

    Args:
        samples: items exposing a ``target`` attribute (:class:`TargetVectors`).
        model: maps a sample to its predicted probabilities.
    """
    if len(samples) == 0:
        raise ValueError("total_loss of an empty sample set")
    return sum(sample_loss(model(s), s.target).value for s in samples) / len(samples)
