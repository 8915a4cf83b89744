"""Maximum-likelihood box inference from In-Out and Border probability maps.

Every model factorizes over the x and y axes, and for each axis the
log-likelihood of an interval ``[l, r]`` can be written (up to a constant)
as ``u[l] + v[r]``:

* In-Out:   ``u[l] = -P[l-1]``, ``v[r] = P[r]`` where ``P`` is the running sum
  of ``log p - log(1 - p)``.
* Borders:  ``u[l] = log p_l(l)``, ``v[r] = log p_r(r)``.
* Combined: the sum of the two.

Every per-cell log term is snapped to a multiple of ``2**-32`` before use.
Sums of such terms are exact in float64 (for M up to tens of thousands), so
summation order cannot matter and boxes that tie in exact arithmetic tie
bit for bit. The snapping moves a log-likelihood by less than ``1e-8``.

Both :func:`infer` (O(M) per axis) and :func:`infer_bruteforce` (all
M(M+1)/2 intervals) maximize the same values ``u[l] + v[r]``, so they agree
exactly, ties included. Ties go to the smallest ``l``, then the smallest ``r``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import GridBox
from .targets import KINDS, TargetVectors, check_kind

EPS = 1e-6

_HEADS = {
    "inout": ("px", "py"),
    "borders": ("pl", "pr", "pt", "pb"),
    "combined": ("px", "py", "pl", "pr", "pt", "pb"),
}


def heads_for(kind: str) -> tuple[str, ...]:
    return _HEADS[check_kind(kind)]


@dataclass(frozen=True)
class ProbMaps:
    """Per-row / per-column probabilities; entries are clamped to ``[EPS, 1 - EPS]``."""

    kind: str
    M: int
    maps: dict[str, np.ndarray] = field(repr=False)

    def __post_init__(self) -> None:
        check_kind(self.kind)
        clean = {}
        for name in heads_for(self.kind):
            if name not in self.maps:
                raise ValueError(f"{self.kind} maps need {name!r}")
            v = np.asarray(self.maps[name], dtype=np.float64).reshape(-1)
            if v.shape != (self.M,):
                raise ValueError(f"{name} has length {v.size}, expected {self.M}")
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{name} contains non-finite values")
            clean[name] = np.clip(v, EPS, 1.0 - EPS)
        object.__setattr__(self, "maps", clean)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.maps[name]

    @classmethod
    def from_targets(cls, target: TargetVectors) -> "ProbMaps":
        return cls(target.kind, target.M, dict(target.vectors))

    @classmethod
    def uniform(cls, kind: str, M: int, value: float = 0.5) -> "ProbMaps":
        return cls(kind, M, {h: np.full(M, value) for h in heads_for(kind)})

    def to_dict(self) -> dict:
        return {"kind": self.kind, "M": self.M, **{k: v.tolist() for k, v in self.maps.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "ProbMaps":
        kind = d["kind"]
        M = int(d.get("M", len(d[heads_for(kind)[0]])))
        return cls(kind, M, {h: np.asarray(d[h], dtype=np.float64) for h in heads_for(kind)})

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


QUANTUM = 2.0**-32


def snap_log(x):
    """``log(x)`` rounded to the nearest multiple of :data:`QUANTUM`."""
    return np.round(np.log(x) / QUANTUM) * QUANTUM


def _log(x: float) -> float:
    return float(snap_log(x))


def loglik_inout(p: ProbMaps, g: GridBox) -> float:
    """Log of the In-Out likelihood, summed left to right over x then y."""
    g.validate(p.M)
    total = 0.0
    for name, lo, hi in (("px", g.l, g.r), ("py", g.t, g.b)):
        vec = p[name]
        for i in range(1, p.M + 1):
            q = vec[i - 1]
            total += _log(q) if lo <= i <= hi else float(np.round(np.log1p(-q) / QUANTUM) * QUANTUM)
    return total


def loglik_borders(p: ProbMaps, g: GridBox) -> float:
    g.validate(p.M)
    return (
        _log(p["pl"][g.l - 1])
        + _log(p["pt"][g.t - 1])
        + _log(p["pr"][g.r - 1])
        + _log(p["pb"][g.b - 1])
    )


def loglik_combined(p: ProbMaps, g: GridBox) -> float:
    return loglik_borders(p, g) + loglik_inout(p, g)


def loglik(p: ProbMaps, g: GridBox) -> float:
    if p.kind == "inout":
        return loglik_inout(p, g)
    if p.kind == "borders":
        return loglik_borders(p, g)
    return loglik_combined(p, g)


def _snap_log1m(p: np.ndarray) -> np.ndarray:
    return np.round(np.log1p(-p) / QUANTUM) * QUANTUM


def _running_logit_sum(p: np.ndarray) -> np.ndarray:
    """``P[k] = sum_{i<k} (log p_i - log(1 - p_i))`` on the snapped grid, length M + 1 (exact)."""
    return np.concatenate([[0.0], np.cumsum(snap_log(p) - _snap_log1m(p))])


def axis_terms(p: ProbMaps, axis: str) -> tuple[np.ndarray, np.ndarray]:
    """Per-axis separable scores ``(u, v)``; the interval ``[l, r]`` scores ``u[l] + v[r]``."""
    inout_name, lo_name, hi_name = ("px", "pl", "pr") if axis == "x" else ("py", "pt", "pb")
    M = p.M
    u = np.zeros(M)
    v = np.zeros(M)
    if p.kind in ("inout", "combined"):
        P = _running_logit_sum(p[inout_name])
        u = -P[:-1]
        v = P[1:].copy()
    if p.kind in ("borders", "combined"):
        u = u + snap_log(p[lo_name])
        v = v + snap_log(p[hi_name])
    return u, v


def best_interval(u: np.ndarray, v: np.ndarray) -> tuple[int, int]:
    """Lexicographically first ``(l, r)``, 0-based, maximizing ``u[l] + v[r]`` with ``l <= r``.

    Rounded addition is monotone in each argument, so the best value equals
    ``max_r (prefix_max(u)[r] + v[r])`` exactly, and the smallest maximizing
    ``l`` is the first one whose ``u[l] + suffix_max(v)[l]`` attains it.
    """
    best = np.max(np.maximum.accumulate(u) + v)
    suffix_v = np.maximum.accumulate(v[::-1])[::-1]
    l = int(np.argmax(u + suffix_v == best))
    r = l + int(np.argmax(u[l] + v[l:] == best))
    return l, r


def best_interval_bruteforce(u: np.ndarray, v: np.ndarray) -> tuple[int, int]:
    uu, vv = u.tolist(), v.tolist()
    M = len(uu)
    best, arg = -math.inf, (0, 0)
    for l in range(M):
        ul = uu[l]
        for r in range(l, M):
            val = ul + vv[r]
            if val > best:
                best, arg = val, (l, r)
    return arg


def infer(p: ProbMaps) -> GridBox:
    l, r = best_interval(*axis_terms(p, "x"))
    t, b = best_interval(*axis_terms(p, "y"))
    return GridBox(l + 1, t + 1, r + 1, b + 1)


def infer_bruteforce(p: ProbMaps) -> GridBox:
    """Exhaustive reference for :func:`infer`."""
    l, r = best_interval_bruteforce(*axis_terms(p, "x"))
    t, b = best_interval_bruteforce(*axis_terms(p, "y"))
    return GridBox(l + 1, t + 1, r + 1, b + 1)


__all__ = [
    "EPS",
    "KINDS",
    "ProbMaps",
    "axis_terms",
    "best_interval",
    "best_interval_bruteforce",
    "heads_for",
    "infer",
    "infer_bruteforce",
    "loglik",
    "loglik_borders",
    "loglik_combined",
    "loglik_inout",
]
