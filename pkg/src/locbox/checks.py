"""Self-checks (fast inference vs brute force, analytic vs numeric gradients) and timing benchmarks."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .geometry import Box, GridBox
from .inference import (
    KINDS,
    ProbMaps,
    axis_terms,
    best_interval,
    best_interval_bruteforce,
    heads_for,
    infer,
    infer_bruteforce,
)
from .losses import borders_loss, inout_loss, sigmoid
from .pipeline import Detection, PipelineConfig, nms, oracle_localizer, run_pipeline_many
from .predictor import N_CHANNELS, ToyModel, backward, sample_objective
from .regression import RegTargets, reg_loss
from .rng import SplitMix64, derive_seed
from .synthetic import NoiseSpec, OracleScorer, generate_scene, jittered_proposals
from .targets import TargetVectors

log = logging.getLogger(__name__)

MAP_STYLES = ("uniform", "quantized", "peaked")


# ---------------------------------------------------------------- random inputs


def random_gridbox(rng: SplitMix64, M: int) -> GridBox:
    l, r = sorted((rng.integers(1, M + 1), rng.integers(1, M + 1)))
    t, b = sorted((rng.integers(1, M + 1), rng.integers(1, M + 1)))
    return GridBox(l, t, r, b)


def random_probmaps(rng: SplitMix64, kind: str, M: int, style: str = "uniform") -> ProbMaps:
    """Random maps of one of three styles.

    ``quantized`` draws from three levels so exact score ties are common;
    ``peaked`` is a noisy version of a true target, the typical model output.
    """
    heads = heads_for(kind)
    if style == "uniform":
        maps = {h: rng.random_array(M) for h in heads}
    elif style == "quantized":
        levels = np.array([0.2, 0.5, 0.8])
        maps = {h: levels[(rng.random_array(M) * 3).astype(int)] for h in heads}
    elif style == "peaked":
        target = TargetVectors.build(random_gridbox(rng, M), M, kind)
        logit = lambda t: np.where(t > 0.5, 2.0, -2.0)
        maps = {h: sigmoid(logit(target[h]) + 1.5 * rng.normal_array(M)) for h in heads}
    else:
        raise ValueError(f"unknown map style {style!r}")
    return ProbMaps(kind, M, maps)


def _last_best_interval(u: np.ndarray, v: np.ndarray) -> tuple[int, int]:
    # Deliberately wrong tie-break (last maximizer); used to prove the checker can fail.
    best = np.max(np.maximum.accumulate(u) + v)
    suffix_v = np.maximum.accumulate(v[::-1])[::-1]
    l = int(np.flatnonzero(u + suffix_v == best)[-1])
    r = l + int(np.flatnonzero(u[l] + v[l:] == best)[-1])
    return l, r


def infer_last_tie(p: ProbMaps) -> GridBox:
    l, r = _last_best_interval(*axis_terms(p, "x"))
    t, b = _last_best_interval(*axis_terms(p, "y"))
    return GridBox(l + 1, t + 1, r + 1, b + 1)


# ---------------------------------------------------------------- equivalence


@dataclass
class CheckResult:
    name: str
    passed: bool
    count: int
    detail: dict = field(default_factory=dict)
    warning: str = ""

    def to_dict(self) -> dict:
        d = {"name": self.name, "passed": self.passed, "count": self.count, **self.detail}
        if self.warning:
            d["warning"] = self.warning
        return d


def check_equivalence(n: int, M: int, kind: str, seed: int = 0, fast: Callable[[ProbMaps], GridBox] = infer,
                      styles=MAP_STYLES) -> CheckResult:
    """Compare ``fast`` with brute force on ``n`` random maps cycling through ``styles``."""
    name = f"equivalence/{kind}/M={M}"
    if n == 0:
        return CheckResult(name, True, 0, warning="no samples requested; vacuous pass")
    rng = SplitMix64(derive_seed(seed, "equivalence", kind, M))
    mismatches = []
    for k in range(n):
        p = random_probmaps(rng, kind, M, styles[k % len(styles)])
        a, b = fast(p), infer_bruteforce(p)
        if a != b:
            mismatches.append(k)
    return CheckResult(name, not mismatches, n, {"mismatches": len(mismatches),
                                                 "first_mismatch": mismatches[0] if mismatches else None})


# ---------------------------------------------------------------- gradients


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    a, b = np.ravel(a), np.ravel(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5,
                 coords: np.ndarray | None = None) -> np.ndarray:
    """Central differences; with ``coords`` only those flat indices are filled (others stay 0)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size) if coords is None else coords:
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def _loss_gradient_error(rng: SplitMix64, kind: str, M: int) -> float:
    heads = heads_for(kind)
    target = TargetVectors.build(random_gridbox(rng, M), M, kind)
    z = np.array([[rng.uniform(-4.0, 4.0) for _ in range(M)] for _ in heads])
    fn = inout_loss if kind == "inout" else borders_loss

    def f(zz):
        return fn({h: sigmoid(zz[i]) for i, h in enumerate(heads)}, target).value

    rep = fn({h: sigmoid(z[i]) for i, h in enumerate(heads)}, target)
    analytic = np.stack([rep.grad_logits[h] for h in heads])
    return rel_error(analytic, numeric_grad(f, z))


def _reg_gradient_error(rng: SplitMix64) -> float:
    pred = np.array([rng.normal() for _ in range(4)])
    target = RegTargets.from_seq([rng.normal() for _ in range(4)])
    _, g = reg_loss(RegTargets.from_seq(pred), target)
    return rel_error(g, numeric_grad(lambda x: reg_loss(RegTargets.from_seq(x), target)[0], pred))


def _subset(rng: SplitMix64, size: int, k: int) -> np.ndarray:
    return np.arange(size) if size <= k else np.array(rng.sample_indices(size, k))


def _model_gradient_error(rng: SplitMix64, kind: str, G: int = 4, M: int = 8, coords: int = 24) -> float:
    """End-to-end check on a small random model: head parameters and the input map.

    Each tensor is compared on ``coords`` random coordinates.
    """
    n_cat = 2
    m = ToyModel(kind, n_cat, G, N_CHANNELS, M)
    for h in m.head_names:
        m.weights[h] = 0.3 * rng.normal_array(m.weights[h].size).reshape(m.weights[h].shape)
        m.biases[h] = 0.3 * rng.normal_array(m.biases[h].size).reshape(m.biases[h].shape)
    # Continuous inputs make max-pool ties a probability-zero event.
    A = rng.normal_array(G * G * N_CHANNELS).reshape(G, G, N_CHANNELS)
    c = rng.integers(0, n_cat)
    if kind == "regression":
        target = RegTargets.from_seq(rng.normal_array(4))
    else:
        target = TargetVectors.build(random_gridbox(rng, M), M, kind)
    _, grads, dA = backward(m, A, c, target, input_grad=True)
    idx = _subset(rng, A.size, coords)
    num = numeric_grad(lambda x: sample_objective(m, x, c, target), A, coords=idx)
    worst = rel_error(dA.ravel()[idx], num.ravel()[idx])
    h = m.head_names[rng.integers(0, len(m.head_names))]
    for part, arr in (("w", m.weights[h]), ("b", m.biases[h])):
        def f(x, arr=arr):
            saved = arr[c].copy()
            arr[c] = x
            try:
                return sample_objective(m, A, c, target)
            finally:
                arr[c] = saved

        idx = _subset(rng, arr[c].size, coords)
        num = numeric_grad(f, arr[c].copy(), coords=idx)
        worst = max(worst, rel_error(grads[f"{h}.{part}"].ravel()[idx], num.ravel()[idx]))
    return worst


GRADIENT_CASES = ("inout_loss", "borders_loss", "reg_loss", "model/inout", "model/borders",
                  "model/combined", "model/regression")


def check_gradients(n: int, seed: int = 0, M: int = 28, tol: float = 1e-4) -> list[CheckResult]:
    """``n`` random instances spread over every case in :data:`GRADIENT_CASES`."""
    if n == 0:
        return [CheckResult("gradients", True, 0, warning="no samples requested; vacuous pass")]
    rng = SplitMix64(derive_seed(seed, "gradients"))
    errors: dict[str, list[float]] = {c: [] for c in GRADIENT_CASES}
    for k in range(n):
        case = GRADIENT_CASES[k % len(GRADIENT_CASES)]
        if case == "inout_loss":
            e = _loss_gradient_error(rng, "inout", M)
        elif case == "borders_loss":
            e = _loss_gradient_error(rng, "borders", M)
        elif case == "reg_loss":
            e = _reg_gradient_error(rng)
        else:
            e = _model_gradient_error(rng, case.split("/")[1])
        errors[case].append(e)
    out = []
    for case, errs in errors.items():
        if errs:
            worst = max(errs)
            out.append(CheckResult(f"gradients/{case}", worst < tol, len(errs), {"max_rel_error": worst}))
    return out


def oracle_check(samples: int, grad_samples: int, seed: int = 0, inject_tiebreak_fault: bool = False,
                 Ms=(28,)) -> dict:
    fast = infer_last_tie if inject_tiebreak_fault else infer
    results = [check_equivalence(samples, M, kind, seed, fast) for M in Ms for kind in KINDS]
    results += check_gradients(grad_samples, seed)
    warnings = sorted({r.warning for r in results if r.warning})
    return {
        "passed": all(r.passed for r in results),
        "inject_tiebreak_fault": inject_tiebreak_fault,
        "checks": [r.to_dict() for r in results],
        "warnings": warnings,
    }


# ---------------------------------------------------------------- benchmarks


def _best_time(fn: Callable[[], object], repeats: int) -> float:
    best = math.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def scaling_exponent(sizes, times) -> float:
    """Slope of the least-squares line through ``(log size, log time)``."""
    return float(np.polyfit(np.log(np.asarray(sizes, float)), np.log(np.asarray(times, float)), 1)[0])


def bench_inference(Ms=(28, 56, 112, 224), maps: int = 20, repeats: int = 3, seed: int = 0) -> list[dict]:
    """Per-map time of the interval search on In-Out maps, fast and brute force.

    Map construction and the running logit sum are excluded, so the rows
    time exactly the two interval searches being compared.
    """
    rows = []
    for M in Ms:
        rng = SplitMix64(derive_seed(seed, "bench", M))
        terms = [axis_terms(random_probmaps(rng, "inout", M), a) for _ in range(maps) for a in "xy"]
        for method, fn in (("fast", best_interval), ("bruteforce", best_interval_bruteforce)):
            t = _best_time(lambda: [fn(u, v) for u, v in terms], repeats) / maps
            rows.append({"bench": "infer", "method": method, "size": M, "seconds": t})
    return rows


def bench_nms(sizes=(1000, 10000, 100000), repeats: int = 1, seed: int = 0, iou_thresh: float = 0.5) -> list[dict]:
    rows = []
    for n in sizes:
        rng = SplitMix64(derive_seed(seed, "bench-nms", n))
        # Spread boxes over a canvas that grows with n so density stays constant.
        side = 50.0 * math.sqrt(n)
        xy = rng.random_array(2 * n).reshape(n, 2) * side
        wh = 10.0 + 30.0 * rng.random_array(2 * n).reshape(n, 2)
        scores = rng.random_array(n)
        # Tile into scenes of about 1000 boxes; NMS is per scene and category.
        tile = 50.0 * math.sqrt(1000)
        dets = [Detection(f"s{int(x // tile)}_{int(y // tile)}", 0,
                          Box(float(x), float(y), float(x + w), float(y + h)), float(s)) for (x, y), (w, h), s in zip(xy, wh, scores)]
        t = _best_time(lambda: nms(dets, iou_thresh), repeats)
        rows.append({"bench": "nms", "method": "greedy", "size": n, "seconds": t})
    return rows


def bench_pipeline(n_scenes: int = 5, repeats: int = 1, seed: int = 0, T: int = 4) -> list[dict]:
    """Scenes per second of the full pipeline with oracle scorer and noisy oracle localizer."""
    scenes = [generate_scene(derive_seed(seed, "bench-pipe", k), scene_id=f"b{k}") for k in range(n_scenes)]
    boxes = [np.array([b.to_list() for b in jittered_proposals(s, 6, (0.3, 0.8), seed, 40)]) for s in scenes]
    noise = NoiseSpec(1.0, 0.5, 0.1)

    def run():
        run_pipeline_many(scenes, boxes, OracleScorer(0.05, seed), oracle_localizer("inout", noise, seed),
                          PipelineConfig(T=T))

    t = _best_time(run, repeats)
    return [{"bench": "pipeline", "method": f"oracle_T{T}", "size": n_scenes, "seconds": t}]
