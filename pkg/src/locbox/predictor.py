"""Tiny trainable localizer: fixed scene features, per-axis max-pooling, affine sigmoid heads.

The feature grid stands in for the conv activations of a search region. The
X branch max-pools it over rows and the Y branch over columns; each branch
feeds category-specific affine heads. A regression head reading both pooled
branches implements the box-regression baseline.

Feature channel order (``A[i, j, f]``, ``i`` over columns, ``j`` over rows):

0. occupancy: largest fraction of the cell covered by any object, plus noise
1. left border of some object falls in the cell, plus noise
2. right border, plus noise
3. top border, plus noise
4. bottom border, plus noise
5. normalized column center in [0, 1]
6. normalized row center in [0, 1]
7. pure observation noise
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .evaluation import paired_average_recall
from .geometry import Box, GeometryError, Region, clip_to_canvas, enlarge, grid_to_box, iou_matrix
from .inference import ProbMaps, heads_for, infer
from .losses import LossReport, lambda_weights, sample_loss, sigmoid, weighted_logistic
from .regression import RegTargets, reg_apply, reg_loss, reg_targets_array
from .rng import SplitMix64, derive_seed
from .synthetic import Scene
from .targets import make_training_samples

log = logging.getLogger(__name__)

MODEL_KINDS = ("inout", "borders", "combined", "regression")
X_HEADS = ("px", "pl", "pr")
N_CHANNELS = 8


class TrainingError(RuntimeError):
    pass


def featurize(scene: Scene, region: Region, seed: int, G: int = 14, noise_sd: float = 0.1) -> np.ndarray:
    """``(G, G, 8)`` feature grid of ``scene`` inside ``region``; deterministic in ``seed``."""
    rb = region.bounds
    xe = np.array([rb.x1 + k * rb.width / G for k in range(G + 1)])
    ye = np.array([rb.y1 + k * rb.height / G for k in range(G + 1)])
    cw, ch = rb.width / G, rb.height / G
    A = np.zeros((G, G, N_CHANNELS))
    for o in scene.objects:
        b = o.box
        ox = np.clip(np.minimum(b.x2, xe[1:]) - np.maximum(b.x1, xe[:-1]), 0.0, None) / cw
        oy = np.clip(np.minimum(b.y2, ye[1:]) - np.maximum(b.y1, ye[:-1]), 0.0, None) / ch
        if not (ox.any() and oy.any()):
            continue
        A[:, :, 0] = np.maximum(A[:, :, 0], np.outer(ox, oy))
        rows_hit = oy > 0
        cols_hit = ox > 0
        for ch_idx, coord, edges, along in ((1, b.x1, xe, rows_hit), (2, b.x2, xe, rows_hit)):
            k = _cell_of(coord, edges)
            if k is not None:
                A[k, along, ch_idx] = 1.0
        for ch_idx, coord, edges, along in ((3, b.y1, ye, cols_hit), (4, b.y2, ye, cols_hit)):
            k = _cell_of(coord, edges)
            if k is not None:
                A[along, k, ch_idx] = 1.0
    centers = (np.arange(G) + 0.5) / G
    A[:, :, 5] = centers[:, None]
    A[:, :, 6] = centers[None, :]
    if noise_sd > 0:
        noise = SplitMix64(seed).normal_array(G * G * 6).reshape(G, G, 6)
        A[:, :, 0:5] += noise_sd * noise[:, :, 0:5]
        A[:, :, 7] = noise_sd * noise[:, :, 5]
    return A


def _cell_of(coord: float, edges: np.ndarray) -> int | None:
    if coord < edges[0] or coord > edges[-1]:
        return None
    return int(min(np.searchsorted(edges, coord, side="right") - 1, edges.size - 2))


def marginalize(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Max over rows for the X branch and over columns for the Y branch."""
    return A.max(axis=1), A.max(axis=0)


@dataclass
class ToyModel:
    kind: str
    n_categories: int
    G: int = 14
    F: int = N_CHANNELS
    M: int = 28
    weights: dict[str, np.ndarray] = field(default_factory=dict)
    biases: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self) -> None:
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        for name in self.head_names:
            out, dim = self.head_shape(name)
            self.weights.setdefault(name, np.zeros((self.n_categories, out, dim)))
            self.biases.setdefault(name, np.zeros((self.n_categories, out)))
            if self.weights[name].shape != (self.n_categories, out, dim):
                raise ValueError(f"bad weight shape for head {name}: {self.weights[name].shape}")

    @property
    def head_names(self) -> tuple[str, ...]:
        return ("reg",) if self.kind == "regression" else heads_for(self.kind)

    @property
    def input_scale(self) -> float:
        # Keeps the head Hessians small enough for a 0.05 learning rate.
        return 1.0 / math.sqrt(self.G)

    def head_shape(self, name: str) -> tuple[int, int]:
        d = self.G * self.F
        return (4, 2 * d) if name == "reg" else (self.M, d)

    def copy(self) -> "ToyModel":
        return ToyModel(
            self.kind, self.n_categories, self.G, self.F, self.M,
            {k: v.copy() for k, v in self.weights.items()},
            {k: v.copy() for k, v in self.biases.items()},
            self.step,
        )

    def to_json(self) -> str:
        return json.dumps(
            {
                "kind": self.kind,
                "n_categories": self.n_categories,
                "G": self.G,
                "F": self.F,
                "M": self.M,
                "step": self.step,
                "heads": {
                    k: {
                        "shape": list(self.weights[k].shape),
                        "weights": self.weights[k].ravel().tolist(),
                        "bias": self.biases[k].ravel().tolist(),
                    }
                    for k in self.head_names
                },
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "ToyModel":
        d = json.loads(text)
        w, b = {}, {}
        for k, h in d["heads"].items():
            w[k] = np.array(h["weights"], dtype=np.float64).reshape(h["shape"])
            b[k] = np.array(h["bias"], dtype=np.float64).reshape(h["shape"][:2])
        return cls(d["kind"], d["n_categories"], d["G"], d["F"], d["M"], w, b, d["step"])


def _branch_inputs(m: ToyModel, A: np.ndarray) -> dict[str, np.ndarray]:
    ax, ay = marginalize(A)
    x = ax.ravel() * m.input_scale
    y = ay.ravel() * m.input_scale
    return {"x": x, "y": y, "xy": np.concatenate([x, y])}


def _head_input(name: str) -> str:
    if name == "reg":
        return "xy"
    return "x" if name in X_HEADS else "y"


def logits(m: ToyModel, A: np.ndarray, category: int) -> dict[str, np.ndarray]:
    inp = _branch_inputs(m, A)
    return {h: m.weights[h][category] @ inp[_head_input(h)] + m.biases[h][category] for h in m.head_names}


def forward(m: ToyModel, A: np.ndarray, category: int):
    """:class:`ProbMaps` for probability models, :class:`RegTargets` for the regression model."""
    z = logits(m, A, category)
    if m.kind == "regression":
        return RegTargets.from_seq(z["reg"])
    return ProbMaps(m.kind, m.M, {h: sigmoid(v) for h, v in z.items()})


def sample_objective(m: ToyModel, A: np.ndarray, category: int, target) -> float:
    out = forward(m, A, category)
    if m.kind == "regression":
        return reg_loss(out, target)[0]
    return sample_loss(out, target).value


def backward(m: ToyModel, A: np.ndarray, category: int, target, input_grad: bool = False):
    """Gradient of the per-sample loss w.r.t. the head parameters of ``category``.

    Returns ``(loss, grads)`` where ``grads`` maps ``"<head>.w"`` / ``"<head>.b"``
    to arrays shaped like that category's slice. With ``input_grad`` a third
    element holds ``dloss/dA``, routed through the max-pool argmax (first
    maximum on ties, a subgradient).
    """
    inp = _branch_inputs(m, A)
    z = {h: m.weights[h][category] @ inp[_head_input(h)] + m.biases[h][category] for h in m.head_names}
    if m.kind == "regression":
        value, g = reg_loss(RegTargets.from_seq(z["reg"]), target)
        report = LossReport(value, {"reg": g})
    else:
        report = sample_loss({h: sigmoid(v) for h, v in z.items()}, target)
    grads = {}
    d_in = {k: np.zeros_like(v) for k, v in inp.items()}
    for h in m.head_names:
        g = report.grad_logits[h]
        grads[f"{h}.w"] = np.outer(g, inp[_head_input(h)])
        grads[f"{h}.b"] = g.copy()
        d_in[_head_input(h)] += m.weights[h][category].T @ g
    if not input_grad:
        return report.value, grads
    d = m.G * m.F
    dax = (d_in["x"] + d_in["xy"][:d]).reshape(m.G, m.F) * m.input_scale
    day = (d_in["y"] + d_in["xy"][d:]).reshape(m.G, m.F) * m.input_scale
    dA = np.zeros_like(A)
    jx = A.argmax(axis=1)  # (G, F): winning row per column
    iy = A.argmax(axis=0)  # (G, F): winning column per row
    ii, ff = np.meshgrid(np.arange(m.G), np.arange(m.F), indexing="ij")
    np.add.at(dA, (ii, jx, ff), dax)
    np.add.at(dA, (iy, ii, ff), day)
    return report.value, grads, dA


# ---------------------------------------------------------------- datasets


@dataclass
class FeatureSet:
    """Pre-featurized samples shared by every model trained on them."""

    X: np.ndarray  # (N, G, F) pooled X branch, unscaled
    Y: np.ndarray  # (N, G, F) pooled Y branch, unscaled
    categories: np.ndarray
    targets: dict[str, np.ndarray]  # head -> (N, M) target vectors
    reg: np.ndarray  # (N, 4) regression targets
    proposals: np.ndarray  # (N, 4) candidate boxes
    gts: np.ndarray  # (N, 4) assigned gt boxes
    regions: np.ndarray  # (N, 4) search regions
    canvases: np.ndarray  # (N, 2)
    M: int
    G: int

    def __len__(self) -> int:
        return self.categories.shape[0]


def build_feature_set(
    scenes: Sequence[Scene],
    proposals: dict[str, Sequence[Box]],
    seed: int,
    M: int = 28,
    G: int = 14,
    gamma: float = 1.8,
    feature_noise: float = 0.1,
    min_iou: float = 0.4,
) -> FeatureSet:
    cols: dict[str, list] = {k: [] for k in ("X", "Y", "cat", "prop", "gt", "reg", "can")}
    tgt: dict[str, list] = {h: [] for h in heads_for("combined")}
    for scene in scenes:
        props = list(proposals.get(scene.id, []))
        if not props or not scene.objects:
            continue
        batch = make_training_samples(scene, props, "combined", gamma, M, min_iou)
        for k, s in enumerate(batch.samples):
            A = featurize(scene, s.region, derive_seed(seed, "feat", scene.id, k), G, feature_noise)
            ax, ay = marginalize(A)
            cols["X"].append(ax)
            cols["Y"].append(ay)
            cols["cat"].append(s.category)
            cols["prop"].append(s.proposal.to_list())
            cols["gt"].append(s.gt_box.to_list())
            cols["reg"].append(s.region.bounds.to_list())
            cols["can"].append([scene.width, scene.height])
            for h in tgt:
                tgt[h].append(s.target[h])
    n = len(cols["cat"])
    if n == 0:
        raise ValueError("no training samples could be built from the given proposals")
    prop = np.array(cols["prop"])
    gts = np.array(cols["gt"])
    return FeatureSet(
        X=np.array(cols["X"]),
        Y=np.array(cols["Y"]),
        categories=np.array(cols["cat"], dtype=np.int64),
        targets={h: np.array(v) for h, v in tgt.items()},
        reg=reg_targets_array(prop, gts),
        proposals=prop,
        gts=gts,
        regions=np.array(cols["reg"]),
        canvases=np.array(cols["can"]),
        M=M,
        G=G,
    )


# ---------------------------------------------------------------- batched math


def _batch_inputs(m: ToyModel, fs: FeatureSet, idx: np.ndarray) -> dict[str, np.ndarray]:
    s = m.input_scale
    xin = {
        "x": fs.X[idx].reshape(idx.size, -1) * s,
        "y": fs.Y[idx].reshape(idx.size, -1) * s,
    }
    xin["xy"] = np.concatenate([xin["x"], xin["y"]], axis=1)
    return xin


def _batch_logits(m: ToyModel, fs: FeatureSet, idx: np.ndarray) -> tuple[dict, dict]:
    xin = _batch_inputs(m, fs, idx)
    cats = fs.categories[idx]
    z = {}
    for h in m.head_names:
        out = np.empty((idx.size, m.weights[h].shape[1]))
        for c in np.unique(cats):
            rows = cats == c
            out[rows] = xin[_head_input(h)][rows] @ m.weights[h][c].T + m.biases[h][c]
        z[h] = out
    return z, xin


def _batch_loss_grads(m: ToyModel, fs: FeatureSet, idx: np.ndarray) -> tuple[float, dict]:
    """Mean loss over ``idx`` and its gradient w.r.t. every head parameter."""
    z, xin = _batch_logits(m, fs, idx)
    cats = fs.categories[idx]
    B = idx.size
    total = 0.0
    glog = {}
    if m.kind == "regression":
        d = z["reg"] - fs.reg[idx]
        total = float(np.sum(d * d))
        glog["reg"] = 2.0 * d
    else:
        lam_plus, lam_minus = lambda_weights(m.M)
        for h in m.head_names:
            q = sigmoid(z[h])
            wp, wn = (1.0, 1.0) if h in ("px", "py") else (lam_plus, lam_minus)
            val, glog[h] = weighted_logistic(q, fs.targets[h][idx], wp, wn)
            total += float(np.sum(val))
    grads = {}
    present = np.unique(cats)
    for h, g in glog.items():
        gw = np.zeros_like(m.weights[h])
        gb = np.zeros_like(m.biases[h])
        for c in present:
            rows = cats == c
            gw[c] = g[rows].T @ xin[_head_input(h)][rows]
            gb[c] = g[rows].sum(axis=0)
        grads[h] = (gw / B, gb / B)
    return total / B, grads


def predict_boxes(m: ToyModel, fs: FeatureSet, idx: np.ndarray | None = None) -> np.ndarray:
    """Localized boxes for the samples in ``idx`` (image coordinates)."""
    idx = np.arange(len(fs)) if idx is None else idx
    z, _ = _batch_logits(m, fs, idx)
    out = np.zeros((idx.size, 4))
    for r, k in enumerate(idx):
        if m.kind == "regression":
            box = reg_apply(Box.from_seq(fs.proposals[k]), RegTargets.from_seq(z["reg"][r]))
            try:
                box = clip_to_canvas(box, *fs.canvases[k])
            except GeometryError:
                box = Box.from_seq(fs.proposals[k])
        else:
            p = ProbMaps(m.kind, m.M, {h: sigmoid(z[h][r]) for h in m.head_names})
            box = grid_to_box(infer(p), Region(Box.from_seq(fs.regions[k]), m.M))
        out[r] = box.to_list()
    return out


def validation_mar(m: ToyModel, fs: FeatureSet) -> float:
    """Mean over categories of the AR of predicted boxes against their assigned gts."""
    pred = predict_boxes(m, fs)
    ious = np.array([iou_matrix(pred[k][None], fs.gts[k][None])[0, 0] for k in range(len(fs))])
    cats = np.unique(fs.categories)
    return float(np.mean([paired_average_recall(ious[fs.categories == c]) for c in cats]))


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    lr: float = 0.05
    batch_size: int = 32
    iterations: int = 5000
    lr_step_frac: float = 0.6
    lr_step_factor: float = 0.1
    weight_decay: float = 0.0
    momentum: float = 0.9
    eval_every: int = 250
    seed: int = 0


@dataclass
class TrainResult:
    model: ToyModel
    curve: list[tuple[int, float, float]]  # (iteration, loss, validation mAR)

    def curve_csv(self) -> str:
        lines = ["iteration,loss,mar"]
        lines += [f"{it},{loss:.8f},{mar:.6f}" for it, loss, mar in self.curve]
        return "\n".join(lines) + "\n"


def train(
    kind: str,
    data: FeatureSet,
    cfg: TrainConfig | None = None,
    n_categories: int | None = None,
    validation: FeatureSet | None = None,
    model: ToyModel | None = None,
) -> TrainResult:
    """Mini-batch SGD with momentum and a single step decay of the learning rate.

    Every ``eval_every`` iterations the validation mAR (if a validation set is
    given) and the running mean loss are appended to the curve.

    Raises:
        TrainingError: when the loss becomes non-finite.
    """
    cfg = cfg or TrainConfig()
    if n_categories is None:
        n_categories = int(data.categories.max()) + 1
    m = model.copy() if model is not None else ToyModel(kind, n_categories, data.G, N_CHANNELS, data.M)
    curve: list[tuple[int, float, float]] = []
    if cfg.iterations <= 0:
        return TrainResult(m, curve)
    rng = SplitMix64(derive_seed(cfg.seed, "train", kind))
    velocity = {h: (np.zeros_like(m.weights[h]), np.zeros_like(m.biases[h])) for h in m.head_names}
    step_at = int(cfg.lr_step_frac * cfg.iterations)
    order = rng.permutation(len(data))
    cursor = 0
    running = []
    for it in range(1, cfg.iterations + 1):
        if cursor + cfg.batch_size > len(order):
            order = rng.permutation(len(data))
            cursor = 0
        idx = order[cursor : cursor + cfg.batch_size]
        cursor += cfg.batch_size
        loss, grads = _batch_loss_grads(m, data, idx)
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite loss {loss} at iteration {it} ({kind}, lr={cfg.lr})")
        running.append(loss)
        lr = cfg.lr * (cfg.lr_step_factor if it > step_at else 1.0)
        for h, (gw, gb) in grads.items():
            vw, vb = velocity[h]
            vw *= cfg.momentum
            vw -= lr * (gw + cfg.weight_decay * m.weights[h])
            vb *= cfg.momentum
            vb -= lr * gb
            m.weights[h] += vw
            m.biases[h] += vb
        m.step = it
        if it % cfg.eval_every == 0 or it == cfg.iterations:
            mar = validation_mar(m, validation) if validation is not None else float("nan")
            curve.append((it, float(np.mean(running)), mar))
            log.debug("%s it=%d loss=%.4f mar=%.4f", kind, it, curve[-1][1], mar)
            running = []
    return TrainResult(m, curve)


def dataset_loss(m: ToyModel, data: FeatureSet) -> float:
    return _batch_loss_grads(m, data, np.arange(len(data)))[0]


class ToyLocalizerSource:
    """Adapts a trained model to the pipeline: features of a region → model output."""

    def __init__(self, model: ToyModel, seed: int, feature_noise: float = 0.1) -> None:
        self.model = model
        self.seed = seed
        self.feature_noise = feature_noise

    def features(self, scene: Scene, region: Region) -> np.ndarray:
        key = derive_seed(self.seed, "pipeline-feat", scene.id, *region.bounds.to_list())
        return featurize(scene, region, key, self.model.G, self.feature_noise)

    def __call__(self, scene: Scene, region: Region, category: int, anchor: Box | None = None):
        return forward(self.model, self.features(scene, region), category)


class ToyRegressionSource(ToyLocalizerSource):
    """Regression counterpart: features of the enlarged box → predicted transform of the box."""

    def __init__(self, model: ToyModel, seed: int, feature_noise: float = 0.1, gamma: float = 1.8) -> None:
        super().__init__(model, seed, feature_noise)
        self.gamma = gamma

    def __call__(self, scene: Scene, box: Box, category: int) -> RegTargets:
        region = enlarge(box, self.gamma, scene.canvas, self.model.M)
        return forward(self.model, self.features(scene, region), category)
