"""Dataset generation, model training and the five-arm localizer comparison.

Every random draw is keyed by ``derive_seed(root_seed, <purpose>, ...)`` so a
partial rerun (one split, one arm) reproduces the matching part of a full run.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import RunConfig
from .evaluation import EvalReport, emit_curves, evaluate
from .files import (
    atomic_write,
    dump_json,
    load_proposals,
    load_scenes,
    proposals_to_json,
    scenes_to_json,
    sha256_file,
)
from .geometry import Box
from .pipeline import (
    Detection,
    PipelineResult,
    ProbLocalizer,
    RegressionLocalizer,
    oracle_localizer,
    oracle_regression_localizer,
    post_process,
    run_pipeline_many,
)
from .predictor import (
    FeatureSet,
    ToyLocalizerSource,
    ToyModel,
    ToyRegressionSource,
    TrainResult,
    build_feature_set,
    train,
)
from .rng import derive_seed
from .synthetic import OracleScorer, Scene, generate_scene, jittered_proposals, sliding_windows

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
ARMS = ("inout", "borders", "combined", "bbox_reg", "none")
INITIAL_BOXES = "test_proposals.json"


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get("LOCBOX_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------- dataset


@dataclass
class Dataset:
    scenes: dict[str, list[Scene]]
    proposals: dict[str, dict[str, list[list[float]]]]
    n_categories: int
    root: Path

    def boxes(self, split: str, scenes: Sequence[Scene] | None = None) -> list[np.ndarray]:
        props = self.proposals[split]
        return [np.array(props.get(s.id, []), dtype=np.float64).reshape(-1, 4) for s in (scenes or self.scenes[split])]


def make_scenes(cfg: RunConfig, split: str) -> list[Scene]:
    n = cfg[f"data.n_{split}"]
    sc = cfg.scene_config()
    return [generate_scene(derive_seed(cfg["seed"], "scene", split, k), sc, f"{split}{k:04d}") for k in range(n)]


def make_proposals(cfg: RunConfig, split: str, scenes: Sequence[Scene]) -> dict[str, list[Box]]:
    seed = derive_seed(cfg["seed"], "proposals", split)
    if split == "test":
        if cfg["data.initial"] == "windows":
            return {s.id: [Box.from_seq(b) for b in sliding_windows(s.canvas, cfg["data.windows"], seed=seed)]
                    for s in scenes}
        band = (cfg["data.test_iou_lo"], cfg["data.test_iou_hi"])
        return {s.id: jittered_proposals(s, cfg["data.test_per_gt"], band, seed, cfg["data.test_background"])
                for s in scenes}
    band = (cfg["data.train_iou_lo"], cfg["data.train_iou_hi"])
    return {s.id: jittered_proposals(s, cfg[f"data.{split}_per_gt"], band, seed) for s in scenes}


def generate_dataset(cfg: RunConfig, root: Path | None = None) -> dict[str, str]:
    """Write scenes and proposals for every split; returns file name → sha256."""
    root = Path(root or cfg.dataset)
    manifest = {}
    for split in SPLITS:
        scenes = make_scenes(cfg, split)
        files = {
            f"{split}_scenes.json": scenes_to_json(scenes, cfg["data.n_categories"]),
            f"{split}_proposals.json": proposals_to_json(make_proposals(cfg, split, scenes)),
        }
        for name, text in files.items():
            atomic_write(root / name, text)
            manifest[name] = sha256_file(root / name)
    atomic_write(root / "manifest.json", dump_json({"seed": cfg["seed"], "sha256": manifest}))
    return manifest


def load_dataset(root: Path) -> Dataset:
    root = Path(root)
    if not (root / "manifest.json").exists():
        raise FileNotFoundError(f"no dataset at {root} (run 'locbox gen' first)")
    scenes, props, n_cat = {}, {}, 0
    for split in SPLITS:
        scenes[split], n_cat = load_scenes(root / f"{split}_scenes.json")
        props[split] = load_proposals(root / f"{split}_proposals.json")
    return Dataset(scenes, props, n_cat, root)


# ---------------------------------------------------------------- training


def feature_sets(cfg: RunConfig, ds: Dataset) -> tuple[FeatureSet, FeatureSet | None]:
    kw = dict(M=cfg["model.M"], G=cfg["model.G"], gamma=cfg["model.gamma"],
              feature_noise=cfg["model.feature_noise"], min_iou=cfg["model.min_iou"])
    boxes = {split: {sid: [Box.from_seq(b) for b in bs] for sid, bs in ds.proposals[split].items()}
             for split in ("train", "val")}
    tr = build_feature_set(ds.scenes["train"], boxes["train"], derive_seed(cfg["seed"], "feat", "train"), **kw)
    va = None
    if any(s.objects for s in ds.scenes["val"]):
        va = build_feature_set(ds.scenes["val"], boxes["val"], derive_seed(cfg["seed"], "feat", "val"), **kw)
    return tr, va


def train_models(cfg: RunConfig, ds: Dataset, kinds: Sequence[str], out: Path | None = None) -> dict[str, TrainResult]:
    """Train toy models sharing one feature set; writes ``<kind>.json`` and ``<kind>_curve.csv`` under ``out``."""
    tr, va = feature_sets(cfg, ds)
    results = {}
    for kind in kinds:
        res = train(kind, tr, cfg.train_config(), ds.n_categories, va)
        results[kind] = res
        if out is not None:
            atomic_write(Path(out) / f"{kind}.json", res.model.to_json())
            atomic_write(Path(out) / f"{kind}_curve.csv", res.curve_csv())
        log.info("trained %s: %d iterations", kind, res.model.step)
    return results


def load_or_train(cfg: RunConfig, ds: Dataset, kinds: Sequence[str]) -> dict[str, ToyModel]:
    models_dir = cfg.out / "models"
    models = {}
    missing = [k for k in kinds if not (models_dir / f"{k}.json").exists()]
    if missing:
        for k, res in train_models(cfg, ds, missing, models_dir).items():
            models[k] = res.model
    for k in kinds:
        if k not in models:
            models[k] = ToyModel.from_json((models_dir / f"{k}.json").read_text())
    return models


# ---------------------------------------------------------------- arms


def make_localizer(arm: str, cfg: RunConfig, models: dict[str, ToyModel] | None = None):
    """Localizer for one experiment arm; ``None`` for the no-localizer arm."""
    if arm == "none":
        return None
    seed = derive_seed(cfg["seed"], "localizer", arm)
    gamma, M = cfg["model.gamma"], cfg["model.M"]
    if cfg["pipeline.localizer"] == "oracle":
        if arm == "bbox_reg":
            return oracle_regression_localizer(cfg["noise.reg_sd"], seed)
        return oracle_localizer(arm, cfg.noise(), seed, gamma, M)
    if models is None:
        raise ValueError("toy localizers need trained models")
    noise = cfg["model.feature_noise"]
    if arm == "bbox_reg":
        return RegressionLocalizer(ToyRegressionSource(models["regression"], seed, noise, gamma))
    return ProbLocalizer(ToyLocalizerSource(models[arm], seed, noise), gamma, M)


def make_scorer(cfg: RunConfig) -> OracleScorer:
    return OracleScorer(cfg["noise.score_sd"], derive_seed(cfg["seed"], "scorer"))


def reports_by_iteration(result: PipelineResult, scenes: Sequence[Scene], cfg: RunConfig,
                         categories: Sequence[int]) -> dict[int, EvalReport]:
    """Report after post-processing the candidates merged up to each iteration t.

    Noise and features are keyed by box content, so this equals a fresh run
    with ``T = t``; the no-localizer arm repeats its single-round result.
    """
    pcfg = cfg.pipeline_config()
    reports = {}
    merged: list[Detection] = []
    for t in range(1, pcfg.T + 1):
        merged = merged + result.per_iteration.get(t, [])
        if t == 1 or t in result.per_iteration:
            reports[t] = evaluate(post_process(merged, pcfg), scenes, categories)
        else:
            reports[t] = reports[t - 1]
    return reports


def run_arm(arm: str, cfg: RunConfig, ds: Dataset, models: dict[str, ToyModel] | None = None) -> dict:
    scenes = ds.scenes["test"]
    boxes_path = ds.root / INITIAL_BOXES
    checksum = sha256_file(boxes_path)
    boxes = ds.boxes("test")
    categories = list(range(ds.n_categories))
    result = run_pipeline_many(scenes, boxes, make_scorer(cfg), make_localizer(arm, cfg, models),
                               cfg.pipeline_config(), categories)
    reports = reports_by_iteration(result, scenes, cfg, categories)
    return {"arm": arm, "initial_boxes_sha256": checksum, "result": result, "reports": reports}


def arms_csv(runs: Sequence[dict]) -> str:
    header = "arm,mar,recall_0.50,recall_0.80,map_0.50,map_0.70,coco_map\n"
    rows = []
    for run in runs:
        r = run["reports"][max(run["reports"])]
        vals = [r.mar, r.recall_at(0.5), r.recall_at(0.8), r.map_at(0.5), r.map_at(0.7), r.coco_map]
        rows.append(",".join([run["arm"]] + [f"{v:.6f}" for v in vals]) + "\n")
    return header + "".join(rows)


def run_experiment(cfg: RunConfig, arms: Sequence[str] = ARMS) -> dict:
    """Run every arm on the shared test split and write per-arm curves plus a comparison table."""
    ds = load_dataset(cfg.dataset)
    models = None
    if cfg["pipeline.localizer"] == "toy" and any(a != "none" for a in arms):
        needed = sorted({"regression" if a == "bbox_reg" else a for a in arms if a != "none"})
        models = load_or_train(cfg, ds, needed)
    with ThreadPoolExecutor(max_workers=min(thread_count(), len(arms))) as pool:
        runs = list(pool.map(lambda a: run_arm(a, cfg, ds, models), arms))
    sums = {r["initial_boxes_sha256"] for r in runs}
    if len(sums) != 1:
        raise RuntimeError("arms saw different initial box files")
    out = cfg.out / "experiment"
    summary = {"initial_boxes_sha256": sums.pop(), "localizer": cfg["pipeline.localizer"],
               "T": cfg["pipeline.T"], "arms": {}}
    for run in runs:
        arm_dir = out / run["arm"]
        reports = run["reports"]
        final = reports[max(reports)]
        emit_curves(final, {"recall": arm_dir / "recall.csv", "map": arm_dir / "map.csv",
                            "iteration": arm_dir / "iteration.csv", "summary": arm_dir / "summary.json"},
                    reports)
        atomic_write(arm_dir / "detections.jsonl", "".join(d.to_json() + "\n" for d in run["result"].detections))
        summary["arms"][run["arm"]] = {"mar": final.mar, "coco_map": final.coco_map,
                                       "recall_0.80": final.recall_at(0.8), "map_0.50": final.map_at(0.5),
                                       "detections": len(run["result"].detections)}
    atomic_write(out / "arms.csv", arms_csv(runs))
    atomic_write(out / "report.json", dump_json(summary))
    summary["runs"] = runs
    return summary
