"""Run configuration: dotted ``key = value`` files with command-line overrides."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable

from .pipeline import PipelineConfig
from .predictor import TrainConfig
from .synthetic import NoiseSpec, SceneConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Option:
    kind: type
    default: Any
    check: Callable[[Any], bool] = lambda v: True
    doc: str = ""


def _pos(v) -> bool:
    return v > 0


def _nonneg(v) -> bool:
    return v >= 0


def _unit(v) -> bool:
    return 0.0 < v <= 1.0


def _choice(*opts):
    return lambda v: v in opts


_SC = SceneConfig()
_TC = TrainConfig()
_PC = PipelineConfig()

OPTIONS: dict[str, Option] = {
    "seed": Option(int, 0, _nonneg, "root seed; every other seed is derived from it"),
    "out": Option(str, "runs", doc="output directory"),
    "dataset": Option(str, "", doc="dataset directory; empty means <out>/dataset"),
    # data generation
    "data.n_train": Option(int, 150, _nonneg, "training scenes"),
    "data.n_val": Option(int, 40, _nonneg, "validation scenes"),
    "data.n_test": Option(int, 60, _nonneg, "test scenes for pipeline runs"),
    "data.n_categories": Option(int, _SC.n_categories, _pos),
    "data.min_objects": Option(int, _SC.min_objects, _pos),
    "data.max_objects": Option(int, _SC.max_objects, _pos),
    "data.width": Option(float, _SC.width, _pos),
    "data.height": Option(float, _SC.height, _pos),
    "data.min_size": Option(float, _SC.min_size, _pos),
    "data.max_size": Option(float, _SC.max_size, _pos),
    "data.min_separation": Option(float, _SC.min_separation, lambda v: v >= -1,
                                  "pixel gap between objects; negative allows overlap"),
    "data.adjacent_pair_prob": Option(float, _SC.adjacent_pair_prob, lambda v: 0 <= v <= 1),
    "data.train_per_gt": Option(int, 8, _pos, "training proposals per gt"),
    "data.val_per_gt": Option(int, 3, _pos, "validation proposals per gt"),
    "data.train_iou_lo": Option(float, 0.4, _unit),
    "data.train_iou_hi": Option(float, 0.9, _unit),
    "data.initial": Option(str, "jitter", _choice("jitter", "windows"), "initial boxes for test scenes"),
    "data.test_per_gt": Option(int, 6, _pos),
    "data.test_iou_lo": Option(float, 0.3, _unit),
    "data.test_iou_hi": Option(float, 0.8, _unit),
    "data.test_background": Option(int, 40, _nonneg, "random background boxes per test scene"),
    "data.windows": Option(int, 2000, _pos, "sliding windows per test scene"),
    # model and training
    "model.M": Option(int, 28, lambda v: v >= 2),
    "model.G": Option(int, 14, lambda v: v >= 2),
    "model.gamma": Option(float, 1.8, lambda v: v >= 1),
    "model.feature_noise": Option(float, 0.1, _nonneg),
    "model.min_iou": Option(float, 0.4, _unit),
    "train.kind": Option(str, "all", _choice("all", "inout", "borders", "combined", "regression")),
    "train.lr": Option(float, _TC.lr, _pos),
    "train.batch_size": Option(int, _TC.batch_size, _pos),
    "train.iterations": Option(int, _TC.iterations, _nonneg),
    "train.lr_step_frac": Option(float, _TC.lr_step_frac, lambda v: 0 <= v <= 1),
    "train.lr_step_factor": Option(float, _TC.lr_step_factor, _pos),
    "train.weight_decay": Option(float, _TC.weight_decay, _nonneg),
    "train.momentum": Option(float, _TC.momentum, lambda v: 0 <= v < 1),
    "train.eval_every": Option(int, _TC.eval_every, _pos),
    # oracle stand-ins
    "noise.border_jitter_sd": Option(float, 1.0, _nonneg, "grid cells"),
    "noise.logit_noise_sd": Option(float, 0.5, _nonneg),
    "noise.false_mode_prob": Option(float, 0.1, lambda v: 0 <= v <= 1),
    "noise.false_mode_strength": Option(float, 0.6, _nonneg),
    "noise.score_sd": Option(float, 0.05, _nonneg, "oracle scorer noise"),
    "noise.reg_sd": Option(float, 0.1, _nonneg, "oracle regression noise"),
    # pipeline
    "pipeline.T": Option(int, _PC.T, _pos),
    "pipeline.prune_budget": Option(float, _PC.prune_budget, _pos),
    "pipeline.prune_nms_iou": Option(float, _PC.prune_nms_iou, _unit),
    "pipeline.final_nms_iou": Option(float, _PC.final_nms_iou, _unit),
    "pipeline.voting_iou": Option(float, _PC.voting_iou, _unit),
    "pipeline.localizer": Option(str, "oracle", _choice("oracle", "toy")),
    "pipeline.kind": Option(str, "inout", _choice("inout", "borders", "combined", "bbox_reg", "none")),
    # oracle-check
    "check.samples": Option(int, 2000, _nonneg, "random maps per kind"),
    "check.grad_samples": Option(int, 200, _nonneg),
    "check.inject_tiebreak_fault": Option(bool, False),
    # bench
    "bench.repeats": Option(int, 3, _pos),
    "bench.maps": Option(int, 20, _pos, "maps per M for inference timing"),
    "bench.nms_sizes": Option(str, "1000,10000,100000"),
}


def _coerce(key: str, raw) -> Any:
    opt = OPTIONS[key]
    if isinstance(raw, opt.kind) and not (opt.kind is int and isinstance(raw, bool)):
        return raw
    text = str(raw).strip()
    try:
        if opt.kind is bool:
            low = text.lower()
            if low not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(text)
            return low in ("1", "true", "yes")
        return opt.kind(text)
    except ValueError as e:
        raise ConfigError(f"{key}: cannot parse {text!r} as {opt.kind.__name__}") from e


def parse_lines(lines: Iterable[str]) -> dict[str, str]:
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


class RunConfig:
    """Validated mapping of every tunable; unknown keys are rejected."""

    def __init__(self, values: dict[str, Any] | None = None) -> None:
        self._v = {k: o.default for k, o in OPTIONS.items()}
        self.explicit: set[str] = set()
        for k, raw in (values or {}).items():
            self.set(k, raw)

    def set(self, key: str, raw) -> None:
        if key not in OPTIONS:
            raise ConfigError(f"unknown config key {key!r}")
        v = _coerce(key, raw)
        if not OPTIONS[key].check(v):
            raise ConfigError(f"{key}: value {v!r} out of range")
        self._v[key] = v
        self.explicit.add(key)

    def __getitem__(self, key: str):
        return self._v[key]

    def as_dict(self) -> dict[str, Any]:
        return dict(self._v)

    def validate(self) -> "RunConfig":
        if self["data.min_objects"] > self["data.max_objects"]:
            raise ConfigError("data.min_objects exceeds data.max_objects")
        if self["data.min_size"] > self["data.max_size"]:
            raise ConfigError("data.min_size exceeds data.max_size")
        for lo, hi in (("data.train_iou_lo", "data.train_iou_hi"), ("data.test_iou_lo", "data.test_iou_hi")):
            if self[lo] > self[hi]:
                raise ConfigError(f"{lo} exceeds {hi}")
        self.nms_sizes()
        return self

    @classmethod
    def load(cls, path: str | None = None, overrides: Iterable[str] = ()) -> "RunConfig":
        values: dict[str, str] = {}
        if path:
            try:
                values.update(parse_lines(Path(path).read_text().splitlines()))
            except OSError as e:
                raise ConfigError(f"cannot read config {path}: {e}") from e
        values.update(parse_lines(overrides))
        return cls(values).validate()

    def to_text(self) -> str:
        return "".join(f"{k} = {str(v).lower() if isinstance(v, bool) else v}\n" for k, v in self._v.items())

    # typed views for the other modules

    @property
    def out(self) -> Path:
        return Path(self["out"])

    @property
    def dataset(self) -> Path:
        return Path(self["dataset"]) if self["dataset"] else self.out / "dataset"

    def scene_config(self) -> SceneConfig:
        gap = self["data.min_separation"]
        return SceneConfig(
            width=self["data.width"],
            height=self["data.height"],
            n_categories=self["data.n_categories"],
            min_objects=self["data.min_objects"],
            max_objects=self["data.max_objects"],
            min_size=self["data.min_size"],
            max_size=self["data.max_size"],
            min_separation=None if gap < 0 else gap,
            adjacent_pair_prob=self["data.adjacent_pair_prob"],
        )

    def noise(self) -> NoiseSpec:
        return NoiseSpec(self["noise.border_jitter_sd"], self["noise.logit_noise_sd"],
                         self["noise.false_mode_prob"], self["noise.false_mode_strength"])

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self["train.lr"],
            batch_size=self["train.batch_size"],
            iterations=self["train.iterations"],
            lr_step_frac=self["train.lr_step_frac"],
            lr_step_factor=self["train.lr_step_factor"],
            weight_decay=self["train.weight_decay"],
            momentum=self["train.momentum"],
            eval_every=self["train.eval_every"],
            seed=self["seed"],
        )

    def pipeline_config(self, T: int | None = None) -> PipelineConfig:
        prune_iou = self["pipeline.prune_nms_iou"]
        # The sliding-window default is looser, unless the user chose a value.
        if self["data.initial"] == "windows" and "pipeline.prune_nms_iou" not in self.explicit:
            prune_iou = 0.85
        return PipelineConfig(
            T=self["pipeline.T"] if T is None else T,
            gamma=self["model.gamma"],
            prune_budget=self["pipeline.prune_budget"],
            prune_nms_iou=prune_iou,
            final_nms_iou=self["pipeline.final_nms_iou"],
            voting_iou=self["pipeline.voting_iou"],
            M=self["model.M"],
        )

    def nms_sizes(self) -> list[int]:
        try:
            sizes = [int(x) for x in str(self["bench.nms_sizes"]).split(",") if x.strip()]
        except ValueError as e:
            raise ConfigError("bench.nms_sizes must be comma-separated integers") from e
        if not sizes or min(sizes) < 1:
            raise ConfigError("bench.nms_sizes must list positive sizes")
        return sizes
