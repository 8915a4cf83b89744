"""Command-line entry point: ``locbox <command> [--config PATH] [--seed N] [--out DIR] [--set key=value ...]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import checks
from .config import ConfigError, RunConfig
from .evaluation import emit_curves, evaluate
from .experiment import ARMS, generate_dataset, load_dataset, load_or_train, run_arm, run_experiment, train_models
from .files import atomic_write, dump_json
from .geometry import Box, Region, grid_to_box
from .inference import ProbMaps, infer
from .pipeline import Detection
from .predictor import MODEL_KINDS

log = logging.getLogger("locbox")

COMMANDS = ("gen", "train", "infer", "pipeline", "experiment", "eval", "oracle-check", "bench", "curves")


class CommandFailed(RuntimeError):
    """Raised when a command ran but its checks did not pass; carries the report."""

    def __init__(self, report: dict) -> None:
        super().__init__("checks failed")
        self.report = report


def cmd_gen(cfg: RunConfig, args) -> dict:
    manifest = generate_dataset(cfg)
    return {"dataset": str(cfg.dataset), "sha256": manifest}


def cmd_train(cfg: RunConfig, args) -> dict:
    kinds = MODEL_KINDS if cfg["train.kind"] == "all" else (cfg["train.kind"],)
    results = train_models(cfg, load_dataset(cfg.dataset), kinds, cfg.out / "models")
    return {
        "models": str(cfg.out / "models"),
        "final_val_mar": {k: (r.curve[-1][2] if r.curve else None) for k, r in results.items()},
    }


def cmd_infer(cfg: RunConfig, args) -> dict:
    """Infer boxes from probability maps given as JSON lines of ``ProbMaps.to_json`` records.

    A record may carry a ``"region"`` key ``[x1, y1, x2, y2]`` to also get image coordinates.
    """
    if not args.input:
        raise ConfigError("infer needs --input FILE with probability maps (JSON lines)")
    out = []
    for line in Path(args.input).read_text().splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        g = infer(ProbMaps.from_dict(d))
        rec = {"gridbox": g.to_list()}
        if "region" in d:
            rec["box"] = grid_to_box(g, Region(Box.from_seq(d["region"]), int(d["M"]))).to_list()
        out.append(rec)
    text = "".join(json.dumps(r) + "\n" for r in out)
    atomic_write(cfg.out / "inferred.jsonl", text)
    return {"count": len(out), "output": str(cfg.out / "inferred.jsonl")}


def cmd_pipeline(cfg: RunConfig, args) -> dict:
    ds = load_dataset(cfg.dataset)
    arm = cfg["pipeline.kind"]
    models = None
    if cfg["pipeline.localizer"] == "toy" and arm != "none":
        kind = "regression" if arm == "bbox_reg" else arm
        models = load_or_train(cfg, ds, [kind])
    run = run_arm(arm, cfg, ds, models)
    path = cfg.out / "pipeline" / f"{arm}_detections.jsonl"
    atomic_write(path, "".join(d.to_json() + "\n" for d in run["result"].detections))
    final = run["reports"][max(run["reports"])]
    return {"arm": arm, "detections": str(path), "count": len(run["result"].detections),
            "mar": final.mar, "coco_map": final.coco_map}


def _load_detections(path) -> list[Detection]:
    return [Detection.from_json(line) for line in Path(path).read_text().splitlines() if line.strip()]


def _report_from_input(cfg: RunConfig, args):
    if not args.input:
        raise ConfigError("this command needs --input FILE with detections (JSON lines)")
    ds = load_dataset(cfg.dataset)
    return evaluate(_load_detections(args.input), ds.scenes["test"], list(range(ds.n_categories)))


def cmd_eval(cfg: RunConfig, args) -> dict:
    report = _report_from_input(cfg, args)
    atomic_write(cfg.out / "eval" / "summary.json", dump_json(report.summary()))
    return {"mar": report.mar, "coco_map": report.coco_map, "map_0.50": report.map_at(0.5),
            "summary": str(cfg.out / "eval" / "summary.json")}


def cmd_curves(cfg: RunConfig, args) -> dict:
    report = _report_from_input(cfg, args)
    paths = {"recall": cfg.out / "curves" / "recall.csv", "map": cfg.out / "curves" / "map.csv"}
    emit_curves(report, paths)
    return {k: str(v) for k, v in paths.items()}


def cmd_experiment(cfg: RunConfig, args) -> dict:
    summary = run_experiment(cfg, ARMS)
    summary.pop("runs")
    summary["output"] = str(cfg.out / "experiment")
    return summary


def cmd_oracle_check(cfg: RunConfig, args) -> dict:
    report = checks.oracle_check(cfg["check.samples"], cfg["check.grad_samples"], cfg["seed"],
                                 cfg["check.inject_tiebreak_fault"])
    for w in report["warnings"]:
        log.warning(w)
    atomic_write(cfg.out / "oracle_check.json", dump_json(report))
    if not report["passed"]:
        raise CommandFailed(report)
    return report


def cmd_bench(cfg: RunConfig, args) -> dict:
    reps = cfg["bench.repeats"]
    rows = checks.bench_inference(maps=cfg["bench.maps"], repeats=reps, seed=cfg["seed"])
    rows += checks.bench_nms(cfg.nms_sizes(), repeats=1, seed=cfg["seed"])
    rows += checks.bench_pipeline(seed=cfg["seed"])
    csv = "bench,method,size,seconds\n" + "".join(
        f"{r['bench']},{r['method']},{r['size']},{r['seconds']:.9f}\n" for r in rows)
    atomic_write(cfg.out / "bench.csv", csv)
    exps = {}
    for bench, method in (("infer", "fast"), ("infer", "bruteforce"), ("nms", "greedy")):
        sel = [r for r in rows if r["bench"] == bench and r["method"] == method]
        if len(sel) >= 2:
            exps[f"{bench}_{method}"] = checks.scaling_exponent([r["size"] for r in sel], [r["seconds"] for r in sel])
    atomic_write(cfg.out / "bench_exponents.json", dump_json(exps))
    return {"csv": str(cfg.out / "bench.csv"), "exponents": exps}


HANDLERS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "infer": cmd_infer,
    "pipeline": cmd_pipeline,
    "experiment": cmd_experiment,
    "eval": cmd_eval,
    "oracle-check": cmd_oracle_check,
    "bench": cmd_bench,
    "curves": cmd_curves,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="locbox", description="Grid-probability box localization experiments.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="key = value configuration file")
    parser.add_argument("--seed", type=int, help="root seed (overrides the config)")
    parser.add_argument("--out", help="output directory (overrides the config)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key; repeatable")
    parser.add_argument("--input", help="input file for infer, eval and curves")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        overrides = list(args.overrides)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        if args.out is not None:
            overrides.append(f"out={args.out}")
        cfg = RunConfig.load(args.config, overrides)
        result = HANDLERS[args.command](cfg, args)
    except CommandFailed as e:
        print(json.dumps({"error": "CheckFailed", "command": args.command, "report": e.report}, sort_keys=True))
        return 1
    except ConfigError as e:
        print(json.dumps({"error": "ConfigError", "command": args.command, "message": str(e)}, sort_keys=True))
        return 2
    except Exception as e:  # noqa: BLE001 - every failure becomes a machine-readable error
        log.debug("command failed", exc_info=True)
        print(json.dumps({"error": type(e).__name__, "command": args.command, "message": str(e)}, sort_keys=True))
        return 1
    print(json.dumps({"command": args.command, "ok": True, "result": result}, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
