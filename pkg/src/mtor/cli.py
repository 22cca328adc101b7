"""Command-line runner: gen-data, train, eval, sweep, demo2d.

Relative ``output_dir`` / ``data_dir`` paths resolve against ``$MTOR_OUTPUT_ROOT``
when it is set, otherwise against the working directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import plotting
from .config import (
    LOSS_NAMES,
    ConfigError,
    ExperimentConfig,
    config_hash,
    dump_config,
    from_dict,
    load_config,
    to_dict,
)
from .dataset import DatasetFormatError, build_domains, read_categories, read_dataset, read_unlabeled, write_dataset
from .evaluation import (
    APResult,
    average_precision,
    collect_detections,
    error_analysis,
    export_relational_graph,
    ground_truth,
    write_ap_csv,
    write_detections_csv,
    write_error_csv,
    write_graph_csv,
)
from .meanteacher import Trainer, eval_model_from_checkpoint, load_checkpoint, read_metrics
from .toy2d import REGIMES, Toy2DConfig, run_regimes

log = logging.getLogger("mtor")

ENV_OUTPUT_ROOT = "MTOR_OUTPUT_ROOT"
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_RUNTIME = 4

VARIANTS = ("source_only", "mtor", "train_on_target")
SWEEP_PARAMS = {"lambda": "train.lam", "alpha": "train.alpha"}
DEFAULT_SWEEPS = {"lambda": (0.1, 0.5, 1.0, 2.0, 5.0), "alpha": (0.92, 0.98, 0.99, 0.999, 0.9999)}
TOY_TITLES = {
    "none": "no regularization",
    "augmented": "augmented source",
    "mean_teacher": "mean teacher",
    "mt_inter": "MT + inter-graph",
    "mt_intra": "MT + intra-graph",
}


class MissingInput(FileNotFoundError):
    pass


def output_root() -> Path:
    return Path(os.environ.get(ENV_OUTPUT_ROOT, "."))


def resolve(p: str | Path) -> Path:
    p = Path(p)
    return p if p.is_absolute() else output_root() / p


# --------------------------------------------------------------------------
# run manifest


_TRANSITIONS = {"pending": {"running"}, "running": {"done", "failed"}, "done": set(), "failed": set()}


@dataclass
class RunManifest:
    run_id: str
    config_hash: str
    build: str
    variant: str = ""
    status: str = "pending"
    checkpoints: list[str] = field(default_factory=list)
    metrics: list[str] = field(default_factory=list)
    # append-only (time, status, note) records
    events: list[list] = field(default_factory=list)

    def transition(self, status: str, note: str = "") -> None:
        if status not in _TRANSITIONS[self.status]:
            raise RuntimeError(f"illegal manifest transition {self.status} -> {status}")
        self.status = status
        self.events.append([time.time(), status, note])

    def save(self, run_dir: Path) -> None:
        tmp = run_dir / "manifest.json.tmp"
        tmp.write_text(json.dumps(asdict(self), indent=2))
        tmp.replace(run_dir / "manifest.json")

    @classmethod
    def load(cls, run_dir: Path) -> "RunManifest":
        return cls(**json.loads((run_dir / "manifest.json").read_text()))


def build_id() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"], capture_output=True, text=True, timeout=5,
            cwd=Path(__file__).resolve().parent,
        )  # fmt: skip
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


# --------------------------------------------------------------------------
# gen-data


def _generation_key(cfg: ExperimentConfig) -> str:
    # augmentation settings do not change the stored images
    d = to_dict(cfg.dataset)
    d.pop("aug")
    return config_hash(d)


def cmd_gen_data(cfg: ExperimentConfig, force: bool = False) -> Path:
    root = resolve(cfg.data_dir)
    stamp = root / "dataset.json"
    key = _generation_key(cfg)
    if stamp.exists():
        old = json.loads(stamp.read_text())
        if old.get("key") == key:
            print(f"dataset at {root} is up-to-date")
            return root
        if not force:
            raise ConfigError(f"{root} holds a different dataset (key {old.get('key')}); pass --force to overwrite")
    elif root.exists() and any(root.iterdir()) and not force:
        raise ConfigError(f"{root} exists and is not an mtor dataset; pass --force to overwrite")
    for split in ("source", "target", "target_test"):
        shutil.rmtree(root / split, ignore_errors=True)
    splits = build_domains(cfg.dataset)
    for name, samples in splits.items():
        if samples or name != "target_test":
            write_dataset(samples, root / name, cfg.dataset.categories)
    counts = {k: len(v) for k, v in splits.items()}
    stamp.write_text(json.dumps({"key": key, "dataset": to_dict(cfg.dataset), "counts": counts}, indent=2))
    print(f"wrote {counts} to {root}")
    return root


def _check_dataset(cfg: ExperimentConfig) -> Path:
    root = resolve(cfg.data_dir)
    if not (root / "source" / "annotations.json").exists():
        raise MissingInput(f"no dataset at {root}; run gen-data first")
    stamp = root / "dataset.json"
    if stamp.exists() and json.loads(stamp.read_text()).get("key") != _generation_key(cfg):
        raise ConfigError(f"dataset at {root} was generated from a different dataset config")
    return root


# --------------------------------------------------------------------------
# train


def parse_losses(text: str) -> tuple[str, ...]:
    names = tuple(s.strip() for s in text.split(",") if s.strip())
    bad = [n for n in names if n not in LOSS_NAMES]
    if bad or not names:
        raise ConfigError(f"--losses expects a subset of {','.join(LOSS_NAMES)}, got {text!r}")
    return names


def cmd_train(cfg: ExperimentConfig, variant: str = "mtor", init_from: Path | None = None,
              resume: bool = False) -> Path:  # fmt: skip
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    data = _check_dataset(cfg)
    if init_from is not None and not Path(init_from).exists():
        raise MissingInput(f"init checkpoint {init_from} not found")
    run_dir = resolve(cfg.output_dir) / cfg.run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, run_dir / "config.yaml")
    manifest = RunManifest(cfg.run_id, config_hash(cfg), build_id(), variant)
    if (run_dir / "manifest.json").exists():
        # each attempt restarts at pending; earlier events are kept
        manifest.events = RunManifest.load(run_dir).events
    manifest.events.append([time.time(), "pending", "resume" if resume else ""])
    manifest.save(run_dir)
    manifest.transition("running")
    manifest.save(run_dir)
    try:
        if variant == "train_on_target":
            # oracle upper bound: supervised training on the labeled target split
            source, target, trainer_variant = read_dataset(data / "target"), [], "source_only"
        else:
            source = read_dataset(data / "source")
            target = read_unlabeled(data / "target") if variant == "mtor" else []
            trainer_variant = variant
        final = Trainer(cfg, run_dir, trainer_variant, init_from).run(source, target, resume=resume)
    except BaseException as exc:
        manifest.transition("failed", repr(exc))
        manifest.save(run_dir)
        raise
    manifest.checkpoints = sorted(str(p.relative_to(run_dir)) for p in (run_dir / "checkpoints").glob("*.pt"))
    manifest.metrics = ["metrics.jsonl"]
    manifest.transition("done")
    manifest.save(run_dir)
    print(f"run {cfg.run_id} done: {final}")
    return run_dir


# --------------------------------------------------------------------------
# eval


def evaluate_run(run_dir: Path, split: str = "target", weights: str | None = None, plots: bool = True) -> APResult:
    run_dir = Path(run_dir)
    ckpt = run_dir / "checkpoints" / "final.pt"
    if not ckpt.exists():
        raise MissingInput(f"no final checkpoint in {run_dir}")
    cfg = from_dict(ExperimentConfig, json.loads(json.dumps(load_checkpoint(ckpt)["config"])))
    data = resolve(cfg.data_dir) / split
    if not (data / "annotations.json").exists():
        raise MissingInput(f"split {split!r} not found under {data.parent}")
    samples = read_dataset(data)
    categories = read_categories(data)
    model = eval_model_from_checkpoint(load_checkpoint(ckpt), weights or cfg.eval.weights)
    e = cfg.eval
    dets = collect_detections(model, samples, e.score_thresh, e.nms, e.max_detections)
    gts = ground_truth(samples)
    ap = average_precision(dets, gts, len(categories), e.iou_thresh)
    hist = error_analysis(dets, gts, len(categories))
    out = run_dir / "eval" / split
    out.mkdir(parents=True, exist_ok=True)
    write_detections_csv(dets, categories, out / "detections.csv")
    write_ap_csv(ap, categories, out / "ap.csv")
    write_error_csv(hist, categories, out / "errors.csv")
    # the graph heatmap uses the sample with the most ground-truth boxes
    richest = samples[int(np.argmax([len(s.boxes) for s in samples]))]
    matrix, labels = export_relational_graph(model, richest)
    write_graph_csv(matrix, labels, categories, out / "graph.csv")
    if plots:
        plotting.plot_map_bars({cfg.run_id: ap}, categories, out / "map.png")
        plotting.plot_error_pies(hist, categories, out / "errors.png")
        plotting.plot_affinity(matrix, labels, categories, out / "graph.png")
    print(f"{cfg.run_id} {split} mAP@{e.iou_thresh}: {100 * ap.mAP:.2f}")
    return ap


# --------------------------------------------------------------------------
# sweep


def _sweep_one(args) -> tuple[float, float]:
    cfg_dict, variant, init_from, value = args
    torch.set_num_threads(1)
    cfg = from_dict(ExperimentConfig, cfg_dict)
    run_dir = cmd_train(cfg, variant, init_from)
    return value, 100 * evaluate_run(run_dir, "target", plots=False).mAP


def cmd_sweep(cfg: ExperimentConfig, param: str, values: list[float], parallel: int = 1,
              init_from: Path | None = None) -> Path:  # fmt: skip
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"unknown sweep parameter {param!r}; choose from {sorted(SWEEP_PARAMS)}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    sweep_id = cfg.run_id
    root = resolve(cfg.output_dir) / sweep_id
    root.mkdir(parents=True, exist_ok=True)
    if init_from is None:
        # all values adapt from one shared source model
        pre = replace(cfg, run_id=f"{sweep_id}/pretrain", output_dir=str(resolve(cfg.output_dir)))
        init_from = cmd_train(pre, "source_only") / "checkpoints" / "final.pt"
    jobs = []
    for v in values:
        c = from_dict(ExperimentConfig, _override(to_dict(cfg), SWEEP_PARAMS[param], v))
        c.validate()
        c = replace(c, run_id=f"{sweep_id}/{param}_{v:g}", output_dir=str(resolve(cfg.output_dir)))
        jobs.append((to_dict(c), "mtor", init_from, v))
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            rows = list(pool.map(_sweep_one, jobs))
    else:
        rows = [_sweep_one(j) for j in jobs]
    with open(root / f"sweep_{param}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([param, "target_map"])
        for v, m in rows:
            w.writerow([repr(v), f"{m:.4f}"])
    plotting.plot_sweep(param, [v for v, _ in rows], [m for _, m in rows], root / f"sweep_{param}.png")
    return root


def _override(data: dict, key: str, value) -> dict:
    node = data
    parts = key.split(".")
    for p in parts[:-1]:
        node = node[p]
    node[parts[-1]] = value
    return data


# --------------------------------------------------------------------------
# demo2d


def cmd_demo2d(out: Path, seeds: list[int], steps: int | None = None) -> list[dict]:
    out.mkdir(parents=True, exist_ok=True)
    summary = []
    for seed in seeds:
        base = Toy2DConfig() if steps is None else Toy2DConfig(steps=steps, warmup=min(Toy2DConfig.warmup, steps // 3))
        res = run_regimes(seed, base)
        plotting.plot_toy_rasters(res["task"], res["rasters"], out / f"boundaries_seed{seed}.png", TOY_TITLES)
        for regime, (xx, yy, prob) in res["rasters"].items():
            np.savez_compressed(out / f"raster_{regime}_seed{seed}.npz", xx=xx, yy=yy, prob=prob)
        hist = res["results"]["mean_teacher"].history
        marks = [h for h in hist if "unlabeled_consistency" in h]
        start = next(h for h in marks if h["step"] == base.warmup - 1)["unlabeled_consistency"]
        end = marks[-1]["unlabeled_consistency"]
        summary.append({"seed": seed, "consistency_start": start, "consistency_end": end, "reduced": end < start})
    with open(out / "consistency.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["seed", "consistency_start", "consistency_end", "reduced"])
        w.writeheader()
        w.writerows(summary)
    for s in summary:
        print(f"seed {s['seed']}: consistency {s['consistency_start']:.4f} -> {s['consistency_end']:.4f}")
    return summary


# --------------------------------------------------------------------------
# entry point


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mtor", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", action="append", default=[], help="YAML layer; later files win")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted override")

    g = sub.add_parser("gen-data", help="generate source/target splits")
    common(g)
    g.add_argument("--force", action="store_true")

    t = sub.add_parser("train", help="pre-train and optionally adapt")
    common(t)
    t.add_argument("--variant", choices=VARIANTS, default="mtor")
    t.add_argument("--losses", default=None, help="comma list from rcl,egl,agl")
    t.add_argument("--run-id", default=None)
    t.add_argument("--init-from", type=Path, default=None, help="checkpoint to start adaptation from")
    t.add_argument("--resume", action="store_true")

    e = sub.add_parser("eval", help="AP table, error pies, graph heatmap")
    e.add_argument("run", type=Path, help="run directory")
    e.add_argument("--split", default="target")
    e.add_argument("--weights", choices=("teacher", "student"), default=None)

    s = sub.add_parser("sweep", help="lambda or alpha sensitivity")
    common(s)
    s.add_argument("param", choices=sorted(SWEEP_PARAMS))
    s.add_argument("--values", default=None, help="comma list; defaults to the standard grid")
    s.add_argument("--parallel", type=int, default=1)
    s.add_argument("--run-id", default=None)
    s.add_argument("--init-from", type=Path, default=None)

    d = sub.add_parser("demo2d", help="two-moons toy")
    d.add_argument("--out", type=Path, default=None)
    d.add_argument("--seeds", default="0,1,2")
    d.add_argument("--steps", type=int, default=None)
    return p


def _load(args) -> ExperimentConfig:
    overrides = list(args.set)
    if getattr(args, "losses", None):
        overrides.append(f"train.losses=[{','.join(parse_losses(args.losses))}]")
    if getattr(args, "run_id", None):
        overrides.append(f"run_id={args.run_id}")
    return load_config(args.config, overrides)


def main(argv: list[str] | None = None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        if args.command == "gen-data":
            cmd_gen_data(_load(args), args.force)
        elif args.command == "train":
            cmd_train(_load(args), args.variant, args.init_from, args.resume)
        elif args.command == "eval":
            evaluate_run(resolve(args.run), args.split, args.weights)
        elif args.command == "sweep":
            cfg = _load(args)
            if args.run_id is None:
                cfg = replace(cfg, run_id=f"sweep_{args.param}")
            try:
                values = [float(v) for v in args.values.split(",")] if args.values else list(DEFAULT_SWEEPS[args.param])
            except ValueError as exc:
                raise ConfigError(f"bad --values: {exc}") from exc
            cmd_sweep(cfg, args.param, values, args.parallel, args.init_from)
        elif args.command == "demo2d":
            out = args.out or resolve("runs/demo2d")
            cmd_demo2d(out, [int(s) for s in args.seeds.split(",")], args.steps)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingInput, FileNotFoundError, DatasetFormatError) as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except Exception as exc:  # noqa: BLE001
        log.exception("runtime failure")
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
