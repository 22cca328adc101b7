"""Desk-scale transfer protocol shared by the scripts and the acceptance suite.

Per seed: one source-only pre-training run, then each adaptation variant
starts from that checkpoint.  Source-only is evaluated from its student;
adapted variants use ``eval.weights`` (teacher by default).
"""

from __future__ import annotations

import csv
import json
import statistics
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

from .config import ExperimentConfig, load_config
from .dataset import build_domains
from .evaluation import average_precision, collect_detections, ground_truth
from .meanteacher import Trainer, eval_model_from_checkpoint, load_checkpoint

# variant name -> enabled consistency terms (None = no adaptation)
TRANSFER_VARIANTS = {
    "source_only": None,
    "mtor_r": ("rcl",),
    "mtor_re": ("rcl", "egl"),
    "mtor_ra": ("rcl", "agl"),
    "mtor_full": ("rcl", "egl", "agl"),
}


@dataclass
class RunResult:
    seed: int
    variant: str
    target_map: float
    seconds: float
    extra: dict = field(default_factory=dict)


def evaluate_checkpoint(path: Path, samples, weights: str) -> float:
    blob = load_checkpoint(path)
    cfg = ExperimentConfig()
    model = eval_model_from_checkpoint(blob, weights)
    e = cfg.eval
    dets = collect_detections(model, samples, e.score_thresh, e.nms, e.max_detections)
    return 100 * average_precision(dets, ground_truth(samples), model.num_classes, e.iou_thresh).mAP


def transfer_seed(seed: int, out: Path, variants: Sequence[str], overrides: Sequence[str] = (),
                  config_paths: Sequence[str] = ()) -> list[RunResult]:  # fmt: skip
    cfg = load_config(list(config_paths), [*overrides, f"train.seed={seed}"])
    domains = build_domains(cfg.dataset)
    source, target_eval = domains["source"], domains["target"]
    target = [s.unlabeled() for s in target_eval]
    results = []
    t0 = time.perf_counter()
    pre = Trainer(replace(cfg, run_id="source_only"), out / f"seed{seed}" / "source_only", "source_only")
    pre_ckpt = pre.run(source)
    pre_secs = time.perf_counter() - t0
    for v in variants:
        losses = TRANSFER_VARIANTS[v]
        if losses is None:
            results.append(RunResult(seed, v, evaluate_checkpoint(pre_ckpt, target_eval, "student"), pre_secs))
            continue
        t1 = time.perf_counter()
        c = replace(cfg, run_id=v, train=replace(cfg.train, losses=losses))
        final = Trainer(c, out / f"seed{seed}" / v, "mtor", init_from=pre_ckpt).run(source, target)
        secs = pre_secs + time.perf_counter() - t1
        results.append(RunResult(seed, v, evaluate_checkpoint(final, target_eval, cfg.eval.weights), secs))
    return results


def transfer_experiment(out: Path, seeds: Sequence[int] = (0, 1, 2),
                        variants: Sequence[str] = ("source_only", "mtor_r", "mtor_full"),
                        overrides: Sequence[str] = (), config_paths: Sequence[str] = ()) -> dict:  # fmt: skip
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rows: list[RunResult] = []
    for s in seeds:
        rows.extend(transfer_seed(s, out, variants, overrides, config_paths))
    medians = {v: statistics.median(r.target_map for r in rows if r.variant == v) for v in variants}
    with open(out / "transfer.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "variant", "target_map", "seconds"])
        for r in rows:
            w.writerow([r.seed, r.variant, f"{r.target_map:.4f}", f"{r.seconds:.1f}"])
    summary = {"medians": medians, "runs": [r.__dict__ for r in rows], "overrides": list(overrides)}
    (out / "transfer.json").write_text(json.dumps(summary, indent=2))
    return summary
