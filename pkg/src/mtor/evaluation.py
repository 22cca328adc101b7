"""Detection evaluation: VOC-style AP at IoU 0.5, top-K error analysis,
and relational-graph export at ground-truth regions."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

from .boxes import iou
from .consistency import affinity_matrix
from .dataset import BoxAnnotation, DomainSample, to_chw

ERROR_TYPES = ("correct", "mislocalized", "background")


@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]
    category: int
    score: float
    image_id: str

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        x0, y0, x1, y1 = self.box
        if not (x0 <= x1 and y0 <= y1):
            raise ValueError(f"invalid box {self.box}")


@dataclass
class APResult:
    per_category: dict[int, float]
    num_gt: dict[int, int]
    skipped: list[int]

    @property
    def mAP(self) -> float:
        vals = [self.per_category[c] for c in self.per_category if c not in self.skipped]
        return float(np.mean(vals)) if vals else 0.0


@dataclass
class ErrorHistogram:
    # category -> {type: percentage}
    per_category: dict[int, dict[str, float]]
    k: dict[int, int]

    @property
    def mean(self) -> dict[str, float]:
        if not self.per_category:
            return {t: 0.0 for t in ERROR_TYPES}
        return {t: float(np.mean([h[t] for h in self.per_category.values()])) for t in ERROR_TYPES}


def _sorted(dets: Iterable[Detection]) -> list[Detection]:
    # stable: equal scores keep input order
    return sorted(dets, key=lambda d: -d.score)


def match_detections(dets: Sequence[Detection], gts: Mapping[str, Sequence[BoxAnnotation]], category: int,
                     iou_thresh: float) -> list[bool]:  # fmt: skip
    """Greedy matching in descending score order.

    Each detection takes the unmatched same-category GT in its image with the
    highest IoU (lowest index on ties); it is a true positive if that IoU
    reaches ``iou_thresh``.  Returns TP flags aligned with ``_sorted(dets)``.
    """
    used: dict[str, set[int]] = {}
    flags = []
    for d in _sorted(dets):
        best, best_j = -1.0, -1
        taken = used.setdefault(d.image_id, set())
        for j, g in enumerate(gts.get(d.image_id, ())):
            if g.category != category or j in taken:
                continue
            v = iou(d.box, g.box)
            if v > best:
                best, best_j = v, j
        if best_j >= 0 and best >= iou_thresh:
            taken.add(best_j)
            flags.append(True)
        else:
            flags.append(False)
    return flags


def ap_from_flags(tp: Sequence[bool], num_gt: int) -> float:
    """All-point interpolated AP (area under the precision envelope)."""
    if num_gt == 0 or len(tp) == 0:
        return 0.0
    tp = np.asarray(tp, dtype=np.float64)
    ctp = np.cumsum(tp)
    rec = ctp / num_gt
    prec = ctp / np.arange(1, len(tp) + 1)
    mrec = np.concatenate([[0.0], rec, [1.0]])
    mpre = np.concatenate([[0.0], prec, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def average_precision(dets: Iterable[Detection], gts: Mapping[str, Sequence[BoxAnnotation]], num_classes: int,
                      iou_thresh: float = 0.5) -> APResult:  # fmt: skip
    dets = list(dets)
    per, ngt, skipped = {}, {}, []
    for c in range(num_classes):
        n = sum(1 for boxes in gts.values() for g in boxes if g.category == c)
        ngt[c] = n
        if n == 0:
            skipped.append(c)
            per[c] = float("nan")
            continue
        dc = [d for d in dets if d.category == c]
        per[c] = ap_from_flags(match_detections(dc, gts, c, iou_thresh), n)
    return APResult(per, ngt, skipped)


def classify_error(best_iou: float) -> str:
    if best_iou >= 0.5:
        return "correct"
    if best_iou >= 0.3:
        return "mislocalized"
    return "background"


def error_analysis(dets: Iterable[Detection], gts: Mapping[str, Sequence[BoxAnnotation]],
                   num_classes: int) -> ErrorHistogram:  # fmt: skip
    """Bin the top-K detections of each class, K = its GT count.

    Missing detections (fewer than K available) count as background.
    """
    dets = list(dets)
    per, ks = {}, {}
    for c in range(num_classes):
        k = sum(1 for boxes in gts.values() for g in boxes if g.category == c)
        if k == 0:
            continue
        top = _sorted(d for d in dets if d.category == c)[:k]
        counts = dict.fromkeys(ERROR_TYPES, 0)
        for d in top:
            best = max((iou(d.box, g.box) for g in gts.get(d.image_id, ()) if g.category == c), default=0.0)
            counts[classify_error(best)] += 1
        counts["background"] += k - len(top)
        per[c] = {t: 100.0 * counts[t] / k for t in ERROR_TYPES}
        ks[c] = k
    return ErrorHistogram(per, ks)


# --------------------------------------------------------------------------
# model-facing helpers


def collect_detections(model, samples: Sequence[DomainSample], score_thresh: float = 0.01, nms: float = 0.5,
                       max_det: int = 100) -> list[Detection]:  # fmt: skip
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    for s in samples:
        b, sc, lab = model.detect(to_chw(s.image).to(dtype), score_thresh, nms, max_det)
        for box, score, c in zip(b.tolist(), sc.tolist(), lab.tolist()):
            out.append(Detection(tuple(box), int(c), min(max(float(score), 0.0), 1.0), s.id))
    return out


def ground_truth(samples: Sequence[DomainSample]) -> dict[str, list[BoxAnnotation]]:
    return {s.id: list(s.boxes) for s in samples}


def export_relational_graph(model, sample: DomainSample) -> tuple[np.ndarray, list[int]]:
    """Cosine affinity between the model's region features at the GT boxes."""
    model.eval()
    dtype = next(model.parameters()).dtype
    boxes = torch.tensor([b.box for b in sample.boxes], dtype=dtype).reshape(-1, 4)
    with torch.no_grad():
        fm = model.forward_backbone(to_chw(sample.image).to(dtype))
        feats = model.region_outputs(fm[0], boxes).features
        e = affinity_matrix(feats)
    return e.numpy(), [b.category for b in sample.boxes]


# --------------------------------------------------------------------------
# CSV surfaces


def write_ap_csv(res: APResult, categories: Sequence[str], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["category", "ap", "num_gt"])
        for c, name in enumerate(categories):
            w.writerow([name, "" if c in res.skipped else f"{100 * res.per_category[c]:.4f}", res.num_gt[c]])
        w.writerow(["mAP", f"{100 * res.mAP:.4f}", sum(res.num_gt.values())])


def read_ap_csv(path: Path) -> dict[str, float]:
    with open(path) as fh:
        return {r["category"]: float(r["ap"]) for r in csv.DictReader(fh) if r["ap"] != ""}


def write_error_csv(hist: ErrorHistogram, categories: Sequence[str], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["category", *ERROR_TYPES, "k"])
        for c, h in hist.per_category.items():
            w.writerow([categories[c], *(f"{h[t]:.4f}" for t in ERROR_TYPES), hist.k[c]])
        mean = hist.mean
        w.writerow(["mean", *(f"{mean[t]:.4f}" for t in ERROR_TYPES), sum(hist.k.values())])


def write_graph_csv(matrix: np.ndarray, labels: Sequence[int], categories: Sequence[str], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([categories[c] for c in labels])
        for row in matrix:
            w.writerow([f"{v:.6f}" for v in row])


def write_detections_csv(dets: Sequence[Detection], categories: Sequence[str], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "category", "score", "x_min", "y_min", "x_max", "y_max"])
        for d in dets:
            w.writerow([d.image_id, categories[d.category], repr(d.score), *(repr(v) for v in d.box)])


def read_detections_csv(path: Path, categories: Sequence[str]) -> list[Detection]:
    index = {n: i for i, n in enumerate(categories)}
    with open(path) as fh:
        return [
            Detection(
                (float(r["x_min"]), float(r["y_min"]), float(r["x_max"]), float(r["y_max"])),
                index[r["category"]], float(r["score"]), r["image_id"],
            )  # fmt: skip
            for r in csv.DictReader(fh)
        ]
