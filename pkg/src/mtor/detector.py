"""A small two-stage detector: base CNN -> RPN -> ROI pooling -> RCNN head.

Everything is plain differentiable torch so the same module runs in
float32 for training and float64 for gradient checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import boxes as bx
from .config import DetectorConfig

RCNN_BOX_WEIGHTS = (10.0, 10.0, 5.0, 5.0)
STRIDE = 8


@dataclass
class RegionPredictions:
    dist: torch.Tensor  # n x (C+1), index 0 is background
    confidence: torch.Tensor  # n, max foreground probability
    pseudo_label: torch.Tensor  # n, argmax foreground index in [0, C)


@dataclass
class RegionOutputs:
    """Per-region outputs of one branch on a shared proposal set."""

    boxes: torch.Tensor
    features: torch.Tensor  # vectors that feed the relational graph
    logits: torch.Tensor
    preds: RegionPredictions


@dataclass
class Proposals:
    boxes: torch.Tensor  # n x 4, detached
    objectness: torch.Tensor  # n, sigmoid scores, descending


def predictions_from_logits(logits: torch.Tensor) -> RegionPredictions:
    dist = torch.softmax(logits, dim=-1)
    return predictions_from_dist(dist)


def predictions_from_dist(dist: torch.Tensor) -> RegionPredictions:
    fg = dist[:, 1:]
    q = fg.max(dim=1).values if fg.shape[0] else fg.new_zeros(0)
    # lowest index among maxima
    c = fg.shape[1]
    idx = torch.where(fg == q[:, None], torch.arange(c).expand_as(fg), torch.full_like(fg, c, dtype=torch.long))
    label = idx.min(dim=1).values if fg.shape[0] else torch.zeros(0, dtype=torch.long)
    return RegionPredictions(dist, q, label)


def make_anchors(feat_h: int, feat_w: int, stride: int, sizes, ratios) -> torch.Tensor:
    """Anchors in (row, col, anchor) order, corner form, image coordinates."""
    base = []
    for s in sizes:
        for r in ratios:
            # r = height / width at constant area s*s
            w = s / r**0.5
            h = s * r**0.5
            base.append([-w / 2, -h / 2, w / 2, h / 2])
    base = torch.tensor(base, dtype=torch.float64)
    ys = (torch.arange(feat_h, dtype=torch.float64) + 0.5) * stride
    xs = (torch.arange(feat_w, dtype=torch.float64) + 0.5) * stride
    cy, cx = torch.meshgrid(ys, xs, indexing="ij")
    centers = torch.stack([cx, cy, cx, cy], dim=-1).reshape(-1, 1, 4)
    return (centers + base[None]).reshape(-1, 4)


def project_to_cells(boxes: torch.Tensor, stride: int, feat_h: int, feat_w: int) -> torch.Tensor:
    """Nearest-cell projection; every box covers at least one cell."""
    x0 = torch.floor(boxes[:, 0] / stride).long().clamp(0, feat_w - 1)
    y0 = torch.floor(boxes[:, 1] / stride).long().clamp(0, feat_h - 1)
    x1 = torch.ceil(boxes[:, 2] / stride).long().clamp(max=feat_w)
    y1 = torch.ceil(boxes[:, 3] / stride).long().clamp(max=feat_h)
    x1 = torch.maximum(x1, x0 + 1)
    y1 = torch.maximum(y1, y0 + 1)
    return torch.stack([x0, y0, x1, y1], dim=1)


def roi_average_pool(fm: torch.Tensor, boxes: torch.Tensor, stride: int, grid: int) -> torch.Tensor:
    """Average-pool ``fm`` (d x h x w) over a grid x grid partition of each box.

    Bin edges follow adaptive pooling: bin i spans cells
    [floor(i L / g), ceil((i + 1) L / g)), so small boxes reuse cells.
    Returns n x (grid * grid * d).
    """
    d, h, w = fm.shape
    n = boxes.shape[0]
    if n == 0:
        return fm.new_zeros((0, grid * grid * d))
    cells = project_to_cells(boxes, stride, h, w)
    integral = F.pad(fm.cumsum(1).cumsum(2), (1, 0, 1, 0))
    i = torch.arange(grid)

    def edges(lo, hi):
        length = (hi - lo)[:, None]
        start = lo[:, None] + (i[None] * length) // grid
        end = lo[:, None] - ((-(i[None] + 1) * length) // grid)
        return start, end

    xs, xe = edges(cells[:, 0], cells[:, 2])
    ys, ye = edges(cells[:, 1], cells[:, 3])
    Y0, Y1 = ys[:, :, None], ye[:, :, None]
    X0, X1 = xs[:, None, :], xe[:, None, :]
    total = integral[:, Y1, X1] - integral[:, Y0, X1] - integral[:, Y1, X0] + integral[:, Y0, X0]
    count = ((Y1 - Y0) * (X1 - X0)).to(fm.dtype)
    pooled = total / count  # d x n x g x g
    return pooled.permute(1, 2, 3, 0).reshape(n, grid * grid * d)


def smooth_l1(x: torch.Tensor, y: torch.Tensor, beta: float) -> torch.Tensor:
    return F.smooth_l1_loss(x, y, beta=beta, reduction="sum")


def sample_labels(labels: torch.Tensor, batch: int, pos_fraction: float, generator: torch.Generator | None) -> torch.Tensor:
    """Subsample positives (label > 0) and negatives (label == 0); others become -1."""
    out = labels.clone()
    pos = torch.nonzero(labels > 0).flatten()
    neg = torch.nonzero(labels == 0).flatten()
    n_pos = min(pos.numel(), int(batch * pos_fraction))
    n_neg = min(neg.numel(), batch - n_pos)
    if pos.numel() > n_pos:
        drop = pos[torch.randperm(pos.numel(), generator=generator)[n_pos:]]
        out[drop] = -1
    if neg.numel() > n_neg:
        drop = neg[torch.randperm(neg.numel(), generator=generator)[n_neg:]]
        out[drop] = -1
    return out


def rpn_targets(anchors: torch.Tensor, gt: torch.Tensor, pos_iou: float, neg_iou: float):
    """Label anchors 1 / 0 / -1 and return the matched GT index per anchor."""
    n = anchors.shape[0]
    labels = torch.full((n,), -1, dtype=torch.long)
    if gt.shape[0] == 0:
        labels[:] = 0
        return labels, torch.zeros(n, dtype=torch.long)
    ious = bx.pairwise_iou(anchors, gt)
    best, matched = ious.max(dim=1)
    labels[best < neg_iou] = 0
    labels[best >= pos_iou] = 1
    # each GT keeps its best anchors as positives
    gt_best = ious.max(dim=0).values
    is_best = (ious == gt_best[None]) & (gt_best[None] > 0)
    labels[is_best.any(dim=1)] = 1
    return labels, matched


def rpn_loss(logits: torch.Tensor, deltas: torch.Tensor, labels: torch.Tensor, reg_targets: torch.Tensor):
    """Objectness BCE over sampled anchors and smooth-L1 over positives.

    ``labels`` uses -1 for anchors left out of the sample.
    """
    sampled = labels >= 0
    n = int(sampled.sum())
    if n == 0:
        zero = logits.sum() * 0.0
        return zero, zero
    cls = F.binary_cross_entropy_with_logits(logits[sampled], (labels[sampled] > 0).to(logits.dtype))
    pos = labels > 0
    reg = smooth_l1(deltas[pos], reg_targets[pos], beta=1.0 / 9) / n
    return cls, reg


def rcnn_targets(proposals: torch.Tensor, gt: torch.Tensor, gt_labels: torch.Tensor, pos_iou: float):
    """Class targets (0 = background, c + 1 = foreground c) and matched GT index."""
    n = proposals.shape[0]
    if gt.shape[0] == 0:
        return torch.zeros(n, dtype=torch.long), torch.zeros(n, dtype=torch.long)
    best, matched = bx.pairwise_iou(proposals, gt).max(dim=1)
    labels = torch.where(best >= pos_iou, gt_labels[matched] + 1, torch.zeros_like(matched))
    return labels, matched


def rcnn_loss(logits: torch.Tensor, deltas: torch.Tensor, labels: torch.Tensor, reg_targets: torch.Tensor):
    n = labels.shape[0]
    if n == 0:
        zero = logits.sum() * 0.0
        return zero, zero
    cls = F.cross_entropy(logits, labels)
    pos = labels > 0
    reg = smooth_l1(deltas[pos], reg_targets[pos], beta=1.0) / n
    return cls, reg


class Detector(nn.Module):
    def __init__(self, cfg: DetectorConfig, num_classes: int, image_size: int = 128):
        super().__init__()
        if image_size % STRIDE:
            raise ValueError(f"image_size must be a multiple of {STRIDE}")
        self.cfg = cfg
        self.num_classes = num_classes
        self.image_size = image_size
        self.stride = STRIDE
        w = cfg.widths
        self.backbone = nn.Sequential(
            nn.Conv2d(3, w[0], 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(w[0], w[1], 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(w[1], w[2], 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(w[2], w[3], 3, padding=1), nn.ReLU(),
        )  # fmt: skip
        d = w[3]
        self.num_anchors = len(cfg.anchor_sizes) * len(cfg.aspect_ratios)
        self.rpn_conv = nn.Conv2d(d, d, 3, padding=1)
        self.rpn_cls = nn.Conv2d(d, self.num_anchors, 1)
        self.rpn_reg = nn.Conv2d(d, 4 * self.num_anchors, 1)
        g = cfg.pool_grid
        self.fc1 = nn.Linear(g * g * d, cfg.hidden)
        self.fc2 = nn.Linear(cfg.hidden, cfg.hidden)
        self.cls_score = nn.Linear(cfg.hidden, num_classes + 1)
        self.bbox_pred = nn.Linear(cfg.hidden, 4)
        for m in (self.rpn_cls, self.rpn_reg, self.cls_score):
            nn.init.normal_(m.weight, std=0.01)
            nn.init.zeros_(m.bias)
        nn.init.normal_(self.bbox_pred.weight, std=0.001)
        nn.init.zeros_(self.bbox_pred.bias)
        fh = image_size // STRIDE
        self.register_buffer(
            "anchors", make_anchors(fh, fh, STRIDE, cfg.anchor_sizes, cfg.aspect_ratios).float(), persistent=False
        )

    def arch(self) -> dict:
        return {
            "widths": list(self.cfg.widths),
            "anchor_sizes": list(self.cfg.anchor_sizes),
            "aspect_ratios": list(self.cfg.aspect_ratios),
            "pool_grid": self.cfg.pool_grid,
            "hidden": self.cfg.hidden,
            "num_classes": self.num_classes,
            "image_size": self.image_size,
        }

    # ---- stages ---------------------------------------------------------

    def forward_backbone(self, images: torch.Tensor) -> torch.Tensor:
        """B x 3 x H x W in [0, 1] -> B x d x H/8 x W/8."""
        if images.dim() == 3:
            images = images[None]
        if tuple(images.shape[-2:]) != (self.image_size, self.image_size):
            raise ValueError(f"expected {self.image_size}x{self.image_size} input, got {tuple(images.shape[-2:])}")
        return self.backbone((images - 0.5) / 0.25)

    def rpn_head(self, fm: torch.Tensor):
        b = fm.shape[0]
        t = F.relu(self.rpn_conv(fm))
        logits = self.rpn_cls(t).permute(0, 2, 3, 1).reshape(b, -1)
        deltas = self.rpn_reg(t).permute(0, 2, 3, 1).reshape(b, -1, 4)
        return logits, deltas

    def rpn_propose(self, logits: torch.Tensor, deltas: torch.Tensor, cap: int) -> Proposals:
        """Proposals for one image from its RPN outputs (1-D logits, N x 4 deltas)."""
        with torch.no_grad():
            anchors = self.anchors.to(deltas.dtype)
            scores = torch.sigmoid(logits)
            k = min(self.cfg.pre_nms_top_n, scores.numel())
            top = torch.topk(scores, k).indices
            boxes = bx.clip_boxes(bx.decode(anchors[top], deltas[top]), self.image_size, self.image_size)
            scores = scores[top]
            ok = ((boxes[:, 2] - boxes[:, 0]) >= 1) & ((boxes[:, 3] - boxes[:, 1]) >= 1)
            boxes, scores = boxes[ok], scores[ok]
            keep = bx.nms(boxes, scores, self.cfg.rpn_nms)[:cap]
            return Proposals(boxes[keep], scores[keep])

    def roi_extract(self, fm: torch.Tensor, boxes: torch.Tensor) -> torch.Tensor:
        return roi_average_pool(fm, boxes.to(fm.dtype), self.stride, self.cfg.pool_grid)

    def rcnn_forward(self, pooled: torch.Tensor):
        hidden = F.relu(self.fc2(F.relu(self.fc1(pooled))))
        return self.cls_score(hidden), self.bbox_pred(hidden), hidden

    def rcnn_classify(self, pooled: torch.Tensor) -> RegionPredictions:
        logits, _, _ = self.rcnn_forward(pooled)
        return predictions_from_logits(logits)

    def region_outputs(self, fm: torch.Tensor, boxes: torch.Tensor) -> RegionOutputs:
        """Pool at ``boxes`` on a single feature map (d x h x w) and classify."""
        pooled = self.roi_extract(fm, boxes)
        logits, _, hidden = self.rcnn_forward(pooled)
        feats = pooled if self.cfg.relation_feature == "pooled" else hidden
        return RegionOutputs(boxes, feats, logits, predictions_from_logits(logits))

    # ---- training -------------------------------------------------------

    def supervised_loss(self, image: torch.Tensor, gt_boxes: torch.Tensor, gt_labels: torch.Tensor, generator=None):
        """Faster R-CNN loss on one labeled image; returns (total, breakdown)."""
        cfg = self.cfg
        fm = self.forward_backbone(image)
        logits, deltas = self.rpn_head(fm)
        logits, deltas = logits[0], deltas[0]
        anchors = self.anchors.to(deltas.dtype)
        gt_boxes = gt_boxes.to(deltas.dtype)

        labels, matched = rpn_targets(anchors, gt_boxes, cfg.rpn_pos_iou, cfg.rpn_neg_iou)
        labels = sample_labels(labels, cfg.rpn_batch, cfg.rpn_pos_fraction, generator)
        reg_t = torch.zeros_like(deltas)
        pos = labels > 0
        if pos.any():
            reg_t[pos] = bx.encode(anchors[pos], gt_boxes[matched[pos]])
        rpn_cls, rpn_reg = rpn_loss(logits, deltas, labels, reg_t)

        props = self.rpn_propose(logits.detach(), deltas.detach(), cfg.proposals_train).boxes
        props = torch.cat([props, gt_boxes], dim=0)
        r_labels, r_matched = rcnn_targets(props, gt_boxes, gt_labels, cfg.rcnn_pos_iou)
        keep = sample_labels(r_labels, cfg.rcnn_batch, cfg.rcnn_pos_fraction, generator) >= 0
        props, r_labels, r_matched = props[keep], r_labels[keep], r_matched[keep]
        pooled = self.roi_extract(fm[0], props)
        cls_logits, box_deltas, _ = self.rcnn_forward(pooled)
        r_reg_t = torch.zeros_like(box_deltas)
        fg = r_labels > 0
        if fg.any():
            r_reg_t[fg] = bx.encode(props[fg], gt_boxes[r_matched[fg]], RCNN_BOX_WEIGHTS)
        rcnn_cls, rcnn_reg = rcnn_loss(cls_logits, box_deltas, r_labels, r_reg_t)

        parts = {"rpn_cls": rpn_cls, "rpn_reg": rpn_reg, "rcnn_cls": rcnn_cls, "rcnn_reg": rcnn_reg}
        return rpn_cls + rpn_reg + rcnn_cls + rcnn_reg, parts

    # ---- inference ------------------------------------------------------

    @torch.no_grad()
    def detect(self, image: torch.Tensor, score_thresh: float = 0.01, nms_thresh: float = 0.5, max_det: int = 100):
        """Returns (boxes, scores, labels) with labels as foreground indices."""
        fm = self.forward_backbone(image)
        logits, deltas = self.rpn_head(fm)
        props = self.rpn_propose(logits[0], deltas[0], self.cfg.proposals_eval).boxes
        if props.shape[0] == 0:
            return props, props.new_zeros(0), torch.zeros(0, dtype=torch.long)
        cls_logits, box_deltas, _ = self.rcnn_forward(self.roi_extract(fm[0], props))
        probs = torch.softmax(cls_logits, dim=-1)
        refined = bx.clip_boxes(bx.decode(props, box_deltas, RCNN_BOX_WEIGHTS), self.image_size, self.image_size)
        out_b, out_s, out_l = [], [], []
        for c in range(self.num_classes):
            s = probs[:, c + 1]
            ok = s > score_thresh
            if not ok.any():
                continue
            b, s = refined[ok], s[ok]
            keep = bx.nms(b, s, nms_thresh)
            out_b.append(b[keep])
            out_s.append(s[keep])
            out_l.append(torch.full((keep.numel(),), c, dtype=torch.long))
        if not out_b:
            return props.new_zeros((0, 4)), props.new_zeros(0), torch.zeros(0, dtype=torch.long)
        b, s, lab = torch.cat(out_b), torch.cat(out_s), torch.cat(out_l)
        order = torch.sort(s, descending=True, stable=True).indices[:max_det]
        return b[order], s[order], lab[order]


def flat_view(model: nn.Module) -> torch.Tensor:
    return torch.nn.utils.parameters_to_vector(model.parameters()).detach().clone()


def load_flat_view(model: nn.Module, vec: torch.Tensor) -> None:
    with torch.no_grad():
        torch.nn.utils.vector_to_parameters(vec.to(next(model.parameters()).dtype), model.parameters())
