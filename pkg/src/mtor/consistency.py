"""Region-level and graph-structured consistency between teacher and student.

All teacher-side tensors are detached on entry, so gradients reach the
student only.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .config import LOSS_NAMES
from .detector import RegionOutputs


@dataclass
class ConsistencyBreakdown:
    rcl: torch.Tensor
    egl: torch.Tensor
    agl: torch.Tensor
    surviving_regions: int
    zero_norm_features: int = 0

    def total(self) -> torch.Tensor:
        return self.rcl + self.egl + self.agl

    def as_floats(self) -> dict[str, float]:
        return {"rcl": self.rcl.item(), "egl": self.egl.item(), "agl": self.agl.item()}


def confidence_filter(confidence: torch.Tensor, eps: float) -> torch.Tensor:
    """Indices whose teacher foreground confidence is at least ``eps``, in order."""
    return torch.nonzero(confidence >= eps).flatten()


def region_consistency_loss(teacher_dists: torch.Tensor, student_dists: torch.Tensor) -> torch.Tensor:
    """Mean over regions of the squared L2 distance between class distributions."""
    if teacher_dists.shape != student_dists.shape:
        raise ValueError(f"shape mismatch {tuple(teacher_dists.shape)} vs {tuple(student_dists.shape)}")
    n = student_dists.shape[0]
    if n == 0:
        return student_dists.new_zeros(())
    return ((teacher_dists.detach() - student_dists) ** 2).sum() / n


def _safe_norm(x: torch.Tensor) -> torch.Tensor:
    sq = (x * x).sum(dim=1, keepdim=True)
    # sqrt is evaluated away from 0 so zero rows produce finite gradients
    return torch.where(sq > 0, torch.sqrt(torch.where(sq > 0, sq, torch.ones_like(sq))), torch.ones_like(sq))


def affinity_matrix(features: torch.Tensor) -> torch.Tensor:
    """Pairwise cosine similarities; zero-norm rows are orthogonal to all others."""
    n = features.shape[0]
    unit = features / _safe_norm(features)
    e = (unit @ unit.T).clamp(-1.0, 1.0)
    eye = torch.eye(n, dtype=e.dtype, device=e.device, requires_grad=False)
    return e * (1 - eye) + eye


def count_zero_norm(features: torch.Tensor) -> int:
    return int(((features * features).sum(dim=1) == 0).sum())


def inter_graph_loss(e_student: torch.Tensor, e_teacher: torch.Tensor) -> torch.Tensor:
    if e_student.shape != e_teacher.shape or e_student.dim() != 2 or e_student.shape[0] != e_student.shape[1]:
        raise ValueError(f"need two equal square matrices, got {tuple(e_student.shape)} and {tuple(e_teacher.shape)}")
    n = e_student.shape[0]
    if n == 0:
        return e_student.new_zeros(())
    return ((e_student - e_teacher.detach()) ** 2).sum() / n**2


def supervision_matrix(pseudo_labels: torch.Tensor) -> torch.Tensor:
    return (pseudo_labels[:, None] == pseudo_labels[None, :]).to(torch.get_default_dtype())


def intra_graph_loss(e_student: torch.Tensor, supervision: torch.Tensor) -> torch.Tensor:
    """Mean of (1 - affinity) over distinct region pairs sharing a pseudo label.

    The diagonal is left out of numerator and denominator, so the loss is
    exactly zero unless two regions share a label.
    """
    if e_student.shape != supervision.shape:
        raise ValueError(f"shape mismatch {tuple(e_student.shape)} vs {tuple(supervision.shape)}")
    n = e_student.shape[0]
    if n == 0:
        return e_student.new_zeros(())
    m = supervision.detach().to(e_student.dtype) * (1 - torch.eye(n, dtype=e_student.dtype))
    return (m * (1 - e_student)).sum() / torch.clamp(m.sum(), min=1.0)


def consistency_forward(
    teacher: RegionOutputs, student: RegionOutputs, eps: float, losses=LOSS_NAMES
) -> ConsistencyBreakdown:
    """All three consistency terms on the confidence-filtered shared proposals.

    ``teacher`` and ``student`` must be computed on the same boxes in the
    same order.  Terms not listed in ``losses`` are returned as exact zeros.
    """
    if teacher.features.shape[0] != student.features.shape[0]:
        raise ValueError("teacher and student must share one proposal set")
    keep = confidence_filter(teacher.preds.confidence.detach(), eps)
    n = int(keep.numel())
    zero = student.logits.new_zeros(())
    if n == 0:
        return ConsistencyBreakdown(zero, zero, zero, 0)
    t_dist = teacher.preds.dist.detach()[keep]
    s_dist = student.preds.dist[keep]
    rcl = region_consistency_loss(t_dist, s_dist) if "rcl" in losses else zero
    egl = agl = zero
    zero_norm = 0
    if "egl" in losses or "agl" in losses:
        s_feat = student.features[keep]
        e_s = affinity_matrix(s_feat)
        zero_norm = count_zero_norm(s_feat.detach())
        if "egl" in losses:
            t_feat = teacher.features.detach()[keep]
            zero_norm += count_zero_norm(t_feat)
            egl = inter_graph_loss(e_s, affinity_matrix(t_feat))
        if "agl" in losses:
            m = supervision_matrix(teacher.preds.pseudo_label[keep])
            agl = intra_graph_loss(e_s, m)
    return ConsistencyBreakdown(rcl, egl, agl, n, zero_norm)
