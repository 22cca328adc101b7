"""Mean Teacher on a two-moons toy problem.

Illustrates how consistency on unlabeled points shapes a decision boundary
learned from two labeled points, with optional inter-/intra-graph terms
over the hidden features of the unlabeled batch.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.datasets import make_moons

from .consistency import affinity_matrix, inter_graph_loss, intra_graph_loss, supervision_matrix

REGIMES = ("none", "augmented", "mean_teacher", "mt_inter", "mt_intra")


@dataclass
class Toy2DConfig:
    regime: str = "mean_teacher"
    lam: float = 1.0
    alpha: float = 0.99
    # std of the gaussian input jitter
    noise: float = 0.15
    lr: float = 0.1
    steps: int = 1500
    # supervised warm-up before consistency terms switch on
    warmup: int = 200
    hidden: int = 32
    aug_copies: int = 16
    seed: int = 0


class ToyNet(nn.Module):
    def __init__(self, hidden: int = 32):
        super().__init__()
        self.l1 = nn.Linear(2, hidden)
        self.l2 = nn.Linear(hidden, hidden)
        self.out = nn.Linear(hidden, 2)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.l2(torch.tanh(self.l1(x))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.out(self.features(x))


@dataclass
class Toy2DResult:
    student: ToyNet
    teacher: ToyNet
    history: list[dict] = field(default_factory=list)

    def decision(self, points: np.ndarray, use_teacher: bool = True) -> np.ndarray:
        net = self.teacher if use_teacher else self.student
        dtype = next(net.parameters()).dtype
        with torch.no_grad():
            return torch.softmax(net(torch.as_tensor(points, dtype=dtype)), dim=1)[:, 1].numpy()


def two_moons_task(seed: int, n_unlabeled: int = 60, noise: float = 0.1):
    """One labeled point per class plus ``n_unlabeled`` unlabeled points."""
    x, y = make_moons(n_samples=n_unlabeled + 2, noise=noise, random_state=seed)
    rng = np.random.default_rng(seed)
    li = [int(rng.choice(np.nonzero(y == c)[0])) for c in (0, 1)]
    mask = np.ones(len(x), dtype=bool)
    mask[li] = False
    return x[li], y[li], x[mask], y[mask]


def consistency_mse(student_logits: torch.Tensor, teacher_logits: torch.Tensor) -> torch.Tensor:
    """Mean over points of the squared distance between predicted distributions."""
    p_s = torch.softmax(student_logits, dim=1)
    p_t = torch.softmax(teacher_logits.detach(), dim=1)
    return ((p_s - p_t) ** 2).sum(dim=1).mean()


def toy_objective(student: ToyNet, teacher: ToyNet, lx, ly, ux, sup_noise, s_noise, t_noise, cfg: Toy2DConfig,
                  consistency_on: bool = True):  # fmt: skip
    """Full toy objective for fixed noise draws; returns (total, parts)."""
    if cfg.regime == "none":
        xs, ys = lx, ly
    else:
        xs = torch.cat([lx, (lx[None] + sup_noise).reshape(-1, 2)])
        ys = torch.cat([ly, ly.repeat(sup_noise.shape[0])])
    sup = F.cross_entropy(student(xs), ys)
    zero = sup.new_zeros(())
    parts = {"sup": sup, "cons": zero, "egl": zero, "agl": zero}
    if cfg.regime in ("none", "augmented") or not consistency_on:
        return sup, parts
    xs_u, xt_u = ux + s_noise, ux + t_noise
    f_s = student.features(xs_u)
    with torch.no_grad():
        f_t = teacher.features(xt_u)
        t_logits = teacher.out(f_t)
    cons = consistency_mse(student.out(f_s), t_logits)
    parts["cons"] = cons
    reg = cons
    if cfg.regime == "mt_inter":
        parts["egl"] = inter_graph_loss(affinity_matrix(f_s), affinity_matrix(f_t))
        reg = reg + parts["egl"]
    elif cfg.regime == "mt_intra":
        m = supervision_matrix(t_logits.argmax(dim=1)).to(f_s.dtype)
        parts["agl"] = intra_graph_loss(affinity_matrix(f_s), m)
        reg = reg + parts["agl"]
    return sup + cfg.lam * reg, parts


def toy2d_mean_teacher(labeled_x, labeled_y, unlabeled_x, cfg: Toy2DConfig, dtype=torch.float64) -> Toy2DResult:
    if cfg.regime not in REGIMES:
        raise ValueError(f"unknown regime {cfg.regime!r}; choose from {REGIMES}")
    labeled_y = np.asarray(labeled_y)
    if any((labeled_y == c).sum() < 1 for c in (0, 1)):
        raise ValueError("need at least one labeled point per class")
    torch.manual_seed(cfg.seed)
    student = ToyNet(cfg.hidden).to(dtype)
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    opt = torch.optim.SGD(student.parameters(), lr=cfg.lr, momentum=0.9)
    lx = torch.as_tensor(labeled_x, dtype=dtype)
    ly = torch.as_tensor(labeled_y, dtype=torch.long)
    ux = torch.as_tensor(unlabeled_x, dtype=dtype)
    # separate streams keep supervised draws identical whatever the regime
    g_sup = torch.Generator().manual_seed(cfg.seed)
    g_cons = torch.Generator().manual_seed(cfg.seed + 1)
    g_eval = torch.Generator().manual_seed(cfg.seed + 2)
    eval_s = torch.randn(ux.shape, generator=g_eval, dtype=dtype) * cfg.noise
    eval_t = torch.randn(ux.shape, generator=g_eval, dtype=dtype) * cfg.noise
    result = Toy2DResult(student, teacher)

    def measure() -> float:
        with torch.no_grad():
            return consistency_mse(student(ux + eval_s), teacher(ux + eval_t)).item()

    for step in range(cfg.steps):
        sup_noise = torch.randn((cfg.aug_copies, *lx.shape), generator=g_sup, dtype=dtype) * cfg.noise
        s_noise = torch.randn(ux.shape, generator=g_cons, dtype=dtype) * cfg.noise
        t_noise = torch.randn(ux.shape, generator=g_cons, dtype=dtype) * cfg.noise
        on = step >= cfg.warmup
        if step == cfg.warmup:
            # teacher restarts from the warmed-up student
            teacher.load_state_dict(student.state_dict())
        total, parts = toy_objective(student, teacher, lx, ly, ux, sup_noise, s_noise, t_noise, cfg, on)
        opt.zero_grad()
        total.backward()
        opt.step()
        with torch.no_grad():
            a = cfg.alpha if on else 0.0
            for t, s in zip(teacher.parameters(), student.parameters()):
                t.mul_(a).add_(s, alpha=1 - a)
        rec = {"step": step, "total": total.item(), **{k: v.item() for k, v in parts.items()}}
        if step == cfg.warmup - 1 or step % 50 == 0 or step == cfg.steps - 1:
            rec["unlabeled_consistency"] = measure()
        result.history.append(rec)
    return result


def boundary_raster(result: Toy2DResult, bounds=(-1.5, 2.5, -1.0, 1.5), resolution: int = 120):
    x0, x1, y0, y1 = bounds
    xs, ys = np.linspace(x0, x1, resolution), np.linspace(y0, y1, resolution)
    xx, yy = np.meshgrid(xs, ys)
    prob = result.decision(np.stack([xx.ravel(), yy.ravel()], axis=1)).reshape(xx.shape)
    return xx, yy, prob


def run_regimes(seed: int, base: Toy2DConfig | None = None, n_unlabeled: int = 60) -> dict:
    """Train every regime on one task; returns task data, results and rasters."""
    base = base or Toy2DConfig()
    lx, ly, ux, uy = two_moons_task(seed, n_unlabeled)
    out = {"task": (lx, ly, ux, uy), "results": {}, "rasters": {}}
    for regime in REGIMES:
        cfg = replace(base, regime=regime, seed=seed)
        res = toy2d_mean_teacher(lx, ly, ux, cfg)
        out["results"][regime] = res
        out["rasters"][regime] = boundary_raster(res)
    return out
