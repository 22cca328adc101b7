"""Teacher-student training: EMA updates, source pre-training, adaptation."""

from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .config import ExperimentConfig, TrainConfig, config_hash, to_dict
from .consistency import ConsistencyBreakdown, consistency_forward
from .dataset import AnnotationLeakError, AugConfig, Domain, DomainSample, PerturbedPair, augment_pair, to_chw
from .detector import Detector

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
PHASES = ("pretrain", "adapt")


class ArchitectureMismatch(ValueError):
    pass


class ResumeMismatch(ValueError):
    pass


@dataclass
class ModelPair:
    student: Detector
    teacher: Detector
    alpha: float
    step: int = 0

    @classmethod
    def from_student(cls, student: Detector, alpha: float) -> "ModelPair":
        teacher = copy.deepcopy(student)
        for p in teacher.parameters():
            p.requires_grad_(False)
        teacher.eval()
        return cls(student, teacher, alpha)


def _check_same_arch(a: torch.nn.Module, b: torch.nn.Module) -> None:
    sa = [(n, tuple(p.shape)) for n, p in a.named_parameters()]
    sb = [(n, tuple(p.shape)) for n, p in b.named_parameters()]
    if sa != sb:
        raise ArchitectureMismatch("teacher and student parameter layouts differ")


def ema_update(pair: ModelPair) -> ModelPair:
    """teacher <- alpha * teacher + (1 - alpha) * student, element-wise."""
    _check_same_arch(pair.teacher, pair.student)
    a = pair.alpha
    with torch.no_grad():
        for t, s in zip(pair.teacher.parameters(), pair.student.parameters()):
            t.mul_(a).add_(s, alpha=1.0 - a)
        for t, s in zip(pair.teacher.buffers(), pair.student.buffers()):
            t.copy_(s)
    pair.step += 1
    return pair


# --------------------------------------------------------------------------
# single steps


@dataclass
class StepMetrics:
    step: int
    phase: str
    l_sup: float
    sup_parts: dict[str, float]
    total: float
    lr: float
    grad_norm: float
    wall_time: float
    consistency: dict[str, float] | None = None
    survivors: int | None = None
    zero_norm_features: int = 0

    def record(self) -> dict:
        rec = {"step": self.step, "phase": self.phase, "l_sup": self.l_sup}
        if self.consistency is not None:
            rec.update(self.consistency)
        rec["total"] = self.total
        if self.survivors is not None:
            rec["survivors"] = self.survivors
            rec["zero_norm_features"] = self.zero_norm_features
        rec["lr"] = self.lr
        rec.update({f"sup_{k}": v for k, v in self.sup_parts.items()})
        rec["grad_norm"] = self.grad_norm
        rec["wall_time"] = self.wall_time
        return rec


def source_tensors(sample: DomainSample, flip: bool = False, dtype=torch.float32):
    img = to_chw(sample.image).to(dtype)
    boxes = torch.tensor([b.box for b in sample.boxes], dtype=dtype).reshape(-1, 4)
    labels = torch.tensor([b.category for b in sample.boxes], dtype=torch.long)
    if flip:
        w = img.shape[-1]
        img = torch.flip(img, dims=[-1])
        if boxes.numel():
            boxes = torch.stack([w - boxes[:, 2], boxes[:, 1], w - boxes[:, 0], boxes[:, 3]], dim=1)
    return img, boxes, labels


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig, lr: float) -> torch.optim.SGD:
    return torch.optim.SGD(
        [p for p in model.parameters() if p.requires_grad], lr=lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay
    )


def _grad_norm(model: torch.nn.Module) -> float:
    sq = 0.0
    for p in model.parameters():
        if p.grad is not None:
            sq += float((p.grad.double() ** 2).sum())
    return sq**0.5


def supervised_step(
    student: Detector, optimizer, source: DomainSample, generator: torch.Generator, flip: bool = False, step: int = 0
) -> StepMetrics:
    """One SGD update on the supervised detection loss alone."""
    t0 = time.perf_counter()
    student.train()
    dtype = next(student.parameters()).dtype
    img, gtb, gtl = source_tensors(source, flip, dtype)
    l_sup, parts = student.supervised_loss(img, gtb, gtl, generator=generator)
    optimizer.zero_grad(set_to_none=True)
    l_sup.backward()
    gn = _grad_norm(student)
    optimizer.step()
    return StepMetrics(
        step, "pretrain", l_sup.item(), {k: v.item() for k, v in parts.items()}, l_sup.item(),
        optimizer.param_groups[0]["lr"], gn, time.perf_counter() - t0,
    )  # fmt: skip


def branch_outputs(pair: ModelPair, target_pair: PerturbedPair, cap: int):
    """Teacher proposals on the teacher view; both branches pooled at those boxes."""
    dtype = next(pair.student.parameters()).dtype
    with torch.no_grad():
        t_img = to_chw(target_pair.teacher_view).to(dtype)
        t_fm = pair.teacher.forward_backbone(t_img)
        logits, deltas = pair.teacher.rpn_head(t_fm)
        props = pair.teacher.rpn_propose(logits[0], deltas[0], cap)
        t_out = pair.teacher.region_outputs(t_fm[0], props.boxes)
    s_img = to_chw(target_pair.student_view).to(dtype)
    s_fm = pair.student.forward_backbone(s_img)
    s_out = pair.student.region_outputs(s_fm[0], props.boxes)
    return t_out, s_out


def train_step(
    pair: ModelPair,
    optimizer,
    source: DomainSample,
    target_pair: PerturbedPair,
    cfg: TrainConfig,
    generator: torch.Generator,
    flip: bool = False,
    step: int = 0,
) -> tuple[ModelPair, StepMetrics]:
    """Supervised loss on ``source`` plus lam * consistency on ``target_pair``, then EMA."""
    t0 = time.perf_counter()
    pair.student.train()
    pair.teacher.eval()
    dtype = next(pair.student.parameters()).dtype
    img, gtb, gtl = source_tensors(source, flip, dtype)
    l_sup, parts = pair.student.supervised_loss(img, gtb, gtl, generator=generator)

    t_out, s_out = branch_outputs(pair, target_pair, pair.student.cfg.proposals_train)
    cons: ConsistencyBreakdown = consistency_forward(t_out, s_out, cfg.eps, tuple(cfg.losses))
    total = l_sup + cfg.lam * cons.total()

    optimizer.zero_grad(set_to_none=True)
    total.backward()
    gn = _grad_norm(pair.student)
    optimizer.step()
    ema_update(pair)
    m = StepMetrics(
        step, "adapt", l_sup.item(), {k: v.item() for k, v in parts.items()}, total.item(),
        optimizer.param_groups[0]["lr"], gn, time.perf_counter() - t0,
        consistency=cons.as_floats(), survivors=cons.surviving_regions, zero_norm_features=cons.zero_norm_features,
    )  # fmt: skip
    return pair, m


def pretrain_source(
    student: Detector,
    source: Sequence[DomainSample],
    cfg: TrainConfig,
    epochs: int | None = None,
    on_step: Callable[[StepMetrics], None] | None = None,
) -> ModelPair:
    """Supervised pre-training on labeled source data; returns the initialised pair."""
    if not source:
        raise ValueError("source split is empty")
    opt = make_optimizer(student, cfg, cfg.pretrain_lr)
    epochs = cfg.pretrain_epochs if epochs is None else epochs
    total = epochs * len(source)
    for k in range(total):
        _set_lr(opt, pretrain_lr(cfg, k, total))
        sample, flip, gen = _pretrain_draw(source, cfg, k)
        m = supervised_step(student, opt, sample, gen, flip, k)
        if on_step:
            on_step(m)
    return ModelPair.from_student(student, cfg.alpha)


# --------------------------------------------------------------------------
# deterministic per-step draws (resume needs no RNG state)


def _generator(seed: int, phase: int, step: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(np.random.SeedSequence([seed, phase, step]).generate_state(1)[0]))
    return g


def _perm(seed: int, phase: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, phase, epoch, 17]).permutation(n)


def _pretrain_draw(source: Sequence[DomainSample], cfg: TrainConfig, k: int):
    n = len(source)
    sample = source[int(_perm(cfg.seed, 0, k // n, n)[k % n])]
    rng = np.random.default_rng([cfg.seed, 0, k, 3])
    flip = cfg.source_flip and bool(rng.random() < 0.5)
    return sample, flip, _generator(cfg.seed, 0, k)


def pretrain_lr(cfg: TrainConfig, k: int, total: int) -> float:
    return cfg.pretrain_lr * (0.1 if k >= int(cfg.pretrain_decay_at * total) else 1.0)


def _set_lr(opt, lr: float) -> None:
    for g in opt.param_groups:
        g["lr"] = lr


def adapt_steps_per_epoch(n_source: int, n_target: int) -> int:
    return max(n_source, n_target)


def _adapt_draw(source, target, cfg: TrainConfig, aug: AugConfig, k: int):
    per_epoch = adapt_steps_per_epoch(len(source), len(target))
    epoch, i = divmod(k, per_epoch)
    s = source[int(_perm(cfg.seed, 1, epoch, len(source))[i % len(source)])]
    t = target[int(_perm(cfg.seed, 2, epoch, len(target))[i % len(target)])]
    if t.boxes:
        raise AnnotationLeakError(f"{t.id}: target samples must be read with read_unlabeled")
    rng = np.random.default_rng([cfg.seed, 1, k, 3])
    flip = cfg.source_flip and bool(rng.random() < 0.5)
    pair = augment_pair(t, aug, rng)
    return s, flip, pair, _generator(cfg.seed, 1, k)


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: Path, cfg: ExperimentConfig, student: Detector, teacher: Detector | None, optimizer,
                    phase: str, step: int) -> None:  # fmt: skip
    blob = {
        "resume_key": _resume_key(cfg),
        "version": CHECKPOINT_VERSION,
        "arch": student.arch(),
        "config": to_dict(cfg),
        "phase": phase,
        "step": step,
        "student": {k: v.detach().clone() for k, v in student.state_dict().items()},
        "teacher": None if teacher is None else {k: v.detach().clone() for k, v in teacher.state_dict().items()},
        "optimizer": None if optimizer is None else optimizer.state_dict(),
    }
    tmp = path.with_suffix(".tmp")
    torch.save(blob, tmp)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> dict:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {blob.get('version')!r} in {path}")
    return blob


def restore_model(blob: dict, model: Detector, which: str = "student") -> Detector:
    if blob["arch"] != model.arch():
        raise ArchitectureMismatch(f"checkpoint architecture {blob['arch']} != model {model.arch()}")
    state = blob[which]
    if state is None:
        raise KeyError(f"checkpoint holds no {which} weights")
    model.load_state_dict(state)
    return model


def build_detector(cfg: ExperimentConfig) -> Detector:
    torch.manual_seed(cfg.train.seed)
    return Detector(cfg.detector, len(cfg.dataset.categories), cfg.dataset.image_size)


def eval_model_from_checkpoint(blob: dict, weights: str = "teacher") -> Detector:
    from .config import from_dict

    cfg = from_dict(ExperimentConfig, blob["config"])
    model = Detector(cfg.detector, len(cfg.dataset.categories), cfg.dataset.image_size)
    which = weights if blob.get("teacher") is not None else "student"
    restore_model(blob, model, which)
    model.eval()
    return model


# --------------------------------------------------------------------------
# the run loop


def _resume_key(cfg: ExperimentConfig) -> str:
    # run_id / output_dir do not change results
    return config_hash({"dataset": to_dict(cfg.dataset), "detector": to_dict(cfg.detector), "train": to_dict(cfg.train)})


@dataclass
class Trainer:
    """Runs pre-training and adaptation with JSONL metrics and checkpoints."""

    cfg: ExperimentConfig
    run_dir: Path
    variant: str = "mtor"
    init_from: Path | None = None
    metrics_path: Path = field(init=False)

    def __post_init__(self):
        self.run_dir = Path(self.run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        (self.run_dir / "checkpoints").mkdir(exist_ok=True)
        self.metrics_path = self.run_dir / "metrics.jsonl"

    # steps are numbered globally across the two phases
    def _phase_bounds(self, n_source: int, n_target: int) -> tuple[int, int]:
        t = self.cfg.train
        pre = 0 if self.init_from is not None else t.pretrain_epochs * n_source
        adapt = t.adapt_epochs * adapt_steps_per_epoch(n_source, n_target) if self.variant == "mtor" else 0
        return pre, pre + adapt

    def _ckpt(self, name: str) -> Path:
        return self.run_dir / "checkpoints" / name

    def _append(self, fh, m: StepMetrics) -> None:
        if m.step % self.cfg.train.log_every == 0:
            fh.write(json.dumps(m.record()) + "\n")

    def run(self, source: Sequence[DomainSample], target: Sequence[DomainSample] = (), resume: bool = False,
            stop_after: int | None = None) -> Path:  # fmt: skip
        """Train to completion (or through step ``stop_after``); returns the final checkpoint path."""
        cfg, t = self.cfg, self.cfg.train
        if not source:
            raise ValueError("source split is empty")
        if any(s.domain == Domain.TARGET and s.boxes for s in target):
            raise AnnotationLeakError("target samples passed to training carry boxes")
        if self.variant == "mtor" and not target:
            raise ValueError("mtor adaptation needs a target split")
        pre_end, end = self._phase_bounds(len(source), len(target))
        student = build_detector(cfg)
        pair: ModelPair | None = None
        start = 0
        opt = None
        latest = self._ckpt("latest.pt")

        if resume and latest.exists():
            blob = load_checkpoint(latest)
            if _resume_key(cfg) != blob["resume_key"]:
                raise ResumeMismatch("existing run was produced with a different config; refusing to resume")
            restore_model(blob, student, "student")
            start = blob["step"] + 1
            if blob["phase"] == "adapt":
                teacher = copy.deepcopy(student)
                restore_model(blob, teacher, "teacher")
                for p in teacher.parameters():
                    p.requires_grad_(False)
                pair = ModelPair(student, teacher, t.alpha, blob["step"] - pre_end + 1)
                opt = make_optimizer(student, t, t.lr)
            else:
                opt = make_optimizer(student, t, t.pretrain_lr)
            opt.load_state_dict(blob["optimizer"])
            self._truncate_metrics(blob["step"])
        elif self.init_from is not None:
            blob = load_checkpoint(self.init_from)
            restore_model(blob, student, "student")
            self.metrics_path.write_text("")
        else:
            self.metrics_path.write_text("")

        last = end - 1 if stop_after is None else min(stop_after, end - 1)
        with self.metrics_path.open("a") as fh:
            k = start
            if k < pre_end:
                opt = opt or make_optimizer(student, t, t.pretrain_lr)
                while k < pre_end and k <= last:
                    _set_lr(opt, pretrain_lr(t, k, pre_end))
                    sample, flip, gen = _pretrain_draw(source, t, k)
                    self._append(fh, supervised_step(student, opt, sample, gen, flip, k))
                    if (k + 1) % t.checkpoint_every == 0 or k == pre_end - 1 or k == last:
                        fh.flush()
                        self._save(latest, student, None, opt, "pretrain", k)
                    k += 1
                if k == pre_end:
                    self._save(self._ckpt("pretrain.pt"), student, None, None, "pretrain", k - 1)
            if k >= pre_end and k <= last and k < end:
                if pair is None:
                    pair = ModelPair.from_student(student, t.alpha)
                    opt = make_optimizer(student, t, t.lr)
                while k < end and k <= last:
                    s, flip, tp, gen = _adapt_draw(source, target, t, cfg.dataset.aug, k - pre_end)
                    pair, m = train_step(pair, opt, s, tp, t, gen, flip, k)
                    self._append(fh, m)
                    if (k + 1) % t.checkpoint_every == 0 or k == end - 1 or k == last:
                        fh.flush()
                        self._save(latest, pair.student, pair.teacher, opt, "adapt", k)
                    k += 1
        final = self._ckpt("final.pt")
        if k >= end:
            blob = load_checkpoint(latest) if latest.exists() else None
            if blob is None:
                # init_from with no adaptation steps: nothing trained
                self._save(final, student, None, None, "pretrain", k - 1)
            else:
                torch.save(blob, final)
            return final
        return latest

    def _save(self, path: Path, student, teacher, opt, phase: str, step: int) -> None:
        save_checkpoint(path, self.cfg, student, teacher, opt, phase, step)

    def _truncate_metrics(self, last_step: int) -> None:
        if not self.metrics_path.exists():
            return
        keep = []
        for line in self.metrics_path.read_text().splitlines():
            if line.strip() and json.loads(line)["step"] <= last_step:
                keep.append(line)
        self.metrics_path.write_text("".join(s + "\n" for s in keep))


def read_metrics(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
