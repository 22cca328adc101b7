from dataclasses import replace

import numpy as np
import pytest
import torch

from mtor.toy2d import (
    REGIMES,
    Toy2DConfig,
    ToyNet,
    boundary_raster,
    consistency_mse,
    toy2d_mean_teacher,
    toy_objective,
    two_moons_task,
)

from .oracles import central_fd

SHORT = Toy2DConfig(steps=60, warmup=20)


def test_task_shapes_and_labels():
    lx, ly, ux, uy = two_moons_task(0)
    assert lx.shape == (2, 2) and sorted(ly.tolist()) == [0, 1]
    assert ux.shape == (60, 2) and uy.shape == (60,)


def test_requires_both_classes():
    lx, ly, ux, _ = two_moons_task(0)
    with pytest.raises(ValueError):
        toy2d_mean_teacher(lx, np.array([0, 0]), ux, SHORT)
    with pytest.raises(ValueError):
        toy2d_mean_teacher(lx, ly, ux, replace(SHORT, regime="bogus"))


def test_identical_inputs_zero_consistency():
    x = torch.randn(5, 2, dtype=torch.float64)
    assert consistency_mse(x, x.clone()).item() == 0.0


def test_lambda_zero_matches_supervised():
    lx, ly, ux, _ = two_moons_task(1)
    a = toy2d_mean_teacher(lx, ly, ux, replace(SHORT, regime="mean_teacher", lam=0.0))
    b = toy2d_mean_teacher(lx, ly, ux, replace(SHORT, regime="augmented"))
    for p, q in zip(a.student.parameters(), b.student.parameters()):
        assert torch.equal(p, q)


@pytest.mark.parametrize("regime", ["mean_teacher", "mt_inter", "mt_intra", "augmented"])
def test_toy_objective_gradients(regime):
    cfg = replace(SHORT, regime=regime)
    g = torch.Generator().manual_seed(0)
    torch.manual_seed(0)
    student, teacher = ToyNet(4).double(), ToyNet(4).double()
    lx = torch.randn(2, 2, generator=g, dtype=torch.float64)
    ly = torch.tensor([0, 1])
    ux = torch.randn(5, 2, generator=g, dtype=torch.float64)
    noise = [torch.randn(s, generator=g, dtype=torch.float64) * 0.1 for s in ((3, 2, 2), (5, 2), (5, 2))]
    total, _ = toy_objective(student, teacher, lx, ly, ux, *noise, cfg)
    total.backward()
    for param in student.parameters():
        flat = param.view(-1)
        for i in range(min(3, flat.numel())):

            def f(v, flat=flat, i=i):
                with torch.no_grad():
                    old = flat[i].item()
                    flat[i] = v
                    out = toy_objective(student, teacher, lx, ly, ux, *noise, cfg)[0].item()
                    flat[i] = old
                return out

            num = central_fd(f, flat[i].item())
            ana = param.grad.view(-1)[i].item()
            assert abs(ana - num) <= 1e-4 * max(abs(ana), abs(num)) + 1e-9
    assert all(p.grad is None for p in teacher.parameters())


def test_history_and_raster():
    lx, ly, ux, _ = two_moons_task(2)
    res = toy2d_mean_teacher(lx, ly, ux, SHORT)
    assert len(res.history) == SHORT.steps
    marks = [h["step"] for h in res.history if "unlabeled_consistency" in h]
    assert SHORT.warmup - 1 in marks and SHORT.steps - 1 in marks
    xx, yy, prob = boundary_raster(res, resolution=16)
    assert xx.shape == yy.shape == prob.shape == (16, 16)
    assert prob.min() >= 0 and prob.max() <= 1


def test_regime_names():
    assert REGIMES == ("none", "augmented", "mean_teacher", "mt_inter", "mt_intra")
