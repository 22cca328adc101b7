import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mtor.consistency import (
    affinity_matrix,
    confidence_filter,
    consistency_forward,
    count_zero_norm,
    inter_graph_loss,
    intra_graph_loss,
    region_consistency_loss,
    supervision_matrix,
)
from mtor.detector import RegionOutputs, predictions_from_logits

from . import oracles

D = torch.float64


def _outputs(logits, feats):
    return RegionOutputs(torch.zeros(logits.shape[0], 4, dtype=D), feats, logits, predictions_from_logits(logits))


def _random_pair(seed, n, d, c=3, scale=4.0):
    g = torch.Generator().manual_seed(seed)
    tl = torch.randn(n, c + 1, generator=g, dtype=D) * scale
    sl = torch.randn(n, c + 1, generator=g, dtype=D) * scale
    tf = torch.randn(n, d, generator=g, dtype=D)
    sf = torch.randn(n, d, generator=g, dtype=D)
    return tl, sl, tf, sf


# ---- worked examples -----------------------------------------------------


def test_filter_example():
    assert confidence_filter(torch.tensor([0.99, 0.50, 0.985]), 0.98).tolist() == [0, 2]
    assert confidence_filter(torch.tensor([0.1, 0.2]), 0.0).tolist() == [0, 1]
    assert confidence_filter(torch.tensor([0.999, 1.0]), 1.0).tolist() == [1]


def test_rcl_examples():
    t = torch.tensor([[0.1, 0.9, 0.0], [0.5, 0.25, 0.25]], dtype=D)
    assert region_consistency_loss(t, t.clone()).item() == 0.0
    s = torch.tensor([[0.0, 1.0, 0.0], [0.5, 0.25, 0.25]], dtype=D)
    # (0.01 + 0.01) / 2
    assert region_consistency_loss(t, s).item() == pytest.approx(0.01, abs=1e-12)
    with pytest.raises(ValueError):
        region_consistency_loss(t, s[:1])


def test_affinity_examples():
    f = torch.tensor([[1.0, 0.0], [0.0, 2.0], [3.0, 3.0], [-1.0, 0.0]], dtype=D)
    e = affinity_matrix(f)
    assert e[0, 1].item() == 0.0
    assert e[0, 2].item() == pytest.approx(2**-0.5, abs=1e-12)
    assert e[0, 3].item() == -1.0
    assert torch.equal(torch.diagonal(e), torch.ones(4, dtype=D))


def test_zero_norm_row_is_orthogonal():
    f = torch.tensor([[0.0, 0.0], [1.0, 1.0]], dtype=D, requires_grad=True)
    e = affinity_matrix(f)
    assert e.tolist() == [[1.0, 0.0], [0.0, 1.0]]
    e.sum().backward()
    assert torch.isfinite(f.grad).all()
    assert count_zero_norm(f.detach()) == 1


def test_egl_examples():
    a = torch.eye(3, dtype=D)
    assert inter_graph_loss(a, a.clone()).item() == 0.0
    b = a.clone()
    b[0, 1] = b[1, 0] = 0.3
    assert inter_graph_loss(b, a).item() == pytest.approx(2 * 0.09 / 9, abs=1e-15)
    with pytest.raises(ValueError):
        inter_graph_loss(a, torch.eye(2, dtype=D))


def test_supervision_and_agl_examples():
    m = supervision_matrix(torch.tensor([0, 0, 1]))
    assert m.tolist() == [[1, 1, 0], [1, 1, 0], [0, 0, 1]]
    e = torch.eye(3, dtype=D)
    e[0, 1] = e[1, 0] = 0.6
    assert intra_graph_loss(e, m.to(D)).item() == pytest.approx(0.4, abs=1e-12)
    assert intra_graph_loss(e, torch.eye(3, dtype=D)).item() == 0.0
    e[0, 1] = e[1, 0] = 1.0
    assert intra_graph_loss(e, m.to(D)).item() == 0.0
    with pytest.raises(ValueError):
        intra_graph_loss(e, torch.eye(2, dtype=D))


def test_forward_zero_survivors():
    tl, sl, tf, sf = _random_pair(0, 5, 4)
    out = consistency_forward(_outputs(tl, tf), _outputs(sl, sf), 1.0)
    assert out.surviving_regions == 0
    assert out.total().item() == 0.0 and out.as_floats() == {"rcl": 0.0, "egl": 0.0, "agl": 0.0}


def test_forward_identical_branches():
    tl, _, tf, _ = _random_pair(1, 5, 4)
    t = _outputs(tl, tf)
    s = _outputs(tl.clone().requires_grad_(), tf.clone().requires_grad_())
    out = consistency_forward(t, s, 0.0)
    assert out.rcl.item() == 0.0 and out.egl.item() == 0.0
    ref = oracles.consistency_oracle(t.preds.dist.tolist(), t.preds.dist.tolist(), tf.tolist(), tf.tolist(), 0.0)
    assert out.agl.item() == pytest.approx(ref["agl"], abs=1e-12)


def test_forward_mismatched_proposals():
    tl, sl, tf, sf = _random_pair(2, 5, 4)
    with pytest.raises(ValueError):
        consistency_forward(_outputs(tl, tf), _outputs(sl[:4], sf[:4]), 0.5)


def test_disabled_terms_are_exact_zero():
    tl, sl, tf, sf = _random_pair(3, 5, 4)
    for losses in [("rcl",), ("rcl", "egl"), ("rcl", "agl"), ()]:
        out = consistency_forward(_outputs(tl, tf), _outputs(sl, sf), 0.0, losses)
        for name in ("rcl", "egl", "agl"):
            if name not in losses:
                assert getattr(out, name).item() == 0.0


# ---- properties --------------------------------------------------------------


instances = st.tuples(st.integers(0, 2**31 - 1), st.integers(1, 5), st.integers(1, 8))


@settings(max_examples=80, deadline=None)
@given(inst=instances, eps=st.sampled_from([0.0, 0.3, 0.6, 0.9]))
def test_forward_matches_brute_force_oracle(inst, eps):
    seed, n, d = inst
    tl, sl, tf, sf = _random_pair(seed, n, d)
    t, s = _outputs(tl, tf), _outputs(sl, sf)
    out = consistency_forward(t, s, eps)
    ref = oracles.consistency_oracle(t.preds.dist.tolist(), s.preds.dist.tolist(), tf.tolist(), sf.tolist(), eps)
    assert out.surviving_regions == ref["survivors"]
    for k in ("rcl", "egl", "agl"):
        assert getattr(out, k).item() == pytest.approx(ref[k], abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(inst=instances)
def test_graph_invariants(inst):
    seed, n, d = inst
    _, _, tf, sf = _random_pair(seed, n, d)
    e = affinity_matrix(sf)
    assert torch.allclose(e, e.T, atol=1e-12)
    assert torch.equal(torch.diagonal(e), torch.ones(n, dtype=D))
    assert e.min() >= -1 and e.max() <= 1
    scale = torch.rand(n, 1, generator=torch.Generator().manual_seed(seed), dtype=D) * 10 + 0.1
    assert torch.allclose(affinity_matrix(sf * scale), e, atol=1e-12)
    assert inter_graph_loss(e, affinity_matrix(tf)).item() >= 0


@settings(max_examples=60, deadline=None)
@given(inst=instances)
def test_permutation_equivariance(inst):
    seed, n, d = inst
    tl, sl, tf, sf = _random_pair(seed, n, d)
    perm = torch.randperm(n, generator=torch.Generator().manual_seed(seed))
    a = consistency_forward(_outputs(tl, tf), _outputs(sl, sf), 0.0)
    b = consistency_forward(_outputs(tl[perm], tf[perm]), _outputs(sl[perm], sf[perm]), 0.0)
    for k in ("rcl", "egl", "agl"):
        assert getattr(a, k).item() == pytest.approx(getattr(b, k).item(), abs=1e-12)
    e = affinity_matrix(sf)
    assert torch.allclose(affinity_matrix(sf[perm]), e[perm][:, perm], atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(inst=instances)
def test_losses_nonnegative(inst):
    seed, n, d = inst
    tl, sl, tf, sf = _random_pair(seed, n, d)
    out = consistency_forward(_outputs(tl, tf), _outputs(sl, sf), 0.0)
    assert min(out.as_floats().values()) >= 0


# ---- gradients ---------------------------------------------------------------


def _objective(name, tl, sl, tf, sf):
    out = consistency_forward(_outputs(tl, tf), _outputs(sl, sf), 0.0, (name,))
    return getattr(out, name)


@pytest.mark.parametrize("name", ["rcl", "egl", "agl"])
def test_gradients_match_finite_differences(name):
    for trial in range(20):
        tl, sl, tf, sf = _random_pair(100 + trial, 2 + trial % 4, 1 + trial % 8, scale=1.0)
        sl.requires_grad_()
        sf.requires_grad_()
        _objective(name, tl, sl, tf, sf).backward()
        for x in (sl, sf):
            # a term may not depend on one of the inputs; its gradient is then zero
            grad = torch.zeros_like(x) if x.grad is None else x.grad
            g = torch.Generator().manual_seed(trial)
            for _ in range(3):
                idx = tuple(int(torch.randint(0, s, (1,), generator=g)) for s in x.shape)

                def f(v, x=x, idx=idx):
                    with torch.no_grad():
                        old = x[idx].item()
                        x[idx] = v
                        val = _objective(name, tl, sl, tf, sf).item()
                        x[idx] = old
                    return val

                num = oracles.central_fd(f, x[idx].item())
                ana = grad[idx].item()
                assert abs(ana - num) <= 1e-4 * max(abs(ana), abs(num)) + 1e-9


def test_teacher_side_gradients_are_zero():
    tl, sl, tf, sf = _random_pair(7, 5, 6)
    for x in (tl, sl, tf, sf):
        x.requires_grad_()
    out = consistency_forward(_outputs(tl, tf), _outputs(sl, sf), 0.0)
    out.total().backward()
    assert tl.grad is None and tf.grad is None
    assert sl.grad is not None and sf.grad is not None
