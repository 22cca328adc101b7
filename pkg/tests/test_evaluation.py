import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mtor.config import DetectorConfig
from mtor.consistency import affinity_matrix
from mtor.dataset import BoxAnnotation, Domain, DomainSample
from mtor.detector import Detector
from mtor.evaluation import (
    Detection,
    ap_from_flags,
    average_precision,
    classify_error,
    error_analysis,
    export_relational_graph,
    match_detections,
    read_ap_csv,
    read_detections_csv,
    write_ap_csv,
    write_detections_csv,
    write_error_csv,
    write_graph_csv,
)

from . import oracles

GT = BoxAnnotation((0.0, 0.0, 10.0, 10.0), 0)


def _det(box, score, img="a", cat=0):
    return Detection(tuple(float(v) for v in box), cat, score, img)


def test_single_match_ap_one():
    # (0,0,10,10) vs (0,0,10,6): IoU 0.6
    r = average_precision([_det((0, 0, 10, 6), 0.3)], {"a": [GT]}, 1)
    assert r.per_category[0] == 1.0 and r.mAP == 1.0


def test_low_then_high_iou_gives_half():
    dets = [_det((0, 0, 10, 2), 0.9), _det((0, 0, 10, 9), 0.1)]  # IoU 0.2 then 0.9
    assert average_precision(dets, {"a": [GT]}, 1).per_category[0] == pytest.approx(0.5)


def test_no_detections_zero():
    assert average_precision([], {"a": [GT]}, 1).per_category[0] == 0.0


def test_empty_category_skipped():
    r = average_precision([_det((0, 0, 10, 10), 0.9)], {"a": [GT]}, 3)
    assert r.skipped == [1, 2] and np.isnan(r.per_category[1])
    assert r.mAP == 1.0


def test_duplicate_detection_is_false_positive():
    dets = [_det((0, 0, 10, 10), 0.9), _det((0, 0, 10, 10), 0.8)]
    assert match_detections(dets, {"a": [GT]}, 0, 0.5) == [True, False]


def test_detection_validation():
    with pytest.raises(ValueError):
        Detection((0, 0, 1, 1), 0, 1.5, "a")
    with pytest.raises(ValueError):
        Detection((2, 0, 1, 1), 0, 0.5, "a")


def test_ap_order_invariant_and_monotone():
    g = np.random.default_rng(0)
    gts = {"a": [GT, BoxAnnotation((20.0, 20, 30, 30), 0)]}
    dets = [_det((g.uniform(0, 5), 0, 10, 10), float(g.uniform()), "a") for _ in range(4)]
    base = average_precision(dets, gts, 1).per_category[0]
    assert average_precision(dets[::-1], gts, 1).per_category[0] == base
    more = dets + [_det((20, 20, 30, 30), 0.01)]
    assert average_precision(more, gts, 1).per_category[0] >= base


# ---- oracle equivalence ------------------------------------------------------

coord = st.integers(0, 12)


@st.composite
def box(draw):
    x0, y0 = draw(coord), draw(coord)
    return (float(x0), float(y0), float(x0 + draw(st.integers(1, 8))), float(y0 + draw(st.integers(1, 8))))


@settings(max_examples=300, deadline=None)
@given(
    gts=st.lists(box(), min_size=1, max_size=3),
    dets=st.lists(st.tuples(box(), st.sampled_from([0.1, 0.3, 0.5, 0.7, 0.9])), max_size=4),
)
def test_matching_and_ap_match_brute_force(gts, dets):
    gt_ann = {"a": [BoxAnnotation(b, 0) for b in gts]}
    d = [_det(b, s) for b, s in dets]
    flags = match_detections(d, gt_ann, 0, 0.5)
    want = oracles.brute_force_tp(dets, gts, 0.5)
    assert flags == want
    assert ap_from_flags(flags, len(gts)) == pytest.approx(oracles.ap_oracle(want, len(gts)), abs=1e-12)
    assert average_precision(d, gt_ann, 1).per_category[0] == pytest.approx(oracles.ap_oracle(want, len(gts)))


@settings(max_examples=200, deadline=None)
@given(flags=st.lists(st.booleans(), max_size=10), extra=st.integers(0, 3))
def test_ap_interpolation_matches_definition(flags, extra):
    n = sum(flags) + extra
    if n == 0:
        return
    assert ap_from_flags(flags, n) == pytest.approx(oracles.ap_oracle(flags, n), abs=1e-12)


# ---- error analysis ------------------------------------------------------------


def test_error_bands():
    assert classify_error(0.5) == "correct"
    assert classify_error(0.4) == "mislocalized"
    assert classify_error(0.3) == "mislocalized"
    assert classify_error(0.1) == "background"


def test_error_all_correct():
    gts = {"a": [GT, BoxAnnotation((20.0, 20, 30, 30), 0)]}
    h = error_analysis([_det((0, 0, 10, 10), 0.9), _det((20, 20, 30, 30), 0.8)], gts, 1)
    assert h.per_category[0] == {"correct": 100.0, "mislocalized": 0.0, "background": 0.0}


def test_error_shortfall_counts_background():
    gts = {"a": [GT, BoxAnnotation((20.0, 20, 30, 30), 0)]}
    h = error_analysis([_det((0, 0, 10, 4), 0.9)], gts, 1)  # IoU 0.4
    assert h.per_category[0] == {"correct": 0.0, "mislocalized": 50.0, "background": 50.0}


@settings(max_examples=200, deadline=None)
@given(
    gts=st.lists(st.tuples(box(), st.integers(0, 1)), min_size=1, max_size=3),
    dets=st.lists(st.tuples(box(), st.floats(0, 1), st.integers(0, 1)), max_size=4),
)
def test_error_analysis_matches_oracle(gts, dets):
    ann = {"a": [BoxAnnotation(b, c) for b, c in gts]}
    d = [_det(b, s, cat=c) for b, s, c in dets]
    h = error_analysis(d, ann, 2)
    for c in range(2):
        k = sum(1 for _, cc in gts if cc == c)
        if k == 0:
            assert c not in h.per_category
            continue
        want = oracles.error_oracle(
            [(b, s, "a") for b, s, cc in dets if cc == c], {"a": [b for b, cc in gts if cc == c]}, k
        )
        assert h.per_category[c] == pytest.approx({t: 100 * v / k for t, v in want.items()})
        assert sum(h.per_category[c].values()) == pytest.approx(100.0)


# ---- graph export and CSV surfaces -------------------------------------------


def _model():
    torch.manual_seed(0)
    return Detector(DetectorConfig(widths=(4, 4, 8, 8), hidden=16), 2, 64)


def test_export_graph_matches_affinity_and_duplicates():
    m = _model()
    img = np.random.default_rng(0).random((64, 64, 3)).astype(np.float32)
    boxes = [BoxAnnotation((4.0, 4, 30, 30), 0), BoxAnnotation((4.0, 4, 30, 30), 1), BoxAnnotation((30.0, 30, 60, 50), 1)]
    s = DomainSample(img, boxes, Domain.TARGET, "target_00000")
    e, labels = export_relational_graph(m, s)
    assert labels == [0, 1, 1]
    assert e[0, 1] == pytest.approx(1.0, abs=1e-6)
    np.testing.assert_allclose(e, e.T, atol=1e-6)
    np.testing.assert_allclose(np.diag(e), 1.0)
    with torch.no_grad():
        fm = m.forward_backbone(torch.from_numpy(img).permute(2, 0, 1))
        feats = m.region_outputs(fm[0], torch.tensor([b.box for b in boxes])).features
    assert np.array_equal(e, affinity_matrix(feats).numpy())
    one, _ = export_relational_graph(m, DomainSample(img, boxes[:1], Domain.TARGET, "t"))
    assert one.shape == (1, 1)


def test_csv_roundtrips(tmp_path):
    cats = ("circle", "square")
    dets = [_det((0, 0, 10, 10), 0.75), _det((1.5, 2, 3, 4.25), 1 / 3, "b", 1)]
    write_detections_csv(dets, cats, tmp_path / "d.csv")
    assert read_detections_csv(tmp_path / "d.csv", cats) == dets
    r = average_precision(dets, {"a": [GT], "b": []}, 2)
    write_ap_csv(r, cats, tmp_path / "ap.csv")
    assert read_ap_csv(tmp_path / "ap.csv") == {"circle": 100.0, "mAP": 100.0}
    write_error_csv(error_analysis(dets, {"a": [GT]}, 2), cats, tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text().splitlines()[0] == "category,correct,mislocalized,background,k"
    write_graph_csv(np.eye(2), [0, 1], cats, tmp_path / "g.csv")
    assert (tmp_path / "g.csv").read_text().splitlines()[0] == "circle,square"
