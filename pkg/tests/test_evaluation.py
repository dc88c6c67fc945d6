import math
import time

import numpy as np
import pytest
from hypothesis import given, strategies as st
from shapely.geometry import Polygon

from pcroad.boxes import Box3D
from pcroad.evaluation import (GTBox, ScoredBox, SegScore, auroc, average_precision, benchmark, interpolated_ap,
                               iou3d, ood_separability, seg_metrics, write_ap_report)
from pcroad.ground import GroundMask, segment_ground
from pcroad.projection import ProjectionConfig, project_cloud
from pcroad.sim import render


def _mask(pred, gt):
    pred, gt = np.asarray(pred, bool)[None], np.asarray(gt, bool)[None]
    return GroundMask(pred, np.ones_like(pred)), gt


# --- ground metrics -------------------------------------------------------------------

def test_seg_metrics_from_counts():
    pred = [1] * 93 + [1] * 7 + [0] * 3 + [0] * 97
    gt = [1] * 93 + [0] * 7 + [1] * 3 + [0] * 97
    s = seg_metrics(*_mask(pred, gt))
    assert (s.tp, s.fp, s.fn, s.tn) == (93, 7, 3, 97)
    assert s.precision == pytest.approx(0.93)
    assert s.recall == pytest.approx(0.96875)
    assert s.iou == pytest.approx(93 / 103)
    assert round(s.iou, 4) == 0.9029
    assert s.accuracy == pytest.approx(0.95)


def test_seg_metrics_identity_and_negation():
    gt = np.arange(20) % 2 == 0
    s = seg_metrics(*_mask(gt, gt))
    assert s.precision == s.recall == s.accuracy == s.iou == 1.0
    s = seg_metrics(*_mask(~gt, gt))
    assert s.accuracy == 0.0 and s.iou == 0.0


def test_seg_metrics_per_point_labels():
    cfg = ProjectionConfig(s_h=16, s_w=64)
    scan = render([], cfg)
    cloud = project_cloud(scan.points, cfg)
    gm = GroundMask(np.asarray(cloud.valid).copy(), np.asarray(cloud.valid))
    s = seg_metrics(gm, scan.labels == 0, index=cloud.index)
    assert s.iou == 1.0 and s.tp == cloud.valid.sum()


def test_seg_metrics_errors():
    empty = GroundMask(np.zeros((2, 2), bool), np.zeros((2, 2), bool))
    with pytest.raises(ValueError):
        seg_metrics(empty, np.zeros((2, 2), bool))
    with pytest.raises(ValueError):
        seg_metrics(*_mask([1, 0], [1, 0])[:1], np.zeros((3, 3), bool))


@given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=100))
def test_swapping_pred_and_gt_swaps_precision_and_recall(pairs):
    p, g = zip(*pairs)
    a, b = seg_metrics(*_mask(p, g)), seg_metrics(*_mask(g, p))
    assert a.precision == b.recall and a.recall == b.precision and a.iou == b.iou
    for v in (a.precision, a.recall, a.accuracy, a.iou):
        assert 0.0 <= v <= 1.0


def test_seg_scores_add():
    assert SegScore(1, 2, 3, 4) + SegScore(4, 3, 2, 1) == SegScore(5, 5, 5, 5)


# --- rotated IoU ---------------------------------------------------------------------

def test_iou_examples():
    a = Box3D([0, 0, 0], [1, 1, 1], 0.0)
    assert iou3d(a, a) == 1.0
    assert iou3d(a, Box3D([0.5, 0, 0], [1, 1, 1], 0.0)) == pytest.approx(1 / 3)
    assert iou3d(a, Box3D([5, 0, 0], [1, 1, 1], 0.0)) == 0.0
    assert iou3d(a, Box3D([0, 0, 2], [1, 1, 1], 0.0)) == 0.0
    # A square turned by 90 degrees is the same square.
    assert iou3d(a, Box3D([0, 0, 0], [1, 1, 1], math.pi / 2)) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        iou3d(a, Box3D([0, 0, 0], [0, 1, 1], 0.0))


def _shapely_iou(a: Box3D, b: Box3D) -> float:
    pa, pb = Polygon(a.corners()[:4, :2]), Polygon(b.corners()[:4, :2])
    dz = max(0.0, min(a.center[2] + a.size[2] / 2, b.center[2] + b.size[2] / 2)
             - max(a.center[2] - a.size[2] / 2, b.center[2] - b.size[2] / 2))
    inter = pa.intersection(pb).area * dz
    return inter / (np.prod(a.size) + np.prod(b.size) - inter)


boxes = st.builds(
    lambda c, s, y: Box3D(c, s, y),
    st.tuples(st.floats(-2, 2), st.floats(-2, 2), st.floats(-0.5, 0.5)),
    st.tuples(st.floats(0.2, 4), st.floats(0.2, 4), st.floats(0.2, 2)),
    st.floats(-math.pi, math.pi))


@given(boxes, boxes)
def test_iou_matches_shapely(a, b):
    v = iou3d(a, b)
    assert v == pytest.approx(_shapely_iou(a, b), abs=1e-9)
    assert v == pytest.approx(iou3d(b, a), abs=1e-12)
    assert 0.0 <= v <= 1.0


@given(boxes)
def test_iou_with_self_is_one(a):
    assert iou3d(a, a) == pytest.approx(1.0, abs=1e-12)


# --- average precision -------------------------------------------------------------------

def _gts(n):
    return [GTBox(1, Box3D([5.0 * k, 0, 0], [0.8, 0.6, 1.7], 0.0)) for k in range(n)]


def _det(k, score, hit=True):
    center = [5.0 * k, 0, 0] if hit else [5.0 * k, 50.0, 0]
    return ScoredBox(1, Box3D(center, [0.8, 0.6, 1.7], 0.0), score)


def test_single_perfect_detection():
    for mode in ("11pt", "40pt"):
        assert average_precision([_det(0, 1.0)], _gts(1), mode=mode).ap == {"Pedestrian": 1.0}


def test_false_positive_ranked_first_11pt():
    res = average_precision([_det(0, 0.9, hit=False), _det(0, 0.5)], _gts(1), mode="11pt")
    assert res.ap["Pedestrian"] == pytest.approx(6 / 11, abs=1e-15)


def test_mixed_ranking_40pt():
    # 4 gts, ranking TP FP TP FP TP: precision 1 up to recall 1/4, 2/3 up to 1/2, 3/5 up to 3/4.
    dets = [_det(0, 0.9), _det(9, 0.8, False), _det(1, 0.7), _det(9, 0.6, False), _det(2, 0.5)]
    res40 = average_precision(dets, _gts(4), mode="40pt")
    assert res40.ap["Pedestrian"] == pytest.approx(17 / 30, abs=1e-15)
    res11 = average_precision(dets, _gts(4), mode="11pt")
    assert res11.ap["Pedestrian"] == pytest.approx(31 / 55, abs=1e-15)
    assert (res40.tp["Pedestrian"], res40.fp["Pedestrian"], res40.n_gt["Pedestrian"]) == (3, 2, 4)


def test_duplicate_detection_is_false_positive():
    res = average_precision([_det(0, 0.9), _det(0, 0.8)], _gts(1), mode="40pt")
    assert res.tp["Pedestrian"] == 1 and res.fp["Pedestrian"] == 1
    assert res.ap["Pedestrian"] == 1.0


def test_classes_without_gt_are_absent():
    res = average_precision([_det(0, 0.9)], _gts(1))
    assert list(res.ap) == ["Pedestrian"] and res.mAP == 1.0
    assert math.isnan(average_precision([], []).mAP)


def test_ignored_gt_neither_helps_nor_hurts():
    gts = _gts(2)
    gts[1] = GTBox(1, gts[1].box, ignore=True)
    res = average_precision([_det(0, 0.9), _det(1, 0.8)], gts, mode="40pt")
    assert res.ap["Pedestrian"] == 1.0 and res.n_gt["Pedestrian"] == 1 and res.fp["Pedestrian"] == 0


def test_frames_are_matched_separately():
    gts = [GTBox(1, _gts(1)[0].box, frame=3)]
    det = ScoredBox(1, _gts(1)[0].box, 1.0, frame=4)
    assert average_precision([det], gts).ap["Pedestrian"] == 0.0


def test_no_true_positive_scores_zero():
    ap, r, p = interpolated_ap(np.array([False, False]), 2, "40pt")
    assert ap == 0.0 and len(r) == 40
    with pytest.raises(ValueError):
        interpolated_ap(np.array([True]), 1, "7pt")


@given(st.lists(st.tuples(st.integers(0, 5), st.integers(-1000, 1000), st.booleans()), min_size=1, max_size=15),
       st.sampled_from(["11pt", "40pt"]))
def test_ap_invariant_under_monotone_score_transform(items, mode):
    dets = [_det(k, s / 100, hit) for k, s, hit in items]
    warped = [ScoredBox(d.label, d.box, math.exp(d.score) * 3 + 1) for d in dets]
    assert average_precision(dets, _gts(6), mode=mode).ap == average_precision(warped, _gts(6), mode=mode).ap


def test_ap_report_csv(tmp_path):
    res = average_precision([_det(0, 0.9)], _gts(1), mode="11pt")
    write_ap_report(tmp_path / "ap.csv", {"moderate": res})
    lines = (tmp_path / "ap.csv").read_text().splitlines()
    assert lines[0] == "difficulty,class,mode,ap,tp,fp,n_gt"
    assert lines[1] == "moderate,Pedestrian,11pt,1.000000,1,0,1"
    assert lines[2].startswith("moderate,mAP,11pt,1.000000")


# --- OOD separability ----------------------------------------------------------------------

def test_auroc_examples():
    assert auroc([1, 2, 3], [2.5, 4, 5]) == pytest.approx(8 / 9)
    assert auroc([1, 2], [3, 4]) == 1.0
    same = np.random.default_rng(0).normal(size=50)
    assert auroc(same, same) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        auroc([], [1.0])


def test_separability_report(rng):
    ide, ood = rng.normal(-10, 1, 1000), rng.normal(-2, 1, 1000)
    s = ood_separability(ide, ood)
    assert s.auroc > 0.99 and s.fpr95 < 0.01
    assert s.id_hist.sum() == 1000 and s.ood_hist.sum() == 1000 and len(s.bin_edges) == 51
    assert np.mean(ide < s.threshold) >= 0.95


# --- latency ---------------------------------------------------------------------------

class _Stages:
    def __init__(self, cfg):
        self.cfg = cfg

    def __call__(self, scan):
        t0 = time.perf_counter()
        cloud = project_cloud(scan, self.cfg)
        t1 = time.perf_counter()
        segment_ground(cloud)
        t2 = time.perf_counter()

        class R:
            timings = {"projection": t1 - t0, "ground": t2 - t1}
        return R()


def _scan(width):
    return render([], ProjectionConfig(s_h=64, s_w=width)).points


def test_single_repeat_equals_measurement():
    res = benchmark(_Stages(ProjectionConfig(s_h=64, s_w=256)), [_scan(256)], repeats=1)
    assert len(res.runs) == 1
    for k in ("projection", "ground", "total"):
        assert res.median_ms(k) == res.p95_ms(k) == res.runs[0][k] * 1e3
    assert res.threads == 1 and "python" in res.meta


def test_stage_times_within_total():
    res = benchmark(_Stages(ProjectionConfig(s_h=64, s_w=512)), [_scan(512)] * 2, repeats=3)
    assert len(res.runs) == 6
    for r in res.runs:
        assert r["projection"] + r["ground"] + r["cluster"] + r["network"] <= r["total"]
    assert res.fps == pytest.approx(1000 / res.median_ms())


def test_width_scaling():
    def cost(w):
        res = benchmark(_Stages(ProjectionConfig(s_h=64, s_w=w)), [_scan(w)], repeats=15, warmup=2)
        return res.median_ms("projection") + res.median_ms("ground")
    ratio = cost(4096) / cost(2048)
    assert 0.5 <= ratio <= 4.0


def test_bench_csv(tmp_path):
    res = benchmark(_Stages(ProjectionConfig(s_h=64, s_w=256)), [_scan(256)], repeats=2)
    res.write_csv(tmp_path / "b.csv")
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[0] == "run,projection_ms,ground_ms,cluster_ms,network_ms,total_ms,threads"
    assert len(lines) == 3
    with pytest.raises(ValueError):
        benchmark(_Stages(ProjectionConfig()), [])
