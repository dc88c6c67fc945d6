import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import dense_box, dense_classifier
from pcroad.boxes import SIZE_TEMPLATES, heading_bin_centers
from pcroad.networks import (BOX_OUT, ConfigurationError, EnergyConfig, BoxPrediction, box_energy_logits,
                             box_forward, calibrate_threshold, classifier_forward, critical_point_set,
                             critical_set_overlap, decode_box, energy_score, id_passthrough, init_weights,
                             pvle_forward, weight_shapes)
from pcroad.proposals import ProposalConfig, make_proposal
from pcroad.weights_io import ArchiveError, dumps, load_weights, loads, save_weights


@pytest.fixture(scope="module")
def cls_w():
    return init_weights("classifier", seed=3)


@pytest.fixture(scope="module")
def box_w():
    w = init_weights("box", seed=4)
    # Non-zero biases so the oracle exercises every term.
    rng = np.random.default_rng(0)
    for name in w.names:
        if ".b" in name:
            w.tensors[name] = rng.normal(0, 0.1, size=w[name].shape)
    return w


def test_classifier_matches_dense_oracle(cls_w, rng):
    pts = rng.normal(size=(10, 3))
    vox = rng.uniform(-1, 1, 3)
    logits = classifier_forward(pts, pvle_forward(vox, cls_w), cls_w)
    np.testing.assert_allclose(logits, dense_classifier(pts, vox, cls_w), rtol=1e-10, atol=1e-12)


def test_classifier_without_location_matches_oracle(rng):
    w = init_weights("classifier", seed=5, use_pvle=False)
    pts = rng.normal(size=(7, 3))
    np.testing.assert_allclose(classifier_forward(pts, None, w), dense_classifier(pts, None, w), rtol=1e-10)


def test_box_matches_dense_oracle(box_w, rng):
    pts = rng.normal(size=(9, 3))
    vox = rng.uniform(-1, 1, 3)
    pred = box_forward(pts, pvle_forward(vox, box_w), box_w)
    out, delta, yaw = dense_box(pts, vox, box_w)
    np.testing.assert_allclose(pred.tnet_delta, delta, rtol=1e-10, atol=1e-12)
    assert float(pred.rnet_yaw) == pytest.approx(yaw, rel=1e-10)
    np.testing.assert_allclose(pred.center_delta, out[:3], rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(pred.heading_logits, out[3:15], rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(pred.size_residuals.ravel(), out[-9:], rtol=1e-10, atol=1e-12)


def test_batched_forward_matches_single(cls_w, rng):
    pts = rng.normal(size=(4, 16, 3))
    vox = pvle_forward(rng.uniform(-1, 1, (4, 3)), cls_w)
    batch = classifier_forward(pts, vox, cls_w)
    for i in range(4):
        np.testing.assert_allclose(batch[i], classifier_forward(pts[i], vox[i], cls_w), rtol=1e-12)


@given(st.integers(0, 10_000))
def test_classifier_is_permutation_invariant(seed):
    w = init_weights("classifier", seed=seed % 7)
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(32, 3))
    v = pvle_forward(rng.uniform(-1, 1, 3), w)
    a = classifier_forward(pts, v, w)
    b = classifier_forward(pts[rng.permutation(32)], v, w)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


@given(st.integers(0, 10_000), st.integers(1, 20))
def test_duplicated_points_do_not_change_output(seed, n_dup):
    w = init_weights("box", seed=seed % 5)
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(24, 3))
    padded = np.vstack([pts, pts[rng.integers(0, 24, n_dup)]])
    v = pvle_forward(rng.uniform(-1, 1, 3), w)
    a, b = box_forward(pts, v, w), box_forward(padded, v, w)
    np.testing.assert_allclose(box_energy_logits(a), box_energy_logits(b), rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(a.center_delta, b.center_delta, rtol=1e-12, atol=1e-12)


def test_missing_location_feature_is_rejected(cls_w):
    with pytest.raises(ConfigurationError):
        classifier_forward(np.zeros((8, 3)), None, cls_w)
    with pytest.raises(ConfigurationError):
        pvle_forward([0.0, 0.0], cls_w)
    with pytest.raises(ValueError):
        classifier_forward(np.full((8, 3), np.nan), np.zeros(32), cls_w)


def test_weight_shapes():
    shapes = weight_shapes("box")
    assert shapes["box.w2"] == (128, BOX_OUT) and BOX_OUT == 3 + 24 + 12
    assert shapes["enc.w3"] == (64, 128)
    assert weight_shapes("classifier", use_pvle=False)["head.w1"] == (128, 64)
    with pytest.raises(ConfigurationError):
        weight_shapes("segmenter")


# --- energy ----------------------------------------------------------------------------

def test_energy_examples():
    assert energy_score([0.0, 0.0, 0.0]) == pytest.approx(-math.log(3), rel=1e-12)
    assert energy_score([10.0, 0.0]) == pytest.approx(-10.0000454, abs=1e-7)
    assert energy_score([0.0, 0.0], T=2.0) == pytest.approx(-2 * math.log(2), rel=1e-12)
    assert energy_score([1000.0, 1000.0]) == pytest.approx(-1000 - math.log(2))


def test_energy_errors():
    with pytest.raises(ValueError):
        energy_score([])
    with pytest.raises(ValueError):
        energy_score([1.0], T=0.0)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=20), st.floats(0.1, 10))
def test_energy_bounds(logits, T):
    e = energy_score(logits, T)
    assert -max(logits) - T * math.log(len(logits)) - 1e-9 <= e <= -max(logits) + 1e-9


def test_box_energy_at_zero_logits():
    z = np.zeros
    pred = BoxPrediction(z(3), z(3), z(12), z(12), z(3), z((3, 3)), 0.0)
    logits = box_energy_logits(pred)
    assert logits.shape == (15,)
    assert energy_score(logits) == pytest.approx(-math.log(15))


def test_gate_is_strict():
    cfg = EnergyConfig(gamma_c=-1.0, gamma_b=-2.0)
    assert id_passthrough(-1.5, -2.5, cfg) == "in"
    assert id_passthrough(-1.0, -2.5, cfg) == "out"
    assert id_passthrough(-1.5, -2.0, cfg) == "out"
    assert id_passthrough(-1.5, None, cfg) == "in"
    with pytest.raises(ValueError):
        EnergyConfig(T=0.0)


def test_calibrate_threshold_examples():
    assert calibrate_threshold(np.arange(1, 101), 0.95) == 96
    g = calibrate_threshold(np.full(10, 5.0), 0.95)
    assert g > 5.0 and g == np.nextafter(5.0, np.inf)
    assert calibrate_threshold([2.5], 0.5) == np.nextafter(2.5, np.inf)
    with pytest.raises(ValueError):
        calibrate_threshold([], 0.9)
    with pytest.raises(ValueError):
        calibrate_threshold([1.0], 1.0)


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=200), st.floats(0.01, 0.99))
def test_calibrated_gate_passes_requested_fraction(energies, rate):
    gamma = calibrate_threshold(energies, rate)
    e = np.asarray(energies)
    passed = np.count_nonzero(e < gamma)
    assert passed >= math.ceil(rate * len(e) - 1e-12)
    # Minimality: any smaller distinct value passes too few.
    lower = e[e < gamma]
    if len(lower):
        assert np.count_nonzero(e < lower.max()) < math.ceil(rate * len(e) - 1e-12)


# --- decoding ----------------------------------------------------------------------------

def _proposal(mean):
    pts = np.asarray(mean) + np.random.default_rng(0).normal(0, 0.2, (30, 3))
    pts -= pts.mean(axis=0) - mean
    return make_proposal(pts, 1, ProposalConfig(), np.random.default_rng(0))


def _prediction(h_bin, s_bin, residual=0.0):
    hl = np.zeros(12)
    hl[h_bin] = 5.0
    hr = np.zeros(12)
    hr[h_bin] = residual
    sl = np.zeros(3)
    sl[s_bin] = 5.0
    return BoxPrediction(np.zeros(3), np.zeros(3), hl, hr, sl, np.zeros((3, 3)), 0.0)


@pytest.mark.parametrize("s_bin", [0, 1, 2])
def test_zero_residuals_decode_to_template(s_bin):
    prop = _proposal(np.array([12.0, 0.0, -0.8]))
    box, degenerate = decode_box(_prediction(4, s_bin), prop)
    np.testing.assert_allclose(box.center, prop.mean, atol=1e-12)
    np.testing.assert_allclose(box.size, SIZE_TEMPLATES[s_bin])
    assert box.yaw == pytest.approx(heading_bin_centers()[4])
    assert not degenerate


def test_world_yaw_on_lateral_proposal():
    prop = _proposal(np.array([0.0, 10.0, -1.0]))
    pred = _prediction(6, 0, residual=-heading_bin_centers()[6])
    pred = BoxPrediction(np.array([1.0, 0.0, 0.0]), np.zeros(3), pred.heading_logits, pred.heading_residuals,
                         pred.size_logits, pred.size_residuals, 0.0)
    box, _ = decode_box(pred, prop)
    assert box.yaw == pytest.approx(math.pi / 2)
    np.testing.assert_allclose(box.center, [0.0, 11.0, -1.0], atol=1e-12)


def test_bin_centres():
    c = heading_bin_centers()
    assert c[0] == pytest.approx(-math.pi + math.pi / 12)
    np.testing.assert_allclose(np.diff(c), math.pi / 6)


def test_negative_size_is_clamped_and_flagged():
    pred = _prediction(0, 0)
    sres = np.zeros((3, 3))
    sres[0, 1] = -1.5
    pred = BoxPrediction(pred.center_delta, pred.tnet_delta, pred.heading_logits, pred.heading_residuals,
                         pred.size_logits, sres, 0.0)
    box, degenerate = decode_box(pred, _proposal(np.array([8.0, 1.0, 0.0])))
    assert degenerate and box.size[1] == pytest.approx(0.1)


# --- critical points ---------------------------------------------------------------------

def test_critical_set_of_identical_points(cls_w, box_w):
    pts = np.tile([[1.0, -2.0, 0.5]], (64, 1))
    assert critical_point_set(pts, cls_w) == {0}
    assert critical_point_set(pts, box_w, "box") == {0}


def test_critical_set_size_bound(cls_w, rng):
    crit = critical_point_set(rng.normal(size=(512, 3)), cls_w)
    assert 1 <= len(crit) <= 128
    assert all(0 <= i < 512 for i in crit)


def test_critical_points_alone_reproduce_global_feature(cls_w, rng):
    pts = rng.normal(size=(64, 3))
    crit = sorted(critical_point_set(pts, cls_w))
    v = pvle_forward([0.1, 0.2, 0.3], cls_w)
    np.testing.assert_allclose(classifier_forward(pts[crit], v, cls_w), classifier_forward(pts, v, cls_w),
                               rtol=1e-12)


def test_critical_set_overlap():
    assert critical_set_overlap({1, 2}, {2, 3}) == pytest.approx(1 / 3)
    assert critical_set_overlap(set(), set()) == 1.0
    with pytest.raises(ValueError):
        critical_point_set(np.zeros((4, 3)), init_weights("classifier"), "segmenter")


# --- weight archives ----------------------------------------------------------------------

def test_archive_roundtrip(tmp_path, box_w):
    save_weights(tmp_path / "w.pcrw", box_w)
    back = load_weights(tmp_path / "w.pcrw")
    assert back.kind == "box" and back.names == box_w.names
    for name in box_w.names:
        np.testing.assert_array_equal(back[name], box_w[name].astype(np.float32))


def test_archive_errors(cls_w):
    data = dumps(cls_w)
    with pytest.raises(ArchiveError):
        loads(b"XXXX" + data[4:])
    with pytest.raises(ArchiveError):
        loads(data[:4] + bytes([99]) + data[5:])
    with pytest.raises(ArchiveError):
        loads(data[:-10])


def test_check_rejects_bad_tensors(cls_w):
    w = cls_w.copy()
    w.tensors["head.w2"] = np.zeros((3, 3))
    with pytest.raises(ConfigurationError, match="head.w2"):
        w.check()
    w = cls_w.copy()
    w.tensors["enc.b1"] = np.full(32, np.inf)
    with pytest.raises(ConfigurationError, match="enc.b1"):
        w.check()
    w = cls_w.copy()
    del w.tensors["pvle.b2"]
    with pytest.raises(ConfigurationError):
        w.check()
