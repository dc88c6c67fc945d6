import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import cloud_from_ranges, label_partition, union_find_partition
from pcroad.clustering import ClusterConfig, cluster_depth, merge_angle, neighbour_angle, relabel_by_size
from pcroad.ground import GroundMask
from pcroad.projection import ProjectionConfig

CFG = ProjectionConfig(s_h=16, s_w=64)


def no_ground(cloud):
    return GroundMask(np.zeros(cloud.shape, dtype=bool), np.asarray(cloud.valid))


def oracle(cloud, ground, cfg):
    cand = cloud.valid & ~ground.mask
    pc = cloud.config
    return union_find_partition(cloud.range, cand, cfg.window_h, cfg.window_w, pc.alpha_v, pc.alpha_h,
                                cfg.theta, cfg.min_cluster_points)


def test_merge_angle_equal_ranges():
    assert merge_angle(10.0, 10.0, 0.01) == pytest.approx((math.pi - 0.01) / 2, rel=1e-12)


def test_merge_angle_depth_jump():
    assert merge_angle(10.0, 1.0, 0.01) == pytest.approx(math.atan(1.0 * math.sin(0.01) / (10 - math.cos(0.01))))
    assert merge_angle(10.0, 1.0, 0.01) == pytest.approx(0.00111, abs=1e-5)


def test_merge_angle_rejects_bad_order():
    with pytest.raises(ValueError):
        merge_angle(1.0, 2.0, 0.01)
    with pytest.raises(ValueError):
        merge_angle(1.0, 0.0, 0.01)


def test_neighbour_angle_diagonal():
    assert neighbour_angle(0, 2, 0.1, 0.2) == pytest.approx(0.4)
    assert neighbour_angle(1, 1, 0.3, 0.4) == pytest.approx(0.5)


def test_two_separated_blobs():
    ranges = np.zeros((16, 64))
    valid = np.zeros((16, 64), dtype=bool)
    ranges[4:8, 10:14] = 10.0
    ranges[4:8, 40:44] = 20.0
    valid[4:8, 10:14] = valid[4:8, 40:44] = True
    cloud = cloud_from_ranges(ranges, valid, CFG)
    labels = cluster_depth(cloud, no_ground(cloud), ClusterConfig(min_cluster_points=4)).labels
    assert labels.max() == 2
    assert set(np.unique(labels[4:8, 10:14])) == {1}
    assert set(np.unique(labels[4:8, 40:44])) == {2}
    assert not labels[~valid].any()


def test_depth_step_splits_adjacent_cells():
    ranges = np.zeros((16, 64))
    valid = np.zeros((16, 64), dtype=bool)
    ranges[4:8, 10:14] = 5.0
    ranges[4:8, 14:18] = 30.0
    valid[4:8, 10:18] = True
    cloud = cloud_from_ranges(ranges, valid, CFG)
    labels = cluster_depth(cloud, no_ground(cloud), ClusterConfig(min_cluster_points=4)).labels
    assert labels.max() == 2 and labels[5, 11] != labels[5, 15]


def test_clusters_wrap_around_columns():
    ranges = np.zeros((16, 64))
    valid = np.zeros((16, 64), dtype=bool)
    ranges[4:8, [62, 63, 0, 1]] = 10.0
    valid[4:8, [62, 63, 0, 1]] = True
    cloud = cloud_from_ranges(ranges, valid, CFG)
    labels = cluster_depth(cloud, no_ground(cloud), ClusterConfig(min_cluster_points=4)).labels
    assert labels.max() == 1 and (labels[valid] == 1).all()


def test_single_point():
    ranges = np.zeros((16, 64))
    valid = np.zeros((16, 64), dtype=bool)
    ranges[3, 3], valid[3, 3] = 7.0, True
    cloud = cloud_from_ranges(ranges, valid, CFG)
    assert cluster_depth(cloud, no_ground(cloud), ClusterConfig(min_cluster_points=1)).labels[3, 3] == 1
    assert cluster_depth(cloud, no_ground(cloud)).n_clusters == 0


def test_all_ground_gives_no_clusters(rng):
    ranges = rng.uniform(5, 10, (16, 64))
    valid = np.ones((16, 64), dtype=bool)
    cloud = cloud_from_ranges(ranges, valid, CFG)
    labels = cluster_depth(cloud, GroundMask(valid.copy(), valid))
    assert labels.n_clusters == 0 and not labels.labels.any()


def test_shape_mismatch():
    cloud = cloud_from_ranges(np.ones((16, 64)), np.ones((16, 64), bool), CFG)
    with pytest.raises(ValueError):
        cluster_depth(cloud, GroundMask(np.zeros((16, 32), bool), np.ones((16, 32), bool)))


def test_relabel_by_size_renumbers_in_id_order():
    labels = np.array([[3, 3, 3, 0, 1], [2, 2, 5, 5, 5]])
    out = relabel_by_size(labels, 3)
    assert out.tolist() == [[1, 1, 1, 0, 0], [0, 0, 2, 2, 2]]


def test_config_validation():
    with pytest.raises(ValueError):
        ClusterConfig(theta=0.0)
    with pytest.raises(ValueError):
        ClusterConfig(theta=math.pi / 2)
    with pytest.raises(ValueError):
        ClusterConfig(window_w=0)


# --- oracle equivalence -----------------------------------------------------------------

@st.composite
def range_images(draw):
    h, w = draw(st.integers(2, 10)), draw(st.integers(4, 24))
    seed = draw(st.integers(0, 2 ** 32 - 1))
    rng = np.random.default_rng(seed)
    # Piecewise-constant depth layers with jitter give both merges and splits.
    layers = rng.choice([4.0, 6.0, 15.0, 40.0], size=(h, w))
    ranges = layers * rng.uniform(0.97, 1.03, size=(h, w))
    valid = rng.random((h, w)) > draw(st.floats(0.0, 0.6))
    ground = valid & (rng.random((h, w)) < draw(st.floats(0.0, 0.3)))
    cfg = ClusterConfig(theta=draw(st.floats(0.02, 1.4)), window_h=draw(st.integers(1, 3)),
                        window_w=draw(st.integers(1, 4)), min_cluster_points=draw(st.integers(1, 6)))
    return ranges, valid, ground, cfg


@given(range_images())
def test_partition_matches_union_find(case):
    ranges, valid, ground, cfg = case
    pc = ProjectionConfig(s_h=ranges.shape[0], s_w=ranges.shape[1])
    cloud = cloud_from_ranges(ranges, valid, pc)
    gmask = GroundMask(ground, valid)
    labels = cluster_depth(cloud, gmask, cfg).labels
    assert label_partition(labels) == oracle(cloud, gmask, cfg)
    assert not labels[~valid | ground].any()
    # Ids are contiguous 1..K and follow first-cell order.
    ids = labels[labels > 0]
    k = labels.max()
    assert set(np.unique(ids)) == set(range(1, k + 1))
    firsts = [np.flatnonzero(labels.ravel() == i)[0] for i in range(1, k + 1)]
    assert firsts == sorted(firsts)


@given(range_images(), st.integers(1, 23))
def test_column_rotation_permutes_partition(case, shift):
    ranges, valid, ground, cfg = case
    pc = ProjectionConfig(s_h=ranges.shape[0], s_w=ranges.shape[1])

    def partition(r, v, g):
        cloud = cloud_from_ranges(r, v, pc)
        return {frozenset((i // r.shape[1], i % r.shape[1]) for i in grp)
                for grp in label_partition(cluster_depth(cloud, GroundMask(g, v), cfg).labels)}

    w = ranges.shape[1]
    rolled = partition(np.roll(ranges, shift, 1), np.roll(valid, shift, 1), np.roll(ground, shift, 1))
    base = partition(ranges, valid, ground)
    assert rolled == {frozenset((r, (c + shift) % w) for r, c in grp) for grp in base}


def test_realistic_scan_matches_union_find():
    from pcroad.dataset import obstacle_scene
    from pcroad.ground import segment_ground
    from pcroad.projection import project_cloud
    pc = ProjectionConfig(s_h=32, s_w=256)
    cloud = project_cloud(obstacle_scene(7, pc).points, pc)
    ground, _ = segment_ground(cloud, rng_seed=0)
    cfg = ClusterConfig()
    labels = cluster_depth(cloud, ground, cfg).labels
    assert labels.max() >= 2
    assert label_partition(labels) == oracle(cloud, ground, cfg)
