import numpy as np
import pytest

from conftest import flood_fill_components
from fdaseg.metrics import (Branch, BranchSet, branch_rate,
                            branchset_from_centerline, dsc, evaluate,
                            length_rate, parse_branches, skeleton_nodes,
                            skeletonize)
from fdaseg.phantom import PhantomSpec, generate_phantom
from fdaseg.volcore import Volume


def _mask_vol(arr, spacing=(1.0, 1.0, 1.0)):
    return Volume(data=np.asarray(arr, np.uint8), kind="mask", spacing=spacing)


def _graph_stats(skel):
    """(V, E, components, cycle rank) of the skeleton adjacency graph."""
    _, _, adj = skeleton_nodes(skel)
    v = len(adj)
    e = sum(len(n) for n in adj.values()) // 2
    _, c = flood_fill_components(skel.data, 26)
    return v, e, c, e - v + c


# -- skeletonize ---------------------------------------------------------------


def test_skeletonize_thin_tube_unchanged():
    m = np.zeros((12, 5, 5), bool)
    m[2:10, 2, 2] = True
    skel = skeletonize(m)
    assert np.array_equal(skel.data, m)


def test_skeletonize_empty_rejected():
    with pytest.raises(ValueError):
        skeletonize(np.zeros((4, 4, 4), bool))


def test_skeletonize_solid_cylinder_to_axis():
    m = np.zeros((26, 9, 9), bool)
    zz, yy, xx = np.mgrid[0:26, 0:9, 0:9]
    m[(zz >= 3) & (zz <= 22) & ((yy - 4) ** 2 + (xx - 4) ** 2 <= 9)] = True
    skel = skeletonize(m)
    endpoints, clusters, adj = skeleton_nodes(skel)
    assert len(endpoints) == 2
    assert len(clusters) == 0
    assert all(len(nbs) <= 2 for nbs in adj.values())
    n = int(skel.data.sum())
    assert 16 <= n <= 24  # ~20 voxels along the axis, caps erode a little
    vox = skel.voxels()
    lateral = np.sqrt((vox[:, 1] - 4.0) ** 2 + (vox[:, 2] - 4.0) ** 2)
    assert lateral.max() <= 1.6


def test_skeletonize_y_junction_topology(depth2_phantom):
    skel = skeletonize(depth2_phantom.mask.data)
    endpoints, clusters, _ = skeleton_nodes(skel)
    assert len(endpoints) == 3
    assert len(clusters) == 1


def test_skeletonize_preserves_component_count():
    m = np.zeros((14, 14, 14), bool)
    m[2:6, 2:6, 2:6] = True
    m[9:13, 9:13, 9:13] = True
    skel = skeletonize(m)
    _, n = flood_fill_components(skel.data, 26)
    assert n == 2
    assert (skel.data <= m).all()  # skeleton is a subset of the mask


def test_skeletonize_preserves_loops_torus():
    c, rmaj, rtube = 8.0, 5.0, 2.0
    zz, yy, xx = np.mgrid[0:17, 0:17, 0:17].astype(float)
    ring = np.sqrt((yy - c) ** 2 + (xx - c) ** 2) - rmaj
    m = ring ** 2 + (zz - c) ** 2 <= rtube ** 2
    skel = skeletonize(m)
    v, e, comp, rank = _graph_stats(skel)
    assert comp == 1
    assert rank == 1  # one loop, like the torus


def test_skeletonize_blob_has_no_loops():
    zz, yy, xx = np.mgrid[0:11, 0:11, 0:11].astype(float)
    m = (zz - 5) ** 2 + (yy - 5) ** 2 + (xx - 5) ** 2 <= 16
    v, e, comp, rank = _graph_stats(skeletonize(m))
    assert comp == 1 and rank == 0


# -- parse_branches --------------------------------------------------------------


def test_parse_straight_path_single_branch():
    m = np.zeros((10, 3, 3), bool)
    m[1:9, 1, 1] = True
    bs = parse_branches(skeletonize(m))
    assert len(bs) == 1
    assert bs.branches[0].length_mm == pytest.approx(7.0)


def test_parse_y_shape_three_branches():
    m = np.zeros((12, 12, 3), bool)
    m[1:6, 5, 1] = True             # stem
    for i in range(5):              # two diagonal arms
        m[6 + i, 5 - 1 - i, 1] = True
        m[6 + i, 5 + 1 + i, 1] = True
    m[5, 5, 1] = True
    skel = skeletonize(m)
    bs = parse_branches(skel)
    assert len(bs) == 3


def test_parse_depth3_phantom_centerline_seven_branches(depth3_phantom):
    # rasterize the exact generated centerline, then re-parse it
    vox = np.zeros(depth3_phantom.mask.shape, bool)
    for b in depth3_phantom.centerline:
        pts = np.rint(b.points).astype(int)
        vox[pts[:, 0], pts[:, 1], pts[:, 2]] = True
    bs = parse_branches(skeletonize(vox))
    assert len(bs) == 7


def test_mask_thinning_branch_count_near_closed_form():
    # shapes sized so sibling tips stay resolvable in the rasterized mask
    for depth, shape in ((2, (32, 32, 32)), (3, (48, 48, 48)), (4, (64, 48, 48))):
        s = generate_phantom(PhantomSpec(shape=shape, depth=depth, seed=11))
        bs = parse_branches(skeletonize(s.mask.data))
        assert abs(len(bs) - (2 ** depth - 1)) <= 1, (depth, len(bs))


def test_branchset_from_centerline(depth3_phantom):
    bs = branchset_from_centerline(depth3_phantom.centerline, (1.0, 1.0, 1.0))
    assert len(bs) == 7
    assert all(b.length_mm > 0 for b in bs.branches)
    gens = sorted(b.generation for b in bs.branches)
    assert gens == [0, 1, 1, 2, 2, 2, 2]


def test_parse_pure_cycle():
    m = np.zeros((3, 8, 8), bool)
    for y in range(2, 6):
        m[1, y, 2] = m[1, y, 5] = True
    for x in range(2, 6):
        m[1, 2, x] = m[1, 5, x] = True
    bs = parse_branches(skeletonize(m))
    assert len(bs) == 1
    b = bs.branches[0]
    assert tuple(b.voxels[0]) == tuple(b.voxels[-1])  # closed


# -- rates -----------------------------------------------------------------------


def test_length_rate_full_and_empty(depth2_phantom):
    bs = branchset_from_centerline(depth2_phantom.centerline, (1, 1, 1))
    full = length_rate(bs, depth2_phantom.mask.data)
    assert full == pytest.approx(100.0)
    assert length_rate(bs, np.zeros_like(depth2_phantom.mask.data)) == 0.0
    with pytest.raises(ValueError):
        length_rate(BranchSet(), depth2_phantom.mask.data)


def test_branch_rate_constructed_two_of_three():
    branches = [
        Branch(np.array([[1, 1, i] for i in range(1, 8)]), 6.0),
        Branch(np.array([[1, i, 8] for i in range(1, 8)]), 6.0),
        Branch(np.array([[i, 1, 8] for i in range(1, 8)]), 6.0),
    ]
    bs = BranchSet(branches=branches)
    pred = np.zeros((9, 9, 9), np.uint8)
    pred[1, 1, :] = 1
    pred[1, :, 8] = 1
    rate, flags = branch_rate(bs, pred)
    assert rate == pytest.approx(200.0 / 3.0, abs=0.01)
    assert flags == [True, True, False]
    with pytest.raises(ValueError):
        branch_rate(BranchSet(), pred)


def test_branch_rate_threshold_boundary():
    b = Branch(np.array([[0, 0, i] for i in range(10)]), 9.0)
    pred = np.zeros((1, 1, 10), np.uint8)
    pred[0, 0, :8] = 1  # exactly 0.8 coverage counts as detected
    rate, flags = branch_rate(BranchSet([b]), pred, frac=0.8)
    assert flags == [True]
    pred[0, 0, 7] = 0
    rate, flags = branch_rate(BranchSet([b]), pred, frac=0.8)
    assert flags == [False]


def test_dsc_hand_cases():
    a = np.zeros((5, 5, 8), np.uint8)
    b = np.zeros((5, 5, 8), np.uint8)
    assert dsc(a, b) == 100.0  # both empty
    a[0, 0, :4] = 1
    assert dsc(a, b) == 0.0    # disjoint from empty
    b[1, 1, :4] = 1
    assert dsc(a, b) == 0.0    # disjoint
    # |P| = |G| = 100 with overlap 50 -> 50%
    p2 = np.zeros((4, 10, 10), np.uint8)
    g2 = np.zeros((4, 10, 10), np.uint8)
    p2[0, :, :] = 1
    g2[0, :5, :] = 1
    g2[1, :5, :] = 1
    assert dsc(p2, g2) == pytest.approx(50.0)


def test_evaluate_perfect_prediction(depth2_phantom):
    rep = evaluate(depth2_phantom.mask, depth2_phantom.mask,
                   centerline=depth2_phantom.centerline)
    assert rep.length_rate == pytest.approx(100.0)
    assert rep.branch_rate == pytest.approx(100.0)
    assert rep.dsc >= 99.9
    assert rep.gt_branch_count == 3
    assert all(rep.branch_detected)
    d = rep.to_dict()
    assert set(d) == {"length_rate", "branch_rate", "dsc", "branch_detected",
                      "gt_total_length_mm", "gt_branch_count", "branch_frac",
                      "connectivity"}


def test_evaluate_removes_false_positive_blob(depth2_phantom):
    pred = depth2_phantom.mask.data.copy()
    pred[0:2, 0:2, 0:2] = 1  # disconnected junk
    rep = evaluate(_mask_vol(pred), depth2_phantom.mask,
                   centerline=depth2_phantom.centerline)
    clean = evaluate(depth2_phantom.mask, depth2_phantom.mask,
                     centerline=depth2_phantom.centerline)
    assert rep.length_rate == clean.length_rate
    assert rep.branch_rate == clean.branch_rate
    assert rep.dsc == clean.dsc


def test_evaluate_largest_component_idempotent(depth2_phantom):
    from fdaseg.volcore import largest_component
    pred = depth2_phantom.mask.data.copy()
    pred[0:3, 0:3, 0:3] = 1
    a = evaluate(_mask_vol(pred), depth2_phantom.mask,
                 centerline=depth2_phantom.centerline)
    b = evaluate(largest_component(_mask_vol(pred)), depth2_phantom.mask,
                 centerline=depth2_phantom.centerline)
    assert a.to_dict() == b.to_dict()


def test_evaluate_without_centerline_skeletonizes(depth2_phantom):
    rep = evaluate(depth2_phantom.mask, depth2_phantom.mask, centerline=None)
    assert rep.length_rate == pytest.approx(100.0)
    assert rep.branch_rate == pytest.approx(100.0)
    assert 2 <= rep.gt_branch_count <= 4


def test_metrics_monotone_in_true_positives(depth2_phantom):
    gt = depth2_phantom.mask
    bs = branchset_from_centerline(depth2_phantom.centerline, (1, 1, 1))
    prev = (0.0, 0.0, 0.0)
    D = gt.data.shape[0]
    for k in range(4, D + 1, 4):
        pred = gt.data.copy()
        pred[:D - k] = 0  # grow the kept slab from the bottom up
        if not pred.any():
            continue
        rep = evaluate(_mask_vol(pred), gt, centerline=depth2_phantom.centerline)
        cur = (rep.length_rate, rep.branch_rate, rep.dsc)
        assert all(c >= p - 1e-9 for c, p in zip(cur, prev))
        prev = cur


def _nearest_branch_assignment(sample):
    """Voxel sets of each branch's capsule neighborhood, ties to lower index."""
    branches = [np.asarray(b.points) for b in sample.centerline]
    fg = np.argwhere(sample.mask.data > 0).astype(float)
    dists = np.stack([
        np.min(np.linalg.norm(fg[:, None, :] - pts[None, :, :], axis=2), axis=1)
        for pts in branches
    ])
    return fg.astype(int), np.argmin(dists, axis=0)


def test_subtree_removal_reduces_length_exactly():
    sample = generate_phantom(PhantomSpec(shape=(48, 48, 48), depth=2,
                                          root_radius=3.0, seed=23))
    bs = branchset_from_centerline(sample.centerline, (1, 1, 1))
    child_idx = 1  # first generation-1 branch
    assert bs.branches[child_idx].generation == 1

    kept_vox = {tuple(v) for i, b in enumerate(bs.branches) if i != child_idx
                for v in b.voxels}
    child_vox = [tuple(v) for v in bs.branches[child_idx].voxels]
    shared = [v for v in child_vox if v in kept_vox]
    # precondition: the only shared voxel is the junction anchor
    assert len(shared) == 1, f"seed gives overlapping paths: {shared}"

    fg, owner = _nearest_branch_assignment(sample)
    pred = sample.mask.data.copy()
    remove = fg[owner == child_idx]
    pred[remove[:, 0], remove[:, 1], remove[:, 2]] = 0
    for v in kept_vox:  # kept centerlines stay present
        pred[v] = 1

    measured = length_rate(bs, pred)
    child_len = bs.branches[child_idx].length_mm
    expected = 100.0 * (bs.total_length - child_len) / bs.total_length
    assert abs(measured - expected) <= 0.5

    rep = evaluate(_mask_vol(pred), sample.mask, centerline=sample.centerline)
    assert abs(rep.length_rate - expected) <= 0.5
    assert rep.branch_detected[child_idx] is False


def test_report_rates_within_bounds(depth3_phantom):
    rng = np.random.default_rng(0)
    for _ in range(4):
        pred = (depth3_phantom.mask.data & (rng.random(depth3_phantom.mask.shape)
                                            < rng.uniform(0.3, 1.0))).astype(np.uint8)
        if not pred.any():
            continue
        rep = evaluate(_mask_vol(pred), depth3_phantom.mask,
                       centerline=depth3_phantom.centerline)
        for v in (rep.length_rate, rep.branch_rate, rep.dsc):
            assert 0.0 <= v <= 100.0
