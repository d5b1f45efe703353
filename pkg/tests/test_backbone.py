import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mammoclu.backbone import (Backbone, ClusterConfig, ClusterOp, ContextClusterBlock, PointReducer,
                               StageSpec, aggregate_dispatch, anchor_feature, anchor_features,
                               assign_clusters, backbone_forward, neighbor_indices, preset, select_anchors)
from mammoclu.data_io import ValidationError
from mammoclu.points import image_to_points

from oracles import cosine_argmax, finite_difference_check, weighted_centre


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


# -- anchors ---------------------------------------------------------------


def _rc(idx, w):
    return sorted({int(i) // w for i in idx}), sorted({int(i) % w for i in idx})


def test_anchors_4x4_2x2():
    idx = select_anchors((4, 4), (2, 2))
    assert _rc(idx, 4) == ([1, 3], [1, 3])


@pytest.mark.parametrize("h,w", [(1, 1), (4, 4), (5, 7), (8, 3)])
def test_single_central_anchor(h, w):
    (idx,) = select_anchors((h, w), (1, 1))
    assert divmod(int(idx), w) == (h // 2, w // 2)


def test_identity_lattice():
    assert sorted(select_anchors((3, 3), (3, 3)).tolist()) == list(range(9))


def test_anchor_grid_too_large():
    with pytest.raises(ValidationError):
        select_anchors((2, 4), (3, 1))


def test_neighbors_clamped_at_corner():
    nbr = neighbor_indices((3, 3), np.array([0]), 4)[0]
    # up and left replicate the corner itself
    assert sorted(nbr.tolist()) == [0, 0, 1, 3]
    nbr8 = neighbor_indices((3, 3), np.array([4]), 8)[0]
    assert sorted(nbr8.tolist()) == [0, 1, 2, 3, 5, 6, 7, 8]


# -- anchor feature ----------------------------------------------------------


def test_anchor_feature_identity():
    v = torch.tensor([0.3, -1.0, 2.0, 0.1, 0.0])
    torch.testing.assert_close(anchor_feature(v, v.repeat(8, 1)), v, rtol=1e-6, atol=0)


def test_anchor_feature_k4_zeros():
    out = anchor_feature(torch.tensor([1.0, 1, 1, 0, 0], dtype=torch.float64), torch.zeros(4, 5, dtype=torch.float64))
    torch.testing.assert_close(out, torch.tensor([0.2, 0.2, 0.2, 0, 0], dtype=torch.float64), rtol=0, atol=1e-15)


def test_anchor_feature_k8():
    out = anchor_feature(torch.zeros(5, dtype=torch.float64), torch.full((8, 5), 0.9, dtype=torch.float64))
    torch.testing.assert_close(out, torch.full((5,), 0.8, dtype=torch.float64), rtol=0, atol=1e-15)


def test_anchor_feature_dim_mismatch():
    with pytest.raises(ValidationError):
        anchor_feature(torch.zeros(5), torch.zeros(4, 3))


def test_anchor_features_read_pre_update_values():
    pts = torch.arange(16.0).reshape(1, 16, 1)
    out = anchor_features(pts, (4, 4), (2, 2), 4)
    # anchor at (1,1)=5 with neighbours 1, 9, 4, 6
    assert out[0, 0, 0].item() == pytest.approx((5 + 1 + 9 + 4 + 6) / 5)


# -- assignment ----------------------------------------------------------------


def test_single_anchor_takes_all():
    pts = torch.randn(10, 5, dtype=torch.float64)
    a, _ = assign_clusters(pts, torch.randn(1, 5, dtype=torch.float64))
    assert a.tolist() == [0] * 10


def test_orthogonal_anchor():
    a, sim = assign_clusters(torch.tensor([[1.0, 0, 0, 0, 0]]), torch.tensor([[1.0, 0, 0, 0, 0], [0, 1.0, 0, 0, 0]]))
    assert a.tolist() == [0]
    assert sim[0].tolist() == pytest.approx([1.0, 0.0])


def test_ties_go_low():
    a, _ = assign_clusters(torch.tensor([[1.0, 1.0]]), torch.tensor([[1.0, 0.0], [0.0, 1.0]]))
    assert a.tolist() == [0]


def test_no_anchors():
    with pytest.raises(ValidationError):
        assign_clusters(torch.randn(3, 5), torch.zeros(0, 5))


def test_zero_norm_is_safe():
    a, sim = assign_clusters(torch.zeros(2, 5), torch.randn(3, 5))
    assert torch.isfinite(sim).all() and a.tolist() == [0, 0]


def test_assignment_matches_oracle_100():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(1, 65))
        pts = rng.normal(size=(n, 5))
        anc = rng.normal(size=(4, 5))
        got, _ = assign_clusters(torch.as_tensor(pts), torch.as_tensor(anc))
        assert got.tolist() == cosine_argmax(pts, anc)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), lam=st.floats(1e-3, 1e3))
def test_assignment_scale_invariant_and_partition(seed, lam):
    rng = np.random.default_rng(seed)
    pts = torch.as_tensor(rng.normal(size=(30, 5)))
    anc = torch.as_tensor(rng.normal(size=(4, 5)))
    a, _ = assign_clusters(pts, anc)
    b, _ = assign_clusters(pts * lam, anc * lam)
    assert torch.equal(a, b)
    assert torch.bincount(a, minlength=4).sum().item() == 30


# -- aggregation -------------------------------------------------------------


def test_aggregate_identical_members():
    v = torch.tensor([0.5, -2.0, 3.0], dtype=torch.float64)
    vals = v.repeat(1, 6, 1)
    gate = torch.rand(1, 6, dtype=torch.float64) * 0.9 + 0.05
    out = aggregate_dispatch(vals, torch.zeros(1, 6, dtype=torch.long), gate, v.reshape(1, 1, 3))
    torch.testing.assert_close(out[0], gate[0, :, None] * v, rtol=0, atol=1e-14)


def test_aggregate_matches_exact_formula():
    rng = np.random.default_rng(5)
    vals = torch.as_tensor(rng.normal(size=(1, 8, 3)))
    anchor_vals = torch.as_tensor(rng.normal(size=(1, 2, 3)))
    assignment = torch.as_tensor([[0, 1, 1, 0, 1, 1, 1, 0]])
    gate = torch.as_tensor(rng.uniform(0.05, 0.95, size=(1, 8)))
    out = aggregate_dispatch(vals, assignment, gate, anchor_vals)
    for c in range(2):
        members = [j for j in range(8) if assignment[0, j] == c]
        centre = weighted_centre(anchor_vals[0, c].tolist(), [vals[0, j].tolist() for j in members],
                                 [gate[0, j].item() for j in members])
        for j in members:
            expect = np.array(centre) * gate[0, j].item()
            np.testing.assert_allclose(out[0, j].numpy(), expect, rtol=1e-13, atol=1e-14)


def test_empty_cluster_contributes_nothing():
    vals = torch.randn(1, 5, 2, dtype=torch.float64)
    gate = torch.rand(1, 5, dtype=torch.float64)
    assignment = torch.zeros(1, 5, dtype=torch.long)
    anc = torch.randn(1, 2, 2, dtype=torch.float64)
    with_empty = aggregate_dispatch(vals, assignment, gate, anc)
    alone = aggregate_dispatch(vals, assignment, gate, anc[:, :1])
    torch.testing.assert_close(with_empty, alone, rtol=0, atol=0)


def test_single_point_zero_out_proj_identity():
    op = ClusterOp(3, (1, 1)).double()
    torch.nn.init.zeros_(op.out_proj.weight)
    torch.nn.init.zeros_(op.out_proj.bias)
    x = torch.randn(1, 1, 1, 3, dtype=torch.float64)
    assert torch.equal(x + op(x), x)


# -- block / reducer / backbone -------------------------------------------------


def test_block_zero_init_is_identity():
    blk = ContextClusterBlock(8, (2, 2)).double()
    blk.zero_init_()
    x = torch.randn(2, 4, 4, 8, dtype=torch.float64)
    assert torch.equal(blk(x), x)


@pytest.mark.parametrize("h,w,anchors,k", [(4, 4, (2, 2), 4), (6, 3, (3, 1), 8), (8, 8, (4, 4), 4)])
def test_block_shape(h, w, anchors, k):
    blk = ContextClusterBlock(6, anchors, k)
    assert blk(torch.randn(3, h, w, 6)).shape == (3, h, w, 6)


def test_block_gradients_finite_differences():
    blk = ContextClusterBlock(6, (2, 2), 4).double()
    x = torch.randn(1, 4, 4, 6, dtype=torch.float64, requires_grad=True)
    target = torch.randn(1, 4, 4, 6, dtype=torch.float64)

    def loss():
        return ((blk(x) - target) ** 2).sum()

    err, n = finite_difference_check(loss, list(blk.parameters()) + [x], step=1e-5)
    assert n > 400
    assert err <= 1e-4


def test_reducer_identity_r1():
    red = PointReducer(5, 5, 1).double()
    torch.nn.init.eye_(red.proj.weight)
    torch.nn.init.zeros_(red.proj.bias)
    x = torch.randn(2, 3, 3, 5, dtype=torch.float64)
    assert torch.equal(red(x), x)


def test_reducer_shape_and_error():
    red = PointReducer(3, 7, 2)
    assert red(torch.randn(1, 4, 4, 3)).shape == (1, 2, 2, 7)
    with pytest.raises(ValidationError, match="5x4"):
        red(torch.randn(1, 5, 4, 3))


def test_reducer_constant_preserved():
    # 2x2 window of a constant 2-dim grid; rows of the projection sum to 1 across each channel group
    red = PointReducer(2, 2, 2).double()
    w = torch.zeros(2, 8, dtype=torch.float64)
    w[0, 0::2] = 0.25
    w[1, 1::2] = torch.tensor([0.1, 0.2, 0.3, 0.4], dtype=torch.float64)
    red.proj.weight.data.copy_(w)
    red.proj.bias.data.zero_()
    x = torch.tensor([3.0, -1.0], dtype=torch.float64).expand(1, 2, 2, 2)
    torch.testing.assert_close(red(x)[0, 0, 0], torch.tensor([3.0, -1.0], dtype=torch.float64))


def test_reducer_concat_layout():
    red = PointReducer(1, 4, 2).double()
    torch.nn.init.eye_(red.proj.weight)
    red.proj.bias.data.zero_()
    x = torch.arange(16.0, dtype=torch.float64).reshape(1, 4, 4, 1)
    out = red(x)
    assert out[0, 0, 0].tolist() == [0, 1, 4, 5]
    assert out[0, 1, 1].tolist() == [10, 11, 14, 15]


def test_backbone_shapes():
    cfg = ClusterConfig([StageSpec(8, 1, 2, (2, 2)), StageSpec(12, 1, 2, (2, 2))])
    out = Backbone(cfg)(torch.rand(2, 32, 32, 5))
    assert out.grid_shape == (8, 8)
    assert [tuple(s.shape[1:3]) for s in out.stage_features] == [(16, 16), (8, 8)]
    assert out.pooled.shape == (2, 12)


def test_backbone_indivisible_input():
    with pytest.raises(ValidationError):
        Backbone(preset("tiny"))(torch.rand(1, 12, 12, 5))


def test_backbone_zero_init_pooled_is_stem_mean():
    cfg = ClusterConfig([StageSpec(8, 1, 4, (2, 2))])
    net = Backbone(cfg).double().zero_init_()
    x = torch.rand(1, 16, 16, 5, dtype=torch.float64)
    stem = net.norms[0](net.reducers[0](net.standardize(x)))
    torch.testing.assert_close(net(x).pooled, stem.mean(dim=(1, 2)), rtol=0, atol=1e-15)


def test_backbone_forward_pointset_and_determinism():
    net = Backbone(preset("tiny")).double()
    ps = image_to_points(np.random.default_rng(0).uniform(size=(16, 16, 3)))
    a = backbone_forward(ps, net)
    b = backbone_forward(ps, net)
    assert torch.equal(a.pooled, b.pooled)
    assert a.features.shape == (1, 2, 2, 32)


def test_backbone_gradients_finite_differences():
    net = Backbone(preset("tiny")).double()
    x = torch.rand(1, 8, 8, 5, dtype=torch.float64)
    w = torch.randn(32, dtype=torch.float64)

    def loss():
        return torch.tanh(net(x).pooled @ w).sum()

    err, _ = finite_difference_check(loss, list(net.parameters()), step=1e-5)
    assert err <= 1e-4


def test_cluster_config_validation():
    with pytest.raises(ValidationError):
        ClusterConfig([StageSpec(4)], neighbors_k=6)
    with pytest.raises(ValidationError):
        ClusterConfig([])
    with pytest.raises(ValidationError):
        StageSpec(4, reduce=3)
