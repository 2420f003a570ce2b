import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kprnet.kpconv import (
    KPConvLayer,
    KernelDisposition,
    NeighborLists,
    PointHead,
    generate_kernel_points,
    head_backward,
    head_forward,
    influence_matrices,
    kpconv_backward,
    kpconv_forward,
    optimize_kernel_points,
    radius_neighbors,
)
from oracles import GRADIENT_CASES, brute_neighbors, disposition, kpconv_oracle, random_kpconv_instance


def as_sets(nl: NeighborLists):
    return [set(nl[i].tolist()) for i in range(len(nl))]


# ---------------------------------------------------------------- kernel points


def test_single_kernel_point_is_origin():
    d = generate_kernel_points(1, 0.6, seed=3)
    np.testing.assert_array_equal(d.positions, np.zeros((1, 3)))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_two_kernel_points_at_three_quarter_radius(seed):
    d = generate_kernel_points(2, 0.6, seed)
    np.testing.assert_array_equal(d.positions[0], 0.0)
    assert np.linalg.norm(d.positions[1]) == pytest.approx(0.45, abs=1e-12)


def test_fifteen_points_energy_monotone_and_spread():
    _, energies = optimize_kernel_points(15, seed=0)
    assert all(b <= a for a, b in zip(energies, energies[1:]))
    d = generate_kernel_points(15, 0.6, seed=0)
    pos = d.positions
    dist = np.linalg.norm(pos[:, None] - pos[None], axis=-1)
    assert dist[np.triu_indices(15, 1)].min() > 0.3 * 0.6
    assert (np.linalg.norm(pos, axis=1) <= 0.6 + 1e-12).all()


def test_kernel_points_deterministic_and_sigma_default():
    a = generate_kernel_points(7, 0.5, seed=4)
    b = generate_kernel_points(7, 0.5, seed=4)
    np.testing.assert_array_equal(a.positions, b.positions)
    assert a.sigma == 0.25


def test_disposition_validation():
    with pytest.raises(ValueError):
        disposition([[0.1, 0, 0]], 0.3, 0.6)
    with pytest.raises(ValueError):
        disposition([[0, 0, 0], [1.0, 0, 0]], 0.3, 0.6)
    with pytest.raises(ValueError):
        disposition([[0, 0, 0], [0.2, 0, 0], [0.2, 0, 0]], 0.3, 0.6)


# ---------------------------------------------------------------- neighbours


def test_boundary_inclusive():
    pts = np.array([[0.0, 0, 0], [0.5, 0, 0]])
    nl = radius_neighbors(pts, 0.5)
    assert as_sets(nl) == [{0, 1}, {0, 1}]


def test_isolated_points_see_only_themselves():
    pts = np.arange(5)[:, None] * np.array([[2.0, 0, 0]])
    assert as_sets(radius_neighbors(pts, 1.0)) == [{i} for i in range(5)]


def test_neighbors_match_brute_force_500():
    rng = np.random.default_rng(0)
    pts = rng.uniform(-3, 3, (500, 3))
    nl = radius_neighbors(pts, 0.7)
    assert as_sets(nl) == brute_neighbors(pts, 0.7)
    for i in range(len(nl)):
        assert (np.diff(nl[i]) > 0).all()


def test_neighbors_empty_cloud_and_bad_radius():
    assert len(radius_neighbors(np.zeros((0, 3)), 1.0)) == 0
    with pytest.raises(ValueError):
        radius_neighbors(np.zeros((2, 3)), 0.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 80), st.floats(0.05, 2.0))
def test_neighbors_order_and_translation_independent(seed, n, radius):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-2, 2, (n, 3))
    base = as_sets(radius_neighbors(pts, radius))
    assert base == brute_neighbors(pts, radius)
    perm = rng.permutation(n)
    permuted = as_sets(radius_neighbors(pts[perm], radius))
    assert [{int(perm[j]) for j in s} for s in permuted] == [base[p] for p in perm]
    # a shift by a power of two is exact in floating point
    assert as_sets(radius_neighbors(pts + 64.0, radius)) == base


def test_concatenate_offsets_blocks():
    a = radius_neighbors(np.zeros((2, 3)), 1.0)
    b = radius_neighbors(np.array([[0.0, 0, 0], [5, 0, 0]]), 1.0)
    both = NeighborLists.concatenate([a, b])
    assert as_sets(both) == [{0, 1}, {0, 1}, {2}, {3}]


# ---------------------------------------------------------------- forward


def test_single_kernel_single_point_collapse():
    rng = np.random.default_rng(0)
    layer = KPConvLayer(disposition([[0, 0, 0]], 0.3, 0.6), 3, 2, rng)
    f = rng.standard_normal((1, 3))
    out = kpconv_forward(f, np.zeros((1, 3)), None, layer)
    np.testing.assert_allclose(out, f @ layer.params["weights"][0], rtol=1e-15)


def test_neighbour_outside_every_kernel_influence_contributes_nothing():
    rng = np.random.default_rng(1)
    layer = KPConvLayer(disposition([[0, 0, 0], [0.3, 0, 0]], 0.1, 0.6), 2, 2, rng)
    pts = np.array([[0.0, 0, 0], [0, 0.5, 0]])  # >= sigma from both kernel points
    f = rng.standard_normal((2, 2))
    out = layer.conv_forward(f, pts)
    alone = layer.conv_forward(f[:1], pts[:1])
    np.testing.assert_array_equal(out[0], alone[0])


@pytest.mark.parametrize("seed", range(10))
def test_forward_matches_triple_loop(seed):
    rng = np.random.default_rng(seed)
    layer, pts, f = random_kpconv_instance(rng)
    d = layer.disposition
    ref = kpconv_oracle(f, pts, d.positions, d.sigma, d.radius, layer.params["weights"])
    out = layer.conv_forward(f, pts)
    assert np.abs(out - ref).max() <= 1e-6 * max(np.abs(ref).max(), 1e-300)


def test_forward_linear_in_features_and_weights():
    rng = np.random.default_rng(2)
    layer, pts, f = random_kpconv_instance(rng)
    g = rng.standard_normal(f.shape)
    base = layer.conv_forward(f, pts)
    np.testing.assert_allclose(layer.conv_forward(2.5 * f, pts), 2.5 * base, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(
        layer.conv_forward(f + g, pts), base + layer.conv_forward(g, pts), rtol=1e-12, atol=1e-12
    )
    w = layer.params["weights"]
    w_other = rng.standard_normal(w.shape)
    w_orig = w.copy()
    w[...] = w_other
    other = layer.conv_forward(f, pts)
    w[...] = w_orig + w_other
    np.testing.assert_allclose(layer.conv_forward(f, pts), base + other, rtol=1e-12, atol=1e-12)


def test_translation_invariance():
    rng = np.random.default_rng(3)
    layer, pts, f = random_kpconv_instance(rng)
    a = layer.conv_forward(f, pts)
    b = layer.conv_forward(f, pts + np.array([16.0, -32.0, 8.0]))
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_point_order_permutes_output():
    rng = np.random.default_rng(4)
    layer, pts, f = random_kpconv_instance(rng)
    perm = rng.permutation(pts.shape[0])
    a = layer.conv_forward(f, pts)
    b = layer.conv_forward(f[perm], pts[perm])
    np.testing.assert_allclose(b, a[perm], rtol=1e-12, atol=1e-12)


def test_block_influences_equal_joint():
    rng = np.random.default_rng(5)
    d = generate_kernel_points(5, 0.6, seed=0)
    layer = KPConvLayer(d, 3, 4, rng)
    a, b = rng.uniform(0, 1, (30, 3)), rng.uniform(0, 1, (20, 3)) + 10.0
    f = rng.standard_normal((50, 3))
    blocks = [influence_matrices(p, radius_neighbors(p, d.radius), d) for p in (a, b)]
    joint = layer.conv_forward(f, np.vstack([a, b]))
    split = layer.conv_forward(f, np.vstack([a, b]), influences=blocks)
    np.testing.assert_allclose(split, joint, rtol=1e-12, atol=1e-14)


def test_forward_rejects_mismatched_shapes():
    layer = KPConvLayer(generate_kernel_points(3, 0.6, 0), 2, 2, np.random.default_rng(0))
    with pytest.raises(ValueError):
        layer.conv_forward(np.zeros((3, 2)), np.zeros((4, 3)))
    with pytest.raises(ValueError):
        layer.conv_forward(np.zeros((3, 5)), np.zeros((3, 3)))


def test_forward_deterministic():
    rng = np.random.default_rng(6)
    layer, pts, f = random_kpconv_instance(rng)
    assert layer.conv_forward(f, pts).tobytes() == layer.conv_forward(f, pts).tobytes()


# ---------------------------------------------------------------- backward


def test_zero_upstream_gives_zero_gradients():
    rng = np.random.default_rng(7)
    layer, pts, f = random_kpconv_instance(rng)
    out = kpconv_forward(f, pts, None, layer)
    gf, gw = kpconv_backward(np.zeros_like(out), layer)
    assert not gf.any() and not gw.any()


def test_single_point_weight_gradient_is_outer_product():
    rng = np.random.default_rng(8)
    layer = KPConvLayer(disposition([[0, 0, 0]], 0.3, 0.6), 3, 2, rng)
    f = rng.standard_normal((1, 3))
    layer.conv_forward(f, np.zeros((1, 3)))
    g = rng.standard_normal((1, 2))
    _, gw = layer.conv_gradients(g)
    np.testing.assert_allclose(gw[0], f.T @ g, rtol=1e-15)


def test_conv_backward_accumulates_into_grads():
    rng = np.random.default_rng(9)
    layer, pts, f = random_kpconv_instance(rng)
    out = layer.conv_forward(f, pts)
    g = rng.standard_normal(out.shape)
    layer.zero_grad()
    layer.conv_backward(g)
    layer.conv_backward(g)
    _, gw = layer.conv_gradients(g)
    np.testing.assert_allclose(layer.grads["weights"], 2 * gw)


@pytest.mark.parametrize("trial", range(5))
def test_kpconv_finite_differences(trial):
    assert GRADIENT_CASES["kpconv"](np.random.default_rng(500 + trial)) < 1e-4


# ---------------------------------------------------------------- head


def test_head_reproduces_linear_map_on_relu_features():
    rng = np.random.default_rng(10)
    head = PointHead(4, rng, num_classes=3)
    x = rng.standard_normal((50, 4))
    # make batchnorm the identity for this batch
    mean, std = x.mean(0), np.sqrt(x.var(0) + head.bn.eps)
    head.bn.params["gamma"][:] = std
    head.bn.params["beta"][:] = mean
    u, v = rng.standard_normal((4, 1)), rng.standard_normal((1, 3))
    head.classifier.params["weight"][...] = u @ v
    head.classifier.params["bias"][...] = 0.0
    np.testing.assert_allclose(head.forward(x, True), np.maximum(x, 0) @ (u @ v), rtol=1e-10, atol=1e-12)


def test_head_equal_features_give_beta():
    rng = np.random.default_rng(11)
    layer = KPConvLayer(generate_kernel_points(3, 0.6, 0), 2, 4, rng)
    layer.head.bn.params["beta"][:] = [0.5, -1.0, 2.0, 0.0]
    x = np.tile(rng.standard_normal(4), (6, 1))
    bn_out = layer.head.bn.forward(x, True)
    np.testing.assert_allclose(bn_out, np.tile([0.5, -1.0, 2.0, 0.0], (6, 1)), atol=1e-12)
    logits = head_forward(x, layer)
    assert logits.shape == (6, 19)
    assert head_backward(np.ones_like(logits), layer).shape == (6, 4)


@pytest.mark.parametrize("trial", range(5))
def test_head_finite_differences(trial):
    assert GRADIENT_CASES["head"](np.random.default_rng(600 + trial)) < 1e-4


def test_disposition_dataclass_fields():
    d = generate_kernel_points(4, 1.0, 0, sigma=0.4)
    assert isinstance(d, KernelDisposition)
    assert d.num_kernels == 4 and d.sigma == 0.4 and d.radius == 1.0
