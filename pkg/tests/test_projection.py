import math

import numpy as np
import pytest

from kprnet.kitti_io import PointCloud
from kprnet.projection import (
    SPHERICAL,
    UNFOLD,
    ProjectionConfig,
    back_project,
    back_project_adjoint,
    horizontal_flip,
    random_crop,
    read_range_image,
    spherical_project,
    unfold_project,
    unfold_rows,
    upsample_nearest,
    write_range_image,
)
from kprnet.synthetic import irregular_beam_elevations, sweep_cloud

from oracles import FOV_DOWN, FOV_UP, brute_force_bins, brute_force_collisions, random_cloud


def cloud_of(points, remission=None):
    points = np.asarray(points, dtype=np.float32).reshape(-1, 3)
    if remission is None:
        remission = np.linspace(0, 1, len(points)).astype(np.float32)
    return PointCloud(points, np.asarray(remission, dtype=np.float32))


def test_single_point_symmetric_fov():
    cfg = ProjectionConfig(64, 2048, 0.2, 0.2, SPHERICAL)
    img = spherical_project(cloud_of([10, 0, 0], [0.25]), cfg)
    assert tuple(img.point_to_pixel[0]) == (32, 1024)
    np.testing.assert_array_equal(img.data[32, 1024], [0.1, 0.25])
    assert img.valid.sum() == 1 and img.pixel_to_point[32, 1024] == 0


def test_nearer_point_wins_collision():
    cfg = ProjectionConfig(mode=SPHERICAL)
    img = spherical_project(cloud_of([[10, 0, 0], [5, 0, 0]]), cfg)
    r, c = img.point_to_pixel[1]
    assert img.data[r, c, 0] == pytest.approx(0.2)
    assert img.pixel_to_point[r, c] == 1
    assert tuple(img.point_to_pixel[0]) == (r, c)  # loser keeps its pixel


def test_exact_tie_lowest_index_wins():
    cfg = ProjectionConfig(mode=SPHERICAL)
    img = spherical_project(cloud_of([[10, 0, 0], [10, 0, 0]], [0.1, 0.9]), cfg)
    r, c = img.point_to_pixel[0]
    assert img.pixel_to_point[r, c] == 0


def test_zero_range_and_out_of_fov_points_dropped():
    cfg = ProjectionConfig(mode=SPHERICAL)
    img = spherical_project(cloud_of([[0, 0, 0], [1, 0, 5], [5, 0, 0]]), cfg)
    assert (img.point_to_pixel[:2] == -1).all()
    assert img.mapped.tolist() == [False, False, True]


@pytest.mark.parametrize("seed", range(5))
def test_spherical_matches_brute_force_binning(seed):
    rng = np.random.default_rng(seed)
    cloud = random_cloud(rng)
    cfg = ProjectionConfig(16, 64, FOV_UP, FOV_DOWN, SPHERICAL)
    img = spherical_project(cloud, cfg)
    pixels, winners = brute_force_bins(cloud, cfg)
    for i, px in enumerate(pixels):
        assert tuple(img.point_to_pixel[i]) == (px if px else (-1, -1))
    assert img.valid.sum() == len(winners)
    for (r, c), (_, i) in winners.items():
        assert img.pixel_to_point[r, c] == i


def test_spherical_winner_values_permutation_invariant():
    rng = np.random.default_rng(1)
    cloud = random_cloud(rng, 500)
    cfg = ProjectionConfig(16, 64, FOV_UP, FOV_DOWN, SPHERICAL)
    perm = rng.permutation(len(cloud))
    a = spherical_project(cloud, cfg)
    b = spherical_project(PointCloud(cloud.points[perm], cloud.remission[perm]), cfg)
    np.testing.assert_array_equal(a.data, b.data)
    np.testing.assert_array_equal(a.valid, b.valid)


@pytest.mark.parametrize("rows", [1, 4, 16])
def test_unfold_recovers_generating_rows(rows):
    rng = np.random.default_rng(rows)
    elev = np.linspace(0.03, -0.4, rows)
    cloud, truth = sweep_cloud(elev, 128, rng)
    cfg = ProjectionConfig(rows, 128, FOV_UP, FOV_DOWN, UNFOLD)
    img = unfold_project(cloud, cfg)
    np.testing.assert_array_equal(img.point_to_pixel[:, 0], truth)


def test_unfold_reverse_sweep_direction_detected():
    rng = np.random.default_rng(3)
    cloud, truth = sweep_cloud(np.linspace(0.0, -0.3, 6), 100, rng)
    # reverse azimuth order within each beam: the sweep now runs clockwise
    order = np.concatenate([np.flatnonzero(truth == r)[::-1] for r in range(6)])
    rev = PointCloud(cloud.points[order], cloud.remission[order])
    img = unfold_project(rev, ProjectionConfig(6, 100, mode=UNFOLD))
    np.testing.assert_array_equal(img.point_to_pixel[:, 0], truth[order])


def test_unfold_rows_non_decreasing_and_overflow_dropped():
    rng = np.random.default_rng(4)
    cloud, truth = sweep_cloud(np.linspace(0.0, -0.3, 10), 50, rng)
    img = unfold_project(cloud, ProjectionConfig(8, 50, mode=UNFOLD))
    rows = unfold_rows(np.arctan2(cloud.points[:, 1], cloud.points[:, 0]).astype(np.float64))
    assert (np.diff(rows) >= 0).all()
    assert (img.point_to_pixel[truth >= 8] == -1).all()
    assert img.mapped.sum() == 8 * 50


def test_unfold_single_sweep_is_one_row():
    rng = np.random.default_rng(5)
    cloud, _ = sweep_cloud(np.array([0.0]), 300, rng)
    img = unfold_project(cloud, ProjectionConfig(4, 64, mode=UNFOLD))
    assert (img.point_to_pixel[:, 0] == 0).all()


def test_unfold_collisions_not_more_than_spherical():
    rng = np.random.default_rng(6)
    elev = irregular_beam_elevations(64, FOV_UP, FOV_DOWN, rng)
    cloud, _ = sweep_cloud(elev, 512, rng)
    sph = spherical_project(cloud, ProjectionConfig(64, 512, FOV_UP, FOV_DOWN, SPHERICAL))
    unf = unfold_project(cloud, ProjectionConfig(64, 512, FOV_UP, FOV_DOWN, UNFOLD))
    assert sph.collision_count() == brute_force_collisions(sph)
    assert unf.collision_count() == brute_force_collisions(unf)
    assert unf.collision_count() <= sph.collision_count()
    assert sph.collision_count() > 0


def test_upsample_shapes_and_identity():
    rng = np.random.default_rng(7)
    arr = rng.standard_normal((64, 2048, 2))
    assert upsample_nearest(arr, 145, 2049).shape == (145, 2049, 2)
    np.testing.assert_array_equal(upsample_nearest(arr, 64, 2048), arr)
    one = np.array([[[3.0, 4.0]]])
    np.testing.assert_array_equal(upsample_nearest(one, 3, 3), np.broadcast_to(one, (3, 3, 2)))


def test_upsample_range_image_correspondence():
    rng = np.random.default_rng(8)
    cloud = random_cloud(rng, 800)
    img = spherical_project(cloud, ProjectionConfig(16, 64, FOV_UP, FOV_DOWN, SPHERICAL))
    up = upsample_nearest(img, 37, 129)
    assert up.shape == (37, 129)
    for i in np.flatnonzero(img.mapped):
        r, c = img.point_to_pixel[i]
        ur, uc = up.point_to_pixel[i]
        # owner pixel is the top-left replica of the source pixel
        assert (ur * 16) // 37 == r and (uc * 64) // 129 == c
        assert ur == 0 or ((ur - 1) * 16) // 37 < r
        assert uc == 0 or ((uc - 1) * 64) // 129 < c
    winners = img.pixel_to_point[img.valid]
    vals, _ = back_project(up.data, up)
    np.testing.assert_array_equal(vals[winners, 0], 1.0 / img.ranges[winners])


def test_back_project_gather_and_dropped():
    cfg = ProjectionConfig(4, 8, 0.3, 0.3, SPHERICAL)
    img = spherical_project(cloud_of([[5, 0, 0], [1, 0, 5], [0, 5, 0]]), cfg)
    per_pixel = np.zeros((4, 8, 3))
    for i in (0, 2):
        r, c = img.point_to_pixel[i]
        per_pixel[r, c, i] = 1.0
    vals, dropped = back_project(per_pixel, img)
    np.testing.assert_array_equal(vals, [[1, 0, 0], [0, 0, 0], [0, 0, 1]])
    assert dropped.tolist() == [False, True, False]
    with pytest.raises(ValueError):
        back_project(np.zeros((5, 8, 3)), img)


def test_back_project_matches_naive_gather_and_adjoint():
    rng = np.random.default_rng(9)
    cloud = random_cloud(rng, 600)
    img = spherical_project(cloud, ProjectionConfig(16, 64, FOV_UP, FOV_DOWN, SPHERICAL))
    feats = rng.standard_normal((16, 64, 5))
    vals, dropped = back_project(feats, img)
    for i in range(len(cloud)):
        r, c = img.point_to_pixel[i]
        expected = np.zeros(5) if r < 0 else feats[r, c]
        np.testing.assert_array_equal(vals[i], expected)
    g = rng.standard_normal((len(cloud), 5))
    # <gather(x), g> == <x, scatter(g)>
    lhs = (vals * g).sum()
    rhs = (feats * back_project_adjoint(g, img)).sum()
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_round_trip_exact_for_winners():
    rng = np.random.default_rng(10)
    for mode in (SPHERICAL, UNFOLD):
        cloud = random_cloud(rng, 700)
        img = (spherical_project if mode == SPHERICAL else unfold_project)(
            cloud, ProjectionConfig(16, 64, FOV_UP, FOV_DOWN, mode)
        )
        winners = img.pixel_to_point[img.valid]
        vals, _ = back_project(img.data, img)
        np.testing.assert_array_equal(vals[winners, 0], 1.0 / img.ranges[winners])
        np.testing.assert_array_equal(vals[winners, 1], cloud.remission[winners])
        assert img.mapped.sum() + (~img.mapped).sum() == len(cloud)


def test_random_crop_full_width_is_rotation():
    rng = np.random.default_rng(11)
    img = spherical_project(random_cloud(rng, 500), ProjectionConfig(16, 64, FOV_UP, FOV_DOWN, SPHERICAL))
    crop, start = random_crop(img, 64, np.random.default_rng(0))
    np.testing.assert_array_equal(crop.data, np.roll(img.data, -start, axis=1))
    assert sorted(crop.pixel_to_point[crop.valid]) == sorted(img.pixel_to_point[img.valid])
    vals, _ = back_project(crop.data, crop)
    ref, _ = back_project(img.data, img)
    np.testing.assert_array_equal(vals, ref)


def test_random_crop_width_and_flags():
    rng = np.random.default_rng(12)
    cloud = random_cloud(rng, 3000)
    img = spherical_project(cloud, ProjectionConfig(8, 2048, FOV_UP, FOV_DOWN, SPHERICAL))
    crop, start = random_crop(img, 1025, np.random.default_rng(5))
    assert crop.shape == (8, 1025)
    inside = ((img.point_to_pixel[:, 1] - start) % 2048 < 1025) & img.mapped
    np.testing.assert_array_equal(crop.mapped, inside)
    vals, _ = back_project(crop.data, crop)
    ref, _ = back_project(img.data, img)
    np.testing.assert_array_equal(vals[inside], ref[inside])
    again, start2 = random_crop(img, 1025, np.random.default_rng(5))
    assert start2 == start and np.array_equal(again.data, crop.data)


def test_horizontal_flip_properties():
    rng = np.random.default_rng(13)
    img = spherical_project(random_cloud(rng, 500), ProjectionConfig(16, 64, FOV_UP, FOV_DOWN, SPHERICAL))
    twice = horizontal_flip(horizontal_flip(img))
    np.testing.assert_array_equal(twice.data, img.data)
    np.testing.assert_array_equal(twice.point_to_pixel, img.point_to_pixel)
    flipped = horizontal_flip(img)
    feats = rng.standard_normal((16, 64, 3))
    a, _ = back_project(feats[:, ::-1], flipped)
    b, _ = back_project(feats, img)
    np.testing.assert_array_equal(a, b)

    single = spherical_project(cloud_of([[5, 0.01, 0]]), ProjectionConfig(4, 8, 0.3, 0.3, SPHERICAL))
    r, c = single.point_to_pixel[0]
    assert c == 3 and horizontal_flip(single).valid[r, 8 - 1 - c]


def test_flip_col_zero_goes_to_last():
    # yaw just below +pi maps to column 0
    img = spherical_project(cloud_of([[-5, 0.001, 0]]), ProjectionConfig(4, 8, 0.3, 0.3, SPHERICAL))
    r, c = img.point_to_pixel[0]
    assert c == 0
    assert horizontal_flip(img).valid[r, 7]


def test_kpri_round_trip_bit_exact():
    rng = np.random.default_rng(14)
    img = spherical_project(random_cloud(rng, 400), ProjectionConfig(16, 64, FOV_UP, FOV_DOWN, SPHERICAL))
    img.data = img.data.astype(np.float32).astype(np.float64)
    payload = write_range_image(img)
    assert payload[:4] == b"KPRI"
    data, p2p = read_range_image(payload)
    np.testing.assert_array_equal(data, img.data)
    np.testing.assert_array_equal(p2p, img.pixel_to_point)
    img.data, img.pixel_to_point = data.astype(np.float64), p2p
    assert write_range_image(img) == payload
