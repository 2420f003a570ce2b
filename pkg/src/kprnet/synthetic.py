"""Synthetic LiDAR scans in sensor capture order.

``sweep_cloud`` produces bare beam-ordered sweeps for projection tests.
``render_scan`` ray-casts a small labeled street scene (road, sidewalk,
terrain, a surrounding building wall, cars, poles, trees and people) with a
configurable beam layout, giving scans whose labels are learnable from range,
remission and local geometry.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from kprnet.kitti_io import PointCloud

CAR, PERSON, ROAD, SIDEWALK, BUILDING, VEGETATION, TRUNK, TERRAIN, POLE = 0, 5, 8, 10, 12, 14, 15, 16, 17

SENSOR_HEIGHT = 1.73

REMISSION = {
    CAR: 0.85,
    PERSON: 0.3,
    ROAD: 0.15,
    SIDEWALK: 0.35,
    BUILDING: 0.6,
    VEGETATION: 0.45,
    TRUNK: 0.25,
    TERRAIN: 0.5,
    POLE: 0.7,
}


def azimuths(n: int, rng: np.random.Generator | None = None, jitter: float = 0.0) -> np.ndarray:
    """Increasing azimuths over [-pi, pi), one per image column, optionally jittered."""
    step = 2 * np.pi / n
    a = -np.pi + (np.arange(n) + 0.5) * step
    if rng is not None and jitter:
        a = a + rng.uniform(-jitter, jitter, n) * step
    return a


def beam_elevations(rows: int, fov_up: float, fov_down: float) -> np.ndarray:
    """Evenly spaced elevations at row centers, top beam first."""
    fov = fov_up + fov_down
    return fov_up - (np.arange(rows) + 0.5) * fov / rows


def irregular_beam_elevations(rows: int, fov_up: float, fov_down: float, rng) -> np.ndarray:
    """Sorted (top first) random elevations strictly inside the field of view."""
    fov = fov_up + fov_down
    e = fov_up - rng.uniform(0.02, 0.98, rows) * fov
    return np.sort(e)[::-1]


def sweep_cloud(
    elevations: np.ndarray, columns: int, rng: np.random.Generator, jitter: float = 0.3
) -> tuple[PointCloud, np.ndarray]:
    """One monotone azimuth sweep per beam, beams in order; returns the cloud and each point's beam."""
    pts, rows = [], []
    for r, e in enumerate(elevations):
        a = azimuths(columns, rng, jitter)
        rng_m = rng.uniform(2.0, 60.0, columns)
        pts.append(
            np.stack(
                [rng_m * np.cos(e) * np.cos(a), rng_m * np.cos(e) * np.sin(a), rng_m * np.sin(e)],
                axis=1,
            )
        )
        rows.append(np.full(columns, r))
    points = np.concatenate(pts).astype(np.float32)
    remission = rng.uniform(0, 1, points.shape[0]).astype(np.float32)
    return PointCloud(points, remission), np.concatenate(rows)


@dataclass
class Scene:
    cars: list = field(default_factory=list)  # (cx, cy, yaw-free box half sizes)
    poles: list = field(default_factory=list)  # (cx, cy, radius, height)
    trees: list = field(default_factory=list)  # (cx, cy)
    people: list = field(default_factory=list)  # (cx, cy)
    road_half_width: float = 4.0
    sidewalk_width: float = 3.0
    wall_radius: float = 24.0
    wall_height: float = 12.0


def random_scene(rng: np.random.Generator) -> Scene:
    scene = Scene()
    for _ in range(int(rng.integers(2, 5))):
        lane = rng.choice([-2.0, 2.0])
        scene.cars.append((rng.uniform(-18, 18), lane + rng.uniform(-0.3, 0.3)))
    side = scene.road_half_width + scene.sidewalk_width / 2
    for _ in range(int(rng.integers(2, 5))):
        scene.poles.append((rng.uniform(-18, 18), rng.choice([-1, 1]) * side))
    for _ in range(int(rng.integers(2, 4))):
        scene.trees.append((rng.uniform(-16, 16), rng.choice([-1, 1]) * rng.uniform(9, 14)))
    for _ in range(int(rng.integers(1, 3))):
        scene.people.append((rng.uniform(-12, 12), rng.choice([-1, 1]) * (side + 0.5)))
    return scene


def _ray_box(d, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = lo / d
        t2 = hi / d
    tmin = np.nanmax(np.minimum(t1, t2), axis=1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=1)
    hit = (tmax >= tmin) & (tmin > 0)
    return np.where(hit, tmin, np.inf)


def _ray_vcylinder(d, cx, cy, radius, z0, z1):
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = -2 * (d[:, 0] * cx + d[:, 1] * cy)
    c = cx * cx + cy * cy - radius * radius
    disc = b * b - 4 * a * c
    with np.errstate(invalid="ignore", divide="ignore"):
        t = (-b - np.sqrt(disc)) / (2 * a)
    z = t * d[:, 2]
    ok = (disc >= 0) & (t > 0) & (z >= z0) & (z <= z1)
    return np.where(ok, t, np.inf)


def _ray_sphere(d, center, radius):
    b = -2 * d @ center
    c = center @ center - radius * radius
    disc = b * b - 4 * c
    with np.errstate(invalid="ignore"):
        t = (-b - np.sqrt(disc)) / 2
    return np.where((disc >= 0) & (t > 0), t, np.inf)


def cast(scene: Scene, directions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Range and train id of the first surface hit along each unit direction."""
    n = directions.shape[0]
    best_t = np.full(n, np.inf)
    best_label = np.full(n, 255, dtype=np.uint8)

    def consider(t, label):
        closer = t < best_t
        best_t[closer] = t[closer]
        best_label[closer] = label

    ground = -SENSOR_HEIGHT
    with np.errstate(divide="ignore"):
        t_ground = np.where(directions[:, 2] < 0, ground / directions[:, 2], np.inf)
    consider(t_ground, ROAD)
    dxy = np.hypot(directions[:, 0], directions[:, 1])
    with np.errstate(divide="ignore"):
        t_wall = scene.wall_radius / dxy
    top = scene.wall_height - SENSOR_HEIGHT
    consider(np.where(t_wall * directions[:, 2] <= top, t_wall, np.inf), BUILDING)
    for cx, cy in scene.cars:
        lo = np.array([cx - 2.1, cy - 0.9, ground])
        hi = np.array([cx + 2.1, cy + 0.9, ground + 1.5])
        consider(_ray_box(directions, lo, hi), CAR)
    for cx, cy in scene.people:
        lo = np.array([cx - 0.25, cy - 0.25, ground])
        hi = np.array([cx + 0.25, cy + 0.25, ground + 1.75])
        consider(_ray_box(directions, lo, hi), PERSON)
    for cx, cy in scene.poles:
        consider(_ray_vcylinder(directions, cx, cy, 0.15, ground, ground + 6.0), POLE)
    for cx, cy in scene.trees:
        consider(_ray_vcylinder(directions, cx, cy, 0.3, ground, ground + 2.5), TRUNK)
        consider(_ray_sphere(directions, np.array([cx, cy, ground + 4.0]), 2.0), VEGETATION)

    # split the ground plane by lateral offset
    on_ground = best_label == ROAD
    y = np.abs(best_t * directions[:, 1])
    best_label[on_ground & (y > scene.road_half_width)] = SIDEWALK
    best_label[on_ground & (y > scene.road_half_width + scene.sidewalk_width)] = TERRAIN
    return best_t, best_label


def render_scan(
    scene: Scene,
    elevations: np.ndarray,
    columns: int,
    rng: np.random.Generator,
    jitter: float = 0.0,
    range_noise: float = 0.0,
    remission_noise: float = 0.02,
    max_range: float = 80.0,
) -> tuple[PointCloud, np.ndarray]:
    """Ray-cast ``scene`` beam by beam; returns the cloud and per-point train ids."""
    pts, labels, rem = [], [], []
    for e in elevations:
        a = azimuths(columns, rng, jitter)
        d = np.stack([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.full_like(a, np.sin(e))], axis=1)
        t, lab = cast(scene, d)
        hit = np.isfinite(t) & (t < max_range)
        t = t[hit]
        if range_noise:
            t = t + rng.normal(0.0, range_noise, t.shape)
        pts.append(d[hit] * t[:, None])
        labels.append(lab[hit])
        base = np.array([REMISSION[int(c)] for c in lab[hit]])
        rem.append(np.clip(base + rng.normal(0.0, remission_noise, base.shape), 0.0, 1.0))
    cloud = PointCloud(
        np.concatenate(pts).astype(np.float32), np.concatenate(rem).astype(np.float32)
    )
    return cloud, np.concatenate(labels).astype(np.uint8)


def labeled_scans(count, rows, columns, seed, fov_up, fov_down, **render_kw):
    """``count`` independent random scenes rendered with evenly spaced beams."""
    rng = np.random.default_rng(seed)
    elev = beam_elevations(rows, fov_up, fov_down)
    scans = []
    for _ in range(count):
        scene = random_scene(rng)
        scans.append((scene, *render_scan(scene, elev, columns, rng, **render_kw)))
    return scans


def noisy_copy(scene, rows, columns, seed, fov_up, fov_down, jitter=0.3, range_noise=0.02, remission_noise=0.02):
    """Re-render ``scene`` with azimuth jitter and range / remission noise."""
    rng = np.random.default_rng(seed)
    elev = beam_elevations(rows, fov_up, fov_down)
    return render_scan(
        scene, elev, columns, rng, jitter=jitter, range_noise=range_noise, remission_noise=remission_noise
    )
