"""Point cloud to range image projection and range-image augmentation.

Two projections are provided. ``spherical_project`` bins points by yaw and
pitch. ``unfold_project`` bins by yaw only and takes the row from the capture
order of the sensor, so every laser beam lands in its own row.

Every image keeps both directions of the point/pixel correspondence:
``pixel_to_point`` holds the index of the point stored in each pixel and
``point_to_pixel`` holds the pixel each point falls into, including points that
lost a collision and therefore do not own their pixel.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp

from kprnet.errors import ConfigError, FormatError
from kprnet.kitti_io import PointCloud

SPHERICAL = "spherical"
UNFOLD = "unfold"

KPRI_MAGIC = b"KPRI"
KPRI_VERSION = 1


@dataclass(frozen=True)
class ProjectionConfig:
    height: int = 64
    width: int = 2048
    fov_up: float = math.radians(3.0)
    fov_down: float = math.radians(25.0)
    mode: str = UNFOLD

    def __post_init__(self):
        if self.height < 1:
            raise ConfigError(f"height must be >= 1, got {self.height}")
        if self.width < 2:
            raise ConfigError(f"width must be >= 2, got {self.width}")
        if not self.fov_up + self.fov_down > 0:
            raise ConfigError("fov_up + fov_down must be positive")
        if self.mode not in (SPHERICAL, UNFOLD):
            raise ConfigError(f"unknown projection mode {self.mode!r}")


@dataclass
class RangeImage:
    data: np.ndarray  # (H, W, 2): inverse depth, remission
    valid: np.ndarray  # (H, W) bool
    pixel_to_point: np.ndarray  # (H, W) int64, -1 where empty
    point_to_pixel: np.ndarray  # (N, 2) int64, (-1, -1) where unmapped
    ranges: np.ndarray  # (N,) float64

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape

    @property
    def num_points(self) -> int:
        return self.ranges.shape[0]

    @property
    def mapped(self) -> np.ndarray:
        return self.point_to_pixel[:, 0] >= 0

    def collision_count(self) -> int:
        """Number of pixels that more than one mapped point falls into."""
        h, w = self.shape
        rows, cols = self.point_to_pixel[self.mapped].T
        counts = np.bincount(rows * w + cols, minlength=h * w)
        return int((counts >= 2).sum())

    def pixel_ranges(self) -> np.ndarray:
        """Range of each pixel's winning point, ``inf`` for empty pixels."""
        out = np.full(self.shape, np.inf)
        out[self.valid] = self.ranges[self.pixel_to_point[self.valid]]
        return out


def _pixel_columns(yaw: np.ndarray, width: int) -> np.ndarray:
    col = np.floor(0.5 * (1.0 - yaw / np.pi) * width)
    return np.clip(col, 0, width - 1).astype(np.int64)


def _rasterize(
    cloud: PointCloud, rows: np.ndarray, cols: np.ndarray, keep: np.ndarray, ranges, cfg
) -> RangeImage:
    """Write kept points into an image; the smallest range wins, ties by lowest index."""
    h, w = cfg.height, cfg.width
    n = len(cloud)
    point_to_pixel = np.full((n, 2), -1, dtype=np.int64)
    point_to_pixel[keep, 0] = rows[keep]
    point_to_pixel[keep, 1] = cols[keep]

    idx = np.flatnonzero(keep)
    flat = rows[idx] * w + cols[idx]
    order = np.lexsort((idx, ranges[idx], flat))
    flat_sorted = flat[order]
    first = np.ones(flat_sorted.shape[0], dtype=bool)
    first[1:] = flat_sorted[1:] != flat_sorted[:-1]
    winners = idx[order[first]]
    win_flat = flat_sorted[first]

    pixel_to_point = np.full(h * w, -1, dtype=np.int64)
    pixel_to_point[win_flat] = winners
    data = np.zeros((h * w, 2), dtype=np.float64)
    data[win_flat, 0] = 1.0 / ranges[winners]
    data[win_flat, 1] = cloud.remission[winners]
    pixel_to_point = pixel_to_point.reshape(h, w)
    return RangeImage(
        data.reshape(h, w, 2), pixel_to_point >= 0, pixel_to_point, point_to_pixel, ranges
    )


def _angles(cloud: PointCloud):
    pts = cloud.points.astype(np.float64)
    ranges = np.linalg.norm(pts, axis=1)
    nonzero = ranges > 0
    yaw = np.arctan2(pts[:, 1], pts[:, 0])
    with np.errstate(invalid="ignore", divide="ignore"):
        pitch = np.arcsin(np.clip(np.where(nonzero, pts[:, 2] / ranges, 0.0), -1.0, 1.0))
    return ranges, nonzero, yaw, pitch


def spherical_project(cloud: PointCloud, cfg: ProjectionConfig) -> RangeImage:
    ranges, nonzero, yaw, pitch = _angles(cloud)
    fov = cfg.fov_up + cfg.fov_down
    cols = _pixel_columns(yaw, cfg.width)
    rows = np.floor((1.0 - (pitch + cfg.fov_down) / fov) * cfg.height)
    rows = np.clip(rows, 0, cfg.height - 1).astype(np.int64)
    keep = nonzero & (pitch >= -cfg.fov_down) & (pitch <= cfg.fov_up)
    return _rasterize(cloud, rows, cols, keep, ranges, cfg)


def sweep_direction(yaw: np.ndarray, sample: int = 1000) -> float:
    """+1 if yaw increases along the capture order, -1 otherwise."""
    deltas = np.diff(yaw[: sample + 1])
    if deltas.size == 0:
        return 1.0
    return -1.0 if np.median(deltas) < 0 else 1.0


def unfold_rows(yaw: np.ndarray) -> np.ndarray:
    """Ring index per point: a new ring starts where yaw jumps back by more than pi."""
    if yaw.size == 0:
        return np.zeros(0, dtype=np.int64)
    signed = sweep_direction(yaw) * yaw
    wraps = np.zeros(yaw.shape[0], dtype=np.int64)
    wraps[1:] = np.diff(signed) < -np.pi
    return np.cumsum(wraps)


def unfold_project(cloud: PointCloud, cfg: ProjectionConfig) -> RangeImage:
    ranges, nonzero, yaw, _ = _angles(cloud)
    rows = np.full(len(cloud), -1, dtype=np.int64)
    # zero-range points have no azimuth and must not break ring detection
    rows[nonzero] = unfold_rows(yaw[nonzero])
    cols = _pixel_columns(yaw, cfg.width)
    keep = nonzero & (rows < cfg.height)
    return _rasterize(cloud, rows, cols, keep, ranges, cfg)


def project(cloud: PointCloud, cfg: ProjectionConfig) -> RangeImage:
    if cfg.mode == SPHERICAL:
        return spherical_project(cloud, cfg)
    return unfold_project(cloud, cfg)


def _source_index(new: int, old: int) -> np.ndarray:
    return (np.arange(new, dtype=np.int64) * old) // new


def _owner_index(old: int, new: int) -> np.ndarray:
    """Output index owning each source index: its first replica, else the covering output."""
    first = (np.arange(old, dtype=np.int64) * new + old - 1) // old
    first = np.minimum(first, new - 1)
    has_replica = (first * old) // new == np.arange(old)
    return np.where(has_replica, first, (np.arange(old) * new) // old)


def upsample_nearest(img, new_h: int, new_w: int):
    """Nearest-neighbour resampling of a RangeImage or an ``(H, W, ...)`` array."""
    if new_h < 1 or new_w < 1:
        raise ValueError(f"target size must be positive, got {new_h}x{new_w}")
    if not isinstance(img, RangeImage):
        arr = np.asarray(img)
        h, w = arr.shape[:2]
        return arr[_source_index(new_h, h)][:, _source_index(new_w, w)]
    h, w = img.shape
    rows, cols = _source_index(new_h, h), _source_index(new_w, w)
    p2p = img.pixel_to_point[rows][:, cols]
    point_to_pixel = img.point_to_pixel.copy()
    mapped = img.mapped
    point_to_pixel[mapped, 0] = _owner_index(h, new_h)[img.point_to_pixel[mapped, 0]]
    point_to_pixel[mapped, 1] = _owner_index(w, new_w)[img.point_to_pixel[mapped, 1]]
    return RangeImage(
        img.data[rows][:, cols], p2p >= 0, p2p, point_to_pixel, img.ranges
    )


def back_project(per_pixel: np.ndarray, img: RangeImage) -> tuple[np.ndarray, np.ndarray]:
    """Gather ``(H, W, D)`` pixel values onto points.

    Returns the ``(N, D)`` values and a boolean mask of points without a pixel,
    which receive zeros.
    """
    per_pixel = np.asarray(per_pixel)
    if per_pixel.ndim == 2:
        per_pixel = per_pixel[..., None]
    if per_pixel.shape[:2] != img.shape:
        raise ValueError(
            f"per-pixel tensor is {per_pixel.shape[:2]}, image is {img.shape}"
        )
    mapped = img.mapped
    out = np.zeros((img.num_points,) + per_pixel.shape[2:], dtype=per_pixel.dtype)
    rows, cols = img.point_to_pixel[mapped].T
    out[mapped] = per_pixel[rows, cols]
    return out, ~mapped


def back_project_adjoint(grad_points: np.ndarray, img: RangeImage) -> np.ndarray:
    """Scatter-add per-point gradients into their pixels (adjoint of ``back_project``)."""
    h, w = img.shape
    mapped = np.flatnonzero(img.mapped)
    rows, cols = img.point_to_pixel[mapped].T
    # pixels x points selection matrix; CSR sums each row in point order
    scatter = sp.csr_matrix(
        (np.ones(mapped.size), (rows * w + cols, mapped)), shape=(h * w, img.num_points)
    )
    flat = grad_points.reshape(img.num_points, -1)
    out = np.asarray(scatter @ flat)
    return out.reshape((h, w) + grad_points.shape[1:])


def random_crop(img: RangeImage, width: int, rng: np.random.Generator) -> tuple[RangeImage, int]:
    """Crop ``width`` columns starting at a uniform random column, wrapping in azimuth.

    Returns the cropped image and the start column. Points outside the crop get
    ``(-1, -1)`` in ``point_to_pixel``.
    """
    h, w = img.shape
    if not 1 <= width <= w:
        raise ValueError(f"crop width must be in [1, {w}], got {width}")
    start = int(rng.integers(0, w))
    cols = (start + np.arange(width)) % w
    new_col = np.full(w, -1, dtype=np.int64)
    new_col[cols] = np.arange(width)

    point_to_pixel = img.point_to_pixel.copy()
    mapped = img.mapped
    moved = new_col[point_to_pixel[mapped, 1]]
    point_to_pixel[mapped, 1] = moved
    point_to_pixel[np.flatnonzero(mapped)[moved < 0]] = -1
    p2p = img.pixel_to_point[:, cols]
    return (
        RangeImage(img.data[:, cols], p2p >= 0, p2p, point_to_pixel, img.ranges),
        start,
    )


def horizontal_flip(img: RangeImage) -> RangeImage:
    w = img.shape[1]
    point_to_pixel = img.point_to_pixel.copy()
    mapped = img.mapped
    point_to_pixel[mapped, 1] = w - 1 - point_to_pixel[mapped, 1]
    return replace(
        img,
        data=img.data[:, ::-1].copy(),
        valid=img.valid[:, ::-1].copy(),
        pixel_to_point=img.pixel_to_point[:, ::-1].copy(),
        point_to_pixel=point_to_pixel,
    )


def write_range_image(img: RangeImage) -> bytes:
    """Serialize to the ``KPRI`` layout: header, float32 data, int64 pixel_to_point."""
    h, w = img.shape
    c = img.data.shape[2]
    header = KPRI_MAGIC + struct.pack("<IIII", KPRI_VERSION, h, w, c)
    return (
        header
        + np.ascontiguousarray(img.data, dtype="<f4").tobytes()
        + np.ascontiguousarray(img.pixel_to_point, dtype="<i8").tobytes()
    )


def read_range_image(payload: bytes) -> tuple[np.ndarray, np.ndarray]:
    """Parse a ``KPRI`` payload into ``(data, pixel_to_point)``."""
    if len(payload) < 20 or payload[:4] != KPRI_MAGIC:
        raise FormatError("not a KPRI range image")
    version, h, w, c = struct.unpack_from("<IIII", payload, 4)
    if version != KPRI_VERSION:
        raise FormatError(f"unsupported KPRI version {version}")
    n_data = h * w * c * 4
    if len(payload) != 20 + n_data + h * w * 8:
        raise FormatError("KPRI payload length does not match its header")
    data = np.frombuffer(payload, dtype="<f4", count=h * w * c, offset=20).reshape(h, w, c)
    p2p = np.frombuffer(payload, dtype="<i8", count=h * w, offset=20 + n_data).reshape(h, w)
    return data.astype(np.float32), p2p.astype(np.int64)
