"""Range-weighted KNN label voting in a range-image window.

This is the non-learned post-processing that lifts per-pixel labels back to
every 3D point. Each point looks at the ``S x S`` window around its pixel,
keeps the ``k`` valid pixels whose stored range is closest to its own range
and lets them vote with Gaussian weights on the range difference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from kprnet.errors import ConfigError
from kprnet.kitti_io import IGNORE
from kprnet.projection import RangeImage


@dataclass(frozen=True)
class KnnConfig:
    k: int = 5
    window: int = 5
    sigma_gauss: float = 1.0
    cutoff: float = 1.0  # 0 disables the cutoff

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigError("window must be odd and >= 1")
        if not self.sigma_gauss > 0:
            raise ConfigError("sigma_gauss must be positive")
        if self.cutoff < 0:
            raise ConfigError("cutoff must be >= 0")


def window_offsets(window: int) -> tuple[np.ndarray, np.ndarray]:
    """Row and column offsets of a window, row-major."""
    half = window // 2
    dr, dc = np.meshgrid(np.arange(-half, half + 1), np.arange(-half, half + 1), indexing="ij")
    return dr.ravel(), dc.ravel()


def knn_filter(pixel_labels: np.ndarray, img: RangeImage, cfg: KnnConfig = KnnConfig()) -> np.ndarray:
    """Per-point train ids from per-pixel train ids.

    Window rows outside the image are skipped; columns wrap around in azimuth.
    Candidates are ranked by range difference with ties broken by window
    position (row-major). Points without a pixel get ``IGNORE``.
    """
    pixel_labels = np.asarray(pixel_labels)
    h, w = img.shape
    if pixel_labels.shape != (h, w):
        raise ValueError(f"label image is {pixel_labels.shape}, range image is {(h, w)}")
    out = np.full(img.num_points, IGNORE, dtype=np.uint8)
    mapped = np.flatnonzero(img.mapped)
    if mapped.size == 0:
        return out
    rows, cols = img.point_to_pixel[mapped].T
    own_range = img.ranges[mapped]
    pix_range = img.pixel_ranges()

    dr, dc = window_offsets(cfg.window)
    cand_r = rows[:, None] + dr[None]
    cand_c = (cols[:, None] + dc[None]) % w
    inside = (cand_r >= 0) & (cand_r < h)
    cand_r = np.clip(cand_r, 0, h - 1)
    delta = np.abs(pix_range[cand_r, cand_c] - own_range[:, None])
    delta[~inside] = np.inf
    labels = pixel_labels[cand_r, cand_c].astype(np.int64)

    k = min(cfg.k, delta.shape[1])
    rank = np.argsort(delta, axis=1, kind="stable")[:, :k]
    d = np.take_along_axis(delta, rank, axis=1)
    lab = np.take_along_axis(labels, rank, axis=1)
    weight = np.exp(-(d**2) / (2.0 * cfg.sigma_gauss**2))
    if cfg.cutoff > 0:
        weight[d > cfg.cutoff] = 0.0
    weight[~np.isfinite(d)] = 0.0

    n = mapped.size
    scores = np.zeros((n, int(lab.max()) + 1))
    idx = np.arange(n)
    for j in range(k):  # rank order fixes the summation order
        scores[idx, lab[:, j]] += weight[:, j]
    best = scores.max(axis=1)
    # first voter (by rank) whose label reaches the best score
    is_best = (weight > 0) & (scores[idx[:, None], lab] == best[:, None])
    first = np.argmax(is_best, axis=1)
    result = lab[idx, first]
    no_votes = ~is_best.any(axis=1)
    result[no_votes] = pixel_labels[rows[no_votes], cols[no_votes]]
    out[mapped] = result
    return out
