"""Rigid kernel point convolution on raw 3D points, plus its classification head.

For a query point ``x`` with radius neighbours ``x_i`` carrying features
``f_i``, the layer computes::

    out(x) = sum_i sum_k h(x_i - x, p_k) * (f_i @ W_k)
    h(y, p) = max(0, 1 - |y - p| / sigma)

Per kernel point the influences form a sparse ``N x N`` matrix ``H_k``, so the
forward pass is ``sum_k (H_k @ F) @ W_k`` and the backward pass reuses the same
matrices transposed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from kprnet.kitti_io import NUM_CLASSES
from kprnet.layers import BatchNorm, Linear, Module, ReLU


@dataclass(frozen=True)
class KernelDisposition:
    positions: np.ndarray  # (K, 3)
    sigma: float
    radius: float

    @property
    def num_kernels(self) -> int:
        return self.positions.shape[0]

    def __post_init__(self):
        pos = self.positions
        if pos.ndim != 2 or pos.shape[1] != 3 or pos.shape[0] < 1:
            raise ValueError("kernel positions must be K x 3 with K >= 1")
        if np.any(pos[0] != 0):
            raise ValueError("kernel point 0 must be the origin")
        if np.any(np.linalg.norm(pos, axis=1) > self.radius * (1 + 1e-12)):
            raise ValueError("kernel points must lie inside the neighbourhood radius")
        if pos.shape[0] > 1:
            d = np.linalg.norm(pos[:, None] - pos[None], axis=-1)
            if d[np.triu_indices(pos.shape[0], 1)].min() <= 0:
                raise ValueError("kernel points must be distinct")


def repulsion_energy(free: np.ndarray) -> float:
    """Inverse-distance repulsion among free points and the fixed center, plus attraction |x|^2."""
    pts = np.vstack([np.zeros((1, 3)), free])
    d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    iu = np.triu_indices(pts.shape[0], 1)
    return float((1.0 / d[iu]).sum() + (free**2).sum())


def _energy_grad(free: np.ndarray) -> np.ndarray:
    pts = np.vstack([np.zeros((1, 3)), free])
    diff = pts[:, None] - pts[None]
    d = np.linalg.norm(diff, axis=-1)
    np.fill_diagonal(d, np.inf)
    repel = -(diff / d[..., None] ** 3).sum(axis=1)
    return repel[1:] + 2.0 * free


def optimize_kernel_points(K: int, seed: int, tol: float = 1e-6, max_iter: int = 20000):
    """Unit-scale kernel points by descent on :func:`repulsion_energy`.

    Returns ``(positions, energies)`` where ``energies`` traces every accepted
    iterate. A step is only accepted when it does not increase the energy.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    rng = np.random.default_rng(seed)
    if K == 1:
        return np.zeros((1, 3)), [0.0]
    free = rng.uniform(-1.0, 1.0, size=(K - 1, 3))
    free *= (rng.uniform(0.3, 1.0, size=(K - 1, 1))) / np.linalg.norm(free, axis=1, keepdims=True)
    energy = repulsion_energy(free)
    energies = [energy]
    step = 0.05
    for _ in range(max_iter):
        grad = _energy_grad(free)
        while True:
            move = -step * grad
            # cap displacement so no point jumps through another
            largest = np.abs(move).max()
            if largest > 0.05:
                move *= 0.05 / largest
            candidate = free + move
            cand_energy = repulsion_energy(candidate)
            if cand_energy <= energy:
                break
            step *= 0.5
            if step < 1e-14:
                move = np.zeros_like(free)
                candidate, cand_energy = free, energy
                break
        free, energy = candidate, cand_energy
        energies.append(energy)
        step *= 1.2
        if np.abs(move).max() < tol:
            break
    return np.vstack([np.zeros((1, 3)), free]), energies


def generate_kernel_points(K: int, radius: float, seed: int, sigma: float | None = None) -> KernelDisposition:
    """Center point plus ``K - 1`` repelling points, scaled to mean norm ``0.75 * radius``."""
    if K < 1:
        raise ValueError("K must be >= 1")
    unit, _ = optimize_kernel_points(K, seed)
    if K > 1:
        norms = np.linalg.norm(unit[1:], axis=1)
        unit = unit * (0.75 / norms.mean())
        # outer shells of large dispositions may overshoot the ball
        norms = np.linalg.norm(unit, axis=1, keepdims=True)
        unit = np.where(norms > 1.0, unit / np.maximum(norms, 1e-300), unit)
    return KernelDisposition(unit * radius, radius / 2.0 if sigma is None else sigma, radius)


@dataclass(frozen=True)
class NeighborLists:
    """CSR neighbour lists; row ``i`` is sorted by support index."""

    indptr: np.ndarray
    indices: np.ndarray

    def __len__(self) -> int:
        return self.indptr.shape[0] - 1

    def __getitem__(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i] : self.indptr[i + 1]]

    def queries(self) -> np.ndarray:
        return np.repeat(np.arange(len(self)), np.diff(self.indptr))

    def offset(self, shift: int) -> "NeighborLists":
        return NeighborLists(self.indptr, self.indices + shift)

    @staticmethod
    def concatenate(parts: list["NeighborLists"]) -> "NeighborLists":
        """Block-diagonal union; part ``j`` indices are shifted by the sizes before it."""
        indptr, indices, n_off, nnz = [np.zeros(1, dtype=np.int64)], [], 0, 0
        for part in parts:
            indptr.append(part.indptr[1:] + nnz)
            indices.append(part.indices + n_off)
            n_off += len(part)
            nnz += part.indices.shape[0]
        return NeighborLists(
            np.concatenate(indptr), np.concatenate(indices) if indices else np.zeros(0, np.int64)
        )


def radius_neighbors(points: np.ndarray, radius: float) -> NeighborLists:
    """Exact radius search (distance <= radius) on a voxel grid of cell size ``radius``."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if n == 0:
        return NeighborLists(np.zeros(1, np.int64), np.zeros(0, np.int64))
    cells = np.floor((pts - pts.min(axis=0)) / radius).astype(np.int64) + 1
    dims = cells.max(axis=0) + 2
    keys = (cells[:, 0] * dims[1] + cells[:, 1]) * dims[2] + cells[:, 2]
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    uniq, starts, counts = np.unique(sorted_keys, return_index=True, return_counts=True)

    r2 = radius * radius
    queries, supports = [], []
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                nkeys = keys + (dx * dims[1] + dy) * dims[2] + dz
                slot = np.searchsorted(uniq, nkeys)
                slot = np.minimum(slot, uniq.shape[0] - 1)
                hit = uniq[slot] == nkeys
                q = np.flatnonzero(hit)
                cnt = counts[slot[q]]
                qq = np.repeat(q, cnt)
                # position of each candidate inside its cell run
                within = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
                ss = order[np.repeat(starts[slot[q]], cnt) + within]
                d2 = ((pts[qq] - pts[ss]) ** 2).sum(axis=1)
                close = d2 <= r2
                queries.append(qq[close])
                supports.append(ss[close])
    q = np.concatenate(queries)
    s = np.concatenate(supports)
    o = np.lexsort((s, q))
    q, s = q[o], s[o]
    indptr = np.zeros(n + 1, dtype=np.int64)
    indptr[1:] = np.cumsum(np.bincount(q, minlength=n))
    return NeighborLists(indptr, s.astype(np.int64))


@dataclass
class Influence:
    """Sparse influence matrices of one point set, one ``N x N`` CSR matrix per kernel point.

    Only non-zero influences are stored. Transposes are kept in CSR form for the
    backward pass.
    """

    mats: list
    mats_t: list
    num_points: int


def influence_matrices(points: np.ndarray, neighbors: NeighborLists, disposition: KernelDisposition) -> Influence:
    """Entries ``h(x_i - x_q, p_k)`` for every neighbour pair ``(q, i)`` and kernel point ``k``."""
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    q = neighbors.queries()
    s = neighbors.indices
    y = pts[s] - pts[q]
    mats, mats_t = [], []
    for p in disposition.positions:
        h = np.maximum(0.0, 1.0 - np.linalg.norm(y - p, axis=1) / disposition.sigma)
        keep = h > 0
        hq, hs, hv = q[keep], s[keep], h[keep]
        indptr = np.zeros(n + 1, dtype=np.int64)
        indptr[1:] = np.cumsum(np.bincount(hq, minlength=n))
        mats.append(sp.csr_matrix((hv, hs, indptr), shape=(n, n)))
        mats_t.append(mats[-1].T.tocsr())
    return Influence(mats, mats_t, n)


class PointHead(Module):
    """BatchNorm over points -> ReLU -> affine classifier."""

    def __init__(self, channels, rng, num_classes=NUM_CLASSES):
        super().__init__()
        self.bn = self.add("bn", BatchNorm(channels))
        self.relu = self.add("relu", ReLU())
        self.classifier = self.add("classifier", Linear(channels, num_classes, rng))

    def forward(self, x, train=True):
        return self.classifier.forward(self.relu.forward(self.bn.forward(x, train), train), train)

    def backward(self, grad):
        return self.bn.backward(self.relu.backward(self.classifier.backward(grad)))


class KPConvLayer(Module):
    """A single rigid KPConv layer followed by its BatchNorm/ReLU/classifier head."""

    def __init__(self, disposition: KernelDisposition, c_in: int, c_out: int, rng, num_classes=NUM_CLASSES):
        super().__init__()
        self.disposition = disposition
        k = disposition.num_kernels
        self.add_param("weights", rng.standard_normal((k, c_in, c_out)) * np.sqrt(2.0 / (k * c_in)))
        self.head = self.add("head", PointHead(c_out, rng, num_classes))

    @property
    def c_in(self) -> int:
        return self.params["weights"].shape[1]

    def conv_forward(self, features, points, neighbors=None, influences=None):
        """``(N, C_in)`` features -> ``(N, C_out)``.

        ``influences`` may be a precomputed :class:`Influence` or a list of them
        covering consecutive row blocks (independent point sets).
        """
        features = np.asarray(features, dtype=np.float64)
        n_points = np.asarray(points).shape[0]
        if features.shape[0] != n_points:
            raise ValueError(f"{features.shape[0]} feature rows for {n_points} points")
        if features.ndim != 2 or features.shape[1] != self.c_in:
            raise ValueError(f"expected (N, {self.c_in}) features, got {features.shape}")
        if influences is None:
            if neighbors is None:
                neighbors = radius_neighbors(points, self.disposition.radius)
            influences = influence_matrices(points, neighbors, self.disposition)
        blocks = [influences] if isinstance(influences, Influence) else list(influences)
        if sum(b.num_points for b in blocks) != n_points:
            raise ValueError("influence blocks do not cover the point set")
        weights = self.params["weights"]
        out = np.zeros((n_points, weights.shape[2]))
        gathered = np.zeros((weights.shape[0], n_points, weights.shape[1]))
        start = 0
        for block in blocks:
            rows = slice(start, start + block.num_points)
            for k, hk in enumerate(block.mats):
                gathered[k, rows] = hk @ features[rows]
            start += block.num_points
        for k in range(weights.shape[0]):
            out += gathered[k] @ weights[k]
        self._cache = (blocks, gathered)
        return out

    def conv_gradients(self, grad_out):
        """``(grad_features, grad_weights)`` of the last forward; does not touch ``grads``."""
        blocks, gathered = self._saved()
        weights = self.params["weights"]
        grad_weights = np.empty_like(weights)
        grad_features = np.zeros((grad_out.shape[0], weights.shape[1]))
        for k in range(weights.shape[0]):
            grad_weights[k] = gathered[k].T @ grad_out
            back = grad_out @ weights[k].T
            start = 0
            for block in blocks:
                rows = slice(start, start + block.num_points)
                grad_features[rows] += block.mats_t[k] @ back[rows]
                start += block.num_points
        return grad_features, grad_weights

    def conv_backward(self, grad_out):
        grad_features, grad_weights = self.conv_gradients(grad_out)
        self.grads["weights"] += grad_weights
        return grad_features

    def forward(self, features, points, neighbors=None, influences=None, train=True):
        return self.head.forward(self.conv_forward(features, points, neighbors, influences), train)

    def backward(self, grad_logits):
        return self.conv_backward(self.head.backward(grad_logits))


def kpconv_forward(features, points, neighbors, layer: KPConvLayer) -> np.ndarray:
    return layer.conv_forward(features, points, neighbors)


def kpconv_backward(grad_out, layer: KPConvLayer):
    """Returns ``(grad_features, grad_weights)`` for the last ``kpconv_forward`` call."""
    return layer.conv_gradients(grad_out)


def head_forward(point_features, layer: KPConvLayer, train=True) -> np.ndarray:
    return layer.head.forward(point_features, train)


def head_backward(grad_logits, layer: KPConvLayer) -> np.ndarray:
    return layer.head.backward(grad_logits)
