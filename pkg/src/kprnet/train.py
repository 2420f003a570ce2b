"""Loss, optimizer, schedule and the end-to-end training loop.

Two model variants share the 2D network:

* ``KPRNetModel``: range image -> 2D features -> back-projection onto points ->
  KPConv -> BatchNorm/ReLU/classifier, trained with per-point labels.
* ``PixelModel``: the same 2D features classified per pixel, trained on the
  labels of the pixel-winning points; point labels come from KNN voting.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from kprnet import checkpoint
from kprnet.errors import ConfigError, DataError
from kprnet.kitti_io import IGNORE, NUM_CLASSES, PointCloud
from kprnet.knn import KnnConfig, knn_filter
from kprnet.kpconv import (
    KernelDisposition,
    KPConvLayer,
    PointHead,
    generate_kernel_points,
    influence_matrices,
    radius_neighbors,
)
from kprnet.layers import Module
from kprnet.net2d import Net2D, Net2DConfig, StageConfig
from kprnet.projection import (
    ProjectionConfig,
    RangeImage,
    back_project,
    back_project_adjoint,
    horizontal_flip,
    project,
    random_crop,
    upsample_nearest,
)

log = logging.getLogger(__name__)

KPCONV = "kpconv"
KNN = "knn"


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.01875
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 120
    warmup_iters: int = 1000
    batch_size: int = 24
    crop_width: int = 1025
    flip_prob: float = 0.5
    seed: int = 0
    upsample_to: tuple[int, int] | None = (145, 2049)

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ConfigError("base_lr must be positive")
        if self.warmup_iters < 0:
            raise ConfigError("warmup_iters must be >= 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.crop_width < 1:
            raise ConfigError("crop_width must be >= 1")
        if not 0 <= self.flip_prob <= 1:
            raise ConfigError("flip_prob must be in [0, 1]")


@dataclass(frozen=True)
class KPConvConfig:
    num_kernels: int = 15
    radius: float = 0.60
    sigma: float = 0.30
    out_channels: int = 128
    kernel_seed: int = 0

    def __post_init__(self):
        if self.num_kernels < 1 or not self.radius > 0 or not self.sigma > 0 or self.out_channels < 1:
            raise ConfigError(f"invalid KPConv configuration {self}")


# ---------------------------------------------------------------------------
# loss, schedule, optimizer


def cross_entropy(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over non-IGNORE rows and its gradient."""
    targets = np.asarray(targets).astype(np.int64)
    grad = np.zeros_like(logits, dtype=np.float64)
    labeled = np.flatnonzero(targets != IGNORE)
    if labeled.size == 0:
        return 0.0, grad
    z = logits[labeled] - logits[labeled].max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    t = targets[labeled]
    loss = float((log_norm - z[np.arange(labeled.size), t]).mean())
    p = np.exp(z - log_norm[:, None])
    p[np.arange(labeled.size), t] -= 1.0
    grad[labeled] = p / labeled.size
    return loss, grad


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warm-up from 0, then cosine decay to 0 at ``total_steps``."""
    warm = cfg.warmup_iters
    if step < warm:
        return cfg.base_lr * step / warm
    if total_steps <= warm:
        return cfg.base_lr
    progress = (step - warm) / (total_steps - warm)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def decays(name: str) -> bool:
    """Weight decay applies to conv/linear/kpconv weights only."""
    return not name.rsplit(".", 1)[-1] in ("gamma", "beta", "bias")


def sgd_step(params: dict, grads: dict, state: OptimizerState, lr: float, cfg: TrainConfig) -> None:
    """In-place SGD with momentum and (selective) L2 weight decay."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if cfg.weight_decay and decays(name):
            g = g + cfg.weight_decay * p
        buf = state.buffers.get(name)
        if buf is None:
            buf = state.buffers[name] = np.zeros_like(p)
        elif buf.shape != p.shape:
            raise ValueError(f"{name}: momentum buffer shape {buf.shape} != {p.shape}")
        buf *= cfg.momentum
        buf += g
        p -= lr * buf
    state.step += 1


# ---------------------------------------------------------------------------
# models


def _as_nchw(images: Sequence[RangeImage]) -> np.ndarray:
    return np.stack([np.transpose(img.data, (2, 0, 1)) for img in images]).astype(np.float64)


class KPRNetModel(Module):
    kind = KPCONV

    def __init__(self, net_cfg: Net2DConfig, kp_cfg: KPConvConfig, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.net_cfg, self.kp_cfg = net_cfg, kp_cfg
        self.net = self.add("net2d", Net2D(net_cfg, rng))
        disposition = generate_kernel_points(
            kp_cfg.num_kernels, kp_cfg.radius, kp_cfg.kernel_seed, kp_cfg.sigma
        )
        self.kpconv = self.add(
            "kpconv",
            KPConvLayer(disposition, net_cfg.out_feature_channels, kp_cfg.out_channels, rng),
        )

    def forward(self, images, clouds, keeps, influences, train=True):
        """Per-point logits for the kept points of each scan, concatenated in scan order."""
        feats = self.net.forward(_as_nchw(images), train)
        point_feats = []
        for b, (img, keep) in enumerate(zip(images, keeps)):
            f, _ = back_project(np.transpose(feats[b], (1, 2, 0)), img)
            point_feats.append(f[keep])
        point_feats = np.concatenate(point_feats)
        points = np.concatenate([c.points[k] for c, k in zip(clouds, keeps)]).astype(np.float64)
        self._cache = (images, keeps, feats.shape)
        return self.kpconv.forward(point_feats, points, influences=influences, train=train)

    def backward(self, grad_logits):
        images, keeps, feat_shape = self._saved()
        grad_points = self.kpconv.backward(grad_logits)
        grad_feats = np.zeros(feat_shape)
        start = 0
        for b, (img, keep) in enumerate(zip(images, keeps)):
            n_keep = int(keep.sum())
            full = np.zeros((img.num_points, feat_shape[1]))
            full[keep] = grad_points[start : start + n_keep]
            start += n_keep
            grad_feats[b] = np.transpose(back_project_adjoint(full, img), (2, 0, 1))
        return self.net.backward(grad_feats)

    def metadata(self) -> dict[str, np.ndarray]:
        d = self.kpconv.disposition
        return {
            "meta.kind": np.array([0.0]),
            "kpconv.kernel_points": d.positions,
            "kpconv.radius": np.array(d.radius),
            "kpconv.sigma": np.array(d.sigma),
            "meta.kpconv.out_channels": np.array([self.kp_cfg.out_channels]),
        }


class PixelModel(Module):
    """2D network with a per-pixel BatchNorm/ReLU/classifier head."""

    kind = KNN

    def __init__(self, net_cfg: Net2DConfig, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.net_cfg = net_cfg
        self.net = self.add("net2d", Net2D(net_cfg, rng))
        self.head = self.add("head", PointHead(net_cfg.out_feature_channels, rng))

    def forward(self, images, train=True):
        """Per-pixel logits, flattened to ``(B * H * W, classes)``."""
        feats = self.net.forward(_as_nchw(images), train)
        self._cache = feats.shape
        flat = np.transpose(feats, (0, 2, 3, 1)).reshape(-1, feats.shape[1])
        return self.head.forward(flat, train)

    def backward(self, grad_logits):
        n, f, h, w = self._saved()
        g = self.head.backward(grad_logits).reshape(n, h, w, f)
        return self.net.backward(np.transpose(g, (0, 3, 1, 2)))

    def metadata(self) -> dict[str, np.ndarray]:
        return {"meta.kind": np.array([1.0])}


def _net_metadata(cfg: Net2DConfig) -> dict[str, np.ndarray]:
    return {
        "meta.net2d.stem": np.array([cfg.in_channels, cfg.stem_channels, cfg.stem_stride]),
        "meta.net2d.stages": np.array(
            [[s.count, s.channels, s.stride, s.groups] for s in cfg.stages]
        ),
        "meta.net2d.aspp_rates": np.array(cfg.aspp_rates),
        "meta.net2d.widths": np.array(
            [cfg.decoder_channels, cfg.skip_channels, cfg.out_feature_channels, int(cfg.circular_padding)]
        ),
    }


def model_tensors(model) -> dict[str, np.ndarray]:
    tensors = dict(_net_metadata(model.net_cfg))
    tensors.update(model.metadata())
    tensors.update(model.state_dict())
    return tensors


def save_model(path, model, extra: dict[str, np.ndarray] | None = None) -> None:
    """Write a ``KPRW`` checkpoint; ``extra`` tensors (e.g. run metadata) are stored alongside."""
    tensors = model_tensors(model)
    tensors.update(extra or {})
    checkpoint.save(path, tensors)


def model_from_tensors(tensors: dict[str, np.ndarray]):
    """Rebuild a model (either kind) from checkpoint tensors."""
    ints = lambda name: [int(v) for v in np.asarray(tensors[name]).ravel()]  # noqa: E731
    in_ch, stem, stem_stride = ints("meta.net2d.stem")
    stages = np.asarray(tensors["meta.net2d.stages"]).astype(int)
    dec, skip, feat, circ = ints("meta.net2d.widths")
    net_cfg = Net2DConfig(
        in_channels=in_ch,
        stem_channels=stem,
        stem_stride=stem_stride,
        stages=tuple(StageConfig(*map(int, row)) for row in stages),
        aspp_rates=tuple(ints("meta.net2d.aspp_rates")),
        decoder_channels=dec,
        skip_channels=skip,
        out_feature_channels=feat,
        circular_padding=bool(circ),
    )
    if ints("meta.kind")[0] == 0:
        kp = np.asarray(tensors["kpconv.kernel_points"], dtype=np.float64)
        radius = float(tensors["kpconv.radius"])
        sigma = float(tensors["kpconv.sigma"])
        kp_cfg = KPConvConfig(kp.shape[0], radius, sigma, ints("meta.kpconv.out_channels")[0])
        model = KPRNetModel(net_cfg, kp_cfg)
        # stored positions are float32; keep them inside the (float32) radius
        model.kpconv.disposition = KernelDisposition(kp, sigma, max(radius, float(np.linalg.norm(kp, axis=1).max())))
    else:
        model = PixelModel(net_cfg)
    skip = ("meta.", "run.", "kpconv.kernel_points", "kpconv.radius", "kpconv.sigma")
    model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith(skip)})
    return model


def load_model(path):
    return model_from_tensors(checkpoint.load(path))


# ---------------------------------------------------------------------------
# data preparation and training


@dataclass
class Scan:
    cloud: PointCloud
    labels: np.ndarray  # train ids per point
    name: str = ""


def prepare_image(cloud: PointCloud, proj_cfg: ProjectionConfig, upsample_to) -> RangeImage:
    img = project(cloud, proj_cfg)
    if upsample_to is not None and tuple(upsample_to) != img.shape:
        img = upsample_nearest(img, *upsample_to)
    return img


def augment(img: RangeImage, cfg: TrainConfig, rng) -> tuple[RangeImage, bool]:
    """Random crop (if narrower than the image) then random flip; returns (image, cropped)."""
    cropped = cfg.crop_width < img.shape[1]
    if cropped:
        img, _ = random_crop(img, cfg.crop_width, rng)
    if rng.random() < cfg.flip_prob:
        img = horizontal_flip(img)
    return img, cropped


def pixel_targets(img: RangeImage, labels: np.ndarray) -> np.ndarray:
    """Train id of each pixel's winning point, IGNORE for empty pixels."""
    out = np.full(img.shape, IGNORE, dtype=np.uint8)
    out[img.valid] = labels[img.pixel_to_point[img.valid]]
    return out


class Trainer:
    """Owns the optimizer state, RNG and influence cache for one training run."""

    def __init__(self, model, cfg: TrainConfig, proj_cfg: ProjectionConfig, total_steps: int, frozen=()):
        """``frozen`` lists parameter-name prefixes excluded from updates (e.g. ``"net2d."``)."""
        self.model, self.cfg, self.proj_cfg = model, cfg, proj_cfg
        self.frozen = tuple(frozen)
        self.total_steps = total_steps
        self.state = OptimizerState()
        self.rng = np.random.default_rng(cfg.seed)
        self._influence_cache: dict = {}
        self._image_cache: dict = {}

    def _image(self, scan: Scan, key) -> RangeImage:
        if key not in self._image_cache:
            self._image_cache[key] = prepare_image(scan.cloud, self.proj_cfg, self.cfg.upsample_to)
        return self._image_cache[key]

    def _influences(self, scan: Scan, key, keep: np.ndarray):
        cache_key = (key, keep.tobytes())
        hit = self._influence_cache.get(cache_key)
        if hit is None:
            pts = scan.cloud.points[keep].astype(np.float64)
            d = self.model.kpconv.disposition
            hit = influence_matrices(pts, radius_neighbors(pts, d.radius), d)
            if len(self._influence_cache) > 256:
                self._influence_cache.clear()
            self._influence_cache[cache_key] = hit
        return hit

    def step(self, batch: Sequence[tuple[object, Scan]]) -> float:
        """One optimizer step on ``batch`` of ``(cache_key, scan)`` pairs; returns the loss."""
        model, cfg = self.model, self.cfg
        step = self.state.step
        images, keeps = [], []
        for key, scan in batch:
            if len(scan.labels) != len(scan.cloud):
                raise DataError(f"scan {scan.name or key}: {len(scan.labels)} labels for {len(scan.cloud)} points")
            try:
                img, cropped = augment(self._image(scan, key), cfg, self.rng)
            except Exception as exc:
                raise type(exc)(f"scan {scan.name or key}: {exc}") from exc
            images.append(img)
            keeps.append(img.mapped if cropped else np.ones(img.num_points, dtype=bool))
        model.zero_grad()
        if model.kind == KPCONV:
            influences = [self._influences(scan, key, keep) for (key, scan), keep in zip(batch, keeps)]
            targets = np.concatenate([scan.labels[k] for (_, scan), k in zip(batch, keeps)])
            logits = model.forward(images, [s.cloud for _, s in batch], keeps, influences, train=True)
        else:
            targets = np.concatenate(
                [pixel_targets(img, scan.labels).ravel() for img, (_, scan) in zip(images, batch)]
            )
            logits = model.forward(images, train=True)
        loss, grad = cross_entropy(logits, targets)
        model.backward(grad)
        trainable = [(n, p, g) for n, p, g in model.named_parameters() if not n.startswith(self.frozen)]
        params = {name: p for name, p, _ in trainable}
        grads = {name: g for name, _, g in trainable}
        sgd_step(params, grads, self.state, lr_at(step, self.total_steps, cfg), cfg)
        return loss


def fit(
    model,
    scans: Sequence[Scan],
    cfg: TrainConfig,
    proj_cfg: ProjectionConfig,
    log_path=None,
    checkpoint_path=None,
    checkpoint_every: int = 1,
    on_step: Callable[[int, float, float], None] | None = None,
    frozen=(),
    checkpoint_extra: dict[str, np.ndarray] | None = None,
) -> list[tuple[int, float, float]]:
    """Train for ``cfg.epochs`` epochs; one crop per scan per epoch.

    Returns the ``(step, lr, loss)`` log, also written as CSV to ``log_path``.
    """
    steps_per_epoch = math.ceil(len(scans) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    if total <= cfg.warmup_iters:
        log.warning(
            "warm-up of %d iterations exceeds the %d-step run; shortening it", cfg.warmup_iters, total
        )
        cfg = replace(cfg, warmup_iters=max(total - 1, 0))
    trainer = Trainer(model, cfg, proj_cfg, total, frozen)
    order_rng = np.random.default_rng(cfg.seed + 1)
    history = []
    writer = fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["step", "lr", "loss"])
    try:
        for epoch in range(cfg.epochs):
            order = order_rng.permutation(len(scans))
            for start in range(0, len(scans), cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                step = trainer.state.step
                lr = lr_at(step, total, cfg)
                loss = trainer.step([(int(i), scans[i]) for i in idx])
                history.append((step, lr, loss))
                if writer:
                    writer.writerow([step, repr(lr), repr(loss)])
                if on_step:
                    on_step(step, lr, loss)
            if checkpoint_path is not None and (epoch + 1) % checkpoint_every == 0:
                save_model(checkpoint_path, model, checkpoint_extra)
    finally:
        if fh:
            fh.close()
    return history


# ---------------------------------------------------------------------------
# inference


def predict_points(model, cloud: PointCloud, proj_cfg: ProjectionConfig, upsample_to=None, knn_cfg=None):
    """Per-point train ids in eval mode.

    KPConv models classify every point, including ones dropped by the
    projection (they carry zero 2D features). Pixel models back-project pixel
    predictions, then apply KNN voting when ``knn_cfg`` is given.
    """
    img = prepare_image(cloud, proj_cfg, upsample_to)
    if model.kind == KPCONV:
        keep = np.ones(img.num_points, dtype=bool)
        logits = model.forward([img], [cloud], [keep], None, train=False)
        return np.argmax(logits, axis=1).astype(np.uint8)
    pixel_labels = predict_pixels(model, img)
    if knn_cfg is not None:
        return knn_filter(pixel_labels, img, knn_cfg)
    labels, dropped = back_project(pixel_labels, img)
    labels = labels[:, 0].astype(np.uint8)
    labels[dropped] = IGNORE
    return labels


def predict_pixels(model: PixelModel, img: RangeImage) -> np.ndarray:
    logits = model.forward([img], train=False)
    return np.argmax(logits, axis=1).astype(np.uint8).reshape(img.shape)


def point_accuracy(pred: np.ndarray, labels: np.ndarray) -> float:
    labeled = labels != IGNORE
    return float((pred[labeled] == labels[labeled]).mean())


__all__ = [
    "KNN",
    "KPCONV",
    "KPConvConfig",
    "KPRNetModel",
    "NUM_CLASSES",
    "OptimizerState",
    "PixelModel",
    "Scan",
    "TrainConfig",
    "Trainer",
    "cross_entropy",
    "fit",
    "load_model",
    "lr_at",
    "point_accuracy",
    "predict_pixels",
    "predict_points",
    "save_model",
    "sgd_step",
]
