"""Toy-scale encoder / ASPP / decoder network for range images.

Layout follows the usual strided-encoder pattern: a stride-2 stem, three stages
of grouped bottleneck blocks reaching strides 4, 8 and 16, an ASPP module on
the stride-16 features, and a decoder that upsamples and fuses the stride-8
and stride-4 stage outputs. The result is bilinearly upsampled to the input
resolution and returned as per-pixel features (no classifier).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from kprnet import ops
from kprnet.errors import ConfigError
from kprnet.layers import BatchNorm, Conv2d, Module, ReLU, Sequential, conv_bn_relu


@dataclass(frozen=True)
class StageConfig:
    count: int
    channels: int
    stride: int
    groups: int


def _default_stages():
    return (StageConfig(2, 32, 2, 4), StageConfig(2, 64, 2, 4), StageConfig(2, 128, 2, 4))


@dataclass(frozen=True)
class Net2DConfig:
    in_channels: int = 2
    stem_channels: int = 32
    stem_stride: int = 2
    stages: tuple[StageConfig, ...] = field(default_factory=_default_stages)
    aspp_rates: tuple[int, ...] = (1, 6, 12, 18)
    decoder_channels: int = 64
    skip_channels: int = 32
    out_feature_channels: int = 64
    circular_padding: bool = False

    def __post_init__(self):
        if len(self.stages) != 3:
            raise ConfigError("expected three encoder stages (strides 4, 8, 16)")
        stride = self.stem_stride
        taps = []
        for stage in self.stages:
            if stage.count < 1 or stage.channels < 1:
                raise ConfigError(f"invalid stage {stage}")
            if stage.channels % stage.groups:
                raise ConfigError(f"groups {stage.groups} must divide channels {stage.channels}")
            stride *= stage.stride
            taps.append(stride)
        if taps != [4, 8, 16]:
            raise ConfigError(f"stem and stage strides must reach 4/8/16, got {taps}")
        if not self.aspp_rates or min(self.aspp_rates) < 1:
            raise ConfigError("aspp_rates must be a non-empty list of positive dilations")

    @classmethod
    def toy(cls, channels=(16, 32, 64), features=32, groups=4, blocks=1, rates=(1, 2, 3)):
        """Small configuration used for tests and desk-scale runs."""
        return cls(
            stem_channels=channels[0],
            stages=tuple(StageConfig(blocks, c, 2, groups) for c in channels),
            aspp_rates=tuple(rates),
            decoder_channels=channels[1],
            skip_channels=channels[0],
            out_feature_channels=features,
        )


class Bottleneck(Module):
    """1x1 -> grouped 3x3 (strided) -> 1x1 residual block."""

    def __init__(self, c_in, c_out, stride, groups, rng, circular_w=False):
        super().__init__()
        self.body = self.add(
            "body",
            Sequential(
                Conv2d(c_in, c_out, 1, rng),
                BatchNorm(c_out),
                ReLU(),
                Conv2d(c_out, c_out, 3, rng, stride=stride, groups=groups, circular_w=circular_w),
                BatchNorm(c_out),
                ReLU(),
                Conv2d(c_out, c_out, 1, rng),
                BatchNorm(c_out),
            ),
        )
        self.shortcut = None
        if stride != 1 or c_in != c_out:
            self.shortcut = self.add(
                "shortcut", Sequential(Conv2d(c_in, c_out, 1, rng, stride=stride), BatchNorm(c_out))
            )
        self.out_relu = self.add("relu", ReLU())

    def forward(self, x, train=True):
        skip = x if self.shortcut is None else self.shortcut.forward(x, train)
        return self.out_relu.forward(self.body.forward(x, train) + skip, train)

    def backward(self, grad):
        grad = self.out_relu.backward(grad)
        grad_x = self.body.backward(grad)
        if self.shortcut is None:
            return grad_x + grad
        return grad_x + self.shortcut.backward(grad)


class ASPP(Module):
    """Parallel dilated 3x3 branches plus an image-pooling branch, fused by a 1x1 conv."""

    def __init__(self, c_in, c_out, rates, rng, circular_w=False):
        super().__init__()
        self.branches = [
            self.add(f"rate{r}_{i}", conv_bn_relu(c_in, c_out, 3, rng, dilation=r, circular_w=circular_w))
            for i, r in enumerate(rates)
        ]
        # no batchnorm on the pooled branch: it has one value per image
        self.pool_conv = self.add("pool", Sequential(Conv2d(c_in, c_out, 1, rng), ReLU()))
        self.project = self.add("project", conv_bn_relu(c_out * (len(rates) + 1), c_out, 1, rng))
        self.c_out = c_out

    def forward(self, x, train=True):
        outs = [branch.forward(x, train) for branch in self.branches]
        pooled, self._pool_shape = ops.global_avg_pool_forward(x)
        pooled = self.pool_conv.forward(pooled, train)
        outs.append(np.broadcast_to(pooled, outs[0].shape if outs else x.shape))
        self._cache = True
        return self.project.forward(np.concatenate(outs, axis=1), train)

    def backward(self, grad):
        self._saved()
        grad = self.project.backward(grad)
        chunks = np.split(grad, len(self.branches) + 1, axis=1)
        grad_x = np.zeros(self._pool_shape)
        for branch, g in zip(self.branches, chunks):
            grad_x += branch.backward(g)
        g_pool = self.pool_conv.backward(chunks[-1].sum(axis=(2, 3), keepdims=True))
        return grad_x + ops.global_avg_pool_backward(g_pool, self._pool_shape)


class DecoderStage(Module):
    """Upsample coarse features to the skip resolution, concatenate, project with 1x1."""

    def __init__(self, c_coarse, c_skip, skip_channels, c_out, rng):
        super().__init__()
        self.skip_proj = self.add("skip", conv_bn_relu(c_skip, skip_channels, 1, rng))
        self.fuse = self.add("fuse", conv_bn_relu(c_coarse + skip_channels, c_out, 1, rng))
        self.c_coarse = c_coarse

    def forward(self, coarse, skip, train=True):
        up, up_cache = ops.upsample_bilinear_forward(coarse, *skip.shape[2:])
        self._cache = up_cache
        s = self.skip_proj.forward(skip, train)
        return self.fuse.forward(np.concatenate([up, s], axis=1), train)

    def backward(self, grad):
        up_cache = self._saved()
        grad = self.fuse.backward(grad)
        g_up, g_skip = grad[:, : self.c_coarse], grad[:, self.c_coarse :]
        return ops.upsample_bilinear_backward(g_up, up_cache), self.skip_proj.backward(g_skip)


class Net2D(Module):
    def __init__(self, cfg: Net2DConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        circ = cfg.circular_padding
        self.stem = self.add(
            "stem",
            conv_bn_relu(cfg.in_channels, cfg.stem_channels, 3, rng, stride=cfg.stem_stride, circular_w=circ),
        )
        self.stages = []
        c_in = cfg.stem_channels
        for s, stage in enumerate(cfg.stages):
            blocks = []
            for b in range(stage.count):
                stride = stage.stride if b == 0 else 1
                blocks.append(Bottleneck(c_in, stage.channels, stride, stage.groups, rng, circ))
                c_in = stage.channels
            self.stages.append(self.add(f"stage{s + 1}", Sequential(*blocks)))
        c4, c8, c16 = (stage.channels for stage in cfg.stages)
        dec = cfg.decoder_channels
        self.aspp = self.add("aspp", ASPP(c16, dec, cfg.aspp_rates, rng, circ))
        self.dec8 = self.add("dec8", DecoderStage(dec, c8, cfg.skip_channels, dec, rng))
        self.dec4 = self.add("dec4", DecoderStage(dec, c4, cfg.skip_channels, dec, rng))
        self.head = self.add(
            "head", conv_bn_relu(dec, cfg.out_feature_channels, 3, rng, circular_w=circ)
        )

    def forward(self, x, train=True):
        """``(N, C_in, H, W)`` -> ``(N, F, H, W)`` per-pixel features."""
        n, c, h, w = x.shape
        hp, wp = -(-h // 16) * 16, -(-w // 16) * 16
        x = np.pad(x, ((0, 0), (0, 0), (0, hp - h), (0, wp - w)))
        y = self.stem.forward(x, train)
        s4 = self.stages[0].forward(y, train)
        s8 = self.stages[1].forward(s4, train)
        s16 = self.stages[2].forward(s8, train)
        y = self.aspp.forward(s16, train)
        y = self.dec8.forward(y, s8, train)
        y = self.dec4.forward(y, s4, train)
        y = self.head.forward(y, train)
        y, up_cache = ops.upsample_bilinear_forward(y, hp, wp)
        self._cache = (h, w, up_cache)
        return y[:, :, :h, :w]

    def backward(self, grad):
        h, w, up_cache = self._saved()
        n, f = grad.shape[:2]
        hp, wp = up_cache[0].shape[0], up_cache[1].shape[0]
        full = np.zeros((n, f, hp, wp))
        full[:, :, :h, :w] = grad
        g = ops.upsample_bilinear_backward(full, up_cache)
        g = self.head.backward(g)
        g, g_s4 = self.dec4.backward(g)
        g, g_s8 = self.dec8.backward(g)
        g_s16 = self.aspp.backward(g)
        g_s8 = g_s8 + self.stages[2].backward(g_s16)
        g_s4 = g_s4 + self.stages[1].backward(g_s8)
        g = self.stages[0].backward(g_s4)
        g = self.stem.backward(g)
        return g[:, :, :h, :w]

    def forward_image(self, data: np.ndarray, train=False) -> np.ndarray:
        """``(H, W, C_in)`` range-image data -> ``(H, W, F)`` features."""
        y = self.forward(np.transpose(data, (2, 0, 1))[None].astype(np.float64), train)
        return np.transpose(y[0], (1, 2, 0))
