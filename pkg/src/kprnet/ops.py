"""Differentiable array operations with hand-written backward passes.

Image tensors are ``(N, C, H, W)`` float64 arrays. Every ``*_forward`` returns
its output plus a cache tuple that the matching ``*_backward`` consumes.
"""

from __future__ import annotations

import numpy as np

from kprnet.errors import StateError


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def pad2d(x: np.ndarray, ph: int, pw: int, circular_w: bool = False) -> np.ndarray:
    """Zero-pad height; zero- or circularly pad width."""
    if circular_w and pw:
        x = np.concatenate([x[..., -pw:], x, x[..., :pw]], axis=-1)
        return np.pad(x, ((0, 0), (0, 0), (ph, ph), (0, 0)))
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def unpad2d(g: np.ndarray, ph: int, pw: int, circular_w: bool = False) -> np.ndarray:
    """Adjoint of :func:`pad2d`."""
    h = g.shape[2] - 2 * ph
    g = g[:, :, ph : ph + h]
    if circular_w and pw:
        core = g[..., pw:-pw].copy()
        core[..., -pw:] += g[..., :pw]
        core[..., :pw] += g[..., -pw:]
        return core
    w = g.shape[3] - 2 * pw
    return g[..., pw : pw + w]


def conv_output_size(size: int, k: int, stride: int, dilation: int, pad: int) -> int:
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def conv2d_forward(x, kernel, stride=1, dilation=1, groups=1, padding=None, circular_w=False):
    """Grouped, strided, dilated cross-correlation.

    ``kernel`` is ``(C_out, C_in / groups, kh, kw)``. ``padding=None`` gives
    "same" padding, ``dilation * (k - 1) // 2`` on each side.
    """
    n, c, h, w = x.shape
    c_out, c_g, kh, kw = kernel.shape
    sh, sw = _pair(stride)
    dh, dw = _pair(dilation)
    if c % groups or c_out % groups or c // groups != c_g:
        raise ValueError(
            f"channel mismatch: input {c}, kernel {kernel.shape}, groups {groups}"
        )
    if padding is None:
        ph, pw = dh * (kh - 1) // 2, dw * (kw - 1) // 2
    else:
        ph, pw = _pair(padding)
    ho = conv_output_size(h, kh, sh, dh, ph)
    wo = conv_output_size(w, kw, sw, dw, pw)
    if ho < 1 or wo < 1:
        raise ValueError(f"input {h}x{w} too small for kernel {kh}x{kw}")
    xp = pad2d(x, ph, pw, circular_w)
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[
                :, :, i * dh : i * dh + sh * (ho - 1) + 1 : sh, j * dw : j * dw + sw * (wo - 1) + 1 : sw
            ]
    cols = cols.reshape(n, groups, c_g * kh * kw, ho * wo)
    kmat = kernel.reshape(groups, c_out // groups, c_g * kh * kw)
    y = np.matmul(kmat[None], cols).reshape(n, c_out, ho, wo)
    cache = (x.shape, xp.shape, cols, kernel, (sh, sw), (dh, dw), groups, (ph, pw), circular_w)
    return y, cache


def conv2d_backward(grad_y, cache):
    x_shape, xp_shape, cols, kernel, (sh, sw), (dh, dw), groups, (ph, pw), circular_w = cache
    n = x_shape[0]
    c_out, c_g, kh, kw = kernel.shape
    ho, wo = grad_y.shape[2:]
    gy = grad_y.reshape(n, groups, c_out // groups, ho * wo)
    grad_kernel = np.matmul(gy, cols.transpose(0, 1, 3, 2)).sum(axis=0).reshape(kernel.shape)
    kmat = kernel.reshape(groups, c_out // groups, c_g * kh * kw)
    gcols = np.matmul(kmat.transpose(0, 2, 1)[None], gy)
    gcols = gcols.reshape(n, groups * c_g, kh, kw, ho, wo)
    gxp = np.zeros(xp_shape, dtype=grad_y.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[
                :, :, i * dh : i * dh + sh * (ho - 1) + 1 : sh, j * dw : j * dw + sw * (wo - 1) + 1 : sw
            ] += gcols[:, :, i, j]
    return unpad2d(gxp, ph, pw, circular_w), grad_kernel


def relu_forward(x):
    return np.maximum(x, 0.0), x > 0


def relu_backward(grad_y, cache):
    return grad_y * cache


def _bn_axes(x):
    return (0,) if x.ndim == 2 else (0, 2, 3)


def _bn_view(v, x):
    return v if x.ndim == 2 else v[None, :, None, None]


def batchnorm_forward(x, gamma, beta, state: dict, train: bool, momentum=0.1, eps=1e-5):
    """Batch normalization over every axis except channels (axis 1).

    ``state`` holds ``running_mean``, ``running_var`` and ``tracked`` (the number
    of batches seen); training mode updates it in place.
    """
    axes = _bn_axes(x)
    if train:
        m = x.size // x.shape[1]
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        unbiased = var * m / max(m - 1, 1)
        state["running_mean"] = (1 - momentum) * state["running_mean"] + momentum * mean
        state["running_var"] = (1 - momentum) * state["running_var"] + momentum * unbiased
        state["tracked"] = state.get("tracked", 0) + 1
    else:
        if not state.get("tracked", 0):
            raise StateError("batchnorm evaluated before any batch statistics were accumulated")
        mean, var = state["running_mean"], state["running_var"]
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - _bn_view(mean, x)) * _bn_view(inv_std, x)
    y = _bn_view(gamma, x) * xhat + _bn_view(beta, x)
    return y, (xhat, inv_std, gamma, train)


def batchnorm_backward(grad_y, cache):
    xhat, inv_std, gamma, train = cache
    axes = _bn_axes(grad_y)
    grad_gamma = (grad_y * xhat).sum(axis=axes)
    grad_beta = grad_y.sum(axis=axes)
    scale = _bn_view(gamma * inv_std, grad_y)
    if not train:
        return grad_y * scale, grad_gamma, grad_beta
    m = grad_y.size // grad_y.shape[1]
    grad_x = scale / m * (
        m * grad_y - _bn_view(grad_beta, grad_y) - xhat * _bn_view(grad_gamma, grad_y)
    )
    return grad_x, grad_gamma, grad_beta


def interpolation_matrix(out_size: int, in_size: int) -> np.ndarray:
    """``(out, in)`` linear interpolation weights with half-pixel centers (edges clamped)."""
    pos = (np.arange(out_size) + 0.5) * (in_size / out_size) - 0.5
    pos = np.clip(pos, 0.0, in_size - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = pos - lo
    m = np.zeros((out_size, in_size))
    rows = np.arange(out_size)
    m[rows, lo] += 1.0 - frac
    m[rows, hi] += frac
    return m


def upsample_bilinear_forward(x, out_h: int, out_w: int):
    """Bilinear resize of ``(N, C, H, W)`` to ``(out_h, out_w)`` with half-pixel centers."""
    h, w = x.shape[2:]
    a_r = interpolation_matrix(out_h, h)
    a_c = interpolation_matrix(out_w, w)
    y = np.matmul(np.matmul(a_r, x), a_c.T)
    return y, (a_r, a_c)


def upsample_bilinear_backward(grad_y, cache):
    a_r, a_c = cache
    return np.matmul(np.matmul(a_r.T, grad_y), a_c)


def global_avg_pool_forward(x):
    return x.mean(axis=(2, 3), keepdims=True), x.shape


def global_avg_pool_backward(grad_y, x_shape):
    h, w = x_shape[2:]
    return np.broadcast_to(grad_y / (h * w), x_shape).copy()
