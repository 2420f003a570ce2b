"""Stateful layers wrapping :mod:`kprnet.ops`.

A layer owns ``params`` and matching ``grads``; ``backward`` accumulates into
``grads`` (call :meth:`Module.zero_grad` between steps) and returns the
gradient with respect to its input.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from kprnet import ops
from kprnet.errors import StateError


class Module:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.children: dict[str, Module] = {}
        self._cache = None

    def add(self, name: str, module: "Module") -> "Module":
        self.children[name] = module
        return module

    def add_param(self, name: str, value: np.ndarray) -> None:
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray, np.ndarray]]:
        """Yield ``(name, param, grad)`` for this module and its children."""
        for name, value in self.params.items():
            yield prefix + name, value, self.grads[name]
        for child_name, child in self.children.items():
            yield from child.named_parameters(f"{prefix}{child_name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in self.buffers.items():
            yield prefix + name, value
        for child_name, child in self.children.items():
            yield from child.named_buffers(f"{prefix}{child_name}.")

    def zero_grad(self) -> None:
        for _, _, grad in self.named_parameters():
            grad[...] = 0.0

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: value for name, value, _ in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = {name: value for name, value, _ in self.named_parameters()}
        own.update(dict(self.named_buffers()))
        missing = sorted(set(own) - set(state))
        if missing:
            raise KeyError(f"checkpoint is missing tensors: {', '.join(missing[:5])}")
        for name, target in own.items():
            source = np.asarray(state[name])
            if source.shape != target.shape:
                raise ValueError(f"{name}: checkpoint shape {source.shape} != {target.shape}")
            target[...] = source

    def _saved(self):
        if self._cache is None:
            raise StateError(f"{type(self).__name__}.backward called before forward")
        return self._cache


class Conv2d(Module):
    def __init__(self, c_in, c_out, k, rng, stride=1, dilation=1, groups=1, circular_w=False):
        super().__init__()
        fan_in = c_in // groups * k * k
        self.add_param(
            "weight", rng.standard_normal((c_out, c_in // groups, k, k)) * np.sqrt(2.0 / fan_in)
        )
        self.stride, self.dilation, self.groups = stride, dilation, groups
        self.circular_w = circular_w

    def forward(self, x, train=True):
        y, self._cache = ops.conv2d_forward(
            x, self.params["weight"], self.stride, self.dilation, self.groups,
            circular_w=self.circular_w,
        )
        return y

    def backward(self, grad):
        grad_x, grad_w = ops.conv2d_backward(grad, self._saved())
        self.grads["weight"] += grad_w
        return grad_x


class BatchNorm(Module):
    """Batch normalization over all axes but the channel axis (1)."""

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.add_param("gamma", np.ones(channels))
        self.add_param("beta", np.zeros(channels))
        self.buffers["running_mean"] = np.zeros(channels)
        self.buffers["running_var"] = np.ones(channels)
        self.buffers["tracked"] = np.zeros((), dtype=np.float64)
        self.momentum, self.eps = momentum, eps

    def forward(self, x, train=True):
        state = {
            "running_mean": self.buffers["running_mean"],
            "running_var": self.buffers["running_var"],
            "tracked": int(self.buffers["tracked"]),
        }
        y, self._cache = ops.batchnorm_forward(
            x, self.params["gamma"], self.params["beta"], state, train, self.momentum, self.eps
        )
        if train:
            self.buffers["running_mean"][...] = state["running_mean"]
            self.buffers["running_var"][...] = state["running_var"]
            self.buffers["tracked"][...] = state["tracked"]
        return y

    def backward(self, grad):
        grad_x, grad_gamma, grad_beta = ops.batchnorm_backward(grad, self._saved())
        self.grads["gamma"] += grad_gamma
        self.grads["beta"] += grad_beta
        return grad_x


class ReLU(Module):
    def forward(self, x, train=True):
        y, self._cache = ops.relu_forward(x)
        return y

    def backward(self, grad):
        return ops.relu_backward(grad, self._saved())


class Linear(Module):
    """Affine map over the last axis: ``x @ weight + bias``."""

    def __init__(self, c_in, c_out, rng, bias=True):
        super().__init__()
        self.add_param("weight", rng.standard_normal((c_in, c_out)) * np.sqrt(1.0 / c_in))
        if bias:
            self.add_param("bias", np.zeros(c_out))

    def forward(self, x, train=True):
        self._cache = x
        y = x @ self.params["weight"]
        if "bias" in self.params:
            y = y + self.params["bias"]
        return y

    def backward(self, grad):
        x = self._saved()
        self.grads["weight"] += x.T @ grad
        if "bias" in self.params:
            self.grads["bias"] += grad.sum(axis=0)
        return grad @ self.params["weight"].T


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        for i, layer in enumerate(layers):
            self.add(str(i), layer)

    def forward(self, x, train=True):
        for layer in self.children.values():
            x = layer.forward(x, train)
        return x

    def backward(self, grad):
        for layer in reversed(list(self.children.values())):
            grad = layer.backward(grad)
        return grad


def conv_bn_relu(c_in, c_out, k, rng, **conv_kw) -> Sequential:
    return Sequential(Conv2d(c_in, c_out, k, rng, **conv_kw), BatchNorm(c_out), ReLU())
