"""Parameter containers built on the functional ops."""

from __future__ import annotations

from collections import OrderedDict
from contextlib import contextmanager

import numpy as np

from . import functional as F
from .autodiff import Tensor


class Module:
    """Minimal parameter container.

    Parameters, buffers and child modules are discovered from attributes in
    assignment order, which keeps parameter naming deterministic.
    """

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> "OrderedDict[str, Tensor]":
        out = OrderedDict()
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out[prefix + name] = value
        for name, child in self._children():
            out.update(child.named_parameters(f"{prefix}{name}."))
        return out

    def named_buffers(self, prefix: str = "") -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for name, value in getattr(self, "_buffers", {}).items():
            out[prefix + name] = value
        for name, child in self._children():
            out.update(child.named_buffers(f"{prefix}{name}."))
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True):
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((k, v.data) for k, v in self.named_parameters().items())
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state):
        params = self.named_parameters()
        buffers = self.named_buffers()
        missing = [k for k in list(params) + list(buffers) if k not in state]
        if missing:
            raise KeyError(f"state is missing {missing[:5]}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise ValueError(f"{k}: expected {p.shape}, got {state[k].shape}")
            p.data = np.array(state[k], dtype=p.dtype)
        for k, b in buffers.items():
            b[...] = state[k]


@contextmanager
def frozen(*modules: Module):
    """Temporarily stop ``modules`` from collecting gradients."""
    params = [p for m in modules for p in m.parameters()]
    try:
        for p in params:
            p.requires_grad = False
        yield
    finally:
        for p in params:
            p.requires_grad = True


@contextmanager
def stats_frozen(*modules: Module):
    """Run batch-norm layers on batch statistics without updating running estimates."""
    layers = [m for mod in modules for m in _walk(mod) if isinstance(m, BatchNorm2d)]
    saved = [m.track for m in layers]
    try:
        for m in layers:
            m.track = False
        yield
    finally:
        for m, t in zip(layers, saved):
            m.track = t


def _walk(module):
    yield module
    for _, child in module._children():
        yield from _walk(child)


class Conv2d(Module):
    def __init__(self, c_in, c_out, k, stride=1, pad=None, rng=None, init_scale=1.0, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.pad = (k - 1) // 2 if pad is None else pad
        fan_in = c_in * k * k
        std = init_scale * np.sqrt(2.0 / fan_in)
        self.weight = Tensor(rng.normal(0.0, std, (c_out, c_in, k, k)).astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        self.momentum = momentum
        self.eps = eps
        self.track = True
        self.weight = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self._buffers = OrderedDict(
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )

    def forward(self, x):
        return F.batch_norm(x, self.weight, self.bias, self._buffers["running_mean"],
                            self._buffers["running_var"], training=self.training,
                            momentum=self.momentum, eps=self.eps, track=self.track)


class ConvBNReLU(Module):
    def __init__(self, c_in, c_out, k=3, stride=1, pad=None, rng=None):
        self.conv = Conv2d(c_in, c_out, k, stride, pad, rng=rng)
        self.bn = BatchNorm2d(c_out)

    def forward(self, x):
        return F.relu(self.bn(self.conv(x)))
