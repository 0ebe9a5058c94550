"""First-order optimizer."""

from __future__ import annotations

from collections import OrderedDict
from typing import Mapping

import numpy as np

from .autodiff import Tensor


class Adam:
    """Adam with bias correction.

    ``params`` is an ordered name -> Tensor mapping; the names key the
    moment accumulators so optimizer state can be checkpointed.
    """

    def __init__(self, params: Mapping[str, Tensor], lr=1e-3, betas=(0.5, 0.999), eps=1e-8):
        if not lr > 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = OrderedDict(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.m = OrderedDict((k, np.zeros_like(p.data)) for k, p in self.params.items())
        self.v = OrderedDict((k, np.zeros_like(p.data)) for k, p in self.params.items())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.step_count += 1
        b1, b2 = self.betas
        t = self.step_count
        for name, p in self.params.items():
            if p.grad is None:
                continue
            dt = p.data.dtype.type
            g = p.grad.astype(p.data.dtype, copy=False)
            m, v = self.m[name], self.v[name]
            m *= dt(b1)
            m += dt(1 - b1) * g
            v *= dt(b2)
            v += dt(1 - b2) * g * g
            mhat = m / dt(1 - b1 ** t)
            vhat = v / dt(1 - b2 ** t)
            p.data = p.data - dt(self.lr) * mhat / (np.sqrt(vhat) + dt(self.eps))

    def state_dict(self, prefix: str = "") -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict()
        for k in self.params:
            state[f"{prefix}m.{k}"] = self.m[k]
            state[f"{prefix}v.{k}"] = self.v[k]
        state[f"{prefix}step"] = np.array([self.step_count], dtype=np.float32)
        return state

    def load_state_dict(self, state, prefix: str = ""):
        for k in self.params:
            self.m[k] = np.array(state[f"{prefix}m.{k}"], dtype=self.m[k].dtype).reshape(self.m[k].shape)
            self.v[k] = np.array(state[f"{prefix}v.{k}"], dtype=self.v[k].dtype).reshape(self.v[k].shape)
        self.step_count = int(np.asarray(state[f"{prefix}step"]).reshape(-1)[0])
