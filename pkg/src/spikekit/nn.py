"""Parameterised layers built on the tensor primitives."""
from __future__ import annotations

import threading
from collections import OrderedDict
from contextlib import contextmanager

import numpy as np
from scipy.stats import truncnorm

from . import tensor as T
from .profiler import active_ledger, book_weighted_layer
from .tensor import Tensor

INIT_STD = 0.02

_trace = threading.local()


@contextmanager
def activation_trace():
    """Collect ``(name, array)`` for every spike activation and residual join."""
    records: list = []
    prev = getattr(_trace, "records", None)
    _trace.records = records
    try:
        yield records
    finally:
        _trace.records = prev


def trace(name: str, x) -> None:
    records = getattr(_trace, "records", None)
    if records is not None:
        records.append((name, np.array(x.data if isinstance(x, Tensor) else x, copy=True)))


def trunc_normal(shape, std=INIT_STD, rng=None) -> np.ndarray:
    rng = rng if rng is not None else np.random.default_rng()
    return truncnorm.rvs(-2, 2, scale=std, size=shape, random_state=rng)


class Module:
    """Container that discovers parameters, buffers and submodules by attribute."""

    def __init__(self):
        self.training = True
        self._buffers: OrderedDict[str, np.ndarray] = OrderedDict()
        self.name = ""

    def register_buffer(self, name: str, value: np.ndarray):
        self._buffers[name] = value

    def _children(self):
        for k, v in vars(self).items():
            if k.startswith("_"):
                continue
            if isinstance(v, Module):
                yield k, v
            elif isinstance(v, (list, tuple)) and v and all(isinstance(m, Module) for m in v):
                for i, m in enumerate(v):
                    yield f"{k}.{i}", m

    def named_modules(self, prefix=""):
        yield prefix, self
        for k, m in self._children():
            yield from m.named_modules(f"{prefix}.{k}" if prefix else k)

    def modules(self):
        return [m for _, m in self.named_modules()]

    def named_parameters(self, prefix=""):
        for k, v in vars(self).items():
            if isinstance(v, Tensor) and v.requires_grad and not k.startswith("_"):
                yield (f"{prefix}.{k}" if prefix else k), v
        for k, m in self._children():
            yield from m.named_parameters(f"{prefix}.{k}" if prefix else k)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for k, v in self._buffers.items():
            yield (f"{prefix}.{k}" if prefix else k), v
        for k, m in self._children():
            yield from m.named_buffers(f"{prefix}.{k}" if prefix else k)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def assign_names(self, prefix=""):
        """Stamp each submodule with its dotted path (used as ledger layer id)."""
        for path, m in self.named_modules(prefix):
            m.name = path
        return self

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for k, p in self.named_parameters():
            out[k] = p.data
        for k, b in self.named_buffers():
            out[k] = b
        return out

    def load_state_dict(self, state: dict, strict: bool = True):
        from .errors import LoadError

        own = self.state_dict()
        missing = [k for k in own if k not in state]
        unexpected = [k for k in state if k not in own]
        if strict and (missing or unexpected):
            raise LoadError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for k, dst in own.items():
            if k not in state:
                continue
            src = np.asarray(state[k])
            if src.shape != dst.shape:
                raise LoadError(f"shape mismatch for {k}: checkpoint {src.shape}, model {dst.shape}")
            dst[...] = src
        return missing, unexpected

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    """``y = x @ W + b`` over the last axis; W is stored [in, out]."""

    def __init__(self, in_features: int, out_features: int, bias: bool = True, rng=None):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        self.weight = T.parameter(trunc_normal((in_features, out_features), rng=rng))
        self.bias = T.parameter(np.zeros(out_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if active_ledger() is not None:
            rows = x.size // self.in_features
            book_weighted_layer(self.name, "linear", x.data,
                                rows * self.in_features * self.out_features, self.out_features)
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, k: int, stride: int = 1, padding: int = 0,
                 bias: bool = False, rng=None):
        super().__init__()
        self.in_ch, self.out_ch, self.k, self.stride, self.padding = in_ch, out_ch, k, stride, padding
        self.weight = T.parameter(trunc_normal((out_ch, in_ch, k, k), rng=rng))
        self.bias = T.parameter(np.zeros(out_ch)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = T.conv2d(x, self.weight, self.bias, self.stride, self.padding)
        if active_ledger() is not None:
            self._book(x.data, y.shape)
        return y

    def _book(self, x: np.ndarray, out_shape):
        from .profiler import spike_count_input

        ledger = active_ledger()
        macs = int(np.prod(out_shape)) * self.in_ch * self.k * self.k
        is_spike, _ = spike_count_input(x)
        if not is_spike:
            ledger.add(self.name, "conv2d", flops=macs)
            return
        # exact count: every input event inside an output window triggers out_ch accumulates
        p = self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        ho, wo = out_shape[2], out_shape[3]
        win = T._windows(xp, self.k, self.k, self.stride, ho, wo)
        events = int(win.sum(dtype=np.int64))
        ledger.add(self.name, "conv2d", sops=events * self.out_ch,
                   spikes=int(np.count_nonzero(x)), elements=x.size)


class BatchNorm(Module):
    """Batch normalisation over ``axis`` (1 for [B, C, H, W], -1 for [..., D])."""

    def __init__(self, channels: int, axis: int = 1, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.channels, self.axis, self.eps, self.momentum = channels, axis, eps, momentum
        self.weight = T.parameter(np.ones(channels))
        self.bias = T.parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float32))

    def forward(self, x: Tensor, mask=None) -> Tensor:
        ledger = active_ledger()
        if ledger is not None:
            ledger.add(self.name, "batch_norm", flops=2 * x.size)
        return T.batch_norm(x, self.weight, self.bias, self._buffers["running_mean"],
                            self._buffers["running_var"], self.training, self.momentum,
                            self.eps, self.axis, mask)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = T.parameter(np.ones(dim))
        self.bias = T.parameter(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias, self.eps)


class MaxPool2d(Module):
    def __init__(self, k: int = 2, stride: int | None = None):
        super().__init__()
        self.k, self.stride = k, stride or k

    def forward(self, x: Tensor) -> Tensor:
        ledger = active_ledger()
        if ledger is not None:
            ledger.add(self.name, "maxpool", flops=x.size)
        return T.maxpool2d(x, self.k, self.stride)
