"""Leaky integrate-and-fire neurons with arctan surrogate gradients.

Per time step, with membrane ``V`` starting at ``v_reset``::

    H[t] = V[t-1] + (X[t] - (V[t-1] - v_reset)) / tau
    S[t] = heaviside(H[t] - v_threshold)
    V[t] = v_reset where S[t] else H[t]        (hard reset)
    V[t] = H[t] - v_threshold * S[t]           (soft reset)

Backward replaces dS/dH by the derivative of the arctan sigmoid
``atan(pi/2 * alpha * x) / pi + 1/2``. Under :func:`relaxed` the forward
pass emits that sigmoid instead of hard spikes, which turns the network
into a smooth function whose exact gradient is what the surrogate
backward computes (used for finite-difference checks).
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError, UsageError
from .nn import Module, trace
from .profiler import active_ledger
from .tensor import Tensor, _result

_mode = threading.local()


def is_relaxed() -> bool:
    return getattr(_mode, "relaxed", False)


@contextmanager
def relaxed(on: bool = True):
    """Replace the Heaviside step by its arctan sigmoid in forward passes."""
    old = is_relaxed()
    _mode.relaxed = on
    try:
        yield
    finally:
        _mode.relaxed = old


def arctan_sigmoid(x, alpha: float):
    return np.arctan(np.pi / 2 * alpha * x) / np.pi + 0.5


def arctan_surrogate_grad(x, alpha: float):
    return alpha / (2 * (1 + (np.pi / 2 * alpha * x) ** 2))


@dataclass(frozen=True)
class LifConfig:
    tau: float = 2.0
    v_threshold: float = 1.0
    v_reset: float = 0.0
    surrogate_alpha: float = 2.0
    reset_mode: str = "hard"
    detach_reset: bool = True

    def __post_init__(self):
        if not self.tau > 1:
            raise ConfigError(f"tau must exceed 1, got {self.tau}")
        if not self.surrogate_alpha > 0:
            raise ConfigError(f"surrogate_alpha must be positive, got {self.surrogate_alpha}")
        if self.reset_mode not in ("hard", "soft"):
            raise ConfigError(f"reset_mode must be 'hard' or 'soft', got {self.reset_mode!r}")


def spike_fn(x: Tensor, alpha: float = 2.0) -> Tensor:
    """Heaviside step (``x >= 0``) with arctan surrogate gradient."""
    xd = x.data
    if is_relaxed():
        out = arctan_sigmoid(xd, alpha).astype(xd.dtype)
    else:
        out = (xd >= 0).astype(xd.dtype)
    return _result(out, (x,), lambda g: (g * arctan_surrogate_grad(xd, alpha),), "spike")


def _lif_run(x: np.ndarray, cfg: LifConfig, relax: bool):
    tau, vth, vr = cfg.tau, cfg.v_threshold, cfg.v_reset
    v = np.full(x.shape[1:], vr, dtype=x.dtype)
    hs = np.empty_like(x)
    ss = np.empty_like(x)
    for t in range(x.shape[0]):
        h = v + (x[t] - (v - vr)) / tau
        if relax:
            s = arctan_sigmoid(h - vth, cfg.surrogate_alpha).astype(x.dtype)
        else:
            s = (h >= vth).astype(x.dtype)
        if cfg.reset_mode == "hard":
            v = h * (1 - s) + vr * s
        else:
            v = h - vth * s
        hs[t], ss[t] = h, s
    return hs, ss


def lif_forward(x: Tensor, cfg: LifConfig = LifConfig()) -> Tensor:
    """Run LIF dynamics over the leading time axis; returns the stacked spikes.

    The result is a dense 0/1 tensor so it can flow through later layers
    and carry surrogate gradients; wrap it with ``SpikeTensor.from_array``
    for the packed kernels.
    """
    if x.ndim < 1 or x.shape[0] < 1:
        raise UsageError("lif_forward needs a leading time axis of length >= 1")
    xd = x.data
    if not np.all(np.isfinite(xd)):
        raise NumericError("non-finite input current to LIF neuron")
    hs, ss = _lif_run(xd, cfg, is_relaxed())
    saved = {"h": hs, "s": ss}
    return _result(ss, (x,), lambda g: (lif_backward(g, saved, cfg),), "lif")


def lif_backward(grad_out: np.ndarray, saved: dict | None, cfg: LifConfig) -> np.ndarray:
    """Backpropagation through time for :func:`lif_forward`.

    ``saved`` holds the membrane pre-reset potentials ``h`` and outputs
    ``s`` recorded by the forward pass. With ``detach_reset`` the reset
    branch contributes no gradient through the spike.
    """
    if saved is None or "h" not in saved:
        raise UsageError("lif_backward needs the saved forward context")
    hs, ss = saved["h"], saved["s"]
    tau, vth, vr = cfg.tau, cfg.v_threshold, cfg.v_reset
    sg = arctan_surrogate_grad(hs - vth, cfg.surrogate_alpha)
    gx = np.empty_like(grad_out)
    gv = np.zeros(grad_out.shape[1:], dtype=grad_out.dtype)
    for t in range(grad_out.shape[0] - 1, -1, -1):
        h, s = hs[t], ss[t]
        if cfg.reset_mode == "hard":
            dv_dh = 1 - s
            dv_ds = vr - h
        else:
            dv_dh = 1.0
            dv_ds = -vth
        gs = grad_out[t] if cfg.detach_reset else grad_out[t] + gv * dv_ds
        gh = gs * sg[t] + gv * dv_dh
        gx[t] = gh / tau
        gv = gh * (1 - 1 / tau)
    return gx


class LIF(Module):
    """Spiking neuron layer ``SN(.)``; input and output are [T, ...]."""

    def __init__(self, cfg: LifConfig = LifConfig()):
        super().__init__()
        self.cfg = cfg
        self.last_rate: float | None = None

    def forward(self, x: Tensor) -> Tensor:
        out = lif_forward(x, self.cfg)
        self.last_rate = float(out.data.mean()) if out.size else 0.0
        trace(self.name, out)
        ledger = active_ledger()
        if ledger is not None:
            ledger.add(self.name, "lif", spikes=int(np.count_nonzero(out.data)), elements=out.size)
        return out
