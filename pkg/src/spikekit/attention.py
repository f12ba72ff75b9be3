"""Spiking self-attention and the float attention-map variants it is compared to.

All variants share the block layout::

    Q, K, V   = projections of X (Linear -> BN, then SN for spike forms)
    A         = attention product per head, times the scale s
    out       = SN(BN(Linear(SN(A))))

They differ only in how the product is formed:

=============  ==========================================  ==============
variant        product                                     Q, K, V forms
=============  ==========================================  ==============
``ssa``        Q K^T V                                     spike, spike, spike
``a_i``        Q_F K_F^T V                                 float, float, spike
``a_relu``     relu(Q_F) relu(K_F)^T V                     float, float, spike
``a_leakyrelu`` lrelu(Q_F) lrelu(K_F)^T V                  float, float, spike
``a_softmax``  softmax(Q_F K_F^T / sqrt(d)) V              float, float, spike
``vsa``        softmax(Q_F K_F^T / sqrt(d)) V_F            float, float, float
=============  ==========================================  ==============

On the ``ssa`` path without autodiff the product runs on the bit-packed
AND/popcount kernels, so no float multiply touches Q, K or V. With
autodiff enabled it runs as a dense float contraction, which gives the
identical integer values (exact in float32 at these sizes) and a gradient.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractViolation, DimensionError, UsageError
from .neuron import LIF, LifConfig, is_relaxed
from .nn import BatchNorm, Linear, Module
from .profiler import active_ledger
from .spike import SpikeTensor, matmul_accum_spike, matmul_spike, matmul_spike_accum
from .tensor import Tensor

VARIANTS = ("ssa", "a_i", "a_relu", "a_leakyrelu", "a_softmax", "vsa")
ORDERS = ("qk_first", "kv_first")

# exp, running max, subtract, sum, divide and the 1/sqrt(d) scale, per map element
SOFTMAX_FLOPS_PER_ELEMENT = 6

DEFAULT_SCALE = {"ssa": 0.125, "a_i": 0.125, "a_relu": 0.125, "a_leakyrelu": 0.125,
                 "a_softmax": 2.0, "vsa": 2.0}


@dataclass
class AttentionConfig:
    dim: int
    heads: int
    scale: float | None = None
    learnable_scale: bool = False
    variant: str = "ssa"
    order: str = "qk_first"
    leaky_slope: float = 0.01

    def __post_init__(self):
        self.variant = self.variant.lower()
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown attention variant {self.variant!r}; choose from {VARIANTS}")
        if self.order not in ORDERS:
            raise ConfigError(f"unknown order {self.order!r}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.scale is None:
            self.scale = DEFAULT_SCALE[self.variant]
        if not self.scale > 0:
            raise ConfigError("attention scale must be positive")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    return x.reshape(*lead, n, heads, d // heads).swapaxes(-2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, d = x.shape
    return x.swapaxes(-2, -3).reshape(*lead, n, h * d)


def ssa_product(q, k, v, order: str = "qk_first") -> np.ndarray:
    """Integer Q K^T V over the last two axes using only AND/popcount and gated sums."""
    q = q if isinstance(q, SpikeTensor) else SpikeTensor.from_array(q)
    k = k if isinstance(k, SpikeTensor) else SpikeTensor.from_array(k)
    v = v if isinstance(v, SpikeTensor) else SpikeTensor.from_array(v)
    kt = k.transpose_last()
    if order == "qk_first":
        return matmul_accum_spike(matmul_spike(q, kt), v)
    return matmul_spike_accum(q, matmul_spike(kt, v))


def ssa_sops(q_count: int, k_count: int, v_count: int, n: int, d: int, order: str) -> dict:
    """Accumulates executed by :func:`ssa_product` given spike counts.

    ``qk_first``: each Q spike adds a K row over N keys, each V spike adds an
    attention column over N queries. ``kv_first``: each K spike adds a V row
    of width d, then each Q spike adds a row of the d x d product.
    """
    if order == "qk_first":
        return {"qk": q_count * n, "av": v_count * n}
    return {"kv": k_count * d, "qm": q_count * d}


def count_attention_ops(cfg: AttentionConfig, n: int, rates: dict | None = None) -> dict:
    """Theoretical ops for one sample and one time step, summed over heads.

    ``rates`` maps ``q``, ``k``, ``v`` to firing rates (fractions or
    :class:`fractions.Fraction`); it is required for the ``ssa`` variant.
    Float variants count 2*N^2*d FLOPs for each of the two products plus
    the softmax cost per map element.
    """
    d, h = cfg.head_dim, cfg.heads
    if cfg.variant == "ssa":
        if rates is None:
            raise UsageError("SSA op counts need firing rates from a forward pass")
        dense = n * d  # elements per head for each of Q, K, V
        counts = {key: Fraction(rates[key]) * dense for key in ("q", "k", "v")}
        parts = ssa_sops(counts["q"], counts["k"], counts["v"], n, d, cfg.order)
        sops = sum(parts.values()) * h
        return {"flops": 0, "sops": sops, "parts": {k_: v_ * h for k_, v_ in parts.items()}}
    flops = 2 * n * n * d + 2 * n * n * d
    if cfg.variant in ("a_softmax", "vsa"):
        flops += SOFTMAX_FLOPS_PER_ELEMENT * n * n
    return {"flops": flops * h, "sops": 0}


def attention_map(q_f: Tensor, k_f: Tensor, variant: str, leaky_slope: float = 0.01) -> Tensor:
    """Float attention map of one of the comparison variants over the last two axes."""
    d = q_f.shape[-1]
    if variant == "a_relu":
        q_f, k_f = T.relu(q_f), T.relu(k_f)
    elif variant == "a_leakyrelu":
        q_f, k_f = T.leaky_relu(q_f, leaky_slope), T.leaky_relu(k_f, leaky_slope)
    elif variant not in ("a_i", "a_softmax", "vsa"):
        raise ConfigError(f"{variant!r} has no float attention map")
    attn = q_f @ k_f.swapaxes(-1, -2)
    if variant in ("a_softmax", "vsa"):
        attn = T.softmax(attn * (1.0 / np.sqrt(d)), axis=-1)
    return attn


class SpikingSelfAttention(Module):
    """Multi-head attention block over [T, B, N, D] activations."""

    def __init__(self, cfg: AttentionConfig, lif: LifConfig = LifConfig(), rng=None):
        super().__init__()
        self.cfg = cfg
        d = cfg.dim
        self.q_linear, self.k_linear, self.v_linear = (Linear(d, d, rng=rng) for _ in range(3))
        self.q_bn, self.k_bn, self.v_bn = (BatchNorm(d, axis=-1) for _ in range(3))
        self.q_lif, self.k_lif, self.v_lif = LIF(lif), LIF(lif), LIF(lif)
        self.attn_lif = LIF(lif)
        self.proj_linear = Linear(d, d, rng=rng)
        self.proj_bn = BatchNorm(d, axis=-1)
        self.proj_lif = LIF(lif)
        self.scale = T.parameter(np.array(cfg.scale)) if cfg.learnable_scale else None
        self.keep_intermediates = False
        self.last_product: np.ndarray | None = None
        self.last_map: np.ndarray | None = None
        self.last_rates: dict | None = None

    def _scale(self):
        return self.scale if self.scale is not None else self.cfg.scale

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[-1] != self.cfg.dim:
            raise DimensionError(f"attention expects [T, B, N, {self.cfg.dim}], got {x.shape}")
        variant = self.cfg.variant
        q_f = self.q_bn(self.q_linear(x))
        k_f = self.k_bn(self.k_linear(x))
        v_f = self.v_bn(self.v_linear(x))
        v = v_f if variant == "vsa" else self.v_lif(v_f)
        if variant == "ssa":
            q, k = self.q_lif(q_f), self.k_lif(k_f)
            prod = self._ssa(q, k, v)
        else:
            prod = self._float_map(q_f, k_f, v)
        if self.keep_intermediates:
            self.last_product = prod.data.copy()
        a = _merge_heads(prod * self._scale())
        a = self.attn_lif(a)
        return self.proj_lif(self.proj_bn(self.proj_linear(a)))

    def _ssa(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        h, order = self.cfg.heads, self.cfg.order
        qh, kh, vh = (_split_heads(t, h) for t in (q, k, v))
        n, d = qh.shape[-2], qh.shape[-1]
        if not is_relaxed():
            counts = [int(np.count_nonzero(t.data)) for t in (qh, kh, vh)]
            size = qh.size
            self.last_rates = {key: Fraction(c, size) for key, c in zip("qkv", counts)}
            ledger = active_ledger()
            if ledger is not None:
                trigger = {"qk": 0, "qm": 0, "kv": 1, "av": 2}
                for part, sops in ssa_sops(*counts, n, d, order).items():
                    ledger.add(f"{self.name}.qkv", f"ssa_{part}", sops=sops,
                               spikes=counts[trigger[part]], elements=size)
        differentiable = T.is_grad_enabled() and any(t.requires_grad for t in (qh, kh, vh))
        if differentiable or is_relaxed():
            if order == "qk_first":
                return (qh @ kh.swapaxes(-1, -2)) @ vh
            return qh @ (kh.swapaxes(-1, -2) @ vh)
        for t in (qh, kh, vh):
            if not np.all((t.data == 0) | (t.data == 1)):
                raise ContractViolation("SSA expects binary Q, K and V")
        prod = ssa_product(qh.data, kh.data, vh.data, order)
        return Tensor(prod.astype(qh.dtype))

    def _float_map(self, q_f: Tensor, k_f: Tensor, v: Tensor) -> Tensor:
        cfg = self.cfg
        qh, kh, vh = (_split_heads(t, cfg.heads) for t in (q_f, k_f, v))
        n, d = qh.shape[-2], qh.shape[-1]
        attn = attention_map(qh, kh, cfg.variant, cfg.leaky_slope)
        if self.keep_intermediates:
            self.last_map = attn.data.copy()
        ledger = active_ledger()
        if ledger is not None:
            groups = int(np.prod(qh.shape[:-2]))
            per = count_attention_ops(AttentionConfig(d, 1, variant=cfg.variant), n)
            ledger.add(f"{self.name}.qkv", f"{cfg.variant}_map", flops=per["flops"] * groups)
        return attn @ vh

    def count_ops(self, n: int) -> dict:
        """Theoretical per-sample, per-step ops from the rates of the last forward."""
        if self.cfg.variant == "ssa" and self.last_rates is None:
            raise UsageError("count_ops called before any forward pass")
        return count_attention_ops(self.cfg, n, self.last_rates)


def _batched(x) -> tuple[Tensor, bool]:
    if isinstance(x, SpikeTensor):
        x = x.to_dense()
    elif not isinstance(x, Tensor):
        x = Tensor(x)
    if x.ndim == 3:
        return x.reshape(x.shape[0], 1, *x.shape[1:]), True
    return x, False


def ssa_forward(x, attn: SpikingSelfAttention) -> Tensor:
    """Spiking self-attention on binary tokens [T, N, D] or [T, B, N, D]."""
    if attn.cfg.variant != "ssa":
        raise ConfigError(f"ssa_forward needs variant 'ssa', module has {attn.cfg.variant!r}")
    xt, squeeze = _batched(x)
    if not np.all((xt.data == 0) | (xt.data == 1)):
        raise ContractViolation("ssa_forward expects binary input tokens")
    out = attn(xt)
    return out.reshape(out.shape[0], *out.shape[2:]) if squeeze else out


def vsa_forward(x, attn: SpikingSelfAttention) -> Tensor:
    """One of the float attention-map variants on [T, N, D] or [T, B, N, D]."""
    if attn.cfg.variant == "ssa":
        raise ConfigError("vsa_forward needs a float attention-map variant")
    xt, squeeze = _batched(x)
    out = attn(xt)
    return out.reshape(out.shape[0], *out.shape[2:]) if squeeze else out
