"""Spiking neurons and spiking self-attention, step by step.

Run: python demos/01_spiking_attention.py
"""
import numpy as np

from spikekit import tensor as T
from spikekit.attention import (AttentionConfig, SpikingSelfAttention, count_attention_ops,
                                ssa_product)
from spikekit.neuron import LifConfig, lif_forward
from spikekit.spike import SpikeTensor, matmul_spike

rng = np.random.default_rng(0)

# A LIF neuron integrates input current, leaks toward rest and fires on
# crossing the threshold. A constant drive of 1.5 charges the membrane to
# 0.75 on the first step, crosses 1.0 on the second, then resets to zero.
current = T.Tensor(np.full((6, 1), 1.5))
spikes = lif_forward(current, LifConfig()).data[:, 0]
print("LIF spikes under constant drive 1.5:", spikes.astype(int).tolist())

# Binary tensors are stored bit-packed. A binary matmul is then a bitwise
# AND followed by a population count, with no multiplication at all.
a = (rng.random((4, 70)) < 0.3).astype(np.uint8)
b = (rng.random((70, 3)) < 0.3).astype(np.uint8)
packed = SpikeTensor.from_array(a)
print(f"packed {a.size} spikes into {packed.bits.nbytes} bytes; firing rate {packed.firing_rate():.2f}")
assert np.array_equal(matmul_spike(a, b), a.astype(int) @ b.astype(int))

# Spiking self-attention multiplies binary Q, K and V. Without softmax the
# product is associative, so Q(K^T V) gives the same integers as (QK^T)V
# while costing N*d^2 instead of N^2*d work when N > d.
q, k, v = ((rng.random((32, 8)) < 0.25).astype(np.uint8) for _ in range(3))
left = ssa_product(q, k, v, "qk_first")
right = ssa_product(q, k, v, "kv_first")
print("orders agree exactly:", np.array_equal(left, right), "| min entry", left.min())

cfg = AttentionConfig(dim=8, heads=1)
rates = {"q": q.mean(), "k": k.mean(), "v": v.mean()}
for order in ("qk_first", "kv_first"):
    ops = count_attention_ops(AttentionConfig(8, 1, order=order), 32, rates)
    print(f"  {order}: {float(ops['sops']):.0f} synaptic ops")
print(f"  a float softmax map would need {count_attention_ops(AttentionConfig(8, 1, variant='a_softmax'), 32)['flops']} FLOPs")

# The full block: linear+BN+LIF produce Q/K/V spikes, the product is scaled,
# fired through another LIF and projected back. Output stays binary. With
# fresh weights the neurons fire sparsely (BN output has to reach 2 to
# cross threshold on the first step), so few spikes survive the block.
attn = SpikingSelfAttention(AttentionConfig(32, 4), rng=rng)
attn.keep_intermediates = True
x = T.Tensor((rng.random((4, 2, 64, 32)) < 0.3).astype(float))
with T.no_grad():
    y = attn(x).data
print("Q/K/V firing rates:", {k_: round(float(r), 3) for k_, r in attn.last_rates.items()})
print("largest Q K^T V entry:", int(attn.last_product.max()))
print("output values:", sorted(np.unique(y).tolist()), "shape", y.shape)
