"""Counting operations and estimating energy for spiking and float attention.

Run: python demos/02_energy_profile.py
"""
import numpy as np

from spikekit.architecture import ModelConfig, Spikformer
from spikekit.harness.data import DatasetSpec, load_dataset
from spikekit.harness.tasks import profile_model
from spikekit.profiler import EnergyModel, OpLedger, estimate_energy, report

# Energy is a weighted sum: 4.6 pJ per multiply-accumulate on float
# operands, 0.9 pJ per accumulate triggered by a spike.
led = OpLedger(samples=1)
led.add("vit", "matmul", flops=77_000_000)
print(f"77M FLOPs -> {estimate_energy(led, EnergyModel(4.6, 0.9), 'uJ'):.1f} uJ")
led = OpLedger(samples=1)
led.add("ssa", "ssa_qk", sops=660_000)
print(f"0.66M SOPs -> {estimate_energy(led, EnergyModel(4.6, 0.9), 'uJ'):.3f} uJ")

# Profile a desk-sized model. Untrained running statistics leave every
# neuron silent, so this profile normalises with batch statistics.
images = load_dataset(DatasetSpec(samples=8)).images
print("\nvariant      T  ops(M)/img  energy(uJ)/img  attention share")
for variant in ("ssa", "a_i", "a_softmax"):
    model = Spikformer(ModelConfig(depth=2, dim=64, heads=4, variant=variant), seed=0)
    for t in (1, 4):
        rep = report(profile_model(model, images, t, batch_stats=True))
        attn = sum(r["energy_mj"] for r in rep["rows"] if r["layer"].endswith(".qkv"))
        tot = rep["totals"]
        print(f"{variant:<11}{t:>3}{tot['ops_g'] * 1e3:>12.3f}{tot['energy_mj'] * 1e3:>16.3f}"
              f"{attn / tot['energy_mj']:>17.1%}")

# The stem's first convolution sees float pixels and is counted in FLOPs;
# everything after a spiking neuron is counted in SOPs and scales with
# firing rate.
rep = report(profile_model(Spikformer(ModelConfig(), seed=0), images, 4, batch_stats=True))
print("\nbusiest layers (T=4):")
for row in sorted(rep["rows"], key=lambda r: -r["energy_mj"])[:5]:
    rate = "-" if row["firing_rate"] is None else f"{row['firing_rate']:.3f}"
    print(f"  {row['layer']:<28}{row['op']:<10} rate {rate:<6} {row['energy_mj'] * 1e3:8.3f} uJ")
