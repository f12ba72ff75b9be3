"""Masked image pretraining with a spiking convolutional stem, then finetuning.

Run: python demos/04_masked_pretraining.py [out_dir]
"""
import sys
from pathlib import Path

import numpy as np

from spikekit.architecture import ModelConfig
from spikekit.harness.data import DatasetSpec, load_dataset
from spikekit.harness.plots import save_strip
from spikekit.pretrain import MaskedAutoencoder, finetune_handoff, fit_pretrain, sample_mask
from spikekit.training import evaluate, fit

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_runs")
out.mkdir(parents=True, exist_ok=True)

# A mask hides 75% of the patches. The stem runs convolutions at four
# resolutions, so the patch mask is upsampled to each of them and applied
# before every convolution. Hidden pixels never reach a visible token.
mask = sample_mask(64, 0.75, seed=0)
print(f"{mask.num_masked} masked / {mask.num_visible} visible patches")
for factor, level in mask.levels(4).items():
    print(f"  stage mask x{factor}: {level.shape}")

cfg = ModelConfig(stem="scs", depth=2, dim=32, heads=2, time_steps=1, img_size=32, patch_size=4)
data = load_dataset(DatasetSpec(samples=60, seed=0))
test = load_dataset(DatasetSpec(samples=60, seed=1))

mae = MaskedAutoencoder(cfg, seed=0, decoder_dim=32, decoder_depth=1, decoder_heads=2)
hist = fit_pretrain(mae, data.images, 5, batch_size=10, lr=2e-3, warmup_epochs=1, seed=0)
# At this scale five epochs only nudge the loss below 1.0, the value of
# predicting the per-patch mean.
print("reconstruction loss by epoch:", [round(h["train_loss"], 3) for h in hist])

# Top row of the strip: originals. Bottom row: reconstructions.
imgs = data.images[:4]
rec = mae.reconstruct(imgs, sample_mask(64, 0.75, seed=1, batch=4))
save_strip(out / "reconstruction.png", np.concatenate([imgs, rec]))
print("wrote", out / "reconstruction.png")

# The decoder is dropped, a fresh head is attached and the whole network
# is finetuned with spiking attention.
clf = finetune_handoff(mae.state_dict(), cfg, cfg, seed=0)
fit(clf, data.arrays(), 10, batch_size=10, lr=2e-3, warmup_epochs=1)
print(f"finetuned held-out accuracy: {evaluate(clf, test.arrays()):.3f}")
