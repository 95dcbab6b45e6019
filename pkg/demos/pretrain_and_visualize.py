"""Pretrain a tiny encoder on synthetic textures and look at a recovery.

Trains for a few hundred steps with random masking (patch 8, ratio 0.6),
compares the held-out masked loss with a predictor that always outputs
the corpus mean color, and writes an original | masked | recovered
triptych to recovery.ppm.

    python demos/pretrain_and_visualize.py [out_dir]
"""
import sys
from pathlib import Path

import numpy as np

from mimlab.config import DataConfig, ScheduleConfig, TrainConfig
from mimlab.imaging import center_view, write_ppm
from mimlab.masking import MaskConfig, generate
from mimlab.model import EncoderConfig, reconstruct_image
from mimlab.trainer import Pretrainer, heldout_masked_loss, heldout_masks, load_dataset

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_run")

cfg = TrainConfig(
    data=DataConfig(seed=0, num_images=512, num_classes=4, image_size=64),
    mask=MaskConfig("random", 8, 0.6),
    encoder=EncoderConfig(64, 8, 64, 2, 4),
    schedule=ScheduleConfig(base_lr=1e-3),
    epochs=20,
    max_steps=300,
)
data = load_dataset(cfg.data)
trainer = Pretrainer(cfg, data)
trainer.run(out)
print(f"trained {trainer.step_count} steps, last loss {trainer.metrics[-1][2]:.4f}")

masks = heldout_masks(len(data), cfg.mask, trainer.state)
print(f"held-out masked l1: {heldout_masked_loss(trainer.state, trainer.spec, data, masks):.4f}")

# constant prediction of the corpus mean color, for scale
mean = np.asarray(data.manifest.mean)[:, None, None]
errs = [np.abs(im.rgb - mean)[:, np.kron(m.reshape(8, 8), np.ones((8, 8), bool))].mean()
        for im, m in zip(data.images, masks)]
print(f"mean-color predictor:  {np.mean(errs):.4f}")

img = data.images[3]
mask = generate(cfg.mask, 64, np.random.default_rng(7))
mean, std = data.manifest.mean, data.manifest.std
view = center_view(img, 64, mean, std)
_, pred = trainer.state.forward(view.normalized[None], [mask])
recovered = reconstruct_image(pred.data[0], mask, view.crop)
masked = np.where(mask.pixels()[None], 0.0, img.rgb)
write_ppm(out / "recovery.ppm", np.concatenate([img.rgb, masked, recovered.rgb], axis=2))
print(f"wrote {out / 'recovery.ppm'}")
