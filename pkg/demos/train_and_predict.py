"""
Training the toy model
======================

Overfits the small attentive model to a few synthetic images, then turns
one prediction into an 8-bit PGM saliency map.
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from attentive_saliency import metrics as M, model, optim
from attentive_saliency import pipeline as P
from attentive_saliency.io import ImageGray, write_pgm

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 60

_, samples = P.synth_dataset(seed=0, n=4, extent=(48, 64))
data = P.samples_to_training(samples)

cfg = optim.TrainConfig(lr=1e-3, steps=steps, decay_every=100, batch_size=4,
                        weights=M.LossWeights(-1, -2, 10), seed=0)
params = model.init_params(cfg.seed, cfg.model)
print("parameters:", params.size())
print("before:", optim.dataset_scores(params, data))

params, history = optim.train_loop(cfg, data, params)
for row in history[:: max(1, steps // 6)]:
    print(f"step {row.step:4d}  loss {row.loss:8.3f}  nss {row.nss:6.3f}  kl {row.kl:6.3f}")
print("after: ", optim.dataset_scores(params, data))

# predict on the first image and bring the map back to image size
img = samples[0][0]
smap = model.forward_model(params, P.preprocess(img, 48, 64))
out = P.postprocess(smap, img.height, img.width, sigma=1.5)
print("map range:", out.min(), out.max())

with tempfile.TemporaryDirectory() as d:
    path = Path(d) / "saliency.pgm"
    write_pgm(path, ImageGray.from_float(out))
    print("wrote", path.stat().st_size, "bytes")

# the fixations should sit on the bright part of the map
fix = samples[0][2]
print("mean map value at fixations vs everywhere:", out[fix].mean(), out.mean())
