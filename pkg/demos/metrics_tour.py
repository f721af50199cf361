"""
Scoring saliency maps
=====================

Builds a small synthetic set, then scores a good, a blurry and a random
prediction with every metric the library offers.
"""

import numpy as np

from attentive_saliency import metrics as M
from attentive_saliency import pipeline as P

_, samples = P.synth_dataset(seed=1, n=3, extent=(24, 32))
rng = np.random.default_rng(1)

items = []
for k, (img, den, fix) in enumerate(samples):
    items.append((f"good{k}", den, den, fix))
    items.append((f"blurry{k}", P.gaussian_blur(den, 4.0), den, fix))
    items.append((f"random{k}", rng.random(den.shape), den, fix))

# sAUC draws its negatives from the fixations of the other images
report = M.evaluate(items, M.METRIC_NAMES, seed=0, max_cells=256)
print(report.to_csv())

# NSS and CC ignore affine rescaling of the prediction
den, fix = samples[0][1], samples[0][2]
print("nss:", M.nss(den, fix), M.nss(3 * den + 1, fix))
print("cc: ", M.cc(den, den), M.cc(-den, den))

# KL against itself is zero up to the epsilon term
print("kl(p, p):", M.kl_div(den, den))

# the combined training loss with the default weights
print("loss:", M.combined_loss(P.gaussian_blur(den, 2.0), den, fix, M.LossWeights()))
