"""
Dilated backbones and learned center-bias priors
================================================

Walks through the stride-to-dilation transform on the toy backbones and
shows what a bank of Gaussian priors looks like once it is rasterized.
"""

import numpy as np

from attentive_saliency import backbone as bb
from attentive_saliency import priors
from attentive_saliency import tensor as T

# the toy VGG-style net halves the map five times
net, params = bb.build_toy_backbone("vgg_like", width=4)
print("layers:", len(net.layers), " downscale:", bb.downscale_factor(net))

# drop the last pool and swap the last strided conv for a dilated one
dilated = bb.apply_dilated_recipe(net, "vgg_like")
print("after the recipe, downscale:", bb.downscale_factor(dilated))

# the receptive field of the output cells does not shrink
for name, spec in (("pool removed only", bb.remove_layer(net, 14)), ("recipe", dilated)):
    print(f"{name:>18}: receptive field {bb.receptive_fields(spec)[-1]}")

# the removed pool carries no weights, so the other layers keep theirs
print("removed layer params:", params[14])
dilated_params = params[:14] + params[15:]

# a 240x320 image now gives a 30x40 feature map instead of 8x10
x = np.random.default_rng(0).random((1, 240, 320))
print("feature extents:", bb.forward(net, params, x).shape, "->",
      bb.forward(dilated, dilated_params, x).shape)

# a 5x5 kernel with 3 holes covers 17x17 input cells
print("prior conv effective kernel:", T.effective_kernel_size(5, T.holes_to_dilation(3)))

# 16 priors on a 4x4 grid, rasterized at the feature resolution
bank = priors.PriorBank.grid(16, 0.25)
maps = priors.prior_bank_maps(bank, 40, 30)
print("prior maps:", maps.shape)
peaks = [tuple(int(v) for v in np.unravel_index(np.argmax(m), m.shape)) for m in maps[:4]]
print("peaks of the first row of priors:", peaks)

# one prior, printed coarsely; brighter characters mean more mass
m = priors.gaussian_prior_map(priors.GaussianPrior(0.4, 0.6, 0.15, 0.1), 32, 12)[0]
ramp = " .:-=+*#%@"
for row in m / m.max():
    print("".join(ramp[min(int(v * len(ramp)), len(ramp) - 1)] for v in row))
