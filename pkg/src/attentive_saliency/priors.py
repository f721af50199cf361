"""Learnable Gaussian centre-bias priors.

Each prior is an axis-aligned 2-D Gaussian density evaluated on the unit
square; cell (i, j) of an H x W map is sampled at ((j + 0.5) / W, (i + 0.5) / H).
The prior maps are concatenated with the feature stack and mixed back to
the feature channel count by a dilated 5x5 convolution (3 holes, so a 17x17
receptive field) followed by ReLU.  The module is applied twice, each
replica with its own bank of Gaussians.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from . import tensor as T

SIGMA_FLOOR = 1e-3
PRIOR_KERNEL = 5
PRIOR_HOLES = 3
DEFAULT_N_PRIORS = 16


@dataclass(frozen=True)
class GaussianPrior:
    mu_x: float
    mu_y: float
    sigma_x: float
    sigma_y: float

    def __post_init__(self):
        if not (self.sigma_x > 0 and self.sigma_y > 0):
            raise ValueError(f"sigmas must be positive, got ({self.sigma_x}, {self.sigma_y})")


@dataclass(frozen=True)
class PriorBank:
    priors: tuple

    def __post_init__(self):
        object.__setattr__(self, "priors", tuple(self.priors))
        if not self.priors:
            raise ValueError("a prior bank needs at least one prior")

    def __len__(self):
        return len(self.priors)

    def to_array(self) -> np.ndarray:
        """N x 4 array with rows (mu_x, mu_y, sigma_x, sigma_y)."""
        return np.array([[p.mu_x, p.mu_y, p.sigma_x, p.sigma_y] for p in self.priors])

    @classmethod
    def from_array(cls, arr) -> "PriorBank":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 4:
            raise T.ShapeError(f"prior bank array must be N x 4, got {arr.shape}")
        return cls(tuple(GaussianPrior(*map(float, row)) for row in arr))

    @classmethod
    def grid(cls, n: int = DEFAULT_N_PRIORS, sigma: float = 0.25) -> "PriorBank":
        """Centres on a near-square grid over the unit square, all with ``sigma``."""
        cols = int(np.ceil(np.sqrt(n)))
        rows = int(np.ceil(n / cols))
        priors = []
        for k in range(n):
            r, c = divmod(k, cols)
            priors.append(GaussianPrior((c + 0.5) / cols, (r + 0.5) / rows, sigma, sigma))
        return cls(tuple(priors))


@dataclass(frozen=True)
class PriorReplica:
    weight: np.ndarray   # C x (C + N) x 5 x 5
    bias: np.ndarray     # C
    holes: int = PRIOR_HOLES


@dataclass(frozen=True)
class PriorModuleParams:
    replicas: tuple

    def __post_init__(self):
        object.__setattr__(self, "replicas", tuple(self.replicas))


def _maps_from_array(p: np.ndarray, height: int, width: int) -> np.ndarray:
    sx = np.maximum(p[:, 2], SIGMA_FLOOR)[:, None, None]
    sy = np.maximum(p[:, 3], SIGMA_FLOOR)[:, None, None]
    xs = ((np.arange(width) + 0.5) / width)[None, None, :]
    ys = ((np.arange(height) + 0.5) / height)[None, :, None]
    dx = xs - p[:, 0, None, None]
    dy = ys - p[:, 1, None, None]
    return np.exp(-(dx**2 / (2 * sx**2) + dy**2 / (2 * sy**2))) / (2 * np.pi * sx * sy)


def gaussian_prior_map(p: GaussianPrior, width: int, height: int) -> np.ndarray:
    """1 x H x W samples of the Gaussian density of ``p``."""
    if width < 1 or height < 1:
        raise ValueError("extents must be positive")
    arr = np.array([[p.mu_x, p.mu_y, p.sigma_x, p.sigma_y]])
    return _maps_from_array(arr, height, width)


def prior_bank_maps(bank: PriorBank, width: int, height: int) -> np.ndarray:
    if width < 1 or height < 1:
        raise ValueError("extents must be positive")
    return _maps_from_array(bank.to_array(), height, width)


def apply_priors(features, banks: Union[PriorBank, Sequence[PriorBank]],
                 params: PriorModuleParams) -> np.ndarray:
    """Concatenate prior maps, dilated conv, ReLU; once per replica.

    ``banks`` holds one bank per replica; a single bank is shared by all.
    """
    x = np.asarray(features, dtype=np.float64)
    if isinstance(banks, PriorBank):
        banks = [banks] * len(params.replicas)
    if len(banks) != len(params.replicas):
        raise ValueError(f"{len(banks)} banks for {len(params.replicas)} replicas")
    h, w = x.shape[1:]
    for k, (bank, rep) in enumerate(zip(banks, params.replicas)):
        stacked = T.concat_channels(x, prior_bank_maps(bank, w, h))
        if rep.weight.shape[1] != stacked.shape[0]:
            raise T.ShapeError(
                f"replica {k}: kernel expects {rep.weight.shape[1]} input channels, "
                f"got {x.shape[0]} features + {len(bank)} priors"
            )
        x = T.activation(
            T.conv2d(stacked, rep.weight, rep.bias, stride=1,
                     dilation=T.holes_to_dilation(rep.holes), padding="same"),
            "relu",
        )
    return x
