"""Image pre/postprocessing, synthetic datasets and dataset manifests."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .io import ImageGray, read_pgm, read_samt, write_pgm, write_samt

ASPECT = (3, 4)          # height : width
DEFAULT_BLUR_SIGMA = 7.0


# -- padding geometry ---------------------------------------------------------

@dataclass(frozen=True)
class Padding:
    top: int
    bottom: int
    left: int
    right: int

    def padded_shape(self, h: int, w: int):
        return h + self.top + self.bottom, w + self.left + self.right


def aspect_padding(h: int, w: int, aspect=ASPECT) -> Padding:
    """Zero padding that brings an h x w image to the given aspect ratio.

    Only the axis that is too short grows; the odd pixel goes bottom/right.
    """
    if h < 1 or w < 1:
        raise ValueError(f"image extents must be positive, got {h}x{w}")
    ah, aw = aspect
    if h * aw == w * ah:
        return Padding(0, 0, 0, 0)
    if h * aw > w * ah:                       # too tall: widen
        extra = round(h * aw / ah) - w
        return Padding(0, 0, extra // 2, extra - extra // 2)
    extra = round(w * ah / aw) - h            # too wide: heighten
    return Padding(extra // 2, extra - extra // 2, 0, 0)


def _as_gray(img) -> np.ndarray:
    if isinstance(img, ImageGray):
        return img.as_float()
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 3 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 2:
        raise ValueError(f"expected a gray H x W image, got shape {a.shape}")
    return a


def preprocess(img, target_h: int = 240, target_w: int = 320, pad: bool = True) -> np.ndarray:
    """Pad to 4:3 with zeros, resize to target, return a 1 x H x W tensor in [0, 1].

    ``ImageGray`` inputs are scaled by their maxval; plain arrays are taken
    to be in [0, 1] already.
    """
    x = _as_gray(img)
    if x.size == 0:
        raise ValueError("image has zero extent")
    if target_h < 1 or target_w < 1:
        raise ValueError("target extents must be positive")
    if pad:
        if target_h * ASPECT[1] != target_w * ASPECT[0]:
            raise ValueError(f"target {target_h}x{target_w} is not 4:3")
        p = aspect_padding(*x.shape)
        x = np.pad(x, ((p.top, p.bottom), (p.left, p.right)))
    return T.bilinear_resize(x[None], target_h, target_w)


# -- blur and postprocessing -----------------------------------------------------

def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Sum-normalized Gaussian taps truncated at radius ceil(3 sigma)."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return np.ones(1)
    r = math.ceil(3 * sigma)
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-x * x / (2 * sigma * sigma))
    return k / k.sum()


def _filter_axis(x, k, axis):
    r = len(k) // 2
    if r == 0:
        return x.copy()
    pad = [(0, 0)] * x.ndim
    pad[axis] = (r, r)
    xp = np.pad(x, pad, mode="symmetric")
    out = np.zeros_like(x)
    n = x.shape[axis]
    for t, kv in enumerate(k):
        out += kv * np.take(xp, np.arange(t, t + n), axis=axis)
    return out


def gaussian_blur(x, sigma: float) -> np.ndarray:
    """Separable Gaussian blur of a 2-D map; edges mirror (half-sample symmetric)."""
    x = np.asarray(x, dtype=np.float64)
    k = gaussian_kernel1d(sigma)
    return _filter_axis(_filter_axis(x, k, 0), k, 1)


def postprocess(smap, orig_h: int, orig_w: int, sigma: float = DEFAULT_BLUR_SIGMA,
                pad: bool = True) -> np.ndarray:
    """Blur, undo the preprocessing padding, resize to orig_h x orig_w, min-max to [0, 1].

    The map is resized to the padded extent first and then cropped, so the
    crop is exact in pixel units.  A constant result maps to all zeros.
    """
    m = _as_gray(smap)
    m = gaussian_blur(m, sigma)
    p = aspect_padding(orig_h, orig_w) if pad else Padding(0, 0, 0, 0)
    ph, pw = p.padded_shape(orig_h, orig_w)
    m = T.bilinear_resize(m[None], ph, pw)[0]
    m = m[p.top:p.top + orig_h, p.left:p.left + orig_w]
    lo, hi = m.min(), m.max()
    return (m - lo) / (hi - lo) if hi > lo else np.zeros_like(m)


# -- maps on disk ---------------------------------------------------------------

def load_map(path) -> np.ndarray:
    """Read an H x W map from ``.pgm`` (scaled to [0, 1]) or ``.samt``."""
    path = Path(path)
    if path.suffix == ".pgm":
        return read_pgm(path).as_float()
    if path.suffix == ".samt":
        a = read_samt(path)
        if a.ndim == 3 and a.shape[0] == 1:
            a = a[0]
        if a.ndim != 2:
            raise ValueError(f"{path}: expected an H x W map, got shape {a.shape}")
        return a
    raise ValueError(f"{path}: unsupported map extension {path.suffix!r}")


# -- synthetic data ---------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    id: str
    image: str
    density: str
    fixations: str


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple
    height: int
    width: int
    seed: int | None = None

    def to_json(self) -> str:
        doc = {
            "extent": [self.height, self.width],
            "seed": self.seed,
            "entries": [e.__dict__ for e in self.entries],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        doc = json.loads(text)
        try:
            h, w = doc["extent"]
            entries = tuple(ManifestEntry(**e) for e in doc["entries"])
        except (KeyError, TypeError, ValueError) as e:
            raise ValueError(f"bad dataset manifest: {e}") from None
        return cls(entries, int(h), int(w), doc.get("seed"))

    def load(self, root) -> list:
        """``(image tensor, density, fixations)`` triples, preprocessed to the extent."""
        root = Path(root)
        out = []
        for e in self.entries:
            img = read_pgm(root / e.image)
            x = preprocess(img, self.height, self.width)
            den = load_map(root / e.density)
            fix = load_map(root / e.fixations) > 0
            if den.shape != (self.height, self.width) or fix.shape != den.shape:
                raise ValueError(f"{e.id}: groundtruth extent {den.shape}/{fix.shape} "
                                 f"differs from {self.height}x{self.width}")
            out.append((x, den, fix))
        return out


def synth_sample(rng: np.random.Generator, h: int, w: int, n_fix: int = 40,
                 blur: float | None = None):
    """One ``(image, density, fixations)`` triple.

    A mixture of 1-3 Gaussians sets where bright blobs sit in the image and
    where fixations land; the density is the fixation map blurred and
    normalized to unit sum, so the two groundtruths agree by construction.
    """
    k = int(rng.integers(1, 4))
    cy = rng.uniform(0.2, 0.8, k) * h
    cx = rng.uniform(0.2, 0.8, k) * w
    s = rng.uniform(0.05, 0.12, k) * min(h, w)
    wts = rng.dirichlet(np.ones(k))
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    blobs = sum(np.exp(-((yy - cy[j]) ** 2 + (xx - cx[j]) ** 2) / (2 * s[j] ** 2)) for j in range(k))
    img = 0.1 + 0.8 * np.clip(blobs, 0, 1) + rng.normal(0, 0.03, (h, w))
    comp = rng.choice(k, size=n_fix, p=wts)
    fy = np.clip(np.floor(rng.normal(cy[comp], s[comp])), 0, h - 1).astype(int)
    fx = np.clip(np.floor(rng.normal(cx[comp], s[comp])), 0, w - 1).astype(int)
    counts = np.zeros((h, w))
    np.add.at(counts, (fy, fx), 1.0)
    den = gaussian_blur(counts, blur if blur is not None else max(1.0, min(h, w) / 24))
    den /= den.sum()
    return ImageGray.from_float(img), den, counts > 0


def synth_dataset(seed: int, n: int, extent=(48, 64), out_dir=None, n_fix: int = 40):
    """Generate ``n`` samples; with ``out_dir`` also write files and a manifest.

    Returns ``(manifest or None, samples)`` where samples are
    ``(ImageGray, density, fixations)`` triples.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    h, w = extent
    if h < 1 or w < 1:
        raise ValueError("extent must be positive")
    rng = np.random.default_rng(seed)
    samples = [synth_sample(rng, h, w, n_fix) for _ in range(n)]
    if out_dir is None:
        return None, samples
    root = Path(out_dir)
    for sub in ("images", "density", "fixations"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (img, den, fix) in enumerate(samples):
        sid = f"s{i:04d}"
        e = ManifestEntry(sid, f"images/{sid}.pgm", f"density/{sid}.samt", f"fixations/{sid}.pgm")
        write_pgm(root / e.image, img)
        write_samt(root / e.density, den)
        write_pgm(root / e.fixations, ImageGray(fix.astype(np.int64) * 255))
        entries.append(e)
    manifest = DatasetManifest(tuple(entries), h, w, seed)
    (root / "manifest.json").write_text(manifest.to_json())
    return manifest, samples


def samples_to_training(samples, extent=None) -> list:
    """Turn synth samples into ``(1 x H x W tensor, density, fixations)`` triples."""
    out = []
    for img, den, fix in samples:
        h, w = extent or den.shape
        out.append((preprocess(img, h, w), den, fix))
    return out
