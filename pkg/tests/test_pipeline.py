import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.ndimage import correlate1d

from attentive_saliency import pipeline as P
from attentive_saliency import tensor as T
from attentive_saliency.io import ImageGray


@pytest.mark.parametrize("h,w,pad,out", [
    (600, 800, P.Padding(0, 0, 0, 0), (240, 320)),
    (600, 600, P.Padding(0, 0, 100, 100), (240, 320)),
    (480, 640, P.Padding(0, 0, 0, 0), (240, 320)),
    (301, 600, P.Padding(74, 75, 0, 0), (240, 320)),
    (5, 5, P.Padding(0, 0, 1, 1), (6, 8)),
])
def test_preprocess_geometry(h, w, pad, out):
    assert P.aspect_padding(h, w) == pad
    ph, pw = pad.padded_shape(h, w)
    assert ph * 4 == pw * 3 or (h, w) == (5, 5)
    x = P.preprocess(np.full((h, w), 0.5), *out)
    assert x.shape == (1,) + out
    assert x.min() >= 0 and x.max() <= 0.5 + 1e-12


def test_preprocess_pads_with_zeros_then_resizes():
    img = np.random.default_rng(0).random((60, 60))
    x = P.preprocess(img, 60, 80)
    np.testing.assert_array_equal(x[0, :, :10], 0.0)
    np.testing.assert_array_equal(x[0, :, 70:], 0.0)
    np.testing.assert_array_equal(x[0, :, 10:70], img)
    down = P.preprocess(np.random.default_rng(1).random((480, 640)))
    assert down.shape == (1, 240, 320)


def test_preprocess_scales_pgm_and_validates():
    img = ImageGray(np.full((3, 4), 51), 255)
    np.testing.assert_allclose(P.preprocess(img, 3, 4), 0.2, rtol=1e-15)
    with pytest.raises(ValueError, match="4:3"):
        P.preprocess(np.zeros((3, 4)), 10, 10)
    assert P.preprocess(np.zeros((3, 4)), 10, 10, pad=False).shape == (1, 10, 10)
    with pytest.raises(ValueError):
        P.preprocess(np.zeros((2, 3, 4)))
    with pytest.raises(ValueError):
        P.aspect_padding(0, 4)


def test_kernel_taps():
    k = P.gaussian_kernel1d(2.0)
    assert len(k) == 13
    assert k.sum() == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_allclose(k, k[::-1], rtol=0, atol=0)
    assert k[6] / k[7] == pytest.approx(np.exp(1 / 8), rel=1e-14)
    np.testing.assert_array_equal(P.gaussian_kernel1d(0.0), [1.0])
    with pytest.raises(ValueError):
        P.gaussian_kernel1d(-1.0)


@pytest.mark.parametrize("sigma", [0.7, 1.5, 3.0])
def test_blur_matches_scipy(sigma):
    x = np.random.default_rng(int(sigma * 10)).random((17, 23))
    k = P.gaussian_kernel1d(sigma)
    # scipy's "reflect" repeats the edge sample, the same as numpy's "symmetric"
    want = correlate1d(correlate1d(x, k, axis=0, mode="reflect"), k, axis=1, mode="reflect")
    np.testing.assert_allclose(P.gaussian_blur(x, sigma), want, rtol=0, atol=1e-14)


def test_blur_impulse_identity_and_constant():
    x = np.zeros((21, 21))
    x[10, 10] = 1.0
    k = P.gaussian_kernel1d(2.0)
    np.testing.assert_allclose(P.gaussian_blur(x, 2.0)[4:17, 4:17], np.outer(k, k), rtol=0, atol=1e-17)
    y = np.random.default_rng(2).random((5, 6))
    np.testing.assert_array_equal(P.gaussian_blur(y, 0.0), y)
    np.testing.assert_allclose(P.gaussian_blur(np.full((6, 9), 0.3), 4.0), 0.3, rtol=1e-14)


@settings(max_examples=25, deadline=None)
@given(st.integers(3, 12), st.integers(3, 12), st.floats(0.3, 3.0), st.integers(0, 10 ** 6))
def test_blur_preserves_mass_and_range(h, w, sigma, seed):
    x = np.random.default_rng(seed).random((h, w))
    y = P.gaussian_blur(x, sigma)
    assert y.min() >= x.min() - 1e-12 and y.max() <= x.max() + 1e-12
    # mirrored edges with a kernel shorter than the map keep the total
    if len(P.gaussian_kernel1d(sigma)) // 2 <= min(h, w):
        assert y.sum() == pytest.approx(x.sum(), rel=1e-12)


def test_postprocess_crop_and_range():
    smap = np.zeros((30, 40))
    smap[10:20, 15:25] = 1.0
    out = P.postprocess(smap, 60, 60, sigma=1.0)
    assert out.shape == (60, 60)
    assert out.min() == 0.0 and out.max() == 1.0
    blurred = P.gaussian_blur(smap, 1.0)
    full = T.bilinear_resize(blurred[None], 60, 80)[0][:, 10:70]
    np.testing.assert_allclose(out, (full - full.min()) / (full.max() - full.min()), rtol=0, atol=1e-14)
    np.testing.assert_array_equal(P.postprocess(np.full((6, 8), 2.0), 12, 16), 0.0)
    assert P.postprocess(smap, 7, 7, pad=False).shape == (7, 7)


def test_synth_sample_properties():
    _, samples = P.synth_dataset(7, 20, (48, 64))
    hits = total = 0
    for img, den, fix in samples:
        assert img.samples.shape == den.shape == fix.shape == (48, 64)
        assert den.sum() == pytest.approx(1.0, abs=1e-9)
        assert den.min() >= 0 and fix.any()
        hits += np.count_nonzero(den[fix] > np.median(den))
        total += np.count_nonzero(fix)
    assert hits / total >= 0.95
    _, again = P.synth_dataset(7, 20, (48, 64))
    assert all(np.array_equal(a[1], b[1]) and np.array_equal(a[0].samples, b[0].samples) for a, b in zip(samples, again))
    with pytest.raises(ValueError):
        P.synth_dataset(0, 0)


def test_synth_files_and_manifest(tmp_path):
    m1, samples = P.synth_dataset(3, 3, (24, 32), tmp_path / "a")
    m2, _ = P.synth_dataset(3, 3, (24, 32), tmp_path / "b")
    for rel in ["manifest.json"] + [getattr(e, f) for e in m1.entries for f in ("image", "density", "fixations")]:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    back = P.DatasetManifest.from_json((tmp_path / "a" / "manifest.json").read_text())
    assert back == m1
    loaded = back.load(tmp_path / "a")
    for (x, den, fix), (img, d0, f0) in zip(loaded, samples):
        np.testing.assert_array_equal(den, d0)
        np.testing.assert_array_equal(fix, f0)
        np.testing.assert_array_equal(x, P.preprocess(img, 24, 32))
    with pytest.raises(ValueError):
        P.DatasetManifest.from_json('{"entries": []}')


def test_load_map(tmp_path):
    with pytest.raises(ValueError, match="extension"):
        P.load_map(tmp_path / "x.png")
