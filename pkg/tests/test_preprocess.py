import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from sklearn.base import clone

from prostate_bench.config import TrainConfig
from prostate_bench.preprocess import (
    SampleCache,
    SlicePreprocessor,
    SliceStandardizer,
    adaptive_hist_eq,
    normalize,
    pipeline_key,
    resize,
    volume_to_samples,
)
from prostate_bench.volume_io import MaskVolume, Volume


def quantise(img, nbins=256):
    lo, hi = img.min(), img.max()
    return np.clip(((img - lo) / (hi - lo) * nbins).astype(int), 0, nbins - 1)


def global_he_oracle(img, nbins=256):
    """Plain histogram equalisation: fraction of pixels at or below each level."""
    b = quantise(img, nbins)
    cdf = np.cumsum(np.bincount(b.ravel(), minlength=nbins)) / b.size
    return cdf[b]


# -- CLAHE -----------------------------------------------------------------------

def test_clahe_constant_image():
    out = adaptive_hist_eq(np.full((32, 32), 0.7))
    assert np.ptp(out) == 0
    assert 0.0 <= out[0, 0] <= 1.0


def test_clahe_unclipped_single_tile_matches_global_he(rng):
    img = rng.gamma(2.0, 1.0, size=(48, 40))
    out = adaptive_hist_eq(img, clip_limit=np.inf, grid=(1, 1))
    np.testing.assert_allclose(out, global_he_oracle(img), atol=1e-6)


def test_clahe_two_tiles_flatten_each_tile():
    h, w = 64, 128
    ramp = np.linspace(0, 1, h)[:, None]
    img = np.empty((h, w))
    img[:, :64] = 0.05 + 0.25 * ramp  # dark left tile
    img[:, 64:] = 0.70 + 0.25 * ramp  # bright right tile
    out = adaptive_hist_eq(img, clip_limit=4.0, grid=(1, 2))
    bins = quantise(img)
    # Outside the span between the two tile centres no blending happens.
    for cols, tile in ((slice(0, 31), slice(0, 64)), (slice(97, 128), slice(64, 128))):
        region = out[:, cols]
        v = np.sort(region.ravel())
        ecdf = np.arange(1, v.size + 1) / v.size
        assert np.abs(ecdf - v).max() < 0.05
        tb = bins[:, tile]
        cdf = np.cumsum(np.bincount(tb.ravel(), minlength=256)) / tb.size
        np.testing.assert_allclose(region, cdf[bins[:, cols]], atol=1e-6)


def test_clahe_output_range_and_errors(rng):
    out = adaptive_hist_eq(rng.normal(size=(50, 70)) * 100)
    assert out.min() >= 0 and out.max() <= 1 and out.dtype == np.float32
    bad = np.ones((8, 8))
    bad[2, 2] = np.nan
    with pytest.raises(ValueError):
        adaptive_hist_eq(bad)


def test_clahe_clip_limits_contrast(rng):
    img = rng.normal(size=(64, 64))
    soft = adaptive_hist_eq(img, clip_limit=1.0)
    hard = adaptive_hist_eq(img, clip_limit=np.inf)
    assert soft.std() < hard.std()


# -- normalize -------------------------------------------------------------------

def test_normalize_examples():
    np.testing.assert_allclose(normalize(np.array([[0.0, 2.0]])), [[-1.0, 1.0]])
    assert np.all(normalize(np.full((4, 4), 3.3)) == 0)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 16), st.integers(2, 16)),
              elements=st.floats(-1e4, 1e4, allow_nan=False)))
def test_normalize_moments(img):
    out = normalize(img)
    if np.ptp(img) > 1e-3:
        assert abs(out.mean()) < 1e-6 * max(1.0, np.abs(out).max())
        assert abs(out.std() - 1) < 1e-4
    else:
        assert np.isfinite(out).all()


# -- resize ----------------------------------------------------------------------

def test_resize_identity(rng):
    img = rng.normal(size=(448, 448)).astype(np.float32)
    mask = (rng.random((448, 448)) > 0.5).astype(np.uint8)
    a, b = resize(img, mask, (448, 448))
    np.testing.assert_array_equal(a, img)
    np.testing.assert_array_equal(b, mask)


def test_resize_bilinear_oracle():
    img = np.array([[0.0, 1.0], [1.0, 0.0]])
    out, _ = resize(img, np.zeros((2, 2)), (4, 4))
    # Pixel-centre mapping src = (i + 0.5) / 2 - 0.5, clamped to the edge.
    s = np.clip((np.arange(4) + 0.5) / 2 - 0.5, 0, 1)
    y, x = np.meshgrid(s, s, indexing="ij")
    oracle = x + y - 2 * x * y  # bilinear interpolant of the 2x2 grid
    np.testing.assert_allclose(out, oracle, atol=1e-6)
    assert [out[0, 0], out[0, -1], out[-1, 0], out[-1, -1]] == [0, 1, 1, 0]


@settings(max_examples=50, deadline=None)
@given(st.integers(3, 40), st.integers(3, 40), st.integers(1, 60), st.integers(1, 60), st.integers(0, 2**31))
def test_resize_mask_stays_binary(h, w, oh, ow, seed):
    m = (np.random.default_rng(seed).random((h, w)) > 0.5).astype(np.uint8)
    _, out = resize(np.zeros((h, w)), m, (oh, ow))
    assert out.shape == (oh, ow)
    assert set(np.unique(out)) <= {0, 1}


def test_resize_rejects_bad_size():
    with pytest.raises(ValueError):
        resize(np.zeros((4, 4)), np.zeros((4, 4)), (0, 4))


# -- volume_to_samples -------------------------------------------------------------

def _case(depth=5, hw=40, empty=False):
    rng = np.random.default_rng(depth)
    vox = rng.normal(300, 50, size=(depth, hw, hw)).astype(np.float32)
    lab = np.zeros((depth, hw, hw), np.uint8)
    if not empty:
        lab[1:-1, 10:20, 12:25] = 1
    return Volume(vox, (0.5, 0.5, 3.0), "c", "promise12"), MaskVolume(lab, (0.5, 0.5, 3.0), "c", "promise12")


def test_volume_to_samples_basic():
    vol, mask = _case()
    cfg = TrainConfig(resolution=32)
    samples = volume_to_samples(vol, mask, cfg)
    assert [s.slice_index for s in samples] == [0, 1, 2, 3, 4]
    for s in samples:
        assert s.image.shape == s.mask.shape == (32, 32)
        assert s.provenance == ("promise12", "c", s.slice_index)
        assert s.native_shape == (40, 40)
        assert set(np.unique(s.mask)) <= {0, 1}
        assert 0 <= s.image.min() and s.image.max() <= 1


def test_volume_to_samples_keeps_empty_slices_by_default():
    vol, mask = _case(empty=True)
    assert len(volume_to_samples(vol, mask, TrainConfig(resolution=32))) == 5
    vol, mask = _case()
    cfg = TrainConfig(resolution=32, drop_empty_slices=True)
    assert [s.slice_index for s in volume_to_samples(vol, mask, cfg)] == [1, 2, 3]


def test_volume_to_samples_dim_mismatch():
    vol, _ = _case()
    _, other = _case(depth=4)
    with pytest.raises(ValueError, match="dims"):
        volume_to_samples(vol, other)


def test_slice_count_conservation():
    cases = [_case(depth=d) for d in (3, 5, 6)]
    total = sum(len(volume_to_samples(v, m, TrainConfig(resolution=16))) for v, m in cases)
    assert total == 3 + 5 + 6


# -- cache and transformers ----------------------------------------------------------

def test_sample_cache_round_trip(tmp_path):
    vol, mask = _case()
    cfg = TrainConfig(resolution=16)
    samples = volume_to_samples(vol, mask, cfg)
    key = pipeline_key("src.mhd", "c", "promise12", cfg)
    assert key != pipeline_key("src.mhd", "c", "promise12", TrainConfig(resolution=32))
    cache = SampleCache(tmp_path)
    assert cache.get(key, "promise12", "c") is None
    cache.put(key, samples)
    back = cache.get(key, "promise12", "c")
    assert len(back) == len(samples)
    for a, b in zip(samples, back):
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.mask, b.mask)
        assert a.provenance == b.provenance and a.native_shape == b.native_shape


def test_slice_preprocessor_sklearn_api(rng):
    X = rng.normal(size=(3, 20, 20))
    pre = SlicePreprocessor(resolution=16, clip_limit=3.0)
    assert pre.get_params()["clip_limit"] == 3.0
    out = pre.fit_transform(X)
    assert out.shape == (3, 16, 16)
    assert clone(pre).get_params() == pre.get_params()
    z = SliceStandardizer().fit_transform(out)
    np.testing.assert_allclose(z.mean(axis=(1, 2)), 0, atol=1e-5)
