import numpy as np
import pytest
from PIL import Image

from prostate_bench.overlay import (
    GREEN,
    RED,
    contour,
    overlay_filename,
    render_overlay,
    write_overlays,
)
from prostate_bench.volume_io import MaskVolume, Volume


def _square(hw=16, r0=4, r1=12, c0=4, c1=12):
    m = np.zeros((hw, hw), np.uint8)
    m[r0:r1, c0:c1] = 1
    return m


def _colour_mask(rgb, colour):
    return np.all(rgb == np.array(colour, np.uint8), axis=-1)


def test_contour_is_4_connected_boundary():
    c = contour(_square())
    expected = _square() - _square(r0=5, r1=11, c0=5, c1=11)
    np.testing.assert_array_equal(c, expected.astype(bool))
    assert not contour(np.zeros((5, 5))).any()
    # a mask touching the border keeps its border pixels as contour
    assert contour(np.ones((3, 3)))[0].all()


def test_perfect_prediction_contours_coincide():
    gt = _square()
    rgb = render_overlay(np.random.default_rng(0).random((16, 16)), gt, gt)
    np.testing.assert_array_equal(_colour_mask(rgb, GREEN), contour(gt))
    assert not _colour_mask(rgb, RED).any()


def test_background_prediction_draws_red_only():
    gt = _square()
    rgb = render_overlay(np.zeros((16, 16)), np.zeros_like(gt), gt)
    assert not _colour_mask(rgb, GREEN).any()
    np.testing.assert_array_equal(_colour_mask(rgb, RED), contour(gt))


def test_half_overlap_filename_and_png(tmp_path):
    gt = np.zeros((1, 8, 8), np.uint8)
    pred = np.zeros((1, 8, 8), np.uint8)
    gt[0, 2:4, 2:4] = 1
    pred[0, 2:4, 3:5] = 1  # overlap of 2 of 4 pixels each: DSC 0.5
    vol = Volume(np.arange(64, dtype=np.float32).reshape(1, 8, 8), (1, 1, 1), "Case07", "prostatex")
    paths = write_overlays(vol, MaskVolume(pred, (1, 1, 1), "Case07", "prostatex"),
                           MaskVolume(gt, (1, 1, 1), "Case07", "prostatex"), tmp_path)
    assert [p.name for p in paths] == ["prostatex_Case07_slice000_dsc0.50.png"]
    img = np.asarray(Image.open(paths[0]))
    assert img.shape == (8, 8, 3) and img.dtype == np.uint8
    assert overlay_filename("promise12", "Case00", 12, 1.0) == "promise12_Case00_slice012_dsc1.00.png"


def test_overlay_errors(tmp_path):
    with pytest.raises(ValueError):
        render_overlay(np.zeros((4, 4)), np.zeros((4, 5)), np.zeros((4, 4)))
    vol = Volume(np.zeros((2, 4, 4)), (1, 1, 1), "c")
    m = MaskVolume(np.zeros((2, 4, 4)), (1, 1, 1), "c")
    with pytest.raises(IndexError):
        write_overlays(vol, m, m, tmp_path, slices=[5])
