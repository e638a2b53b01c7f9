import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ddsr.metrics import PSNR_CAP, psnr_y, rgb_to_y, ssim_y

from helpers import psnr_loops, ssim_loops


def test_luma_endpoints_and_primaries():
    assert abs(rgb_to_y(np.zeros((1, 1, 3)))[0, 0] - 16 / 255) < 1e-15
    assert abs(rgb_to_y(np.ones((1, 1, 3)))[0, 0] - 235 / 255) < 1e-12
    red = np.zeros((1, 1, 3))
    red[..., 0] = 1
    assert abs(rgb_to_y(red)[0, 0] - (65.481 + 16) / 255) < 1e-12


def test_luma_rejects_grey_input():
    with pytest.raises(ValueError):
        rgb_to_y(np.zeros((4, 4)))


def test_psnr_identity_hits_cap():
    img = np.random.default_rng(0).uniform(size=(16, 16, 3))
    assert psnr_y(img, img) == PSNR_CAP


def test_psnr_known_mse():
    # constant luma offset of 0.1 -> mse 0.01 -> 20 dB
    hr = np.full((8, 8, 3), 0.4)
    sr = hr + 0.1 * 255 / (65.481 + 128.553 + 24.966)
    assert abs(psnr_y(sr, hr) - 20.0) < 1e-9


@settings(max_examples=10, deadline=None)
@given(arrays(np.float64, (2, 9, 10, 3), elements=st.floats(0, 1)), st.integers(0, 3))
def test_psnr_matches_loop_oracle(pair, crop):
    sr, hr = pair
    assert abs(psnr_y(sr, hr, crop) - psnr_loops(sr, hr, crop)) < 1e-9


def test_psnr_symmetric_and_crop_checks():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(size=(2, 12, 12, 3))
    assert psnr_y(a, b) == psnr_y(b, a)
    with pytest.raises(ValueError):
        psnr_y(a, b, crop=6)
    with pytest.raises(ValueError):
        psnr_y(a, b[:-1])


def test_psnr_falls_with_noise():
    rng = np.random.default_rng(2)
    hr = rng.uniform(0.2, 0.8, size=(32, 32, 3))
    vals = [psnr_y(np.clip(hr + rng.standard_normal(hr.shape) * s / 255, 0, 1), hr) for s in (2, 10, 30)]
    assert vals[0] > vals[1] > vals[2]


def test_ssim_identity_is_one():
    img = np.random.default_rng(3).uniform(size=(20, 20, 3))
    assert abs(ssim_y(img, img) - 1.0) < 1e-12


def test_ssim_inverted_checkerboard_is_negative():
    board = (np.indices((24, 24)).sum(axis=0) % 2).astype(float)
    a = np.repeat(board[:, :, None], 3, axis=2)
    assert ssim_y(a, 1 - a) < 0


def test_ssim_matches_loop_oracle():
    rng = np.random.default_rng(4)
    a, b = rng.uniform(size=(2, 15, 14, 3))
    assert abs(ssim_y(a, b, crop=1) - ssim_loops(a, b, 1)) < 1e-9
    assert abs(ssim_y(a, b) - ssim_y(b, a)) < 1e-12


def test_ssim_too_small():
    with pytest.raises(ValueError, match="11x11"):
        ssim_y(np.zeros((12, 12, 3)), np.zeros((12, 12, 3)), crop=1)
