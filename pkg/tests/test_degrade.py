import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hspan.datamodel import HSICube, validate_sample
from hspan.degrade import (
    DegradeSpec,
    blur_downsample,
    gaussian_kernel,
    make_sample,
    partition_patches,
    synthesize_pan,
)
from hspan.errors import DimensionMismatchError, ParameterError
from oracles import blur_downsample as oracle_blur_downsample, point_gaussian


# --- kernel ----------------------------------------------------------------------


def test_kernel_pavia_sums_to_one():
    k = gaussian_kernel(8, 0.4247 * 4)
    assert k.shape == (8, 8)
    assert abs(k.sum() - 1.0) < 1e-12
    np.testing.assert_array_equal(k, k[::-1, ::-1])


def test_kernel_single_tap():
    np.testing.assert_array_equal(gaussian_kernel(1, 3.3), [[1.0]])


def test_kernel_center_corner_ratio():
    k = gaussian_kernel(3, 1.0)
    expected = point_gaussian(0, 0, 1.0) / point_gaussian(1, 1, 1.0)
    assert k[1, 1] / k[0, 0] == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("size, sigma", [(0, 1.0), (3, 0.0), (3, -1.0)])
def test_kernel_rejects_bad_args(size, sigma):
    with pytest.raises(ParameterError):
        gaussian_kernel(size, sigma)


def test_sigma_follows_beta():
    for beta in (1, 2, 3, 4):
        assert abs(DegradeSpec(beta=beta, pan_band_count=1).sigma - 0.4247 * beta) < 1e-9


# --- blur + decimate ----------------------------------------------------------


def test_pavia_dims():
    ref = HSICube(np.random.default_rng(0).random((102, 160, 160), dtype=np.float32))
    assert blur_downsample(ref, DegradeSpec(beta=4, pan_band_count=61)).shape == (102, 40, 40)


@pytest.mark.parametrize("beta", [1, 2, 3, 4])
def test_dc_preservation(beta):
    ref = HSICube(np.full((3, 12, 12), 0.37))
    out = blur_downsample(ref, DegradeSpec(beta=beta, pan_band_count=1))
    assert np.abs(out.data - 0.37).max() < 1e-6


def test_ramp_matches_oracle():
    ramp = np.arange(64, dtype=np.float64).reshape(1, 8, 8)
    out = blur_downsample(HSICube(ramp), DegradeSpec(beta=2, pan_band_count=1))
    expected = oracle_blur_downsample(ramp, 8, 0.4247 * 2, 2)
    np.testing.assert_allclose(out.data, expected, atol=1e-9)


@settings(max_examples=15, deadline=None)
@given(
    seed=st.integers(0, 10_000),
    beta=st.sampled_from([1, 2, 4]),
    side=st.sampled_from([4, 8, 12, 16]),
)
def test_decimation_commutes_with_oracle(seed, beta, side):
    ref = np.random.default_rng(seed).random((4, side, side))
    out = blur_downsample(HSICube(ref), DegradeSpec(beta=beta, pan_band_count=1))
    np.testing.assert_allclose(out.data, oracle_blur_downsample(ref, 8, 0.4247 * beta, beta), atol=1e-6)


def test_band_mean_preserved_roughly():
    # with beta=1 only the blur acts; reflect borders keep the band mean close
    ref = HSICube(np.full((2, 16, 16), 0.25))
    out = blur_downsample(ref, DegradeSpec(beta=1, pan_band_count=1))
    assert np.abs(out.data.mean(axis=(1, 2)) - 0.25).max() < 1e-5


def test_non_divisible_rejected():
    with pytest.raises(DimensionMismatchError):
        blur_downsample(HSICube(np.zeros((1, 10, 12))), DegradeSpec(beta=4, pan_band_count=1))


# --- PAN -----------------------------------------------------------------------


def test_pan_first_k_bands():
    ref = np.random.default_rng(1).random((102, 8, 8))
    pan = synthesize_pan(HSICube(ref), 61)
    np.testing.assert_allclose(pan.data, ref[:61].mean(axis=0), rtol=1e-12)


def test_pan_single_band_exact():
    ref = np.random.default_rng(2).random((5, 4, 4))
    np.testing.assert_array_equal(synthesize_pan(HSICube(ref), 1).data, ref[0])


def test_pan_hand_mean():
    ref = np.stack([np.zeros((2, 2)), np.ones((2, 2)), np.full((2, 2), 2.0)])
    np.testing.assert_array_equal(synthesize_pan(HSICube(ref), 3).data, np.ones((2, 2)))


@pytest.mark.parametrize("k", [0, 6])
def test_pan_out_of_range(k):
    with pytest.raises(ParameterError):
        synthesize_pan(HSICube(np.zeros((5, 2, 2))), k)


# --- patches -----------------------------------------------------------------


def test_pavia_patch_count():
    scene = HSICube(np.zeros((2, 960, 640), dtype=np.float32))
    tiles = partition_patches(scene, 160)
    assert len(tiles) == 24
    assert all(t.shape == (2, 160, 160) for t in tiles)


def test_single_patch():
    scene = HSICube(np.random.default_rng(3).random((3, 6, 6)))
    (tile,) = partition_patches(scene, 6)
    assert tile == scene


def test_patches_reassemble():
    scene = np.arange(16, dtype=np.float64).reshape(1, 4, 4)
    tiles = partition_patches(HSICube(scene), 2)
    assert len(tiles) == 4
    rows = [np.concatenate([tiles[0].data, tiles[1].data], axis=2), np.concatenate([tiles[2].data, tiles[3].data], axis=2)]
    np.testing.assert_array_equal(np.concatenate(rows, axis=1), scene)


def test_patch_non_divisible():
    with pytest.raises(DimensionMismatchError):
        partition_patches(HSICube(np.zeros((1, 5, 4))), 2)


# --- samples -----------------------------------------------------------------


def test_botswana_sample():
    ref = HSICube(np.random.default_rng(4).random((145, 120, 120), dtype=np.float32))
    s = make_sample(ref, DegradeSpec(beta=3, pan_band_count=31))
    assert s.lr_hsi.shape == (145, 40, 40)
    assert (s.pan.height, s.pan.width) == (120, 120)


def test_chikusei_sample():
    ref = HSICube(np.random.default_rng(5).random((128, 256, 256), dtype=np.float32))
    s = make_sample(ref, DegradeSpec(beta=4, pan_band_count=65))
    assert s.lr_hsi.shape == (128, 64, 64)
    assert (s.pan.height, s.pan.width) == (256, 256)


def test_identity_scale_sample():
    ref = HSICube(np.random.default_rng(6).random((3, 5, 7)))
    spec = DegradeSpec(beta=1, pan_band_count=3)
    s = make_sample(ref, spec)
    validate_sample(s)
    np.testing.assert_allclose(s.lr_hsi.data, oracle_blur_downsample(ref.data, 8, 0.4247, 1), atol=1e-9)
