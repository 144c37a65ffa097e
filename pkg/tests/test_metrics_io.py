import numpy as np
import pytest
from hypothesis import given, strategies as st
from skimage.metrics import structural_similarity

from viscsplat.imageio import read_ppm, to_bytes, write_ppm
from viscsplat.metrics import PSNR_CAP, psnr, ssim


def test_psnr_values(rng):
    a = rng.uniform(size=(8, 8, 3))
    assert psnr(a, a) == PSNR_CAP == 99.0
    b = np.clip(a + 0.1, 0, 1)
    mse = np.mean((a - b) ** 2)
    assert psnr(a, b) == pytest.approx(10 * np.log10(1 / mse), abs=1e-12)
    assert psnr(a, b) == psnr(b, a)


@given(st.integers(0, 2 ** 31 - 1))
def test_ssim_matches_reference(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(size=(24, 20, 3))
    b = np.clip(a + rng.normal(scale=0.1, size=a.shape), 0, 1)
    ref = structural_similarity(a, b, channel_axis=-1, gaussian_weights=True, sigma=1.5,
                                use_sample_covariance=False, data_range=1.0)
    assert abs(ssim(a, b) - ref) <= 1e-9


def test_ssim_identity(rng):
    a = rng.uniform(size=(16, 16, 3))
    assert abs(ssim(a, a) - 1.0) <= 1e-9
    with pytest.raises(ValueError):
        ssim(a, a[:8])


def test_ppm_round_trip(tmp_path, rng):
    img = rng.uniform(-0.1, 1.1, (5, 7, 3))
    path = tmp_path / "x.ppm"
    write_ppm(path, img)
    assert path.read_bytes().startswith(b"P6\n7 5\n255\n")
    back = read_ppm(path)
    np.testing.assert_array_equal(to_bytes(back), to_bytes(img))


def test_ppm_quantisation_rounds_to_nearest():
    np.testing.assert_array_equal(to_bytes(np.array([0.0, 0.5 / 255, 0.49 / 255, 1.0, 2.0])),
                                  [0, 1, 0, 255, 255])


def test_ppm_header_comment(tmp_path):
    p = tmp_path / "c.ppm"
    p.write_bytes(b"P6\n# made by hand\n1 1\n255\n" + bytes([10, 20, 30]))
    np.testing.assert_allclose(read_ppm(p)[0, 0], np.array([10, 20, 30]) / 255)
    p.write_bytes(b"P3\n1 1\n255\n1 2 3\n")
    with pytest.raises(ValueError):
        read_ppm(p)
