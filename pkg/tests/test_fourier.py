import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from c2da.fourier import (
    FourierCodes,
    FourierDecomposer,
    MaskSpec,
    build_mask,
    extract_codes,
    reconstruct,
    style_energy_fraction,
)
from oracles import codes_by_dft, mask_by_enumeration, ones_count

ALPHAS = (0.02, 0.05, 0.1, 0.2)


def test_working_size_mask_count():
    m = build_mask(MaskSpec(0.05, (128, 192)))
    assert int(m.sum()) == 247 == 13 * 19


@pytest.mark.parametrize("shape,alpha", [((16, 24), 0.1), ((15, 9), 0.2), ((12, 12), 0.0), ((8, 10, 6), 0.25)])
def test_mask_matches_enumeration(shape, alpha):
    mode = "slice2d" if len(shape) == 2 else "volume3d"
    np.testing.assert_array_equal(build_mask(MaskSpec(alpha, shape, mode)), mask_by_enumeration(shape, alpha))


def test_alpha_zero_keeps_only_dc():
    m = build_mask(MaskSpec(0.0, (20, 30)))
    assert m.sum() == 1 and m[0, 0] == 1


@settings(max_examples=30, deadline=None)
@given(H=st.integers(8, 64), W=st.integers(8, 64), alpha=st.floats(0.0, 0.49))
def test_mask_symmetry_and_count(H, W, alpha):
    m = build_mask(MaskSpec(alpha, (H, W)))
    flipped = m[(-np.arange(H)) % H][:, (-np.arange(W)) % W]
    assert np.array_equal(m, flipped)
    assert np.all(m * (1 - m) == 0)
    assert int(m.sum()) == ones_count(H, W, alpha)


def test_alpha_validation():
    for bad in (-0.01, 0.5, 1.0):
        with pytest.raises(ValueError):
            MaskSpec(bad, (16, 16))
    with pytest.raises(ValueError):
        MaskSpec(0.1, (16, 16, 4), "slice2d")


@pytest.mark.parametrize("alpha", ALPHAS)
def test_codes_match_dft_oracle(alpha):
    x = np.random.default_rng(7).normal(size=(12, 18))
    fcc, fsc = codes_by_dft(x, alpha)
    codes = extract_codes(x, alpha)
    np.testing.assert_allclose(codes.fcc, fcc, atol=1e-5)
    np.testing.assert_allclose(codes.fsc, fsc, atol=1e-5)


@pytest.mark.parametrize("alpha", ALPHAS)
def test_reconstruction(alpha):
    x = np.random.default_rng(int(alpha * 100)).normal(size=(4, 32, 48)) * 3 + 1
    out = reconstruct(extract_codes(x, alpha))
    assert np.abs(out - x).max() <= 1e-4 * (x.max() - x.min())


def test_reconstruction_independent_of_alpha():
    x = np.random.default_rng(0).normal(size=(32, 48))
    a = reconstruct(extract_codes(x, 0.02))
    b = reconstruct(extract_codes(x, 0.2))
    assert np.abs(a - b).max() <= 2e-4 * (x.max() - x.min())


def test_zero_image():
    assert np.all(reconstruct(extract_codes(np.zeros((16, 16)), 0.05)) == 0)


def test_alpha_zero_style_is_mean():
    x = np.random.default_rng(1).normal(2.0, 1.0, size=(16, 20))
    codes = extract_codes(x, 0.0)
    np.testing.assert_allclose(codes.fsc, x.mean(), atol=1e-5)
    np.testing.assert_allclose(codes.fcc, x - x.mean(), atol=1e-5)


def test_constant_image():
    codes = extract_codes(np.full((16, 24), 3.0), 0.1)
    assert np.abs(codes.fcc).max() <= 1e-5 * 3.0
    np.testing.assert_allclose(codes.fsc, 3.0, atol=1e-5)


def test_content_code_zero_mean():
    x = np.random.default_rng(2).normal(5, 2, size=(3, 24, 36))
    fcc = extract_codes(x, 0.05).fcc.astype(np.float64)
    span = x.max() - x.min()
    assert np.abs(fcc.mean(axis=(-2, -1))).max() <= 1e-6 * span


def test_volume_mode_runs_over_three_axes():
    x = np.random.default_rng(3).normal(size=(10, 12, 8))
    codes = extract_codes(x, 0.1, "volume3d")
    m = mask_by_enumeration(x.shape, 0.1)
    expected = np.fft.ifftn(np.fft.fftn(x) * m).real
    np.testing.assert_allclose(codes.fsc, expected, atol=1e-5)


def test_reconstruct_shape_mismatch():
    spec = MaskSpec(0.05, (8, 8))
    with pytest.raises(ValueError):
        reconstruct(FourierCodes(np.zeros((8, 8)), np.zeros((8, 9)), spec))


def test_style_energy_fraction():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(32, 48))
    x -= x.mean()
    assert style_energy_fraction(x, 0.0) == pytest.approx(0.0, abs=1e-6)
    # odd extents: every bin has |f| <= (n - 1) / 2 < 0.4999 n
    odd = rng.normal(size=(33, 49))
    assert style_energy_fraction(odd, 0.4999) == pytest.approx(1.0, abs=1e-9)
    for _ in range(20):
        img = rng.normal(size=(24, 40)) + rng.normal()
        vals = [style_energy_fraction(img, a) for a in ALPHAS]
        assert all(b >= a for a, b in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        style_energy_fraction(np.zeros((8, 8)), 0.05)


class TestDecomposer:
    def test_transform_and_inverse(self):
        X = np.random.default_rng(5).normal(size=(3, 16, 24))
        dec = FourierDecomposer(alpha=0.1, output="both").fit(X)
        Z = dec.transform(X)
        assert Z.shape == (3, 2, 16, 24)
        np.testing.assert_allclose(dec.inverse_transform(Z), X, atol=1e-5)

    def test_params_and_unfitted(self):
        dec = FourierDecomposer(alpha=0.02)
        assert dec.get_params() == {"alpha": 0.02, "mode": "slice2d", "output": "fcc"}
        from sklearn.exceptions import NotFittedError

        with pytest.raises(NotFittedError):
            dec.transform(np.zeros((1, 8, 8)))

    def test_bad_output(self):
        with pytest.raises(ValueError):
            FourierDecomposer(output="nope").fit(np.zeros((1, 8, 8)))
