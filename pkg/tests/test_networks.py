import pytest
import torch

from c2da.networks import Discriminator, Generator, Segmentor


@pytest.fixture(scope="module")
def seg():
    torch.manual_seed(0)
    return Segmentor().eval()


@pytest.mark.parametrize("size,bottleneck", [((64, 96), (4, 6)), ((128, 192), (8, 12))])
def test_segmentor_shapes(seg, size, bottleneck):
    x = torch.randn(2, 1, *size)
    with torch.no_grad():
        feats = seg.encode(x)
        out = seg(x)
    assert feats.shape == (2, 256, *bottleneck)
    assert out.shape == (2, 7, *size)


def test_zero_input_softmax(seg):
    with torch.no_grad():
        p = seg(torch.zeros(1, 1, 64, 96)).softmax(1)
    assert torch.isfinite(p).all()
    assert torch.allclose(p.sum(1), torch.ones(1, 64, 96), atol=1e-5)


def test_identical_slices_identical_outputs(seg):
    x = torch.randn(1, 1, 32, 48).repeat(2, 1, 1, 1)
    with torch.no_grad():
        out = seg(x)
    assert torch.equal(out[0], out[1])


def test_encode_is_prefix_of_segment(seg):
    x = torch.randn(1, 1, 32, 48)
    with torch.no_grad():
        feats = seg.encode_all(x)
        assert torch.equal(seg.decode(feats), seg(x))
        assert torch.equal(feats[-1], seg.encode(x))


def test_segmentor_rejects_bad_input(seg):
    with pytest.raises(ValueError):
        seg(torch.zeros(1, 2, 32, 48))
    with pytest.raises(ValueError):
        seg(torch.zeros(32, 48))


def test_generator_shape_and_checks():
    g = Generator().eval()
    p = torch.randn(2, 7, 64, 96).softmax(1)
    with torch.no_grad():
        out = g(p, torch.randn(2, 1, 64, 96))
        assert out.shape == (2, 1, 64, 96) and torch.isfinite(out).all()
    with pytest.raises(ValueError):
        g(torch.randn(2, 6, 64, 96), torch.randn(2, 1, 64, 96))
    with pytest.raises(ValueError):
        g(p, torch.randn(2, 2, 64, 96))


def test_generator_deterministic():
    g = Generator(base_width=8).eval()
    p = torch.randn(1, 7, 16, 24).softmax(1)
    f = torch.randn(1, 1, 16, 24)
    with torch.no_grad():
        assert torch.equal(g(p, f), g(p, f))


def test_generator_sensitive_to_both_inputs():
    torch.manual_seed(1)
    g = Generator(base_width=4).double().eval()
    p = torch.randn(1, 7, 16, 24, dtype=torch.float64).softmax(1)
    f = torch.randn(1, 1, 16, 24, dtype=torch.float64)
    h = 1e-4

    def central(fn):
        return (fn(h) - fn(-h)) / (2 * h)

    def bump_fsc(d):
        f2 = f.clone()
        f2[0, 0, 5, 7] += d
        return float(g(p, f2).mean())

    def bump_seg(d):
        p2 = p.clone()
        p2[0, 3, 5, 7] += d
        return float(g(p2, f).mean())

    with torch.no_grad():
        assert abs(central(bump_fsc)) > 0
        assert abs(central(bump_seg)) > 0


def test_discriminator_scalar_per_slice():
    d = Discriminator(256)
    out = d(torch.randn(3, 256, 4, 6))
    assert out.shape == (3,)
    prob = torch.sigmoid(out)
    assert ((prob > 0) & (prob < 1)).all()
