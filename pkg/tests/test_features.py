import numpy as np
import pytest

from archgen import random_arch
from regiongeo.boxes import Box, EmptyBoxError
from regiongeo.features import (Conv, ConvNet, DimensionError, MaxPool, ReLU, crop_region_forward,
                                crop_resize, forward, multi_scale_forward, probe_net, resize_image,
                                scaled_size)
from regiongeo.receptive import LayerGeom, layer_sizes


def naive_conv(x, w, b, S, P):
    F = w.shape[0]
    xp = np.zeros((x.shape[0] + 2 * P, x.shape[1] + 2 * P, x.shape[2]))
    xp[P:P + x.shape[0], P:P + x.shape[1]] = x
    ho = (xp.shape[0] - F) // S + 1
    wo = (xp.shape[1] - F) // S + 1
    out = np.zeros((ho, wo, w.shape[3]))
    for i in range(ho):
        for j in range(wo):
            for o in range(w.shape[3]):
                acc = b[o]
                for a in range(F):
                    for c in range(F):
                        for k in range(x.shape[2]):
                            acc += xp[i * S + a, j * S + c, k] * w[a, c, k, o]
                out[i, j, o] = acc
    return out


def random_net(rng, linear=False):
    arch = random_arch(rng, 3, odd_only=False)
    layers, c = [], int(rng.integers(1, 4))
    c_in = c
    for g in arch:
        if not linear and rng.random() < 0.3:
            layers.append(MaxPool(g.filter_size, g.stride, min(g.padding, g.filter_size - 1)))
            continue
        c_out = int(rng.integers(1, 4))
        layers.append(Conv(rng.normal(size=(g.filter_size, g.filter_size, c_in, c_out)), rng.normal(size=c_out), g.stride, g.padding))
        if not linear:
            layers.append(ReLU())
        c_in = c_out
    if not any(isinstance(l, Conv) for l in layers):
        layers.insert(0, Conv(rng.normal(size=(1, 1, c, 2)), np.zeros(2)))
    return ConvNet(layers), c


def test_identity_net():
    net = ConvNet([Conv(np.ones((1, 1, 1, 1)), np.zeros(1))])
    img = np.random.default_rng(0).normal(size=(5, 7, 1))
    assert np.array_equal(forward(net, img), img)


def test_all_ones_conv_on_constant():
    net = ConvNet([Conv(np.ones((3, 3, 1, 1)), np.zeros(1))])
    out = net.forward(np.full((6, 6), 2.0))
    assert out.shape == (4, 4, 1)
    assert np.all(out == 18.0)


def test_maxpool_example():
    out = ConvNet([MaxPool(2, 2)]).forward(np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert out.tolist() == [[[4.0]]]


def test_maxpool_padding_never_wins():
    out = MaxPool(3, 1, 1)(-np.ones((2, 2, 1)))
    assert np.all(out == -1)


def test_conv_matches_naive_loops(rng):
    for _ in range(30):
        F, S, P = int(rng.integers(1, 5)), int(rng.integers(1, 4)), int(rng.integers(0, 3))
        cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        x = rng.normal(size=(int(rng.integers(F, 12)), int(rng.integers(F, 12)), cin))
        w, b = rng.normal(size=(F, F, cin, cout)), rng.normal(size=cout)
        assert np.allclose(Conv(w, b, S, P)(x), naive_conv(x, w, b, S, P), rtol=1e-12, atol=1e-12)


def test_shape_contract(rng):
    for _ in range(50):
        net, c = random_net(rng)
        n = int(rng.integers(20, 40))
        sizes = layer_sizes(net.architecture(), n)
        if min(sizes) < 1:
            with pytest.raises(DimensionError):
                net.forward(np.zeros((n, n, c)))
            continue
        out = net.forward(rng.normal(size=(n, n, c)))
        assert out.shape[:2] == (sizes[-1], sizes[-1])
        assert net.output_shape(n, n) == (sizes[-1], sizes[-1])


def test_linearity(rng):
    for _ in range(20):
        net, c = random_net(rng, linear=True)
        for l in net.layers:
            l.bias[:] = 0
        x1, x2 = rng.normal(size=(2, 30, 30, c))
        a, b = rng.normal(size=2)
        lhs = net.forward(a * x1 + b * x2)
        rhs = a * net.forward(x1) + b * net.forward(x2)
        assert np.max(np.abs(lhs - rhs)) <= 1e-6 * max(1.0, np.max(np.abs(rhs)))


def test_translation_covariance(rng):
    net = ConvNet([Conv(rng.normal(size=(3, 3, 1, 2)), np.zeros(2), 1, 1), ReLU(), MaxPool(2, 2),
                   Conv(rng.normal(size=(3, 3, 2, 2)), np.zeros(2), 2, 0)])
    alpha = 4
    img = rng.normal(size=(40, 40, 1))
    shifted = np.zeros_like(img)
    shifted[alpha:, alpha:] = img[:-alpha, :-alpha]
    a, b = net.forward(img), net.forward(shifted)
    # away from the borders, features move by one cell
    assert np.allclose(b[3:-1, 3:-1], a[2:-2, 2:-2])


def test_dimension_error_names_layer():
    net = ConvNet([Conv(np.ones((3, 3, 1, 1)), np.zeros(1)), MaxPool(2, 2), Conv(np.ones((5, 5, 1, 1)), np.zeros(1))])
    with pytest.raises(DimensionError, match="layer 2"):
        net.forward(np.zeros((8, 8)))


def test_probe_net_architecture():
    arch = [LayerGeom(3, 2, 1), LayerGeom(5, 1, 2)]
    assert probe_net(arch).architecture() == arch


def test_save_load_round_trip(tmp_path, rng):
    net, c = random_net(rng)
    net.save(tmp_path / "net.json")
    back = ConvNet.load(tmp_path / "net.json")
    x = rng.normal(size=(30, 30, c))
    try:
        ref = net.forward(x)
    except DimensionError:
        return
    assert np.array_equal(back.forward(x), ref)
    assert back.architecture() == net.architecture()


def test_resize_examples():
    img = np.random.default_rng(1).normal(size=(5, 6, 2))
    assert np.array_equal(resize_image(img, 5, 6), img)
    out = resize_image(np.array([[0.0, 2.0], [0.0, 2.0]]), 2, 1)
    assert out[:, :, 0].tolist() == [[1.0], [1.0]]
    assert np.allclose(resize_image(np.full((3, 4, 1), 0.7), 11, 5), 0.7)


def naive_bilinear(img, th, tw):
    H, W = img.shape[:2]
    out = np.zeros((th, tw, img.shape[2]))
    for i in range(th):
        for j in range(tw):
            y = min(max((i + 0.5) * H / th - 0.5, 0), H - 1)
            x = min(max((j + 0.5) * W / tw - 0.5, 0), W - 1)
            y0, x0 = int(np.floor(y)), int(np.floor(x))
            y1, x1 = min(y0 + 1, H - 1), min(x0 + 1, W - 1)
            fy, fx = y - y0, x - x0
            out[i, j] = ((1 - fy) * ((1 - fx) * img[y0, x0] + fx * img[y0, x1])
                         + fy * ((1 - fx) * img[y1, x0] + fx * img[y1, x1]))
    return out


def test_resize_matches_definition(rng):
    for _ in range(20):
        img = rng.normal(size=(int(rng.integers(1, 9)), int(rng.integers(1, 9)), 2))
        th, tw = int(rng.integers(1, 13)), int(rng.integers(1, 13))
        assert np.allclose(resize_image(img, th, tw), naive_bilinear(img, th, tw), atol=1e-12)


def test_crop_resize_integer_region_equals_crop_then_resize(rng):
    img = rng.normal(size=(12, 15, 3))
    out = crop_resize(img, Box(2, 3, 9, 11), 5, 4)
    assert np.allclose(out, resize_image(img[2:9, 3:11], 5, 4), atol=1e-12)


def test_crop_region_forward_examples(rng):
    net = ConvNet([Conv(rng.normal(size=(3, 3, 1, 2)), np.zeros(2), 1, 1), ReLU()])
    img = rng.normal(size=(9, 9, 1))
    assert np.allclose(crop_region_forward(net, img, Box(0, 0, 9, 9), 9), net.forward(img))
    const = crop_region_forward(net, np.full((9, 9, 1), 3.0), Box(1, 2, 6, 8), 7)
    assert np.allclose(const[1:-1, 1:-1], const[3, 3])
    a = crop_region_forward(net, img, Box(0, 0, 4, 4), 6)
    b = crop_region_forward(net, img, Box(5, 5, 9, 9), 6)
    assert not np.allclose(a, b)
    with pytest.raises(EmptyBoxError):
        crop_resize(img, Box(20, 20, 25, 25), 3, 3)


def test_scaled_size_rounds_half_up():
    assert scaled_size(5, 3, 0.5) == (3, 2)
    assert scaled_size(100, 60, 1.25) == (125, 75)
    assert scaled_size(1, 1, 0.1) == (1, 1)


def test_multi_scale_examples(rng):
    net = ConvNet([Conv(np.ones((1, 1, 1, 1)), np.zeros(1))])
    img = rng.normal(size=(4, 4, 1))
    [(s, f)] = multi_scale_forward(net, img, [1.0])
    assert s == 1.0 and np.array_equal(f, net.forward(img))
    (_, f1), (_, f2) = multi_scale_forward(net, img, [1.0, 1.0])
    assert np.array_equal(f1, f2)
    [(_, half)] = multi_scale_forward(net, img, [0.5])
    assert np.array_equal(half, resize_image(img, 2, 2))


def test_multi_scale_errors_name_scale():
    net = ConvNet([Conv(np.ones((5, 5, 1, 1)), np.zeros(1))])
    with pytest.raises(DimensionError, match="scale 0.25"):
        multi_scale_forward(net, np.zeros((8, 8)), [1.0, 0.25])
    with pytest.raises(ValueError):
        multi_scale_forward(net, np.zeros((8, 8)), [0.0])
