import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from patchfeas.archspec import LayerSpec, NetworkSpec, load_spec, propagate_shapes
from patchfeas.geometry import RectPlacement
from patchfeas.rfield import influence_region, receptive_field
from patchfeas.segnet.engine import Network, init_params


def net_of(*layers, shape=(1, 16, 16)):
    return propagate_shapes(NetworkSpec("t", shape, tuple(layers)))


def c(k, s=1, kind=None, cin=1, cout=1):
    return LayerSpec(kind or ("conv_strided" if s > 1 else "conv"), (k, k), s, cin, cout)


def test_single_conv():
    rf = receptive_field(net_of(c(3))).final
    assert (rf.rf_h, rf.jump_h) == (3, 1)


def test_two_convs():
    assert receptive_field(net_of(c(3), c(3))).final.rf_h == 5


def test_strided_middle():
    layers = receptive_field(net_of(c(3), c(3, 2), c(3))).layers
    assert [l.rf_h for l in layers] == [3, 5, 9]
    assert [l.jump_h for l in layers] == [1, 2, 2]


def test_transpose_divides_jump():
    rf = receptive_field(net_of(c(3, 2), c(3, 2, "conv_transpose"))).final
    assert rf.jump_h == 1
    assert rf.rf_h == 5


def test_rf_nondecreasing_unet():
    layers = receptive_field(load_spec("unet_toy")).layers
    assert all(a.rf_h <= b.rf_h for a, b in zip(layers, layers[1:]))


def test_influence_identity_depth():
    net = net_of(LayerSpec("relu"))
    p = RectPlacement(3, 4, 2, 5)
    assert influence_region(net, p) == p
    assert influence_region(net_of(), p) == p


def test_influence_dilates_by_kernel():
    assert influence_region(net_of(c(3)), RectPlacement(7, 7, 2, 2)) == RectPlacement(6, 6, 4, 4)


def test_influence_full_patch():
    net = propagate_shapes(load_spec("unet_toy"))
    assert influence_region(net, RectPlacement(0, 0, 64, 64)) == RectPlacement(0, 0, 64, 64)


def test_influence_out_of_bounds():
    with pytest.raises(ValueError):
        influence_region(net_of(c(3)), RectPlacement(15, 0, 2, 2))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 60), st.integers(0, 60), st.integers(1, 4), st.integers(1, 4), st.integers(0, 3), st.integers(0, 3))
def test_influence_monotone(top, left, h, w, dh, dw):
    net = propagate_shapes(load_spec("unet_toy"))
    small = RectPlacement(min(top, 64 - h), min(left, 64 - w), h, w)
    big = RectPlacement(small.top, small.left, min(h + dh, 64 - small.top), min(w + dw, 64 - small.left))
    assert influence_region(net, big).contains(influence_region(net, small))


@pytest.mark.parametrize("seed", range(10))
def test_gradient_support(seed):
    """Output pixels outside the influence box have exactly zero patch gradient."""
    spec = load_spec("unet_toy")
    net = Network(init_params(spec, seed, dtype=np.float64))
    rng = np.random.default_rng(seed)
    x = rng.random((1, 3, 64, 64))
    top, left = (int(v) for v in rng.integers(0, 61, 2))
    patch = RectPlacement(top, left, 4, 4)
    box = influence_region(propagate_shapes(spec), patch)
    inside = box.to_mask((64, 64))
    logits, tape = net.forward(x)
    # one random channel of every output pixel: the gradient of each pixel is
    # recovered separately by probing with disjoint one-hot rows below
    probe_out = rng.standard_normal(logits.shape) * ~inside
    dx, _ = net.backward(tape, probe_out, need_params=False)
    assert np.all(dx[0, :, top:top + 4, left:left + 4] == 0)
    probe_in = rng.standard_normal(logits.shape) * inside
    dx, _ = net.backward(tape, probe_in, need_params=False)
    assert np.abs(dx[0, :, top:top + 4, left:left + 4]).max() > 0
