import math
from math import comb

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from patchfeas.archspec import LayerSpec, NetworkSpec, bundled_specs, load_spec
from patchfeas.regions import (
    BigCount, FeasibilityQuery, binom_sum, conv_region_bound, count_regions_exact, fc_network,
    fc_region_bound, feasible_region, layer_factors, layer_multiplier, random_fc_weights,
)


def conv_relu(c_in, c_out):
    return [LayerSpec("conv", (3, 3), 1, c_in, c_out), LayerSpec("relu")]


@pytest.mark.parametrize("n,k,expected", [(3, 3, 8), (3, 1, 4), (8, 4, 163), (0, 0, 1), (5, 0, 1)])
def test_binom_sum(n, k, expected):
    assert binom_sum(n, k).value == expected


@given(st.integers(0, 300), st.integers(0, 300))
def test_binom_sum_matches_direct_sum(n, k):
    assert binom_sum(n, k).value == sum(comb(n, i) for i in range(min(k, n) + 1))


def test_binom_sum_saturates():
    for n in range(65):
        for k in range(n, n + 3):
            assert binom_sum(n, k).value == 2**n


def test_binom_sum_strictly_increasing_until_saturation():
    for n in range(1, 30):
        for k in range(n):
            assert binom_sum(n, k + 1).value > binom_sum(n, k).value
            if k >= 1:
                assert binom_sum(n + 1, k).value > binom_sum(n, k).value


@pytest.mark.parametrize("n0,n1,expected", [(2, 3, 7), (5, 3, 8), (1, 3, 4)])
def test_fc_region_bound(n0, n1, expected):
    assert fc_region_bound(n0, n1).value == expected


@pytest.mark.parametrize("mode", ["as_printed", "per_layer_input"])
def test_conv_bound_single_layer(mode):
    net = NetworkSpec("one", (1, 2, 2), tuple(conv_relu(1, 2)))
    assert conv_region_bound(net, (1, 2, 2), mode).value == 163


def test_conv_bound_two_layers_as_printed():
    net = NetworkSpec("two", (1, 2, 2), tuple(conv_relu(1, 2) + conv_relu(2, 2)))
    assert conv_region_bound(net, (1, 2, 2), "as_printed").value == 163**2


def test_conv_bound_linear_network():
    net = NetworkSpec("lin", (1, 4, 4), (LayerSpec("conv", (3, 3), 1, 1, 3), LayerSpec("conv", (3, 3), 1, 3, 2)))
    assert conv_region_bound(net, (1, 4, 4)).value == 1


def test_last_layer_without_relu_contributes_nothing():
    net = NetworkSpec("n", (1, 2, 2), tuple(conv_relu(1, 2)) + (LayerSpec("conv", (1, 1), 1, 2, 5),))
    assert conv_region_bound(net, (1, 2, 2)).value == 163


def test_layer_multiplier():
    assert layer_multiplier((1, 2, 2), (2, 2, 2)).value == 163
    assert layer_multiplier((1, 1, 1), (1, 1, 1)).value == 2


def test_layer_multiplier_sweep_grows_with_input_channels():
    logs = [layer_multiplier((c0, 25, 25), (64, 25, 25)).log10 for c0 in (1, 2, 4, 8, 16, 32, 64)]
    assert logs == sorted(logs)
    # c0 = 64 saturates at 2^(64*625)
    assert logs[-1] == pytest.approx(64 * 625 * math.log10(2))


@pytest.mark.parametrize("name", bundled_specs())
def test_mode_ordering_follows_volume_growth(name):
    """as_printed >= per_layer_input iff layer inputs never exceed the patch volume.

    Both modes differ only in the binomial sum limit, so the ordering follows
    from the monotonicity of binom_sum in k; the bundled specs all widen
    channels past the 3-channel input, so per_layer_input is the larger one.
    """
    net = load_spec(name)
    patch = (3, 2, 2)
    rows = layer_factors(net, patch, "per_layer_input")
    printed = conv_region_bound(net, patch, "as_printed")
    per_layer = conv_region_bound(net, patch, "per_layer_input")
    v0 = 12
    if all(r.in_vol <= v0 for r in rows):
        assert printed >= per_layer
    if all(r.in_vol >= v0 for r in rows):
        assert per_layer >= printed


def test_mode_ordering_volume_shrinking_network():
    # 4x4x1 patch through a stride-2 conv then 1x1 convs on 2x2x2 maps
    net = NetworkSpec("shrink", (1, 4, 4), (
        LayerSpec("conv_strided", (3, 3), 2, 1, 2), LayerSpec("relu"),
        LayerSpec("conv", (1, 1), 1, 2, 2), LayerSpec("relu"),
        LayerSpec("conv", (1, 1), 1, 2, 3), LayerSpec("relu"),
    ))
    printed = conv_region_bound(net, (1, 4, 4), "as_printed")
    per_layer = conv_region_bound(net, (1, 4, 4), "per_layer_input")
    assert printed > per_layer


# -- BigCount --------------------------------------------------------------------


@given(st.integers(1, 10**15))
def test_bigcount_log10_matches_float(v):
    assert BigCount(v).log10 == pytest.approx(math.log10(v), rel=1e-9)


@given(st.integers(1, 10**400))
def test_bigcount_digits(v):
    b = BigCount(v)
    assert b.digits == len(str(v))
    assert b.log10_floor + 1 == b.digits


@pytest.mark.parametrize("p", [1, 15, 16, 300, 5000])
def test_bigcount_digits_at_powers_of_ten(p):
    assert BigCount(10**p).digits == p + 1
    assert BigCount(10**p - 1).digits == p


# -- feasibility -----------------------------------------------------------------


@pytest.mark.parametrize("log10,d,area,side", [
    (219, 19, 171, 13), (584, 19, 456, 21), (1500, 10, 1499, 38),
])
def test_feasible_region_published(log10, d, area, side):
    r = feasible_region(FeasibilityQuery.from_log10(log10, d))
    assert (r.max_area, r.max_side) == (area, side)


def test_feasible_region_strict_at_equality():
    r = feasible_region(FeasibilityQuery(19, bound=BigCount(19)))
    assert (r.max_area, r.max_side) == (0, 0)


def test_feasible_region_below_classes():
    assert feasible_region(FeasibilityQuery(19, bound=BigCount(5))).max_area == 0


def test_feasible_region_log_only_path_flags_ties():
    r = feasible_region(FeasibilityQuery(10, log10_bound=1500.0 + 1e-12))
    assert r.ambiguous
    r = feasible_region(FeasibilityQuery(19, log10_bound=219.5))
    assert not r.ambiguous
    assert r.max_area == math.ceil(219.5 / math.log10(19)) - 1


def test_feasible_region_covers():
    r = feasible_region(FeasibilityQuery.from_log10(219, 19, [(13, 13), (14, 13)]))
    assert r.covers == ((13, 13, True), (14, 13, False))


@settings(max_examples=200)
@given(st.integers(2, 10**60), st.integers(2, 40))
def test_feasible_region_bracket(bound, d):
    r = feasible_region(FeasibilityQuery(d, bound=BigCount(bound)))
    wh = r.max_area
    if bound > d:
        assert d**wh < bound <= d ** (wh + 1)
    else:
        assert wh == 0
    assert r.max_side == math.isqrt(wh)


def test_feasible_region_exact_for_large_bounds():
    bound = 19**13170 + 1
    assert feasible_region(FeasibilityQuery(19, bound=BigCount(bound))).max_area == 13170
    assert feasible_region(FeasibilityQuery(19, bound=BigCount(19**13170))).max_area == 13169


# -- grid region counting --------------------------------------------------------


def test_count_hinges_1d():
    net = fc_network([1, 3])
    weights = [(np.ones((3, 1)), np.array([1.0, 0.0, -1.0]))]
    assert count_regions_exact(net, weights, [(-2, 2)], 10001) == 4


def test_count_zero_weights():
    net = fc_network([2, 4, 3])
    weights = [(np.zeros((4, 2)), np.zeros(4)), (np.zeros((3, 4)), np.zeros(3))]
    assert count_regions_exact(net, weights, [(-1, 1), (-1, 1)], 101) == 1


def test_count_two_lines_2d():
    # two lines crossing at the origin split the box into four quadrants
    net = fc_network([2, 2])
    weights = [(np.array([[1.0, 0.3], [-0.4, 1.0]]), np.zeros(2))]
    assert count_regions_exact(net, weights, [(-1, 1), (-1, 1)], 401) == 4 == fc_region_bound(2, 2).value


def test_count_regions_limits():
    with pytest.raises(ValueError):
        count_regions_exact(fc_network([3, 2]), [(np.ones((2, 3)), np.zeros(2))], [(0, 1)] * 3, 5)
    with pytest.raises(ValueError):
        count_regions_exact(fc_network([1, 9]), [(np.ones((9, 1)), np.zeros(9))], [(0, 1)], 5)
    with pytest.raises(ValueError):
        count_regions_exact(fc_network([1, 2, 2, 2, 2]), None, [(0, 1)], 5)


@pytest.mark.parametrize("n1", [1, 2, 3, 4, 5])
def test_tight_family(n1):
    rng = np.random.default_rng(n1)
    hinges = np.sort(rng.uniform(-0.9, 0.9, n1))
    slopes = rng.choice([-1.0, 1.0], n1) * rng.uniform(0.5, 2.0, n1)
    weights = [(slopes[:, None], -slopes * hinges)]
    count = count_regions_exact(fc_network([1, n1]), weights, [(-1, 1)], 20001)
    assert count == n1 + 1 == fc_region_bound(1, n1).value


def test_random_networks_respect_bound():
    rng = np.random.default_rng(123)
    for _ in range(25):
        n0 = int(rng.integers(1, 3))
        widths = [n0] + [int(rng.integers(1, 9)) for _ in range(int(rng.integers(1, 4)))]
        net = fc_network(widths)
        w = random_fc_weights(net, rng)
        count = count_regions_exact(net, w, [(-2, 2)] * n0, 1001 if n0 == 1 else 201)
        assert count <= conv_region_bound(net, net.input_shape, "per_layer_input").value
