"""Linear-region upper bounds for ReLU networks and the derived feasible output area.

All bound arithmetic is exact (Python integers). ``log10`` views are derived
from the exact value and are only used for reporting.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .archspec import NetworkSpec, LayerSpec, propagate_shapes

MODES = ("as_printed", "per_layer_input")

_LOG10_2 = math.log10(2)


@dataclass(frozen=True, order=True)
class BigCount:
    value: int

    def __post_init__(self):
        if self.value < 0:
            raise ValueError("BigCount must be nonnegative")

    @property
    def digits(self) -> int:
        """Number of decimal digits, computed without str() on huge ints."""
        if self.value == 0:
            return 1
        d = int(self._approx_log10())
        # float estimate can be off by one next to a power of ten
        while d > 0 and 10**d > self.value:
            d -= 1
        while 10 ** (d + 1) <= self.value:
            d += 1
        return d + 1

    @property
    def log10_floor(self) -> int:
        if self.value == 0:
            raise ValueError("log10 of zero")
        return self.digits - 1

    @property
    def log10(self) -> float:
        if self.value == 0:
            return -math.inf
        return self._approx_log10()

    @property
    def log10_frac(self) -> float:
        return self.log10 - self.log10_floor

    def _approx_log10(self) -> float:
        v = self.value
        shift = max(v.bit_length() - 64, 0)
        return math.log10(v >> shift) + shift * _LOG10_2

    def __mul__(self, other: "BigCount") -> "BigCount":
        return BigCount(self.value * other.value)

    def __int__(self) -> int:
        return self.value

    def __str__(self) -> str:
        if self.value < 10**15:
            return str(self.value)
        return f"~10^{self.log10:.4f}"


def binom_sum(n: int, k: int) -> BigCount:
    """Exact sum of C(n, i) for i = 0..min(k, n)."""
    if n < 0 or k < 0:
        raise ValueError("n and k must be nonnegative")
    k = min(k, n)
    if k == n:
        return BigCount(1 << n)
    # sum the shorter tail
    if 2 * k > n:
        return BigCount((1 << n) - _partial(n, n - k - 1))
    return BigCount(_partial(n, k))


def _partial(n: int, k: int) -> int:
    total = term = 1
    for i in range(1, k + 1):
        term = term * (n - i + 1) // i
        total += term
    return total


def fc_region_bound(n0: int, n1: int) -> BigCount:
    """Region bound of one ReLU layer with ``n0`` inputs and ``n1`` units."""
    if n0 < 1 or n1 < 1:
        raise ValueError("unit counts must be positive")
    return binom_sum(n1, n0)


def _vol(shape) -> int:
    return shape[0] * shape[1] * shape[2]


def layer_multiplier(in_shape, out_shape) -> BigCount:
    if min(in_shape) < 1 or min(out_shape) < 1:
        raise ValueError("dims must be positive")
    return binom_sum(_vol(out_shape), _vol(in_shape))


@dataclass(frozen=True)
class LayerFactor:
    index: int
    kind: str
    in_vol: int
    out_vol: int
    limit: int
    factor: BigCount


def layer_factors(net: NetworkSpec, patch_input_shape, mode: str = "as_printed") -> list[LayerFactor]:
    """Per-layer factors of the convolutional bound, in layer order.

    Only layers whose output feeds a ReLU contribute. Skip connections are
    walked linearly: they add channels to a layer's input volume but impose
    no spatial constraint.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    net = propagate_shapes(net, tuple(patch_input_shape), linear=True)
    v0 = _vol(net.input_shape)
    rows = []
    for i, layer in enumerate(net.layers):
        if layer.kind == "relu" or not net.relu_followed(i):
            continue
        in_vol = _vol(net.input_of(i))
        out_vol = _vol(net.shapes[i])
        limit = v0 if mode == "as_printed" else in_vol
        rows.append(LayerFactor(i, layer.kind, in_vol, out_vol, limit, binom_sum(out_vol, limit)))
    return rows


def conv_region_bound(net: NetworkSpec, patch_input_shape, mode: str = "as_printed") -> BigCount:
    total = 1
    for row in layer_factors(net, patch_input_shape, mode):
        total *= row.factor.value
    return BigCount(total)


# -- feasibility -------------------------------------------------------------


@dataclass(frozen=True)
class FeasibilityQuery:
    classes: int
    bound: Optional[BigCount] = None
    log10_bound: Optional[float] = None
    patch_sizes: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError("need at least two classes")
        if self.bound is None and self.log10_bound is None:
            raise ValueError("give a bound or its log10")

    @classmethod
    def from_log10(cls, log10_bound: float, classes: int, patch_sizes=()) -> "FeasibilityQuery":
        # published magnitudes like 10^219 are exact powers of ten
        if float(log10_bound).is_integer() and log10_bound >= 0:
            return cls(classes, bound=BigCount(10 ** int(log10_bound)), log10_bound=float(log10_bound),
                       patch_sizes=tuple(patch_sizes))
        return cls(classes, log10_bound=float(log10_bound), patch_sizes=tuple(patch_sizes))


@dataclass(frozen=True)
class FeasibilityResult:
    max_area: int
    max_side: int
    # True when only log10 was known and it sits within 1e-9 of a class-count power
    ambiguous: bool = False
    covers: tuple[tuple[int, int, bool], ...] = field(default=())


def _exact_area(bound: int, d: int) -> int:
    if bound <= d:
        return 0
    wh = max(int(BigCount(bound).log10 / math.log10(d)) - 1, 0)
    p = d**wh
    while p >= bound:
        wh -= 1
        p //= d
    while p * d < bound:
        wh += 1
        p *= d
    return wh


def feasible_region(q: FeasibilityQuery) -> FeasibilityResult:
    """Largest output area WH with classes**WH strictly below the region bound."""
    d = q.classes
    ambiguous = False
    if q.bound is not None:
        wh = _exact_area(q.bound.value, d)
    else:
        ratio = q.log10_bound / math.log10(d)
        wh = max(math.ceil(ratio) - 1, 0)
        ambiguous = abs(ratio - round(ratio)) < 1e-9
    covers = tuple((h, w, h * w <= wh) for h, w in q.patch_sizes)
    return FeasibilityResult(wh, math.isqrt(wh), ambiguous, covers)


# Published log10 region bounds for Cityscapes-scale segmentation networks
# (19 classes), keyed by architecture then square patch side. The per-layer
# details behind them are not public, so only the area derivation is checked.
CITYSCAPES_CLASSES = 19
REFERENCE_LOG10_BOUNDS: dict[str, dict[int, int]] = {
    "unet": {2: 219, 5: 1448, 10: 5034, 20: 16842},
    "fcn8": {2: 168, 5: 1203, 10: 4646, 20: 17864},
    "mobilenetv3_large": {2: 229, 5: 1239, 10: 3446, 20: 9343},
    "deeplabv3_resnet18": {2: 584, 5: 3421, 10: 12725, 20: 48151},
}


# -- empirical region counting -------------------------------------------------


def count_regions_exact(net: NetworkSpec, weights: Sequence[tuple[np.ndarray, np.ndarray]],
                        domain: Sequence[tuple[float, float]], resolution: int,
                        chunk: int = 1 << 16) -> int:
    """Count distinct ReLU activation patterns over a dense grid on ``domain``.

    ``net`` must be fully connected with at most two inputs, three ReLU
    layers and eight units per layer. ``weights`` holds one (W, b) pair per
    parameterised layer, W shaped (out, in).
    """
    n0 = _vol(net.input_shape)
    relu_layers = sum(1 for layer in net.layers if layer.kind == "relu")
    if n0 > 2:
        raise ValueError("grid counting supports at most 2 input dimensions")
    if relu_layers > 3:
        raise ValueError("grid counting supports at most 3 ReLU layers")
    if any(layer.kind not in ("fully_connected", "relu") for layer in net.layers):
        raise ValueError("grid counting supports fully connected networks only")
    if any(layer.out_units > 8 for layer in net.layers if layer.kind == "fully_connected"):
        raise ValueError("grid counting supports at most 8 units per layer")
    if len(domain) != n0:
        raise ValueError("domain must give one interval per input")
    param_layers = [i for i, layer in enumerate(net.layers) if layer.kind != "relu"]
    if len(weights) != len(param_layers):
        raise ValueError("one (W, b) pair per fully connected layer required")

    axes = [np.linspace(lo, hi, resolution) for lo, hi in domain]
    grid = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1)
    seen = set()
    for start in range(0, len(grid), chunk):
        x = grid[start:start + chunk]
        bits = []
        for (W, b), i in zip(weights, param_layers):
            z = x @ np.asarray(W, dtype=np.float64).T + np.asarray(b, dtype=np.float64)
            if net.relu_followed(i):
                bits.append(z > 0)
                z = np.maximum(z, 0)
            x = z
        if not bits:
            return 1
        packed = np.packbits(np.concatenate(bits, axis=1), axis=1)
        seen.update(map(bytes, packed))
    return len(seen)


def fc_network(widths: Sequence[int], relu_last: bool = True, name: str = "fc") -> NetworkSpec:
    """Fully connected spec with ``widths[0]`` inputs and ReLUs after hidden layers."""
    layers: list[LayerSpec] = []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        layers.append(LayerSpec("fully_connected", in_channels=a, out_channels=b))
        if relu_last or i < len(widths) - 2:
            layers.append(LayerSpec("relu"))
    return NetworkSpec(name, (widths[0], 1, 1), tuple(layers))


def random_fc_weights(net: NetworkSpec, rng: np.random.Generator) -> list[tuple[np.ndarray, np.ndarray]]:
    """Generic Gaussian weights; biases scaled so hinges fall inside [-1, 1]-ish boxes."""
    out = []
    for layer in net.layers:
        if layer.kind == "fully_connected":
            W = rng.standard_normal((layer.out_units, layer.in_units))
            b = rng.standard_normal(layer.out_units) * 0.5
            out.append((W, b))
    return out
