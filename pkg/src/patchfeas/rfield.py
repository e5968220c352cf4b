"""Receptive fields and the output support of an input patch."""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from .archspec import NetworkSpec, layer_padding, propagate_shapes
from .geometry import RectPlacement


@dataclass(frozen=True)
class RFLayer:
    index: int
    kind: str
    rf_h: Fraction
    rf_w: Fraction
    jump_h: Fraction
    jump_w: Fraction
    offset_h: Fraction
    offset_w: Fraction


@dataclass(frozen=True)
class RFDescriptor:
    layers: tuple[RFLayer, ...]

    @property
    def final(self) -> RFLayer:
        return self.layers[-1]


def _axis_step(rf, jump, start, k, s, pad, transposed):
    if transposed:
        # output p gathers inputs q with q*s - pad <= p <= q*s - pad + k - 1
        jump_out = jump / s
        rf_out = rf + (k - 1) * jump_out
        start_out = start + Fraction(2 * pad - (k - 1), 2 * s) * jump
    else:
        jump_out = jump * s
        rf_out = rf + (k - 1) * jump
        start_out = start + Fraction(k - 1 - 2 * pad, 2) * jump
    return rf_out, jump_out, start_out


def receptive_field(net: NetworkSpec) -> RFDescriptor:
    """Per-layer receptive field size, jump and first-pixel centre offset.

    Walks the layer list linearly (skip branches are ignored, so this is the
    field of the deepest path). Jumps are kept as exact fractions so
    transposed convolutions do not accumulate rounding.
    """
    if net.shapes is None:
        net = propagate_shapes(net)
    rf_h = rf_w = Fraction(1)
    j_h = j_w = Fraction(1)
    s_h = s_w = Fraction(0)
    rows = []
    for i, layer in enumerate(net.layers):
        if layer.kind in ("conv", "conv_strided", "conv_transpose"):
            _, in_h, in_w = net.input_of(i)
            t = layer.kind == "conv_transpose"
            pad_h = layer_padding(layer, in_h, 0)[0]
            pad_w = layer_padding(layer, in_w, 1)[0]
            rf_h, j_h, s_h = _axis_step(rf_h, j_h, s_h, layer.kernel_h, layer.stride, pad_h, t)
            rf_w, j_w, s_w = _axis_step(rf_w, j_w, s_w, layer.kernel_w, layer.stride, pad_w, t)
        elif layer.kind == "fully_connected":
            rf_h = max(rf_h, Fraction(net.input_shape[1]))
            rf_w = max(rf_w, Fraction(net.input_shape[2]))
        rows.append(RFLayer(i, layer.kind, rf_h, rf_w, j_h, j_w, s_h, s_w))
    return RFDescriptor(tuple(rows))


def _forward_interval(a, b, size_in, size_out, k, s, pad, transposed):
    """Output index range touched by nonzero inputs in [a, b] (inclusive)."""
    if transposed:
        lo, hi = a * s - pad, b * s - pad + k - 1
    else:
        # output o reads inputs o*s - pad .. o*s - pad + k - 1
        lo = -((-(a - k + 1 + pad)) // s)
        hi = (b + pad) // s
    lo, hi = max(lo, 0), min(hi, size_out - 1)
    return (lo, hi) if lo <= hi else None


def _union(x, y):
    if x is None:
        return y
    if y is None:
        return x
    return (min(x[0], y[0]), max(x[1], y[1]))


def influence_region(net: NetworkSpec, patch) -> RectPlacement:
    """Box of output pixels whose receptive field intersects the patch.

    ``patch`` is anything with ``top``, ``left``, ``height`` and ``width``.
    Propagates the bounding box of possibly-nonzero perturbation exactly
    through every layer (same padding, clipped to the map); concatenated
    skips contribute the union of both branches.
    """
    if net.shapes is None:
        net = propagate_shapes(net)
    _, H, W = net.input_shape
    if patch.top < 0 or patch.left < 0 or patch.height < 1 or patch.width < 1 \
            or patch.top + patch.height > H or patch.left + patch.width > W:
        raise ValueError("patch out of bounds")
    box = ((patch.top, patch.top + patch.height - 1), (patch.left, patch.left + patch.width - 1))
    boxes = []
    for i, layer in enumerate(net.layers):
        if layer.kind == "relu":
            boxes.append(box)
            continue
        c, in_h, in_w = net.input_of(i)
        _, out_h, out_w = net.shapes[i]
        if layer.concat_from is not None:
            skip = boxes[layer.concat_from]
            box = (_union(box[0], skip[0]), _union(box[1], skip[1]))
        if box[0] is None or box[1] is None:
            box = (None, None)
        elif layer.kind == "fully_connected":
            box = ((0, out_h - 1), (0, out_w - 1))
        else:
            t = layer.kind == "conv_transpose"
            rows = _forward_interval(*box[0], in_h, out_h, layer.kernel_h, layer.stride,
                                     layer_padding(layer, in_h, 0)[0], t)
            cols = _forward_interval(*box[1], in_w, out_w, layer.kernel_w, layer.stride,
                                     layer_padding(layer, in_w, 1)[0], t)
            box = (rows, cols) if rows and cols else (None, None)
        boxes.append(box)
    (r0, r1), (c0, c1) = box
    return RectPlacement(r0, c0, r1 - r0 + 1, c1 - c0 + 1)
