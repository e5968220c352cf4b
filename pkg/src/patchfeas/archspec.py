"""Declarative network architecture descriptions.

A spec file is a JSON document::

    {"name": "toy", "input": [3, 64, 64],
     "layers": [{"kind": "conv", "kernel": [3, 3], "stride": 1,
                 "in_channels": 3, "out_channels": 8},
                {"kind": "relu"}, ...]}

All convolutions use same padding. ``conv_strided`` maps a spatial size ``n``
to ``ceil(n / stride)`` and ``conv_transpose`` maps ``n`` to ``n * stride``.
A layer may carry ``"concat_from": j``; its input is then the channel
concatenation of the previous layer's output and the output of layer ``j``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Optional

CONV_KINDS = ("conv", "conv_strided", "conv_transpose")
KINDS = CONV_KINDS + ("relu", "fully_connected")

_CONV_KEYS = {"kind", "kernel", "stride", "in_channels", "out_channels", "concat_from"}
_FC_KEYS = {"kind", "in_units", "out_units"}
_RELU_KEYS = {"kind"}
_TOP_KEYS = {"name", "input", "layers"}

Shape = tuple[int, int, int]


class SpecError(ValueError):
    """Base class for architecture spec problems."""


class SpecSyntaxError(SpecError):
    def __init__(self, msg: str, line: int, column: int):
        super().__init__(f"{msg} (line {line}, column {column})")
        self.line = line
        self.column = column


class SpecSemanticError(SpecError):
    pass


class ChannelMismatchError(SpecError):
    pass


class ShapeCollapseError(SpecError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernel: tuple[int, int] = (1, 1)
    stride: int = 1
    in_channels: int = 0
    out_channels: int = 0
    concat_from: Optional[int] = None

    @property
    def has_params(self) -> bool:
        return self.kind != "relu"

    @property
    def kernel_h(self) -> int:
        return self.kernel[0]

    @property
    def kernel_w(self) -> int:
        return self.kernel[1]

    # fully connected layers reuse the channel fields for their unit counts
    @property
    def in_units(self) -> int:
        return self.in_channels

    @property
    def out_units(self) -> int:
        return self.out_channels

    def to_dict(self) -> dict:
        if self.kind == "relu":
            return {"kind": "relu"}
        if self.kind == "fully_connected":
            return {"kind": self.kind, "in_units": self.in_channels, "out_units": self.out_channels}
        d = {
            "kind": self.kind,
            "kernel": list(self.kernel),
            "stride": self.stride,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
        }
        if self.concat_from is not None:
            d["concat_from"] = self.concat_from
        return d


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    input_shape: Shape
    layers: tuple[LayerSpec, ...]
    # output (c, h, w) of every layer, filled by propagate_shapes
    shapes: Optional[tuple[Shape, ...]] = field(default=None, compare=False)

    def __len__(self) -> int:
        return len(self.layers)

    def input_of(self, index: int) -> Shape:
        """Shape of the tensor entering layer ``index`` (after any concat)."""
        if self.shapes is None:
            raise SpecSemanticError("shapes not propagated")
        prev = self.input_shape if index == 0 else self.shapes[index - 1]
        layer = self.layers[index]
        if layer.concat_from is not None:
            skip = self.shapes[layer.concat_from]
            return (prev[0] + skip[0], prev[1], prev[2])
        return prev

    def relu_followed(self, index: int) -> bool:
        nxt = index + 1
        return nxt < len(self.layers) and self.layers[nxt].kind == "relu"

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input": list(self.input_shape),
            "layers": [layer.to_dict() for layer in self.layers],
        }


def _positive_int(value, what: str, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise SpecSemanticError(f"{where}: {what} must be a positive integer, got {value!r}")
    return value


def _parse_layer(raw, index: int) -> LayerSpec:
    where = f"layer {index}"
    if not isinstance(raw, dict):
        raise SpecSemanticError(f"{where}: expected an object")
    kind = raw.get("kind")
    if kind not in KINDS:
        raise SpecSemanticError(f"{where}: unknown kind {kind!r}")
    allowed = _RELU_KEYS if kind == "relu" else _FC_KEYS if kind == "fully_connected" else _CONV_KEYS
    unknown = set(raw) - allowed
    if unknown:
        raise SpecSemanticError(f"{where}: unknown keys {sorted(unknown)} for kind {kind!r}")
    if kind == "relu":
        return LayerSpec("relu")
    if kind == "fully_connected":
        for key in ("in_units", "out_units"):
            if key not in raw:
                raise SpecSemanticError(f"{where}: missing {key!r}")
        return LayerSpec(
            kind,
            in_channels=_positive_int(raw["in_units"], "in_units", where),
            out_channels=_positive_int(raw["out_units"], "out_units", where),
        )
    for key in ("kernel", "in_channels", "out_channels"):
        if key not in raw:
            raise SpecSemanticError(f"{where}: missing {key!r}")
    kernel = raw["kernel"]
    if not isinstance(kernel, list) or len(kernel) != 2:
        raise SpecSemanticError(f"{where}: kernel must be [kh, kw]")
    kernel = (_positive_int(kernel[0], "kernel_h", where), _positive_int(kernel[1], "kernel_w", where))
    stride = _positive_int(raw.get("stride", 1), "stride", where)
    concat_from = raw.get("concat_from")
    if concat_from is not None:
        if isinstance(concat_from, bool) or not isinstance(concat_from, int) or not 0 <= concat_from < index - 1:
            raise SpecSemanticError(f"{where}: concat_from must index an earlier, non-adjacent layer")
    return LayerSpec(
        kind,
        kernel=kernel,
        stride=stride,
        in_channels=_positive_int(raw["in_channels"], "in_channels", where),
        out_channels=_positive_int(raw["out_channels"], "out_channels", where),
        concat_from=concat_from,
    )


def _check_channels(input_channels: int, layers: tuple[LayerSpec, ...]) -> None:
    out_channels = []
    current = input_channels
    for i, layer in enumerate(layers):
        if layer.kind != "relu":
            expected = current
            if layer.concat_from is not None:
                expected += out_channels[layer.concat_from]
            # fully connected layers flatten; their fan-in is checked against shapes later
            if layer.kind != "fully_connected" and layer.in_channels != expected:
                raise ChannelMismatchError(
                    f"layer {i} ({layer.kind}) expects {layer.in_channels} input channels, receives {expected}"
                )
            current = layer.out_channels
        out_channels.append(current)


def from_dict(doc) -> NetworkSpec:
    if not isinstance(doc, dict):
        raise SpecSemanticError("top level must be an object")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise SpecSemanticError(f"unknown top-level keys {sorted(unknown)}")
    for key in _TOP_KEYS:
        if key not in doc:
            raise SpecSemanticError(f"missing top-level key {key!r}")
    if not isinstance(doc["name"], str):
        raise SpecSemanticError("name must be a string")
    shape = doc["input"]
    if not isinstance(shape, list) or len(shape) != 3:
        raise SpecSemanticError("input must be [c, h, w]")
    input_shape = tuple(_positive_int(v, "input dim", "input") for v in shape)
    if not isinstance(doc["layers"], list):
        raise SpecSemanticError("layers must be a list")
    layers = tuple(_parse_layer(raw, i) for i, raw in enumerate(doc["layers"]))
    _check_channels(input_shape[0], layers)
    return NetworkSpec(doc["name"], input_shape, layers)


def parse_spec(text: str) -> NetworkSpec:
    """Parse and validate a spec document; shapes are left unfilled."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SpecSyntaxError(exc.msg, exc.lineno, exc.colno) from None
    return from_dict(doc)


def print_spec(net: NetworkSpec) -> str:
    return json.dumps(net.to_dict(), indent=2) + "\n"


def load_spec(path) -> NetworkSpec:
    """Load a spec from a path, or by bare name from the bundled reference specs."""
    p = Path(path)
    if not p.exists() and not p.suffix:
        p = Path(str(path) + ".json")
    if p.exists():
        return parse_spec(p.read_text(encoding="utf-8"))
    ref = resources.files("patchfeas.specs").joinpath(p.name)
    if ref.is_file():
        return parse_spec(ref.read_text(encoding="utf-8"))
    raise FileNotFoundError(path)


def bundled_specs() -> list[str]:
    return sorted(p.name for p in resources.files("patchfeas.specs").iterdir() if p.name.endswith(".json"))


def same_padding(size: int, kernel: int, stride: int) -> tuple[int, int, int]:
    """(output size, pad before, pad after) of a same-padded strided conv."""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total // 2, total - total // 2


def layer_padding(layer: LayerSpec, in_size: int, axis: int) -> tuple[int, int]:
    """Padding of the forward conv that ``layer`` is (or is the adjoint of)."""
    k = layer.kernel[axis]
    if layer.kind == "conv_transpose":
        _, before, after = same_padding(in_size * layer.stride, k, layer.stride)
    else:
        _, before, after = same_padding(in_size, k, layer.stride)
    return before, after


def _conv_out(size: int, layer: LayerSpec) -> int:
    if layer.kind == "conv_strided":
        return -(-size // layer.stride)
    if layer.kind == "conv_transpose":
        return size * layer.stride
    return size


def propagate_shapes(net: NetworkSpec, input_shape: Optional[Shape] = None, *, linear: bool = False) -> NetworkSpec:
    """Fill per-layer output shapes for ``input_shape`` (default: the spec's own).

    With ``linear=True`` skip connections only contribute channels, never a
    spatial constraint; this is how the bounds walk treats U-Net style specs
    fed with inputs whose size is not a multiple of the total stride.
    """
    shape = tuple(input_shape) if input_shape is not None else net.input_shape
    if len(shape) != 3 or min(shape) < 1:
        raise ShapeCollapseError(f"invalid input shape {shape}")
    shapes: list[Shape] = []
    current: Shape = shape  # type: ignore[assignment]
    for i, layer in enumerate(net.layers):
        if layer.kind == "relu":
            shapes.append(current)
            continue
        c, h, w = current
        if layer.concat_from is not None:
            skip = shapes[layer.concat_from]
            if not linear and skip[1:] != (h, w):
                raise ShapeCollapseError(
                    f"layer {i}: skip from layer {layer.concat_from} has spatial {skip[1:]}, expected {(h, w)}"
                )
            c += skip[0]
        if layer.kind == "fully_connected":
            if c * h * w != layer.in_units:
                raise ChannelMismatchError(f"layer {i}: fully_connected expects {layer.in_units} inputs, receives {c * h * w}")
            current = (layer.out_units, 1, 1)
        else:
            if c != layer.in_channels:
                raise ChannelMismatchError(f"layer {i}: expects {layer.in_channels} channels, receives {c}")
            current = (layer.out_channels, _conv_out(h, layer), _conv_out(w, layer))
        if min(current) < 1:
            raise ShapeCollapseError(f"layer {i}: shape collapsed to {current}")
        shapes.append(current)
    return replace(net, input_shape=shape, shapes=tuple(shapes))
