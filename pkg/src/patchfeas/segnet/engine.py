"""Minimal forward/backward engine for spec-described conv nets.

Every convolution is same-padded. A transposed convolution is the exact
adjoint of the strided convolution with the same kernel mapping the larger
map to the smaller one, so ``<conv(x), y> == <x, conv_transpose(y)>``.
Weights follow the usual layouts: conv ``(out, in, kh, kw)``, transposed
conv ``(in, out, kh, kw)``, fully connected ``(out, in)``.

Layer ops work on channels-last activations ``(N, H, W, C)`` so im2col
gathers contiguous channel vectors; ``Network`` takes and returns the
conventional ``(N, C, H, W)``.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..archspec import NetworkSpec, LayerSpec, parse_spec, print_spec, propagate_shapes, same_padding

DEBUG = bool(os.environ.get("PATCHFEAS_DEBUG"))

MODEL_MAGIC = b"PSEG1"


class ShapeMismatchError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class Tensor:
    data: np.ndarray
    grad: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        elif self.grad.shape != self.data.shape:
            raise ShapeMismatchError("grad buffer must match data shape")

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad[...] = 0


def _check(name, a):
    if DEBUG and not np.all(np.isfinite(a)):
        raise NonFiniteError(f"non-finite values after {name}")
    return a


# -- im2col (channels-last) ----------------------------------------------------


def _pads(h, w, kh, kw, s):
    oh, pt, pb = same_padding(h, kh, s)
    ow, pl, pr = same_padding(w, kw, s)
    return oh, ow, (pt, pb, pl, pr)


def im2col(x, kh, kw, s, oh, ow, pads):
    """(N, H, W, C) -> (N*oh*ow, kh*kw*C) patch matrix."""
    pt, pb, pl, pr = pads
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::s, ::s][:, :oh, :ow]
    n, c = x.shape[0], x.shape[3]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * oh * ow, kh * kw * c)


def col2im(cols, x_shape, kh, kw, s, oh, ow, pads):
    """Adjoint of im2col: scatter-add patch rows back onto an (N, H, W, C) map."""
    n, h, w, c = x_shape
    pt, pb, pl, pr = pads
    d = cols.reshape(n, oh, ow, kh, kw, c)
    out = np.zeros((n, h + pt + pb, w + pl + pr, c), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + s * (oh - 1) + 1:s, j:j + s * (ow - 1) + 1:s] += d[:, :, :, i, j]
    return out[:, pt:pt + h, pl:pl + w]


def _wmat(w):
    # (out, in, kh, kw) -> (out, kh*kw*in), matching im2col column order
    return w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1)


def _wmat_grad(dm, shape):
    o, c, kh, kw = shape
    return dm.reshape(o, kh, kw, c).transpose(0, 3, 1, 2)


# -- layer ops (activations are (N, H, W, C)) ------------------------------------


def conv2d_fwd(x, w, b, stride=1):
    n, h, wd, c = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeMismatchError(f"conv expects {ci} input channels, got {c}")
    oh, ow, pads = _pads(h, wd, kh, kw, stride)
    cols = im2col(x, kh, kw, stride, oh, ow, pads)
    y = cols @ _wmat(w).T
    if b is not None:
        y += b
    return _check("conv", y.reshape(n, oh, ow, o)), (cols, x.shape, stride, pads, oh, ow)


def conv2d_bwd(dy, w, cache, need_dx=True, need_params=True):
    cols, x_shape, stride, pads, oh, ow = cache
    o, c, kh, kw = w.shape
    dy2 = dy.reshape(-1, o)
    dw = db = dx = None
    if need_params:
        dw = _wmat_grad(dy2.T @ cols, w.shape)
        db = dy2.sum(axis=0)
    if need_dx:
        dx = col2im(dy2 @ _wmat(w), x_shape, kh, kw, stride, oh, ow, pads)
    return dx, dw, db


# strided convolutions are the same op; the aliases mirror the layer kinds
conv_strided_fwd = conv2d_fwd
conv_strided_bwd = conv2d_bwd


def conv_transpose_fwd(x, w, b, stride=2):
    n, h, wd, c = x.shape
    ci, o, kh, kw = w.shape
    if ci != c:
        raise ShapeMismatchError(f"conv_transpose expects {ci} input channels, got {c}")
    out_shape = (n, h * stride, wd * stride, o)
    _, _, pads = _pads(out_shape[1], out_shape[2], kh, kw, stride)
    x2 = x.reshape(-1, c)
    y = col2im(x2 @ _tmat(w), out_shape, kh, kw, stride, h, wd, pads)
    if b is not None:
        y = y + b
    return _check("conv_transpose", np.ascontiguousarray(y)), (x2, x.shape, stride, pads)


def _tmat(w):
    # (in, out, kh, kw) -> (in, kh*kw*out)
    return w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1)


def conv_transpose_bwd(dy, w, cache, need_dx=True, need_params=True):
    x2, x_shape, stride, pads = cache
    ci, o, kh, kw = w.shape
    n, h, wd, c = x_shape
    cols = im2col(dy, kh, kw, stride, h, wd, pads)
    dw = db = dx = None
    if need_params:
        dw = (x2.T @ cols).reshape(ci, kh, kw, o).transpose(0, 3, 1, 2)
        db = dy.sum(axis=(0, 1, 2))
    if need_dx:
        dx = (cols @ _tmat(w).T).reshape(n, h, wd, c)
    return dx, dw, db


def relu_fwd(x):
    mask = x > 0
    return np.where(mask, x, 0).astype(x.dtype, copy=False), mask


def relu_bwd(dy, mask):
    return np.where(mask, dy, 0).astype(dy.dtype, copy=False)


def fc_fwd(x, w, b):
    n = x.shape[0]
    flat = x.reshape(n, -1)
    if flat.shape[1] != w.shape[1]:
        raise ShapeMismatchError(f"fully_connected expects {w.shape[1]} inputs, got {flat.shape[1]}")
    y = flat @ w.T
    if b is not None:
        y += b
    return _check("fully_connected", y.reshape(n, 1, 1, -1)), (flat, x.shape)


def fc_bwd(dy, w, cache, need_dx=True, need_params=True):
    flat, x_shape = cache
    dy2 = dy.reshape(dy.shape[0], -1)
    dw = db = dx = None
    if need_params:
        dw = dy2.T @ flat
        db = dy2.sum(axis=0)
    if need_dx:
        dx = (dy2 @ w).reshape(x_shape)
    return dx, dw, db


def _box3(a):
    """3x3 window sums over the last two axes, zero outside."""
    p = np.pad(a, [(0, 0)] * (a.ndim - 2) + [(1, 1), (1, 1)])
    h, w = a.shape[-2:]
    out = np.zeros_like(a)
    for i in range(3):
        for j in range(3):
            out += p[..., i:i + h, j:j + w]
    return out


def avg_pool3_fwd(x):
    """3x3 stride-1 mean over the valid neighbours (constants stay constant)."""
    count = _box3(np.ones(x.shape[-2:], dtype=x.dtype))
    return _box3(x) / count, count


def avg_pool3_bwd(dy, count):
    return _box3(dy / count)


def softmax(logits, axis=1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_ce_loss(logits, target, weights=None):
    """Weighted mean per-pixel cross-entropy over the channel softmax.

    ``logits`` is (N, K, H, W), ``target`` integer (N, H, W) and ``weights``
    nonnegative (N, H, W) or None for uniform. Returns (loss, dlogits).
    """
    n, k, h, w = logits.shape
    target = np.asarray(target)
    if target.shape != (n, h, w):
        raise ShapeMismatchError(f"target shape {target.shape} does not match logits {logits.shape}")
    if target.min(initial=0) < 0 or target.max(initial=0) >= k:
        raise ValueError(f"target class out of range [0, {k})")
    if weights is None:
        weights = np.ones((n, h, w), dtype=logits.dtype)
    weights = np.asarray(weights, dtype=logits.dtype)
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    picked = np.take_along_axis(z, target[:, None].astype(np.intp), axis=1)[:, 0]
    per_pixel = lse - picked
    total = weights.sum()
    if total <= 0:
        return 0.0, np.zeros_like(logits)
    loss = float((weights * per_pixel).sum() / total)
    grad = softmax(logits)
    np.put_along_axis(grad, target[:, None].astype(np.intp),
                      np.take_along_axis(grad, target[:, None].astype(np.intp), axis=1) - 1, axis=1)
    grad *= (weights / total)[:, None]
    return loss, grad


# -- parameters and the network ---------------------------------------------


@dataclass
class ModelParams:
    spec: NetworkSpec
    # one (weight, bias) pair per parameterised layer, in layer order
    layers: list[tuple[Tensor, Tensor]] = field(default_factory=list)

    def tensors(self):
        for w, b in self.layers:
            yield w
            yield b

    def zero_grad(self):
        for t in self.tensors():
            t.zero_grad()

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.spec, [(Tensor(w.data.astype(dtype)), Tensor(b.data.astype(dtype)))
                                       for w, b in self.layers])

    def copy(self) -> "ModelParams":
        return self.astype(self.layers[0][0].data.dtype if self.layers else np.float32)

    def to_bytes(self) -> bytes:
        text = print_spec(self.spec).encode("utf-8")
        parts = [MODEL_MAGIC, struct.pack("<I", len(text)), text]
        for w, b in self.layers:
            parts.append(np.ascontiguousarray(w.data, dtype="<f4").tobytes())
            parts.append(np.ascontiguousarray(b.data, dtype="<f4").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ModelParams":
        if blob[:5] != MODEL_MAGIC:
            raise ValueError("not a PSEG1 model file")
        (n,) = struct.unpack_from("<I", blob, 5)
        spec = parse_spec(blob[9:9 + n].decode("utf-8"))
        pos = 9 + n
        layers = []
        for wshape, bshape in param_shapes(spec):
            pair = []
            for shape in (wshape, bshape):
                count = int(np.prod(shape))
                arr = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(shape)
                pair.append(Tensor(arr.astype(np.float32)))
                pos += 4 * count
            layers.append(tuple(pair))
        if pos != len(blob):
            raise ValueError("trailing bytes in model file")
        return cls(spec, layers)

    def save(self, path):
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ModelParams":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


def param_shapes(spec: NetworkSpec):
    spec = propagate_shapes(spec)
    shapes = []
    for i, layer in enumerate(spec.layers):
        if layer.kind == "relu":
            continue
        if layer.kind == "fully_connected":
            c, h, w = spec.input_of(i)
            shapes.append(((layer.out_units, c * h * w), (layer.out_units,)))
        elif layer.kind == "conv_transpose":
            shapes.append(((layer.in_channels, layer.out_channels, *layer.kernel), (layer.out_channels,)))
        else:
            shapes.append(((layer.out_channels, layer.in_channels, *layer.kernel), (layer.out_channels,)))
    return shapes


def _fan_in(layer: LayerSpec, wshape) -> float:
    if layer.kind == "fully_connected":
        return wshape[1]
    kh, kw = layer.kernel
    if layer.kind == "conv_transpose":
        return layer.in_channels * kh * kw / layer.stride**2
    return layer.in_channels * kh * kw


def init_params(spec: NetworkSpec, seed: int, dtype=np.float32) -> ModelParams:
    """He-style uniform fan-in initialisation, zero biases."""
    rng = np.random.default_rng(seed)
    layers = []
    param_layers = [layer for layer in spec.layers if layer.kind != "relu"]
    for layer, (wshape, bshape) in zip(param_layers, param_shapes(spec)):
        bound = np.sqrt(6.0 / max(_fan_in(layer, wshape), 1.0))
        w = rng.uniform(-bound, bound, size=wshape).astype(dtype)
        layers.append((Tensor(w), Tensor(np.zeros(bshape, dtype=dtype))))
    return ModelParams(spec, layers)


class Network:
    """Stateless executor for a spec and its parameters.

    ``forward`` returns the output and a tape; ``backward`` consumes the tape,
    so one Network can serve concurrent callers.
    """

    def __init__(self, params: ModelParams):
        self.params = params
        self.spec = propagate_shapes(params.spec)

    def forward(self, x):
        """(N, C, H, W) input -> (N, K, H', W') output and a tape."""
        outs = []
        tape = []
        h = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
        p = 0
        for layer in self.spec.layers:
            if layer.concat_from is not None:
                h = np.concatenate([h, outs[layer.concat_from]], axis=-1)
            if layer.kind == "relu":
                h, cache = relu_fwd(h)
                tape.append((None, cache))
            else:
                w, b = self.params.layers[p]
                if layer.kind == "fully_connected":
                    h, cache = fc_fwd(h, w.data, b.data)
                elif layer.kind == "conv_transpose":
                    h, cache = conv_transpose_fwd(h, w.data, b.data, layer.stride)
                else:
                    h, cache = conv2d_fwd(h, w.data, b.data, layer.stride)
                tape.append((p, cache))
                p += 1
            outs.append(h)
        return np.ascontiguousarray(h.transpose(0, 3, 1, 2)), (tape, [o.shape[-1] for o in outs])

    def backward(self, tape, dout, need_params=True, need_input=True):
        """Returns (d input, per-layer [(dW, db)] or None)."""
        caches, channels = tape
        layers = self.spec.layers
        grads: list = [None] * len(self.params.layers)
        douts: list = [None] * len(layers)
        douts[-1] = np.ascontiguousarray(dout.transpose(0, 2, 3, 1))
        dx = None
        for i in range(len(layers) - 1, -1, -1):
            dy = douts[i]
            layer = layers[i]
            if dy is None:
                continue
            p, cache = caches[i]
            first = i == 0
            want_dx = need_input or not first
            if layer.kind == "relu":
                d_in = relu_bwd(dy, cache)
            else:
                w = self.params.layers[p][0].data
                bwd = fc_bwd if layer.kind == "fully_connected" else \
                    conv_transpose_bwd if layer.kind == "conv_transpose" else conv2d_bwd
                d_in, dw, db = bwd(dy, w, cache, need_dx=want_dx, need_params=need_params)
                if need_params:
                    grads[p] = (dw, db)
            if d_in is None:
                continue
            if layer.concat_from is not None:
                split = d_in.shape[-1] - channels[layer.concat_from]
                skip = d_in[..., split:]
                d_in = d_in[..., :split]
                j = layer.concat_from
                douts[j] = skip if douts[j] is None else douts[j] + skip
            if first:
                dx = np.ascontiguousarray(d_in.transpose(0, 3, 1, 2))
            else:
                douts[i - 1] = d_in if douts[i - 1] is None else douts[i - 1] + d_in
        return dx, (grads if need_params else None)

    def predict(self, x, batch=16):
        out = []
        for i in range(0, len(x), batch):
            logits, _ = self.forward(x[i:i + batch])
            out.append(logits.argmax(axis=1))
        return np.concatenate(out) if out else np.zeros((0,) + x.shape[2:], dtype=np.int64)
