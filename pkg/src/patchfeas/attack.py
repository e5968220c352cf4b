"""Momentum-iterative adversarial patch attack on the segmentation network."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import pnm
from .geometry import RectPlacement, center_patch, largest_inscribed_rect
from .segnet.engine import Network, avg_pool3_bwd, avg_pool3_fwd, softmax_ce_loss

log = logging.getLogger(__name__)


class AttackError(ValueError):
    pass


class PlacementError(AttackError):
    pass


class NumericalFailure(FloatingPointError):
    def __init__(self, iteration: int, loss: float):
        super().__init__(f"loss became {loss} at iteration {iteration}")
        self.iteration = iteration


@dataclass
class PatchSpec:
    top: int
    left: int
    pixels: np.ndarray  # (3, h, w) in [0, 1]

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]

    @property
    def box(self) -> RectPlacement:
        return RectPlacement(self.top, self.left, self.height, self.width)

    @classmethod
    def gray(cls, height: int, width: int, top: int, left: int, dtype=np.float32) -> "PatchSpec":
        return cls(top, left, np.full((3, height, width), 0.5, dtype=dtype))


@dataclass
class AttackTarget:
    target_classes: np.ndarray  # (H, W) int
    roi_weights: np.ndarray  # (H, W) float, zero outside the region of interest
    focus: np.ndarray  # (H, W) bool, pixels whose class the target rewrites


@dataclass
class AttackConfig:
    iterations: int = 5000
    step: float = 0.01
    momentum: float = 0.9
    eot: bool = False
    max_jitter: int = 2
    noise: float = 0.02
    smooth: bool = False
    seed: int = 0
    eot_batch: int = 8
    scale_range: tuple[float, float] = (0.9, 1.1)
    brightness_range: tuple[float, float] = (0.9, 1.1)
    workers: int = 1

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.step <= 0:
            raise ValueError("step must be positive")


# -- targets ---------------------------------------------------------------------


def build_target(labels, kind: str, *args, num_classes: int = 4) -> AttackTarget:
    """Attack objective from a ground-truth (or predicted) class map.

    kinds: ``class_switch`` (from, to), ``erase`` (cls) and ``custom`` (mask
    array or PGM path). Weights are 1 everywhere: unchanged pixels are asked
    to keep their class.
    """
    labels = np.asarray(labels)
    target = labels.astype(np.int64).copy()
    if kind == "class_switch":
        src, dst = (int(a) for a in args)
        focus = labels == src
        if not focus.any():
            raise AttackError(f"class {src} not present in labels")
        if not 0 <= dst < num_classes:
            raise AttackError(f"class {dst} out of range")
        target[focus] = dst
    elif kind == "erase":
        (cls,) = (int(a) for a in args)
        focus = labels == cls
        if not focus.any():
            raise AttackError(f"class {cls} not present in labels")
        target[focus] = 0
    elif kind == "custom":
        (mask,) = args
        if isinstance(mask, (str, bytes)) or hasattr(mask, "__fspath__"):
            mask = pnm.read(mask)
        mask = np.asarray(mask)
        if mask.shape != labels.shape:
            raise AttackError(f"custom mask shape {mask.shape} does not match labels {labels.shape}")
        if mask.max(initial=0) >= num_classes:
            raise AttackError("custom mask contains out-of-range classes")
        target = mask.astype(np.int64)
        focus = target != labels
    else:
        raise AttackError(f"unknown target kind {kind!r}")
    return AttackTarget(target, np.ones(labels.shape, dtype=np.float32), focus)


def parse_target(text: str, labels, num_classes: int = 4) -> AttackTarget:
    """``class_switch:2:1``, ``erase:1`` or ``custom:path.pgm``."""
    kind, _, rest = text.partition(":")
    args = rest.split(":", 1) if kind == "custom" else [a for a in rest.split(":") if a]
    return build_target(labels, kind, *args, num_classes=num_classes)


def auto_place(focus, patch_h: int, patch_w: int) -> tuple[int, int]:
    """Centre the patch in the largest rectangle inscribed in the focus mask."""
    rect = largest_inscribed_rect(focus)
    try:
        return center_patch(rect, patch_h, patch_w)
    except ValueError as exc:
        raise PlacementError(str(exc)) from None


# -- patch rendering -----------------------------------------------------------


@dataclass(frozen=True)
class PatchTransform:
    dy: int = 0
    dx: int = 0
    scale: float = 1.0
    brightness: float = 1.0
    noise_sigma: float = 0.0
    noise_seed: Optional[int] = None


@dataclass
class _Rendered:
    image: np.ndarray
    top: int
    left: int
    rows: np.ndarray
    cols: np.ndarray
    inside: np.ndarray  # pre-clip values inside [0, 1]
    brightness: float
    pool_count: Optional[np.ndarray]


def _render(image, patch: PatchSpec, t: PatchTransform, smooth: bool) -> _Rendered:
    _, H, W = image.shape
    h, w = patch.height, patch.width
    p = patch.pixels
    count = None
    if smooth:
        p, count = avg_pool3_fwd(p)
    nh, nw = max(1, int(round(h * t.scale))), max(1, int(round(w * t.scale)))
    rows = np.minimum(((np.arange(nh) + 0.5) * h / nh).astype(np.intp), h - 1)
    cols = np.minimum(((np.arange(nw) + 0.5) * w / nw).astype(np.intp), w - 1)
    if nh != h or nw != w:
        p = p[:, rows][:, :, cols]
    if t.brightness != 1.0:
        p = p * np.asarray(t.brightness, dtype=p.dtype)
    if t.noise_sigma > 0:
        rng = np.random.default_rng(t.noise_seed)
        p = p + rng.normal(0, t.noise_sigma, size=p.shape).astype(p.dtype)
    inside = (p >= 0) & (p <= 1)
    p = np.clip(p, 0, 1)
    top = patch.top + t.dy - (nh - h) // 2
    left = patch.left + t.dx - (nw - w) // 2
    if top < 0 or left < 0 or top + nh > H or left + nw > W:
        raise PlacementError(f"patch at ({top}, {left}) size {nh}x{nw} leaves the {H}x{W} image")
    out = image.copy()
    out[:, top:top + nh, left:left + nw] = p
    return _Rendered(out, top, left, rows, cols, inside, t.brightness, count)


def _render_bwd(r: _Rendered, dimage, patch_shape) -> np.ndarray:
    _, h, w = patch_shape
    nh, nw = len(r.rows), len(r.cols)
    g = dimage[:, r.top:r.top + nh, r.left:r.left + nw] * r.inside
    g = g * np.asarray(r.brightness, dtype=g.dtype)
    if nh != h or nw != w:
        acc = np.zeros((g.shape[0], h, nw), dtype=g.dtype)
        np.add.at(acc, (slice(None), r.rows), g)
        g = np.zeros((g.shape[0], h, w), dtype=g.dtype)
        np.add.at(g, (slice(None), slice(None), r.cols), acc)
    if r.pool_count is not None:
        g = avg_pool3_bwd(g, r.pool_count)
    return g


def apply_patch(image, patch: PatchSpec, jitter=(0, 0), noise_seed=None, *, noise_sigma: float = 0.0,
                smooth: bool = False, scale: float = 1.0, brightness: float = 1.0) -> np.ndarray:
    """Copy of ``image`` (3, H, W) with the rendered patch pasted in.

    Pixels outside the pasted rectangle are bit-identical to the input.
    """
    t = PatchTransform(int(jitter[0]), int(jitter[1]), scale, brightness, noise_sigma, noise_seed)
    return _render(np.asarray(image), patch, t, smooth).image


def _sample_transforms(rng: np.random.Generator, cfg: AttackConfig, patch: PatchSpec, H: int, W: int):
    out = []
    for _ in range(cfg.eot_batch):
        scale = float(rng.uniform(*cfg.scale_range))
        nh, nw = max(1, round(patch.height * scale)), max(1, round(patch.width * scale))
        # jitter clamped so the scaled patch stays inside the image
        base_top = patch.top - (nh - patch.height) // 2
        base_left = patch.left - (nw - patch.width) // 2
        lo_y, hi_y = max(-cfg.max_jitter, -base_top), min(cfg.max_jitter, H - nh - base_top)
        lo_x, hi_x = max(-cfg.max_jitter, -base_left), min(cfg.max_jitter, W - nw - base_left)
        if lo_y > hi_y or lo_x > hi_x:
            scale, lo_y, hi_y, lo_x, hi_x = 1.0, 0, 0, 0, 0
        out.append(PatchTransform(
            int(rng.integers(lo_y, hi_y + 1)), int(rng.integers(lo_x, hi_x + 1)), scale,
            float(rng.uniform(*cfg.brightness_range)), cfg.noise, int(rng.integers(2**63 - 1)),
        ))
    return out


# -- the attack ----------------------------------------------------------------


@dataclass
class AttackResult:
    patch: PatchSpec
    trace: list[float] = field(default_factory=list)
    best_loss: float = float("inf")
    best_iteration: int = -1
    locality_violations: int = 0


def _dilated_box(patch: PatchSpec, cfg: AttackConfig, H: int, W: int) -> RectPlacement:
    if not cfg.eot:
        return patch.box
    extra_h = max(round(patch.height * cfg.scale_range[1]) - patch.height, 0)
    extra_w = max(round(patch.width * cfg.scale_range[1]) - patch.width, 0)
    top = max(patch.top - cfg.max_jitter - extra_h, 0)
    left = max(patch.left - cfg.max_jitter - extra_w, 0)
    bottom = min(patch.top + patch.height + cfg.max_jitter + extra_h, H)
    right = min(patch.left + patch.width + cfg.max_jitter + extra_w, W)
    return RectPlacement(top, left, bottom - top, right - left)


def patch_loss_and_grad(net: Network, image, target: AttackTarget, patch: PatchSpec,
                        transforms, smooth: bool, workers: int = 1):
    """Mean target loss over the transformed renderings and its patch gradient."""
    renders = [_render(image, patch, t, smooth) for t in transforms]

    def run(chunk):
        batch = np.stack([r.image for r in chunk])
        n = len(chunk)
        logits, tape = net.forward(batch)
        tgt = np.broadcast_to(target.target_classes, (n,) + target.target_classes.shape)
        wts = np.broadcast_to(target.roi_weights, (n,) + target.roi_weights.shape)
        loss, dlogits = softmax_ce_loss(logits, tgt, wts)
        dx, _ = net.backward(tape, dlogits, need_params=False)
        # dlogits is scaled by 1/n; undo it so chunks of any size reduce to the same mean
        grad = n * sum(_render_bwd(r, dx[i], patch.pixels.shape) for i, r in enumerate(chunk))
        return loss * n, grad, [r.image for r in chunk]

    if workers > 1 and len(renders) > 1:
        size = -(-len(renders) // workers)
        chunks = [renders[i:i + size] for i in range(0, len(renders), size)]
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(renders)]
    # fixed-order reduction
    total_loss, grad, images = 0.0, 0.0, []
    for loss, g, imgs in parts:
        total_loss += loss
        grad = grad + g
        images += imgs
    n = len(renders)
    return total_loss / n, grad / n, images


def momentum_patch_attack(net: Network, image, target: AttackTarget, patch0: PatchSpec,
                          cfg: AttackConfig = AttackConfig(),
                          callback: Callable[[int, float, list], None] | None = None) -> AttackResult:
    """Optimise patch pixels with sign-of-momentum steps on the target loss.

    Each iteration: g <- mu * g + grad / |grad|_1, then
    patch <- clip(patch - step * sign(g), 0, 1). With EOT the gradient is
    averaged over ``cfg.eot_batch`` random jitter/scale/brightness/noise
    renderings. Returns the lowest-loss patch seen.
    """
    image = np.asarray(image)
    _, H, W = image.shape
    if target.target_classes.shape != (H, W):
        raise AttackError("target and image shapes differ")
    patch = replace(patch0, pixels=np.clip(patch0.pixels, 0, 1).astype(image.dtype))
    _render(image, patch, PatchTransform(), cfg.smooth)  # placement check
    rng = np.random.default_rng(cfg.seed)
    g = np.zeros_like(patch.pixels)
    result = AttackResult(replace(patch, pixels=patch.pixels.copy()))
    allowed = _dilated_box(patch, cfg, H, W).to_mask((H, W))
    for it in range(cfg.iterations):
        transforms = _sample_transforms(rng, cfg, patch, H, W) if cfg.eot else [PatchTransform()]
        loss, grad, images = patch_loss_and_grad(net, image, target, patch, transforms, cfg.smooth, cfg.workers)
        if not np.isfinite(loss):
            raise NumericalFailure(it, loss)
        for img in images:
            result.locality_violations += int(np.count_nonzero((img != image).any(axis=0) & ~allowed))
        result.trace.append(loss)
        if callback is not None:
            callback(it, loss, images)
        if loss < result.best_loss:
            result.best_loss, result.best_iteration = loss, it
            result.patch = replace(patch, pixels=patch.pixels.copy())
        norm = np.abs(grad).sum()
        g = cfg.momentum * g + (grad / norm if norm > 0 else 0)
        patch = replace(patch, pixels=np.clip(patch.pixels - cfg.step * np.sign(g), 0, 1).astype(image.dtype))
    return result


# -- effect measurement ----------------------------------------------------------


@dataclass
class Effect:
    changed_pixels: int
    agreement: float
    object_agreement: float
    changed_mask: np.ndarray
    before: np.ndarray
    after: np.ndarray


def measure_effect(net: Network, image, patch: PatchSpec, target: AttackTarget | None = None,
                   smooth: bool = False) -> Effect:
    """Argmax maps with and without the patch and how far they moved.

    ``agreement`` is the ROI-weighted fraction of pixels on target,
    ``object_agreement`` the same over the rewritten (focus) pixels only.
    """
    image = np.asarray(image)
    patched = _render(image, patch, PatchTransform(), smooth).image
    logits, _ = net.forward(np.stack([image, patched]))
    before, after = logits.argmax(axis=1)
    changed = before != after
    agreement = object_agreement = float("nan")
    if target is not None:
        hit = after == target.target_classes
        w = target.roi_weights
        agreement = float((w * hit).sum() / w.sum()) if w.sum() > 0 else float("nan")
        if target.focus.any():
            object_agreement = float(hit[target.focus].mean())
    return Effect(int(changed.sum()), agreement, object_agreement, changed, before, after)
