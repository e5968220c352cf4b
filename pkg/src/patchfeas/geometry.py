"""Largest inscribed rectangle in a binary mask and centred patch placement."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class NoRectangleError(ValueError):
    pass


@dataclass(frozen=True)
class RectPlacement:
    top: int
    left: int
    height: int
    width: int

    @property
    def area(self) -> int:
        return self.height * self.width

    @property
    def bottom(self) -> int:
        return self.top + self.height

    @property
    def right(self) -> int:
        return self.left + self.width

    def contains(self, other: "RectPlacement") -> bool:
        return (self.top <= other.top and self.left <= other.left
                and other.bottom <= self.bottom and other.right <= self.right)

    def to_mask(self, shape) -> np.ndarray:
        m = np.zeros(shape, dtype=bool)
        m[self.top:self.bottom, self.left:self.right] = True
        return m

    def to_dict(self) -> dict:
        return {"top": self.top, "left": self.left, "height": self.height, "width": self.width}


def _better(cand, best) -> bool:
    # larger area, then smaller top, smaller left, larger height
    area, top, left, height = cand
    b_area, b_top, b_left, b_height = best
    return (area, -top, -left, height) > (b_area, -b_top, -b_left, b_height)


def largest_inscribed_rect(mask, counter: list | None = None) -> RectPlacement:
    """Maximum-area all-true axis-aligned rectangle.

    Row-by-row histogram of consecutive true pixels, each row solved with a
    monotonic stack. Ties go to the smallest top, then smallest left, then
    the tallest rectangle. ``counter``, if given, receives the number of
    stack operations (one element list), for complexity checks.
    """
    m = np.asarray(mask, dtype=bool)
    if m.ndim != 2 or m.size == 0:
        raise ValueError("mask must be a nonempty 2-D grid")
    rows, cols = m.shape
    heights = [0] * cols
    best = (0, rows, cols, 0)
    ops = 0
    for r in range(rows):
        row = m[r]
        for c in range(cols):
            heights[c] = heights[c] + 1 if row[c] else 0
        stack: list[int] = []  # column indices with increasing heights
        for c in range(cols + 1):
            h = heights[c] if c < cols else 0
            while stack and heights[stack[-1]] >= h:
                top_col = stack.pop()
                ops += 1
                height = heights[top_col]
                left = stack[-1] + 1 if stack else 0
                if height:
                    cand = (height * (c - left), r - height + 1, left, height)
                    if _better(cand, best):
                        best = cand
            stack.append(c)
            ops += 1
    if counter is not None:
        counter.append(ops)
    area, top, left, height = best
    if area == 0:
        raise NoRectangleError("mask has no true pixels")
    return RectPlacement(top, left, height, area // height)


def center_patch(rect: RectPlacement, patch_h: int, patch_w: int) -> tuple[int, int]:
    """Top-left corner placing the patch centrally; odd slack goes bottom/right."""
    if patch_h > rect.height or patch_w > rect.width or patch_h < 1 or patch_w < 1:
        raise ValueError(f"patch {patch_h}x{patch_w} does not fit rectangle {rect.height}x{rect.width}")
    return rect.top + (rect.height - patch_h) // 2, rect.left + (rect.width - patch_w) // 2

