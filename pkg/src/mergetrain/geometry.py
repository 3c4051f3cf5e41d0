"""Box types, IoU and the grid <-> image coordinate transforms.

All boxes are normalized center format ``(cx, cy, w, h)``; corner format
only shows up at file I/O boundaries (:func:`to_corners`, :func:`from_corners`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class GeometryError(ValueError):
    """Raised for degenerate or out-of-domain geometry."""


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise GeometryError(f"degenerate box: w={self.w}, h={self.h}")
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise GeometryError(f"box center outside the image: ({self.cx}, {self.cy})")

    @property
    def area(self) -> float:
        return self.w * self.h

    def corners(self) -> tuple[float, float, float, float]:
        return to_corners(self)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)


@dataclass(frozen=True)
class RelBox:
    """Grid-relative prediction: offsets inside the cell plus log-scale anchor factors."""

    x: float
    y: float
    w: float
    h: float


@dataclass(frozen=True)
class GridCell:
    i: int
    j: int
    g: int

    def __post_init__(self):
        if self.g < 1 or not (0 <= self.i < self.g and 0 <= self.j < self.g):
            raise GeometryError(f"cell ({self.i}, {self.j}) outside a {self.g}x{self.g} grid")

    @property
    def x0(self) -> float:
        return self.j / self.g

    @property
    def y0(self) -> float:
        return self.i / self.g


@dataclass(frozen=True)
class AnchorSpec:
    a: int
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise GeometryError(f"anchor {self.a} has non-positive size")


def to_corners(box: Box) -> tuple[float, float, float, float]:
    return (box.cx - box.w / 2, box.cy - box.h / 2, box.cx + box.w / 2, box.cy + box.h / 2)


def from_corners(x0: float, y0: float, x1: float, y1: float) -> Box:
    return Box((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)


def _check(box: Box) -> None:
    if not (box.w > 0 and box.h > 0):
        raise GeometryError(f"degenerate box: {box}")


def iou(a: Box, b: Box) -> float:
    _check(a)
    _check(b)
    ax0, ay0, ax1, ay1 = to_corners(a)
    bx0, by0, bx1, by1 = to_corners(b)
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    # areas from the same corners as the intersection, so iou(b, b) is exactly 1
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    if union <= 0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


def max_iou(box: Box, refs: Sequence[Box]) -> tuple[float, int | None]:
    best, best_idx = 0.0, None
    for k, ref in enumerate(refs):
        v = iou(box, ref)
        if best_idx is None or v > best:
            best, best_idx = v, k
    return best, best_idx


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) arrays of center-format boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    a0 = a[:, None, :2] - a[:, None, 2:] / 2
    a1 = a[:, None, :2] + a[:, None, 2:] / 2
    b0 = b[None, :, :2] - b[None, :, 2:] / 2
    b1 = b[None, :, :2] + b[None, :, 2:] / 2
    wh = np.clip(np.minimum(a1, b1) - np.maximum(a0, b0), 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = np.prod(a1 - a0, axis=-1)
    area_b = np.prod(b1 - b0, axis=-1)
    union = area_a + area_b - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return np.clip(out, 0.0, 1.0)


def decode_to_image(rel: RelBox, cell: GridCell, anchor: AnchorSpec) -> Box:
    try:
        w = anchor.w * math.exp(rel.w)
        h = anchor.h * math.exp(rel.h)
    except OverflowError as exc:
        raise GeometryError(f"non-finite size exponent in {rel}") from exc
    if not (math.isfinite(w) and math.isfinite(h)):
        raise GeometryError(f"non-finite size exponent in {rel}")
    return Box(cell.x0 + rel.x, cell.y0 + rel.y, w, h)


def containing_cell(box: Box, g: int) -> GridCell:
    i = min(int(box.cy * g), g - 1)
    j = min(int(box.cx * g), g - 1)
    return GridCell(i, j, g)


def encode_from_image(box: Box, cell: GridCell, anchor: AnchorSpec) -> RelBox:
    _check(box)
    if containing_cell(box, cell.g) != cell:
        raise GeometryError(f"box center ({box.cx}, {box.cy}) is not inside cell ({cell.i}, {cell.j})")
    return RelBox(box.cx - cell.x0, box.cy - cell.y0, math.log(box.w / anchor.w), math.log(box.h / anchor.h))


def clip(box: Box) -> Box:
    x0, y0, x1, y1 = to_corners(box)
    if x0 >= 0 and y0 >= 0 and x1 <= 1 and y1 <= 1:
        return box
    x0, y0 = max(0.0, x0), max(0.0, y0)
    x1, y1 = min(1.0, x1), min(1.0, y1)
    if x1 <= x0 or y1 <= y0:
        raise GeometryError(f"box {box} lies outside the unit square")
    return from_corners(x0, y0, x1, y1)


def shape_iou(w0: float, h0: float, w1: float, h1: float) -> float:
    """IoU of two boxes sharing a center; used for anchor matching."""
    inter = min(w0, w1) * min(h0, h1)
    return inter / (w0 * h0 + w1 * h1 - inter)
