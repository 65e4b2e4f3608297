"""Box arithmetic in pixel space and in the head's normalized coordinates.

Boxes are ``(x, y, w, h)`` with ``(x, y)`` the top-left corner. Grid cells are
indexed row-major: ``index = row * S + col``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np


@dataclass(frozen=True)
class BoxXYWH:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self) -> None:
        if self.w < 0 or self.h < 0:
            raise ValueError(f"box width/height must be non-negative, got {self}")

    def __iter__(self) -> Iterator[float]:
        return iter((self.x, self.y, self.w, self.h))

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def center(self) -> tuple[float, float]:
        return self.x + 0.5 * self.w, self.y + 0.5 * self.h

    def to_list(self) -> list[float]:
        return [self.x, self.y, self.w, self.h]

    @classmethod
    def from_seq(cls, values: Sequence[float]) -> "BoxXYWH":
        if len(values) != 4:
            raise ValueError(f"expected 4 box values, got {len(values)}")
        return cls(*(float(v) for v in values))


@dataclass(frozen=True)
class NormalizedPrediction:
    """The five sigmoid outputs of the localization head."""

    t_x: float
    t_y: float
    t_w: float
    t_h: float
    t_c: float = 0.5

    @classmethod
    def from_seq(cls, values: Sequence[float]) -> "NormalizedPrediction":
        return cls(*(float(v) for v in values))

    def coords(self) -> tuple[float, float, float, float]:
        return self.t_x, self.t_y, self.t_w, self.t_h


@dataclass(frozen=True)
class GridSpec:
    """Square input of ``S * m`` pixels per side split into ``S x S`` cells."""

    S: int
    m: float

    def __post_init__(self) -> None:
        if self.S < 1:
            raise ValueError(f"grid size S must be >= 1, got {self.S}")
        if self.m <= 0:
            raise ValueError(f"cell stride m must be positive, got {self.m}")

    @classmethod
    def from_image(cls, p: int, S: int) -> "GridSpec":
        if p % S:
            raise ValueError(f"image size {p} is not divisible by grid size {S}")
        return cls(S=S, m=p // S)

    @property
    def p_w(self) -> float:
        return self.m * self.S

    @property
    def p_h(self) -> float:
        return self.m * self.S

    @property
    def N(self) -> int:
        return self.S * self.S


def iou(a: BoxXYWH, b: BoxXYWH) -> float:
    """Intersection over union; 0 when the union is empty."""
    iw = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    ih = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    # cap by the sides so roundoff cannot push the overlap past either box
    iw, ih = min(iw, a.w, b.w), min(ih, a.h, b.h)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def iou_many(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Row-wise IoU of two ``(n, 4)`` xywh arrays."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(pred[:, 0] + pred[:, 2], gt[:, 0] + gt[:, 2]) - np.maximum(pred[:, 0], gt[:, 0])
    ih = np.minimum(pred[:, 1] + pred[:, 3], gt[:, 1] + gt[:, 3]) - np.maximum(pred[:, 1], gt[:, 1])
    iw = np.minimum(iw, np.minimum(pred[:, 2], gt[:, 2]))
    ih = np.minimum(ih, np.minimum(pred[:, 3], gt[:, 3]))
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = pred[:, 2] * pred[:, 3] + gt[:, 2] * gt[:, 3] - inter
    out = np.zeros(len(pred))
    ok = union > 0
    out[ok] = inter[ok] / union[ok]
    return out


def decode_box(pred: NormalizedPrediction, grid: GridSpec) -> BoxXYWH:
    """Map head outputs to pixels; width and height are predicted as square roots."""
    return BoxXYWH(
        pred.t_x * grid.p_w,
        pred.t_y * grid.p_h,
        pred.t_w**2 * grid.p_w,
        pred.t_h**2 * grid.p_h,
    )


def encode_box(gt: BoxXYWH, grid: GridSpec) -> tuple[float, float, float, float]:
    """Regression targets for a ground-truth box (inverse of :func:`decode_box`)."""
    if gt.x < 0 or gt.y < 0:
        raise ValueError(f"box has negative coordinates: {gt}")
    if gt.w > grid.p_w or gt.h > grid.p_h:
        raise ValueError(f"box {gt} larger than image {grid.p_w}x{grid.p_h}")
    return (
        gt.x / grid.p_w,
        gt.y / grid.p_h,
        math.sqrt(gt.w / grid.p_w),
        math.sqrt(gt.h / grid.p_h),
    )


def clip_box(box: BoxXYWH, width: float, height: float) -> BoxXYWH:
    x0 = min(max(box.x, 0.0), width)
    y0 = min(max(box.y, 0.0), height)
    x1 = min(max(box.x + box.w, 0.0), width)
    y1 = min(max(box.y + box.h, 0.0), height)
    return BoxXYWH(x0, y0, x1 - x0, y1 - y0)


def center_cell(gt: BoxXYWH, grid: GridSpec) -> tuple[int, int]:
    """``(col, row)`` of the cell holding the box center.

    A center on a cell edge goes to the higher-index cell; centers on the far
    image edge are clamped into the last cell.
    """
    cx, cy = gt.center
    col = math.floor(cx / grid.m)
    row = math.floor(cy / grid.m)
    last = grid.S - 1
    return min(max(col, 0), last), min(max(row, 0), last)


def one_hot_center(gt: BoxXYWH, grid: GridSpec) -> np.ndarray:
    col, row = center_cell(gt, grid)
    label = np.zeros(grid.N)
    label[row * grid.S + col] = 1.0
    return label
