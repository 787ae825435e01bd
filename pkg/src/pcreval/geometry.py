"""Axis-aligned bounding-box arithmetic: IoU, box merging, center closeness."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle in corner form, continuous pixel coordinates."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        if not (self.x_min <= self.x_max and self.y_min <= self.y_max):
            raise ValueError(
                f"invalid box: ({self.x_min}, {self.y_min}, {self.x_max}, {self.y_max})"
            )

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "Box":
        return cls(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)

    @property
    def center_x(self) -> float:
        return (self.x_min + self.x_max) / 2

    @property
    def center_y(self) -> float:
        return (self.y_min + self.y_max) / 2

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes, in [0, 1].

    Zero when the boxes are disjoint, and defined as zero when the union has
    zero area (two degenerate boxes) so the result is total.
    """
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def merge_boxes(members: Sequence[Box] | Iterable[Box]) -> Box:
    """Smallest box enclosing every member; errors on an empty member set."""
    members = list(members)
    if not members:
        raise ValueError("cannot merge an empty set of boxes")
    return Box(
        x_min=min(b.x_min for b in members),
        y_min=min(b.y_min for b in members),
        x_max=max(b.x_max for b in members),
        y_max=max(b.y_max for b in members),
    )


def center_closeness(final: Box, merged: Box) -> float:
    """One minus the center distance normalized by `final`'s half-diagonal.

    Equals 1 exactly when the centers coincide and goes negative once the
    centers are further apart than the half-diagonal; the raw value is
    returned, clamping is left to the caller.
    """
    half_diag = math.sqrt(final.width**2 + final.height**2) / 2
    if half_diag == 0:
        raise ValueError("degenerate final box: zero diagonal")
    dist = math.hypot(final.center_x - merged.center_x, final.center_y - merged.center_y)
    return 1.0 - dist / half_diag
