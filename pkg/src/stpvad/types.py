"""Core records shared by the synthetic generator, ingestion and evaluation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


class ValidationError(ValueError):
    """Raised when a configuration or record violates its invariants."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True, order=True)
class BoundingBox:
    """Pixel box with exclusive ``x2``/``y2``."""

    x1: int
    y1: int
    x2: int
    y2: int

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValidationError("box", f"degenerate box {self.as_tuple()}")

    @property
    def width(self) -> int:
        return self.x2 - self.x1

    @property
    def height(self) -> int:
        return self.y2 - self.y1

    @property
    def area(self) -> int:
        return self.width * self.height

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x1, self.y1, self.x2, self.y2)

    def within(self, width: int, height: int) -> bool:
        return self.x1 >= 0 and self.y1 >= 0 and self.x2 <= width and self.y2 <= height

    def clamp(self, width: int, height: int) -> "BoundingBox":
        """Clip to ``[0, width] x [0, height]``; raises if nothing is left."""
        return BoundingBox(
            max(0, min(self.x1, width - 1)),
            max(0, min(self.y1, height - 1)),
            max(1, min(self.x2, width)),
            max(1, min(self.y2, height)),
        )


@dataclass
class Frame:
    pixels: np.ndarray  # H x W x C, float32 in [0, 1]
    video_id: str
    frame_index: int

    def __post_init__(self):
        if self.pixels.ndim == 2:
            self.pixels = self.pixels[..., None]
        if self.pixels.ndim != 3 or self.pixels.shape[2] not in (1, 3):
            raise ValidationError("pixels", f"expected HxWx{{1,3}}, got {self.pixels.shape}")
        if self.frame_index < 0:
            raise ValidationError("frame_index", "must be >= 0")

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[:2]


@dataclass(frozen=True)
class Detection:
    video_id: str
    frame_index: int
    box: BoundingBox
    confidence: float = 1.0
    track_id: Optional[int] = None

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValidationError("confidence", f"{self.confidence} not in [0, 1]")

    def sort_key(self):
        return (self.video_id, self.frame_index, self.box.as_tuple())


@dataclass
class FlowField:
    u: np.ndarray
    v: np.ndarray
    from_index: int
    to_index: int

    def __post_init__(self):
        if self.u.shape != self.v.shape:
            raise ValidationError("flow", "u and v shapes differ")
        if self.to_index != self.from_index + 1:
            raise ValidationError("to_index", "flow must connect consecutive frames")
