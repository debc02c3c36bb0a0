"""Dense optical flow providers and magnitude normalization."""
from __future__ import annotations

import itertools
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import ndimage

from .tensorfile import load_tensor
from .types import FlowField, Frame

FLOW_NORM = 50.0

FlowProvider = Callable[[Frame, Frame], FlowField]


class FlowError(RuntimeError):
    def __init__(self, video_id: str, pair: tuple[int, int], message: str):
        super().__init__(f"flow {video_id} {pair[0]}->{pair[1]}: {message}")
        self.video_id = video_id
        self.pair = pair


def flow_magnitude(flow: FlowField, norm_const: float = FLOW_NORM) -> np.ndarray:
    """Euclidean displacement divided by ``norm_const`` and clipped to 1."""
    if norm_const <= 0:
        raise ValueError("norm_const must be positive")
    mag = np.hypot(flow.u.astype(np.float64), flow.v.astype(np.float64)) / norm_const
    return np.minimum(mag, 1.0)


def compute_flow(frame_t: Frame, frame_t1: Frame, provider: FlowProvider) -> FlowField:
    if frame_t.pixels.shape != frame_t1.pixels.shape:
        raise FlowError(frame_t.video_id, (frame_t.frame_index, frame_t1.frame_index),
                        f"shape mismatch {frame_t.pixels.shape} vs {frame_t1.pixels.shape}")
    return provider(frame_t, frame_t1)


class TableFlowProvider:
    """Serves precomputed fields keyed by ``(video_id, from_index)``.

    Used for the analytic fields of synthetic scenes.
    """

    def __init__(self, fields: Mapping[str, Sequence[FlowField]]):
        self._fields = {
            (vid, f.from_index): f for vid, seq in fields.items() for f in seq
        }

    def __call__(self, frame_t: Frame, frame_t1: Frame) -> FlowField:
        pair = (frame_t.frame_index, frame_t1.frame_index)
        if frame_t1.frame_index != frame_t.frame_index + 1:
            raise FlowError(frame_t.video_id, pair, "frames are not consecutive")
        try:
            return self._fields[(frame_t.video_id, frame_t.frame_index)]
        except KeyError:
            raise FlowError(frame_t.video_id, pair, "no flow field available") from None


class FileFlowProvider:
    """Loads ``<root>/<video_id>.stpv`` raw tensors of shape (T-1, H, W, 2)."""

    def __init__(self, root):
        self.root = Path(root)
        self._cache: dict[str, np.ndarray] = {}

    def _load(self, video_id: str) -> np.ndarray:
        if video_id not in self._cache:
            self._cache[video_id] = load_tensor(self.root / f"{video_id}.stpv")
        return self._cache[video_id]

    def __call__(self, frame_t: Frame, frame_t1: Frame) -> FlowField:
        pair = (frame_t.frame_index, frame_t1.frame_index)
        if frame_t1.frame_index != frame_t.frame_index + 1:
            raise FlowError(frame_t.video_id, pair, "frames are not consecutive")
        try:
            data = self._load(frame_t.video_id)
        except Exception as exc:
            raise FlowError(frame_t.video_id, pair, str(exc)) from exc
        if frame_t.frame_index >= data.shape[0]:
            raise FlowError(frame_t.video_id, pair, "index beyond stored fields")
        field = data[frame_t.frame_index]
        return FlowField(field[..., 0], field[..., 1], *pair)


def _gray(frame: Frame) -> np.ndarray:
    return frame.pixels.astype(np.float64).mean(axis=2)


def _pool2(img: np.ndarray) -> np.ndarray:
    h, w = (img.shape[0] // 2) * 2, (img.shape[1] // 2) * 2
    return img[:h, :w].reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


class BlockMatchingFlow:
    """Coarse-to-fine block matching.

    At every pyramid level the second image is warped by the current
    estimate and each pixel picks the integer offset within ``radius``
    minimising the window-averaged absolute difference.  The coarsest
    level searches ``coarse_radius``, finer levels refine by ``radius``.
    Ties keep the smallest offset, so textureless areas stay at zero.
    """

    def __init__(self, window: int = 9, levels: int = 3, coarse_radius: int = 4, radius: int = 1):
        self.window = window
        self.levels = levels
        self.coarse_radius = coarse_radius
        self.radius = radius

    def _refine(self, im0, im1, u, v, radius):
        h, w = im0.shape
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        warped = ndimage.map_coordinates(im1, [yy + v, xx + u], order=1, mode="nearest")
        offsets = sorted(itertools.product(range(-radius, radius + 1), repeat=2),
                         key=lambda d: (abs(d[0]) + abs(d[1]), d))
        best = np.full((h, w), np.inf)
        du = np.zeros((h, w))
        dv = np.zeros((h, w))
        for dy, dx in offsets:
            shifted = ndimage.shift(warped, (-dy, -dx), order=0, mode="nearest")
            cost = ndimage.uniform_filter(np.abs(shifted - im0), self.window, mode="nearest")
            better = cost < best - 1e-12
            best[better] = cost[better]
            du[better] = dx
            dv[better] = dy
        return u + du, v + dv

    def __call__(self, frame_t: Frame, frame_t1: Frame) -> FlowField:
        pyr0, pyr1 = [_gray(frame_t)], [_gray(frame_t1)]
        for _ in range(self.levels - 1):
            if min(pyr0[-1].shape) < 2 * self.window:
                break
            pyr0.append(_pool2(pyr0[-1]))
            pyr1.append(_pool2(pyr1[-1]))
        u = np.zeros(pyr0[-1].shape)
        v = np.zeros(pyr0[-1].shape)
        for level in range(len(pyr0) - 1, -1, -1):
            im0, im1 = pyr0[level], pyr1[level]
            if u.shape != im0.shape:
                u = 2.0 * _upsample_to(u, im0.shape)
                v = 2.0 * _upsample_to(v, im0.shape)
            radius = self.coarse_radius if level == len(pyr0) - 1 else self.radius
            u, v = self._refine(im0, im1, u, v, radius)
        return FlowField(u.astype(np.float32), v.astype(np.float32),
                         frame_t.frame_index, frame_t1.frame_index)


def _upsample_to(field: np.ndarray, shape) -> np.ndarray:
    out = np.repeat(np.repeat(field, 2, axis=0), 2, axis=1)
    pad_h, pad_w = shape[0] - out.shape[0], shape[1] - out.shape[1]
    if pad_h or pad_w:
        out = np.pad(out, ((0, max(pad_h, 0)), (0, max(pad_w, 0))), mode="edge")
    return out[:shape[0], :shape[1]]
