"""Object- and frame-level anomaly scores."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
from scipy import ndimage

from .flow import FlowProvider
from .ingest import ObjectSample, build_samples, filter_detections
from .model import BRANCHES, PredictiveNet
from .types import BoundingBox, Detection, Frame, ValidationError

SIGMA_FLOOR = 1e-12
SMOOTH_SIGMA = 3.0


@dataclass
class NormalizationStats:
    """Mean and covariance of training error vectors.

    Only ``diag(sigma)`` enters the score; ``active`` masks branches that
    were disabled during training.
    """

    mu: np.ndarray
    sigma: np.ndarray
    sigma_floor: float = SIGMA_FLOOR
    active: tuple[bool, ...] = (True, True, True, True)

    @property
    def scale(self) -> np.ndarray:
        return np.sqrt(np.diag(self.sigma) + self.sigma_floor)

    def to_dict(self) -> dict:
        return {"mu": self.mu.tolist(), "sigma": self.sigma.tolist(),
                "sigma_floor": self.sigma_floor, "active": list(self.active)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(np.array(d["mu"], dtype=np.float64), np.array(d["sigma"], dtype=np.float64),
                   float(d["sigma_floor"]), tuple(bool(a) for a in d["active"]))


@dataclass
class ObjectScore:
    sample_id: str
    video_id: str
    frame_index: int
    box: BoundingBox
    raw: np.ndarray
    s: float


@dataclass
class FrameScoreSeries:
    video_id: str
    scores: np.ndarray


@dataclass
class ScoreConfig:
    width_scaling: bool = False
    smooth_sigma: float = SMOOTH_SIGMA
    empty_frame_value: Optional[float] = None  # None: take the checkpoint's value
    batch_size: int = 256


def _errors(net: PredictiveNet, samples: Sequence[ObjectSample], branches) -> np.ndarray:
    q = np.stack([s.Q for s in samples]).transpose(0, 3, 1, 2)
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        out = net(torch.from_numpy(np.ascontiguousarray(q)).to(dtype), branches)
    errs = np.zeros((len(samples), len(BRANCHES)))
    for k, b in enumerate(BRANCHES):
        if b not in out:
            continue
        pred = torch.sigmoid(out[b]).double().numpy().transpose(0, 2, 3, 1)
        target = np.stack([getattr(s, b) for s in samples]).astype(np.float64)
        errs[:, k] = np.abs(pred - target).reshape(len(samples), -1).sum(axis=1)
    return errs


def prediction_errors(net: PredictiveNet, sample: ObjectSample) -> np.ndarray:
    """l1 errors (L^{t-1}, L^{t-1->t}, L^{t->t+1}, L^{t+1}) summed over pixels and channels."""
    return _errors(net, [sample], BRANCHES)[0]


def prediction_errors_batch(net: PredictiveNet, samples: Sequence[ObjectSample],
                            batch_size: int = 256, active: Sequence[bool] = (True,) * 4) -> np.ndarray:
    """Stacked error vectors; disabled branches are left at 0 and never read."""
    branches = [b for b, a in zip(BRANCHES, active) if a]
    if not samples:
        return np.zeros((0, len(BRANCHES)))
    return np.concatenate([_errors(net, samples[i:i + batch_size], branches)
                           for i in range(0, len(samples), batch_size)])


def zscore_aggregate(L: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    """Mean of per-branch Z-scores over the active branches; works on (4,) or (N, 4)."""
    z = (np.asarray(L, dtype=np.float64) - stats.mu) / stats.scale
    mask = np.asarray(stats.active, dtype=bool)
    return z[..., mask].mean(axis=-1)


def scale_by_width(s: float, box: BoundingBox) -> float:
    return s * box.width


def frame_scores(object_scores: Iterable[ObjectScore], video_length: int,
                 empty_frame_value: float, video_id: Optional[str] = None) -> FrameScoreSeries:
    out = np.full(video_length, -np.inf)
    vids = set()
    for o in object_scores:
        vids.add(o.video_id)
        if not 0 <= o.frame_index < video_length:
            raise ValidationError("frame_index", f"{o.frame_index} outside video of length {video_length}")
        out[o.frame_index] = max(out[o.frame_index], o.s)
    if len(vids) > 1:
        raise ValidationError("object_scores", f"scores from several videos: {sorted(vids)}")
    out[np.isneginf(out)] = empty_frame_value
    return FrameScoreSeries(video_id if video_id is not None else (vids.pop() if vids else ""), out)


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def smooth_scores(series: FrameScoreSeries, sigma_frames: float = SMOOTH_SIGMA) -> FrameScoreSeries:
    """Normalized Gaussian with radius ceil(3 sigma) and reflected borders."""
    if sigma_frames < 0:
        raise ValueError("sigma_frames must be >= 0")
    scores = np.asarray(series.scores, dtype=np.float64)
    if sigma_frames == 0 or len(scores) == 0:
        return FrameScoreSeries(series.video_id, scores.copy())
    smoothed = ndimage.correlate1d(scores, gaussian_kernel(sigma_frames), mode="reflect")
    return FrameScoreSeries(series.video_id, smoothed)


def score_samples(net: PredictiveNet, stats: NormalizationStats, samples: Sequence[ObjectSample],
                  width_scaling: bool = False, batch_size: int = 256) -> list[ObjectScore]:
    errs = prediction_errors_batch(net, samples, batch_size, stats.active)
    agg = zscore_aggregate(errs, stats) if len(samples) else np.zeros(0)
    out = []
    for s, L, a in zip(samples, errs, agg):
        a = float(a)
        if width_scaling:
            a = scale_by_width(a, s.box)
        out.append(ObjectScore(s.sample_id, s.video_id, s.frame_index, s.box, L, a))
    return out


def score_video(checkpoint, frames: Sequence[Frame], detections: Iterable[Detection],
                config: Optional[ScoreConfig] = None, flow_provider: FlowProvider = None):
    """Score one video end to end; returns (object scores, smoothed frame series)."""
    config = config or ScoreConfig()
    if not frames:
        raise ValidationError("frames", "empty video")
    video_ids = {f.video_id for f in frames}
    if len(video_ids) != 1:
        raise ValidationError("frames", f"expected one video, got {sorted(video_ids)}")
    (vid,) = video_ids
    ing = checkpoint.ingest_config
    dets = filter_detections([d for d in detections if d.video_id == vid],
                             ing.conf_threshold, ing.min_area)
    samples = build_samples(frames, dets, flow_provider, ing.delta_t,
                            checkpoint.train_config.downscale_ratio, ing.flow_norm)
    objects = score_samples(checkpoint.net, checkpoint.stats, samples,
                            config.width_scaling, config.batch_size)
    empty = config.empty_frame_value
    if empty is None:
        empty = checkpoint.empty_frame_value
    series = frame_scores(objects, len(frames), empty, vid)
    return objects, smooth_scores(series, config.smooth_sigma)


def write_object_scores(path, scores: Iterable[ObjectScore]) -> None:
    with open(path, "w") as fh:
        for o in scores:
            x1, y1, x2, y2 = o.box.as_tuple()
            fh.write(json.dumps({"video": o.video_id, "frame": o.frame_index, "x1": x1, "y1": y1,
                                 "x2": x2, "y2": y2, "L": [float(v) for v in o.raw],
                                 "s": float(o.s)}) + "\n")


def write_frame_scores(path, series: Iterable[FrameScoreSeries]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["video", "frame", "score"])
        for s in series:
            for t, v in enumerate(s.scores):
                w.writerow([s.video_id, t, repr(float(v))])
