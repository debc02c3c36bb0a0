"""Frame-level ROC AUC and the region/track detection criteria (RBDC, TBDC).

RBDC and TBDC follow the criterion of Ramachandra et al.: a ground-truth
region counts as detected when a same-frame prediction above the threshold
overlaps it with IoU >= ``iou_thr`` (default 0.1), a track counts as
detected when at least ``track_coverage`` (default 0.1) of its regions are,
and the false-positive axis is integrated over [0, ``max_fpr``] false
positives per frame, counted over all test frames.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .types import BoundingBox, ValidationError

log = logging.getLogger(__name__)

IOU_THR = 0.1
TRACK_COVERAGE = 0.1
MAX_FPR = 1.0


@dataclass(frozen=True)
class Region:
    video: str
    frame: int
    box: BoundingBox
    track_id: int


@dataclass
class GroundTruth:
    frame_labels: dict[str, np.ndarray]
    regions: list[Region] = field(default_factory=list)

    def __post_init__(self):
        for r in self.regions:
            labels = self.frame_labels.get(r.video)
            if labels is None or r.frame >= len(labels):
                raise ValidationError("regions", f"region in unknown frame {r.video}/{r.frame}")
            if labels[r.frame] != 1:
                raise ValidationError("frame_labels", f"{r.video}/{r.frame} has a region but label 0")

    @property
    def total_frames(self) -> int:
        return int(sum(len(v) for v in self.frame_labels.values()))

    @property
    def tracks(self) -> dict[tuple[str, int], list[int]]:
        """Region indices grouped by ``(video, track_id)``."""
        out: dict[tuple[str, int], list[int]] = {}
        for i, r in enumerate(self.regions):
            out.setdefault((r.video, r.track_id), []).append(i)
        return out


@dataclass(frozen=True)
class PredictedRegion:
    video: str
    frame: int
    box: BoundingBox
    score: float


@dataclass
class EvalCurve:
    fp_per_frame: np.ndarray
    detection_rate: np.ndarray

    def to_dict(self) -> dict:
        return {"fp_per_frame": self.fp_per_frame.tolist(),
                "detection_rate": self.detection_rate.tolist()}


@dataclass
class EvalReport:
    micro_auc: float
    macro_auc: float
    rbdc: float
    tbdc: float
    per_video_auc: dict[str, float]
    rbdc_curve: EvalCurve
    tbdc_curve: EvalCurve

    def to_dict(self) -> dict:
        return {
            "micro_auc": self.micro_auc,
            "macro_auc": self.macro_auc,
            "rbdc": self.rbdc,
            "tbdc": self.tbdc,
            "per_video_auc": self.per_video_auc,
            "curves": {"rbdc": self.rbdc_curve.to_dict(), "tbdc": self.tbdc_curve.to_dict()},
        }


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


# -- frame level -------------------------------------------------------------

def roc_auc(scores, labels) -> float:
    """Mann-Whitney estimate of P(pos > neg) + P(tie) / 2 using midranks."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-D and equally long")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC is undefined: need both positive and negative labels")
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(len(scores))
    # midrank for each run of ties
    boundaries = np.flatnonzero(np.diff(sorted_scores)) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [len(scores)]))
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = 0.5 * (s + e + 1)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _minmax(x: np.ndarray) -> np.ndarray:
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros_like(x, dtype=np.float64)
    return (x - lo) / (hi - lo)


def _aligned(all_series: Mapping[str, Sequence[float]], gt: GroundTruth):
    for video, labels in gt.frame_labels.items():
        if video not in all_series:
            raise ValidationError(video, "no frame scores for labeled video")
        series = np.asarray(all_series[video], dtype=np.float64)
        if len(series) != len(labels):
            raise ValidationError(video, f"{len(series)} scores for {len(labels)} labeled frames")
        yield video, series, np.asarray(labels)


def micro_auc(all_series, gt: GroundTruth, normalize_per_video: bool = True) -> float:
    scores, labels = [], []
    for _, series, lab in _aligned(all_series, gt):
        scores.append(_minmax(series) if normalize_per_video else series)
        labels.append(lab)
    return roc_auc(np.concatenate(scores), np.concatenate(labels))


def per_video_auc(all_series, gt: GroundTruth) -> dict[str, float]:
    out = {}
    for video, series, lab in _aligned(all_series, gt):
        if lab.min() == lab.max():
            log.warning("video %s has a single class; excluded from macro AUC", video)
            continue
        out[video] = roc_auc(series, lab)
    return out


def macro_auc(all_series, gt: GroundTruth) -> float:
    aucs = per_video_auc(all_series, gt)
    if not aucs:
        raise ValueError("no video has both normal and abnormal frames")
    return float(np.mean(list(aucs.values())))


# -- region / track level ----------------------------------------------------

def _match_table(preds: Sequence[PredictedRegion], gt: GroundTruth, iou_thr: float):
    by_frame: dict[tuple[str, int], list[int]] = {}
    for j, r in enumerate(gt.regions):
        by_frame.setdefault((r.video, r.frame), []).append(j)
    region_best = np.full(len(gt.regions), -np.inf)
    is_fp = np.zeros(len(preds), dtype=bool)
    for p in preds:
        if not math.isfinite(p.score):
            raise ValidationError("score", f"non-finite prediction score at {p.video}/{p.frame}")
    for i, p in enumerate(preds):
        hit = False
        for j in by_frame.get((p.video, p.frame), ()):
            if iou(p.box, gt.regions[j].box) >= iou_thr:
                hit = True
                region_best[j] = max(region_best[j], p.score)
        is_fp[i] = not hit
    return region_best, is_fp


def _sweep(scores: np.ndarray, is_fp: np.ndarray, unit_best: np.ndarray,
           total_frames: int) -> EvalCurve:
    """Curve points for every distinct prediction score, highest first."""
    thresholds = np.unique(scores)[::-1]
    fp_scores = np.sort(scores[is_fp])
    unit_scores = np.sort(unit_best)
    fp = len(fp_scores) - np.searchsorted(fp_scores, thresholds, side="left")
    det = len(unit_scores) - np.searchsorted(unit_scores, thresholds, side="left")
    return EvalCurve(fp / float(total_frames), det / float(len(unit_best)))


def curve_area(curve: EvalCurve, max_fpr: float = MAX_FPR) -> float:
    """Normalized area under the right-continuous step envelope on [0, max_fpr]."""
    xs, ys = curve.fp_per_frame, np.maximum.accumulate(curve.detection_rate) \
        if len(curve.detection_rate) else curve.detection_rate
    area = 0.0
    for i in range(len(xs)):
        left = xs[i]
        right = xs[i + 1] if i + 1 < len(xs) else max_fpr
        left, right = min(left, max_fpr), min(right, max_fpr)
        if right > left:
            area += (right - left) * ys[i]
    return float(area / max_fpr)


def rbdc_curve(preds, gt: GroundTruth, iou_thr: float = IOU_THR) -> EvalCurve:
    if not gt.regions:
        raise ValueError("RBDC needs at least one ground-truth region")
    region_best, is_fp = _match_table(preds, gt, iou_thr)
    scores = np.array([p.score for p in preds], dtype=np.float64)
    return _sweep(scores, is_fp, region_best, gt.total_frames)


def _track_scores(region_best: np.ndarray, gt: GroundTruth, coverage: float) -> np.ndarray:
    if not 0.0 < coverage <= 1.0:
        raise ValueError("track_coverage must be in (0, 1]")
    out = []
    for members in gt.tracks.values():
        n = len(members)
        k = next(k for k in range(1, n + 1) if k / n >= coverage)
        best = np.sort(region_best[members])[::-1]
        # detected at tau iff the k-th best region score is >= tau
        out.append(best[k - 1])
    return np.array(out)


def tbdc_curve(preds, gt: GroundTruth, iou_thr: float = IOU_THR,
               track_coverage: float = TRACK_COVERAGE) -> EvalCurve:
    if not gt.regions:
        raise ValueError("TBDC needs at least one ground-truth track")
    region_best, is_fp = _match_table(preds, gt, iou_thr)
    scores = np.array([p.score for p in preds], dtype=np.float64)
    return _sweep(scores, is_fp, _track_scores(region_best, gt, track_coverage), gt.total_frames)


def rbdc(preds, gt: GroundTruth, iou_thr: float = IOU_THR, max_fpr: float = MAX_FPR) -> float:
    return curve_area(rbdc_curve(preds, gt, iou_thr), max_fpr)


def tbdc(preds, gt: GroundTruth, iou_thr: float = IOU_THR,
         track_coverage: float = TRACK_COVERAGE, max_fpr: float = MAX_FPR) -> float:
    return curve_area(tbdc_curve(preds, gt, iou_thr, track_coverage), max_fpr)


# -- files -------------------------------------------------------------------

@dataclass
class EvalConfig:
    iou_thr: float = IOU_THR
    track_coverage: float = TRACK_COVERAGE
    max_fpr: float = MAX_FPR
    normalize_per_video: bool = True


def evaluate_predictions(all_series, preds, gt: GroundTruth,
                         config: Optional[EvalConfig] = None) -> EvalReport:
    config = config or EvalConfig()
    per_video = per_video_auc(all_series, gt)
    if not per_video:
        raise ValueError("no video has both normal and abnormal frames")
    rc = rbdc_curve(preds, gt, config.iou_thr)
    tc = tbdc_curve(preds, gt, config.iou_thr, config.track_coverage)
    return EvalReport(
        micro_auc=micro_auc(all_series, gt, config.normalize_per_video),
        macro_auc=float(np.mean(list(per_video.values()))),
        rbdc=curve_area(rc, config.max_fpr),
        tbdc=curve_area(tc, config.max_fpr),
        per_video_auc=per_video,
        rbdc_curve=rc,
        tbdc_curve=tc,
    )


def read_frame_labels(path) -> dict[str, np.ndarray]:
    rows: dict[str, dict[int, int]] = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            try:
                rows.setdefault(rec["video"], {})[int(rec["frame"])] = int(rec["label"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ValidationError(str(path), f"bad label row {rec}: {exc}") from exc
    out = {}
    for video, frames in sorted(rows.items()):
        n = max(frames) + 1
        if len(frames) != n:
            raise ValidationError(video, "frame labels are not contiguous from 0")
        out[video] = np.array([frames[i] for i in range(n)], dtype=np.int64)
    return out


def write_frame_labels(path, labels: Mapping[str, np.ndarray]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["video", "frame", "label"])
        for video in sorted(labels):
            for t, lab in enumerate(labels[video]):
                w.writerow([video, t, int(lab)])


def read_regions(path) -> list[Region]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                r = json.loads(line)
                out.append(Region(str(r["video"]), int(r["frame"]),
                                  BoundingBox(int(r["x1"]), int(r["y1"]), int(r["x2"]), int(r["y2"])),
                                  int(r["track"])))
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise ValidationError(f"{path}:{lineno}", str(exc)) from exc
    return out


def write_regions(path, regions: Sequence[Region]) -> None:
    with open(path, "w") as fh:
        for r in regions:
            x1, y1, x2, y2 = r.box.as_tuple()
            fh.write(json.dumps({"video": r.video, "frame": r.frame, "x1": x1, "y1": y1,
                                 "x2": x2, "y2": y2, "track": r.track_id}) + "\n")


def read_ground_truth(regions_path, labels_path) -> GroundTruth:
    return GroundTruth(read_frame_labels(labels_path), read_regions(regions_path))


def read_frame_scores(path) -> dict[str, np.ndarray]:
    rows: dict[str, dict[int, float]] = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            try:
                rows.setdefault(rec["video"], {})[int(rec["frame"])] = float(rec["score"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ValidationError(str(path), f"bad score row {rec}: {exc}") from exc
    out = {}
    for video, frames in rows.items():
        n = max(frames) + 1
        if len(frames) != n:
            raise ValidationError(video, "frame scores are not contiguous from 0")
        out[video] = np.array([frames[i] for i in range(n)])
    return out


def read_predicted_regions(path) -> list[PredictedRegion]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                r = json.loads(line)
                out.append(PredictedRegion(str(r["video"]), int(r["frame"]),
                                           BoundingBox(int(r["x1"]), int(r["y1"]), int(r["x2"]), int(r["y2"])),
                                           float(r["s"])))
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise ValidationError(f"{path}:{lineno}", str(exc)) from exc
    return out


def evaluate(scores_files: tuple, gt_files: tuple, config: Optional[EvalConfig] = None) -> EvalReport:
    """Evaluate from files.

    ``scores_files`` is ``(object_scores.jsonl, frame_scores.csv)`` and
    ``gt_files`` is ``(regions.jsonl, frame_labels.csv)``.
    """
    object_path, frame_path = scores_files
    regions_path, labels_path = gt_files
    gt = read_ground_truth(regions_path, labels_path)
    return evaluate_predictions(read_frame_scores(frame_path),
                                read_predicted_regions(object_path), gt, config)


def write_report(path, report: EvalReport) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
