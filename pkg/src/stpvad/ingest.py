"""Frames, detections and flow in; ObjectSample records out."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

from .flow import FLOW_NORM, FlowError, FlowProvider, compute_flow, flow_magnitude
from .tensorfile import TensorFormatError, load_tensor, save_tensor
from .types import BoundingBox, Detection, Frame, ValidationError

PATCH_SIZE = 64
CONF_THRESHOLD = 0.7
MIN_AREA = 300
DELTA_T = 1
DOWNSCALE_RATIO = 0.5
SUPPORTED_RATIOS = (1.0, 0.5, 0.25)

_FRAME_RE = re.compile(r"^frame_(\d+)\.png$")
_VIDEO_RE = re.compile(r"^video_(\d+)$")


class FrameLoadError(RuntimeError):
    pass


@dataclass
class ObjectSample:
    sample_id: str
    video_id: str
    frame_index: int
    box: BoundingBox
    A_prev: np.ndarray
    A_curr: np.ndarray
    A_next: np.ndarray
    M_prev: np.ndarray
    M_next: np.ndarray
    Q: np.ndarray


# -- frames ------------------------------------------------------------------

def video_dir_name(index: int) -> str:
    return f"video_{index:02d}"


def frame_file_name(index: int) -> str:
    return f"frame_{index:04d}.png"


def _read_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            arr = np.asarray(img)
    except Exception as exc:
        raise FrameLoadError(f"cannot read {path}: {exc}") from exc
    if arr.ndim == 3 and arr.shape[2] == 4:
        arr = arr[..., :3]
    if arr.dtype == np.uint16:
        return arr.astype(np.float32) / 65535.0
    return arr.astype(np.float32) / 255.0


def _load_video_dir(path: Path, video_id: str) -> list[Frame]:
    indexed = {}
    for p in path.iterdir():
        m = _FRAME_RE.match(p.name)
        if m:
            indexed[int(m.group(1))] = p
    if not indexed:
        raise FrameLoadError(f"no frame_<t>.png files in {path}")
    missing = sorted(set(range(max(indexed) + 1)) - set(indexed))
    if missing:
        listed = ", ".join(str(i) for i in missing)
        raise FrameLoadError(f"{video_id}: missing frame_index {listed}")
    return [Frame(_read_png(indexed[i]), video_id, i) for i in sorted(indexed)]


def load_frames(path) -> list[Frame]:
    """Load frames sorted by ``(video_id, frame_index)``.

    ``path`` may be a ``video_<v>`` directory, a directory containing such
    directories, or a raw tensor file of shape (T, H, W, C) or (T, H, W).
    """
    path = Path(path)
    if path.is_file():
        try:
            data = load_tensor(path)
        except TensorFormatError as exc:
            raise FrameLoadError(str(exc)) from exc
        if data.ndim == 3:
            data = data[..., None]
        if data.ndim != 4:
            raise FrameLoadError(f"{path}: expected (T,H,W[,C]) tensor, got {data.shape}")
        vid = path.stem
        return [Frame(np.clip(data[t], 0.0, 1.0), vid, t) for t in range(data.shape[0])]
    if not path.is_dir():
        raise FrameLoadError(f"{path} does not exist")
    if _VIDEO_RE.match(path.name) or any(_FRAME_RE.match(p.name) for p in path.iterdir()):
        return _load_video_dir(path, path.name)
    videos = sorted(p for p in path.iterdir() if p.is_dir() and _VIDEO_RE.match(p.name))
    if not videos:
        raise FrameLoadError(f"no video_<v> directories in {path}")
    frames: list[Frame] = []
    for vdir in videos:
        frames.extend(_load_video_dir(vdir, vdir.name))
    return frames


def group_frames(frames: Iterable[Frame]) -> dict[str, list[Frame]]:
    videos: dict[str, list[Frame]] = {}
    for f in frames:
        videos.setdefault(f.video_id, []).append(f)
    for seq in videos.values():
        seq.sort(key=lambda f: f.frame_index)
    return dict(sorted(videos.items()))


def write_frames(root, frames: Sequence[Frame]) -> None:
    """Write frames as 8-bit PNGs under ``root/<video_id>/frame_<t>.png``."""
    root = Path(root)
    for f in frames:
        vdir = root / f.video_id
        vdir.mkdir(parents=True, exist_ok=True)
        arr = np.round(np.clip(f.pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
        if arr.shape[2] == 1:
            arr = arr[..., 0]
        # no optional chunks, so identical pixels give identical bytes
        Image.fromarray(arr).save(vdir / frame_file_name(f.frame_index), optimize=False)


def save_frames_tensor(path, frames: Sequence[Frame]) -> None:
    save_tensor(path, np.stack([f.pixels for f in frames]))


# -- detections --------------------------------------------------------------

def read_detections(path) -> list[Detection]:
    dets = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                dets.append(Detection(
                    str(rec["video"]), int(rec["frame"]),
                    BoundingBox(int(rec["x1"]), int(rec["y1"]), int(rec["x2"]), int(rec["y2"])),
                    float(rec["conf"]),
                    None if rec.get("track") is None else int(rec["track"]),
                ))
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise ValidationError(f"{path}:{lineno}", str(exc)) from exc
    return dets


def write_detections(path, dets: Iterable[Detection]) -> None:
    with open(path, "w") as fh:
        for d in dets:
            x1, y1, x2, y2 = d.box.as_tuple()
            fh.write(json.dumps({"video": d.video_id, "frame": d.frame_index,
                                 "x1": x1, "y1": y1, "x2": x2, "y2": y2,
                                 "conf": d.confidence, "track": d.track_id}) + "\n")


def filter_detections(dets: Iterable[Detection], conf_threshold: float = CONF_THRESHOLD,
                      min_area: float = MIN_AREA) -> list[Detection]:
    return [d for d in dets if d.confidence >= conf_threshold and d.box.area >= min_area]


# -- resampling --------------------------------------------------------------

def _axis_taps(n_in: int, n_out: int):
    # half-pixel centres, edge-clamped
    coords = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    coords = np.clip(coords, 0.0, n_in - 1)
    lo = np.floor(coords).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, coords - lo


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an (H, W) or (H, W, C) array."""
    y0, y1, wy = _axis_taps(img.shape[0], out_h)
    x0, x1, wx = _axis_taps(img.shape[1], out_w)
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        wy = wy[:, None, None]
        wx = wx[None, :, None]
    else:
        wy = wy[:, None]
        wx = wx[None, :]
    rows = img[y0] * (1.0 - wy) + img[y1] * wy
    return rows[:, x0] * (1.0 - wx) + rows[:, x1] * wx


def crop_resize(image: np.ndarray, box: BoundingBox, out_size: int = PATCH_SIZE) -> np.ndarray:
    h, w = image.shape[:2]
    if not box.within(w, h):
        raise ValidationError("box", f"{box.as_tuple()} outside {w}x{h} image")
    region = image[box.y1:box.y2, box.x1:box.x2]
    out = resize_bilinear(region, out_size, out_size)
    lo, hi = region.min(), region.max()
    return np.clip(out, lo, hi)


def downscale_query(a_curr: np.ndarray, ratio: float) -> np.ndarray:
    """Average-pool by ``1/ratio`` then bilinearly upsample back to full size."""
    factor = None
    for r in SUPPORTED_RATIOS:
        if abs(ratio - r) < 1e-9:
            factor = int(round(1.0 / r))
    if factor is None:
        raise ValidationError("downscale_ratio", f"unsupported ratio {ratio}; use 1, 1/2 or 1/4")
    if factor == 1:
        return np.array(a_curr, dtype=np.float64, copy=True)
    h, w = a_curr.shape[:2]
    if h % factor or w % factor:
        raise ValidationError("downscale_ratio", f"{factor} does not divide {h}x{w}")
    tail = a_curr.shape[2:]
    pooled = np.asarray(a_curr, dtype=np.float64).reshape(
        h // factor, factor, w // factor, factor, *tail).mean(axis=(1, 3))
    return np.clip(resize_bilinear(pooled, h, w), 0.0, 1.0)


# -- samples -----------------------------------------------------------------

def build_samples(frames: Sequence[Frame], detections: Iterable[Detection],
                  flow_provider: FlowProvider, delta_t: int = DELTA_T,
                  downscale_ratio: float = DOWNSCALE_RATIO, flow_norm: float = FLOW_NORM,
                  patch_size: int = PATCH_SIZE) -> list[ObjectSample]:
    """Crop appearance triplets and flow-magnitude pairs for every detection.

    Every crop uses the detection's box at frame ``t``; there is no tracking.
    Detections without frames ``t - delta_t`` and ``t + delta_t`` are
    skipped. Motion patches always come from the flows ``t-1 -> t`` and
    ``t -> t+1``.
    """
    if delta_t < 1:
        raise ValidationError("delta_t", "must be >= 1")
    videos = {vid: {f.frame_index: f for f in seq} for vid, seq in group_frames(frames).items()}
    magnitudes: dict[tuple[str, int], np.ndarray] = {}

    def magnitude(video_id: str, t: int) -> np.ndarray:
        key = (video_id, t)
        if key not in magnitudes:
            seq = videos[video_id]
            try:
                field = compute_flow(seq[t], seq[t + 1], flow_provider)
            except FlowError:
                raise
            except Exception as exc:
                raise FlowError(video_id, (t, t + 1), str(exc)) from exc
            magnitudes[key] = flow_magnitude(field, flow_norm)
        return magnitudes[key]

    samples = []
    for det in sorted(detections, key=Detection.sort_key):
        seq = videos.get(det.video_id)
        t = det.frame_index
        if seq is None or t not in seq:
            continue
        if (t - delta_t) not in seq or (t + delta_t) not in seq:
            continue
        if (t - 1) not in seq or (t + 1) not in seq:
            continue
        h, w = seq[t].shape
        box = det.box if det.box.within(w, h) else det.box.clamp(w, h)
        a = [crop_resize(seq[i].pixels, box, patch_size) for i in (t - delta_t, t, t + delta_t)]
        m_prev = crop_resize(magnitude(det.video_id, t - 1), box, patch_size)[..., None]
        m_next = crop_resize(magnitude(det.video_id, t), box, patch_size)[..., None]
        f32 = np.float32
        samples.append(ObjectSample(
            sample_id=f"{det.video_id}/{t}/{box.x1},{box.y1},{box.x2},{box.y2}",
            video_id=det.video_id, frame_index=t, box=box,
            A_prev=a[0].astype(f32), A_curr=a[1].astype(f32), A_next=a[2].astype(f32),
            M_prev=m_prev.astype(f32), M_next=m_next.astype(f32),
            Q=downscale_query(a[1], downscale_ratio).astype(f32),
        ))
    return samples


def stack_samples(samples: Sequence[ObjectSample], field: str) -> np.ndarray:
    return np.stack([getattr(s, field) for s in samples])


@dataclass(frozen=True)
class IngestConfig:
    conf_threshold: float = CONF_THRESHOLD
    min_area: float = MIN_AREA
    flow_norm: float = FLOW_NORM
    delta_t: int = DELTA_T
    channels: int = 1
