"""Deterministic synthetic surveillance scenes with exact flow and labels.

Normal objects travel along straight lines and wrap around the frame
borders. Anomalous objects exist only during their configured interval and
are placed so they stay fully visible for all of it.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .evalmetrics import GroundTruth, Region, write_frame_labels, write_regions
from .ingest import video_dir_name, write_detections, write_frames
from .tensorfile import save_tensor
from .types import BoundingBox, Detection, FlowField, Frame, ValidationError

SHAPES = ("square", "disk", "bar")
ANOMALY_TYPES = ("fast_mover", "novel_shape", "wrong_direction")
MAX_SPEED = 25
MIN_SIZE = 8

Intensity = Union[float, tuple]


@dataclass(frozen=True)
class ObjectSpec:
    shape: str = "square"
    size: int = 20
    intensity: Intensity = 0.7
    velocity: tuple[int, int] = (2, 0)  # (vx, vy) px/frame
    position: Optional[tuple] = None  # (x, y) at frame 0; None components are drawn from the seed


@dataclass(frozen=True)
class AnomalySpec:
    type: str
    onset: int
    duration: int
    video: Optional[int] = None  # None: every video
    shape: Optional[str] = None
    size: Optional[int] = None
    intensity: Optional[Intensity] = None
    velocity: Optional[tuple[int, int]] = None
    position: Optional[tuple] = None  # (x, y) at onset; None components: centred x, random y


@dataclass(frozen=True)
class SynthConfig:
    frame_size: tuple[int, int] = (120, 160)
    num_videos: int = 1
    frames_per_video: int = 60
    object_specs: tuple[ObjectSpec, ...] = (ObjectSpec(),)
    anomaly_specs: tuple[AnomalySpec, ...] = ()
    background: str = "constant"
    background_intensity: float = 0.2
    channels: int = 1
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)

        def tup(x):
            return tuple(x) if isinstance(x, list) else x

        objs = tuple(ObjectSpec(**{k: tup(v) for k, v in o.items()}) for o in d.pop("object_specs", []))
        anoms = tuple(AnomalySpec(**{k: tup(v) for k, v in a.items()}) for a in d.pop("anomaly_specs", []))
        if "frame_size" in d:
            d["frame_size"] = tuple(d["frame_size"])
        return cls(object_specs=objs, anomaly_specs=anoms, **d)


@dataclass(frozen=True)
class PlacedObject:
    track_id: int
    shape: str
    size: int
    intensity: np.ndarray
    x: int
    y: int
    velocity: tuple[int, int]
    anomalous: bool


@dataclass
class SceneState:
    video_id: str
    t: int
    frame_size: tuple[int, int]
    objects: list[PlacedObject]  # draw order: later objects on top


@dataclass
class SynthDataset:
    config: SynthConfig
    frames: dict[str, list[Frame]]
    detections: list[Detection]
    flow_fields: dict[str, list[FlowField]]
    ground_truth: GroundTruth
    states: dict[str, list[SceneState]] = field(repr=False, default_factory=dict)

    def all_frames(self) -> list[Frame]:
        return [f for vid in sorted(self.frames) for f in self.frames[vid]]

    def anomaly_intervals(self) -> dict[str, list[tuple[int, int]]]:
        out: dict[str, list[tuple[int, int]]] = {}
        for (video, _), idx in sorted(self.ground_truth.tracks.items()):
            frames = [self.ground_truth.regions[i].frame for i in idx]
            out.setdefault(video, []).append((min(frames), max(frames)))
        return out


# -- validation --------------------------------------------------------------

def _quantize(value: Intensity, channels: int, name: str) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(value, dtype=np.float64))
    if arr.size == 1:
        arr = np.repeat(arr, channels)
    if arr.size != channels:
        raise ValidationError(name, f"expected {channels} channel values")
    if np.any(arr < 0) or np.any(arr > 1):
        raise ValidationError(name, "intensity must lie in [0, 1]")
    # snap to 8-bit levels so PNG round trips are exact
    return (np.round(arr * 255.0) / 255.0).astype(np.float32)


def _check_object(shape, size, velocity, name):
    if shape not in SHAPES:
        raise ValidationError(f"{name}.shape", f"unknown shape {shape!r}")
    if int(size) != size or size < MIN_SIZE:
        raise ValidationError(f"{name}.size", f"must be an integer >= {MIN_SIZE}")
    if len(velocity) != 2 or any(int(c) != c for c in velocity):
        raise ValidationError(f"{name}.velocity", "must be two integers")
    if any(abs(c) > MAX_SPEED for c in velocity):
        raise ValidationError(f"{name}.velocity", f"|component| must be <= {MAX_SPEED}")


def _anomaly_defaults(spec: AnomalySpec, config: SynthConfig) -> ObjectSpec:
    if spec.type == "fast_mover":
        base = ObjectSpec("square", 20, 0.75, (12, 0))
    elif spec.type == "novel_shape":
        base = ObjectSpec("disk", 24, 0.75, (2, 0))
    elif spec.type == "wrong_direction":
        ref = config.object_specs[0] if config.object_specs else ObjectSpec()
        base = replace(ref, velocity=(-ref.velocity[0], -ref.velocity[1]), position=None)
    else:
        raise ValidationError("anomaly_specs.type", f"unknown anomaly type {spec.type!r}")
    overrides = {k: getattr(spec, k) for k in ("shape", "size", "intensity", "velocity")
                 if getattr(spec, k) is not None}
    return replace(base, **overrides)


def _shape_extent(shape: str, size: int) -> tuple[int, int]:
    """(width, height) of the shape's bounding square/rectangle."""
    return (size, max(MIN_SIZE, size // 2)) if shape == "bar" else (size, size)


def validate_config(config: SynthConfig) -> None:
    h, w = config.frame_size
    if h < MIN_SIZE or w < MIN_SIZE:
        raise ValidationError("frame_size", "frame too small")
    if config.num_videos < 1:
        raise ValidationError("num_videos", "must be >= 1")
    if config.frames_per_video < 1:
        raise ValidationError("frames_per_video", "must be >= 1")
    if config.channels not in (1, 3):
        raise ValidationError("channels", "must be 1 or 3")
    if config.background not in ("constant", "textured"):
        raise ValidationError("background", "must be 'constant' or 'textured'")
    _quantize(config.background_intensity, config.channels, "background_intensity")
    for i, o in enumerate(config.object_specs):
        name = f"object_specs[{i}]"
        _check_object(o.shape, o.size, o.velocity, name)
        _quantize(o.intensity, config.channels, f"{name}.intensity")
    for i, a in enumerate(config.anomaly_specs):
        name = f"anomaly_specs[{i}]"
        if a.type not in ANOMALY_TYPES:
            raise ValidationError(f"{name}.type", f"unknown anomaly type {a.type!r}")
        if a.onset < 0 or a.duration < 1:
            raise ValidationError(f"{name}.onset", "onset must be >= 0 and duration >= 1")
        if a.onset + a.duration > config.frames_per_video:
            raise ValidationError(f"{name}.duration", "onset + duration exceeds frames_per_video")
        if a.video is not None and not 0 <= a.video < config.num_videos:
            raise ValidationError(f"{name}.video", "no such video")
        obj = _anomaly_defaults(a, config)
        _check_object(obj.shape, obj.size, obj.velocity, name)
        _quantize(obj.intensity, config.channels, f"{name}.intensity")
        ow, oh = _shape_extent(obj.shape, obj.size)
        span_x = abs(obj.velocity[0]) * (a.duration - 1)
        span_y = abs(obj.velocity[1]) * (a.duration - 1)
        if span_x + ow > w or span_y + oh > h:
            raise ValidationError(f"{name}.duration",
                                  "anomalous object cannot stay fully visible for its duration")


# -- scene construction ------------------------------------------------------

def _wrap(p: int, extent: int, limit: int) -> int:
    return (p + extent) % (limit + extent) - extent


def _anomaly_start(obj: ObjectSpec, a: AnomalySpec, frame_size, rng) -> tuple[int, int]:
    h, w = frame_size
    ow, oh = _shape_extent(obj.shape, obj.size)
    vx, vy = obj.velocity
    d = a.duration - 1

    def axis(limit, ext, vel):
        lo = max(0, -vel * d)
        hi = min(limit - ext, limit - ext - vel * d)
        return lo, hi

    xlo, xhi = axis(w, ow, vx)
    ylo, yhi = axis(h, oh, vy)
    px, py = a.position if a.position is not None else (None, None)
    x = (xlo + xhi) // 2 if px is None else int(px)
    if py is not None:
        y = int(py)
    else:
        y = int(rng.integers(ylo, yhi + 1)) if vy == 0 else (ylo + yhi) // 2
    if not (xlo <= x <= xhi and ylo <= y <= yhi):
        raise ValidationError("anomaly_specs.position", "object would leave the frame")
    return x, y


def scene_states(config: SynthConfig, video: int) -> list[SceneState]:
    h, w = config.frame_size
    rng = np.random.default_rng([config.seed, video, 0])
    video_id = video_dir_name(video)
    normals = []
    for k, o in enumerate(config.object_specs):
        ow, oh = _shape_extent(o.shape, o.size)
        px, py = o.position if o.position is not None else (None, None)
        # draw both so fixing one coordinate leaves the other's stream unchanged
        rx, ry = int(rng.integers(-ow, w)), int(rng.integers(0, h - oh + 1))
        x0 = rx if px is None else int(px)
        y0 = ry if py is None else int(py)
        normals.append((k, o, x0, y0))
    anomalies = []
    for i, a in enumerate(config.anomaly_specs):
        if a.video is not None and a.video != video:
            continue
        obj = _anomaly_defaults(a, config)
        anomalies.append((i, a, obj, _anomaly_start(obj, a, config.frame_size, rng)))

    track_base = video * 1000
    states = []
    for t in range(config.frames_per_video):
        objs = []
        for k, o, x0, y0 in normals:
            ow, oh = _shape_extent(o.shape, o.size)
            vx, vy = o.velocity
            objs.append(PlacedObject(
                track_base + k, o.shape, o.size, _quantize(o.intensity, config.channels, "intensity"),
                _wrap(x0 + vx * t, ow, w), _wrap(y0 + vy * t, oh, h), (vx, vy), False))
        for i, a, obj, (xs, ys) in anomalies:
            if a.onset <= t < a.onset + a.duration:
                dt = t - a.onset
                objs.append(PlacedObject(
                    track_base + 500 + i, obj.shape, obj.size,
                    _quantize(obj.intensity, config.channels, "intensity"),
                    xs + obj.velocity[0] * dt, ys + obj.velocity[1] * dt, obj.velocity, True))
        states.append(SceneState(video_id, t, config.frame_size, objs))
    return states


def object_mask(obj: PlacedObject, frame_size) -> np.ndarray:
    h, w = frame_size
    ow, oh = _shape_extent(obj.shape, obj.size)
    yy, xx = np.mgrid[0:h, 0:w]
    inside = (xx >= obj.x) & (xx < obj.x + ow) & (yy >= obj.y) & (yy < obj.y + oh)
    if obj.shape == "disk":
        r = obj.size / 2.0
        cx, cy = obj.x + r, obj.y + r
        inside &= (xx + 0.5 - cx) ** 2 + (yy + 0.5 - cy) ** 2 <= r * r
    return inside


def _background(config: SynthConfig, video: int) -> np.ndarray:
    h, w = config.frame_size
    base = _quantize(config.background_intensity, config.channels, "background_intensity")
    bg = np.broadcast_to(base, (h, w, config.channels)).astype(np.float32)
    if config.background == "textured":
        rng = np.random.default_rng([config.seed, video, 1])
        noise = rng.integers(-25, 26, size=(h, w, 1)) / 255.0
        bg = np.clip(bg + noise, 0.0, 1.0).astype(np.float32)
        bg = (np.round(bg * 255.0) / 255.0).astype(np.float32)
    return bg


def render(state: SceneState, background: np.ndarray) -> np.ndarray:
    img = background.copy()
    for obj in state.objects:
        img[object_mask(obj, state.frame_size)] = obj.intensity
    return img


def analytic_flow(state_t: SceneState, state_t1: SceneState) -> FlowField:
    """Flow of every object pixel at ``t`` is its velocity; topmost object wins."""
    if state_t.video_id != state_t1.video_id or state_t1.t != state_t.t + 1:
        raise ValidationError("scene_state", "states must be consecutive frames of one video")
    h, w = state_t.frame_size
    u = np.zeros((h, w), np.float32)
    v = np.zeros((h, w), np.float32)
    for obj in state_t.objects:
        m = object_mask(obj, state_t.frame_size)
        u[m] = obj.velocity[0]
        v[m] = obj.velocity[1]
    return FlowField(u, v, state_t.t, state_t1.t)


def _tight_box(mask: np.ndarray) -> Optional[BoundingBox]:
    ys = np.flatnonzero(mask.any(axis=1))
    xs = np.flatnonzero(mask.any(axis=0))
    if len(xs) == 0:
        return None
    return BoundingBox(int(xs[0]), int(ys[0]), int(xs[-1]) + 1, int(ys[-1]) + 1)


def generate_scene(config: SynthConfig) -> SynthDataset:
    validate_config(config)
    frames, flows, states_by_video, dets = {}, {}, {}, []
    labels, regions = {}, []
    for video in range(config.num_videos):
        states = scene_states(config, video)
        vid = states[0].video_id
        bg = _background(config, video)
        frames[vid] = [Frame(render(s, bg), vid, s.t) for s in states]
        flows[vid] = [analytic_flow(a, b) for a, b in zip(states, states[1:])]
        states_by_video[vid] = states
        lab = np.zeros(config.frames_per_video, dtype=np.int64)
        for s in states:
            for obj in s.objects:
                box = _tight_box(object_mask(obj, config.frame_size))
                if box is None:
                    continue
                dets.append(Detection(vid, s.t, box, 1.0, obj.track_id))
                if obj.anomalous:
                    regions.append(Region(vid, s.t, box, obj.track_id))
                    lab[s.t] = 1
        labels[vid] = lab
    return SynthDataset(config, frames, dets, flows, GroundTruth(labels, regions), states_by_video)


def write_dataset(root, ds: SynthDataset) -> dict:
    """Write PNG frames, detections, flow tensors and ground truth; returns the manifest."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    write_frames(root, ds.all_frames())
    write_detections(root / "detections.jsonl", ds.detections)
    (root / "flow").mkdir(exist_ok=True)
    for vid, seq in sorted(ds.flow_fields.items()):
        save_tensor(root / "flow" / f"{vid}.stpv",
                    np.stack([np.stack([f.u, f.v], axis=-1) for f in seq]))
    write_regions(root / "gt_regions.jsonl", ds.ground_truth.regions)
    write_frame_labels(root / "frame_labels.csv", ds.ground_truth.frame_labels)
    manifest = {
        "videos": sorted(ds.frames),
        "frames_per_video": ds.config.frames_per_video,
        "detections": len(ds.detections),
        "anomaly_intervals": {k: [list(iv) for iv in v] for k, v in ds.anomaly_intervals().items()},
        "config": ds.config.to_dict(),
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


# -- presets -----------------------------------------------------------------

def _normal_lanes() -> tuple[ObjectSpec, ...]:
    return (
        ObjectSpec("square", 20, 0.55, (2, 0), (None, 6)),
        ObjectSpec("square", 24, 0.75, (-3, 0), (None, 36)),
        ObjectSpec("square", 18, 0.95, (4, 0), (None, 68)),
    )


def benchmark_configs(seed: int = 0) -> tuple[SynthConfig, SynthConfig]:
    """Training (normal only) and test splits of the desk-scale benchmark."""
    train = SynthConfig(frame_size=(120, 160), num_videos=8, frames_per_video=120,
                        object_specs=_normal_lanes(), seed=seed)
    lane = (None, 94)
    anomalies = (
        AnomalySpec("fast_mover", 20, 10, video=0, position=lane),
        AnomalySpec("novel_shape", 70, 20, video=0, position=lane),
        AnomalySpec("novel_shape", 15, 20, video=1, position=lane),
        AnomalySpec("fast_mover", 80, 10, video=1, position=lane),
        AnomalySpec("fast_mover", 40, 10, video=2, position=lane),
        AnomalySpec("novel_shape", 90, 20, video=2, position=lane),
        AnomalySpec("novel_shape", 30, 20, video=3, position=lane),
        AnomalySpec("fast_mover", 95, 10, video=3, position=lane),
    )
    test = replace(train, num_videos=4, anomaly_specs=anomalies, seed=seed + 10_000)
    return train, test


def tiny_configs(seed: int = 0) -> tuple[SynthConfig, SynthConfig]:
    """A few short videos for smoke tests."""
    train = SynthConfig(frame_size=(64, 96), num_videos=2, frames_per_video=12,
                        object_specs=(ObjectSpec("square", 20, 0.75, (2, 0), (None, 4)),), seed=seed)
    lane = (None, 36)
    test = replace(train, anomaly_specs=(AnomalySpec("fast_mover", 4, 5, video=0, position=lane),
                                         AnomalySpec("novel_shape", 3, 6, video=1, position=lane)),
                   seed=seed + 10_000)
    return train, test


PRESETS = {"benchmark": benchmark_configs, "tiny": tiny_configs}
