"""Command-line entry point: ``stpvad synth|train|score|eval|report``.

Every command takes an optional flat ``key = value`` config file via
``--config``; ``--key value`` flags override it.  Unknown keys are
rejected.  Exit codes: 0 success, 2 usage or config error, 3 non-finite
training loss.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np
import torch

from . import __version__
from .evalmetrics import (
    EvalConfig, evaluate, read_frame_labels, read_frame_scores, write_report,
)
from .flow import FLOW_NORM, BlockMatchingFlow, FileFlowProvider, FlowError
from .ingest import (
    CONF_THRESHOLD, MIN_AREA, FrameLoadError, IngestConfig, build_samples, filter_detections,
    group_frames, load_frames, read_detections,
)
from .model import NetworkConfig
from .score import ScoreConfig, score_video, write_frame_scores, write_object_scores
from .synthworld import PRESETS, generate_scene, validate_config, write_dataset
from .tensorfile import TensorFormatError
from .train import (
    NonFiniteLossError, TrainConfig, fit_checkpoint, load_checkpoint, save_checkpoint, train_model,
)
from .types import ValidationError

log = logging.getLogger("stpvad")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
SEED_ENV = "STPVAD_SEED"
DESK_DEFAULTS = {"batch_size": 64, "epochs": 20, "base_filters": 4}


class UsageError(Exception):
    pass


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional_float(text):
    return None if str(text).strip().lower() == "auto" else float(text)


def _choice(*options):
    def parse(text):
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return text
    parse.__name__ = "choice"
    return parse


@dataclass(frozen=True)
class Key:
    name: str
    parse: Callable[[str], Any]
    default: Any
    help: str
    aliases: tuple[str, ...] = ()


def _default_seed() -> int:
    return int(os.environ.get(SEED_ENV, "0"))


SEED = Key("seed", int, None, "root seed")

KEYS: dict[str, list[Key]] = {
    "synth": [
        Key("out", str, "data", "output directory; receives train/ and test/"),
        Key("preset", _choice(*PRESETS), "benchmark", "scene preset"),
        SEED,
        Key("num_videos", int, None, "training videos (preset value if unset)"),
        Key("test_videos", int, None, "test videos (preset value if unset)"),
        Key("frames_per_video", int, None, "frames per video, both splits (preset value if unset)"),
        Key("background", _choice("constant", "textured"), "constant", "background style"),
        Key("channels", int, 1, "1 (grey) or 3 (RGB)"),
    ],
    "train": [
        Key("data", str, "data/train", "training split directory"),
        Key("out", str, "run", "output directory for checkpoint.* and history.csv"),
        SEED,
        Key("desk", _bool, False, "desk-scale defaults: batch 64, 20 epochs, base_filters 4"),
        Key("learning_rate", float, 1e-3, "Adam step size"),
        Key("batch_size", int, 640, "mini-batch size"),
        Key("epochs", int, 200, "training epochs"),
        Key("base_filters", int, 16, "width of the first encoder layer"),
        Key("downscale_ratio", float, 0.5, "query down-scaling ratio", ("downscale",)),
        Key("ablate", _choice("none", "no-motion", "no-appearance"), "none", "disable a branch group"),
        Key("conf_threshold", float, CONF_THRESHOLD, "minimum detection confidence"),
        Key("min_area", float, MIN_AREA, "minimum box area in pixels"),
        Key("flow_norm", float, FLOW_NORM, "flow magnitude normalization constant"),
        Key("delta_t", int, 1, "temporal offset of the context frames"),
        Key("flow", _choice("auto", "files", "blockmatch"), "auto",
            "flow source: stored fields, block matching, or files when present"),
    ],
    "score": [
        Key("checkpoint", str, "run", "checkpoint prefix or directory holding checkpoint.*"),
        Key("data", str, "data/test", "test split directory"),
        Key("out", str, "scores", "output directory"),
        Key("width_scaling", _bool, False, "multiply object scores by box width"),
        Key("smooth_sigma", float, 3.0, "temporal Gaussian sigma in frames"),
        Key("empty_frame_value", _optional_float, None, "score of frames without objects (auto: from checkpoint)"),
        Key("flow", _choice("auto", "files", "blockmatch"), "auto",
            "flow source: stored fields, block matching, or files when present"),
    ],
    "eval": [
        Key("scores", str, "scores", "directory with object_scores.jsonl and frame_scores.csv"),
        Key("gt", str, "data/test", "directory with gt_regions.jsonl and frame_labels.csv"),
        Key("out", str, "scores", "output directory for report.json"),
        Key("iou_thr", float, 0.1, "IoU needed for a prediction to hit a region"),
        Key("track_coverage", float, 0.1, "fraction of a track's regions needed to detect it"),
        Key("max_fpr", float, 1.0, "false positives per frame where the curves are cut"),
        Key("normalize_per_video", _bool, True, "min-max normalize each video before micro AUC"),
        Key("plots", _bool, False, "also write report plots"),
    ],
    "report": [
        Key("scores", str, "scores", "directory with frame_scores.csv and report.json"),
        Key("gt", str, "data/test", "directory with frame_labels.csv"),
        Key("out", str, "scores", "output directory for PNG plots"),
    ],
}


def _fmt_default(key: Key) -> str:
    if key is SEED:
        return f"${SEED_ENV} or 0"
    if key.default is None:
        return "auto"
    return str(key.default)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stpvad", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, keys in KEYS.items():
        p = sub.add_parser(cmd, help=f"{cmd} step",
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", help="flat key = value file; flags override it")
        p.add_argument("--jobs", type=int, default=1, help="worker threads (default: 1)")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress")
        for key in keys:
            flags = [f"--{key.name}"] + [f"--{a}" for a in key.aliases]
            if "_" in key.name:
                flags.append(f"--{key.name.replace('_', '-')}")
            extra = {"nargs": "?", "const": "true"} if key.parse is _bool else {}
            p.add_argument(*flags, dest=key.name, default=None, metavar="VALUE",
                           help=f"{key.help} (default: {_fmt_default(key)})", **extra)
    return parser


def read_config_file(path, keys: list[Key]) -> dict[str, str]:
    known = {k.name for k in keys}
    values = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        name, value = (s.strip() for s in line.split("=", 1))
        name = name.replace("-", "_")
        if name not in known:
            raise UsageError(f"{path}:{lineno}: unknown key {name!r}")
        values[name] = value
    return values


def resolve(command: str, args: argparse.Namespace) -> tuple[dict[str, Any], set[str]]:
    """Defaults < config file < flags.  Returns values and the explicitly set names."""
    keys = KEYS[command]
    raw = read_config_file(args.config, keys) if args.config else {}
    for key in keys:
        flag = getattr(args, key.name)
        if flag is not None:
            raw[key.name] = flag
    values = {}
    for key in keys:
        if key.name in raw:
            try:
                values[key.name] = key.parse(raw[key.name])
            except ValueError as exc:
                raise UsageError(f"{key.name}: {exc}") from exc
        else:
            values[key.name] = key.default
    if "seed" in values and values["seed"] is None:
        try:
            values["seed"] = _default_seed()
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer") from None
    return values, set(raw)


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise UsageError(f"missing {what}: {path}")
    return path


def _flow_provider(mode: str, data: Path):
    flow_dir = data / "flow"
    if mode == "files" or (mode == "auto" and flow_dir.is_dir()):
        return FileFlowProvider(_require(flow_dir, "flow directory"))
    return BlockMatchingFlow()


# -- commands ----------------------------------------------------------------

def cmd_synth(cfg: dict, explicit: set) -> int:
    train, test = PRESETS[cfg["preset"]](seed=cfg["seed"])
    common = {"background": cfg["background"], "channels": cfg["channels"]}
    if cfg["frames_per_video"] is not None:
        common["frames_per_video"] = cfg["frames_per_video"]
    train = replace(train, **common)
    test = replace(test, **common)
    if cfg["num_videos"] is not None:
        train = replace(train, num_videos=cfg["num_videos"])
    if cfg["test_videos"] is not None:
        test = replace(test, num_videos=cfg["test_videos"],
                       anomaly_specs=tuple(a for a in test.anomaly_specs
                                           if a.video is None or a.video < cfg["test_videos"]))
    validate_config(train)
    validate_config(test)
    out = Path(cfg["out"])
    manifest = {}
    for name, config in (("train", train), ("test", test)):
        ds = generate_scene(config)
        m = write_dataset(out / name, ds)
        manifest[name] = {k: m[k] for k in ("videos", "frames_per_video", "detections", "anomaly_intervals")}
    print(json.dumps(manifest, indent=2, sort_keys=True))
    return EXIT_OK


def _net_and_train_configs(cfg: dict, explicit: set, channels: int):
    if cfg["desk"]:
        for name, value in DESK_DEFAULTS.items():
            if name not in explicit:
                cfg[name] = value
    net = NetworkConfig(in_channels=channels, base_filters=cfg["base_filters"])
    tc = TrainConfig(learning_rate=cfg["learning_rate"], batch_size=cfg["batch_size"],
                     epochs=cfg["epochs"], seed=cfg["seed"],
                     use_appearance_branches=cfg["ablate"] != "no-appearance",
                     use_motion_branches=cfg["ablate"] != "no-motion",
                     downscale_ratio=cfg["downscale_ratio"])
    return net, tc


def cmd_train(cfg: dict, explicit: set) -> int:
    data = _require(Path(cfg["data"]), "training data")
    det_path = _require(data / "detections.jsonl", "detections file")
    frames = load_frames(data)
    channels = frames[0].pixels.shape[2]
    net_config, train_config = _net_and_train_configs(cfg, explicit, channels)
    ingest = IngestConfig(cfg["conf_threshold"], cfg["min_area"], cfg["flow_norm"],
                          cfg["delta_t"], channels)
    dets = filter_detections(read_detections(det_path), ingest.conf_threshold, ingest.min_area)
    provider = _flow_provider(cfg["flow"], data)
    samples = []
    for vid, seq in group_frames(frames).items():
        samples.extend(build_samples(seq, [d for d in dets if d.video_id == vid], provider,
                                     ingest.delta_t, train_config.downscale_ratio, ingest.flow_norm))
    log.info("%d training samples", len(samples))
    net, history = train_model(samples, net_config, train_config)
    ckpt = fit_checkpoint(net, samples, net_config, train_config, ingest,
                          {"samples": len(samples)})
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint", ckpt)
    history.write_csv(out / "history.csv")
    final = history.total[-1] if history.total else float("nan")
    print(f"trained on {len(samples)} samples; final loss {final:.4f}; checkpoint {out / 'checkpoint'}")
    return EXIT_OK


def _checkpoint_prefix(path: Path) -> Path:
    prefix = path / "checkpoint" if path.is_dir() else path.with_suffix("")
    for suffix in (".stpv", ".json"):
        _require(prefix.with_suffix(suffix), "checkpoint")
    return prefix


def cmd_score(cfg: dict, explicit: set) -> int:
    ckpt = load_checkpoint(_checkpoint_prefix(Path(cfg["checkpoint"])))
    data = _require(Path(cfg["data"]), "test data")
    dets = read_detections(_require(data / "detections.jsonl", "detections file"))
    provider = _flow_provider(cfg["flow"], data)
    config = ScoreConfig(cfg["width_scaling"], cfg["smooth_sigma"], cfg["empty_frame_value"])
    objects, series = [], []
    for vid, frames in group_frames(load_frames(data)).items():
        obj, s = score_video(ckpt, frames, dets, config, provider)
        objects.extend(obj)
        series.append(s)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_object_scores(out / "object_scores.jsonl", objects)
    write_frame_scores(out / "frame_scores.csv", series)
    print(f"scored {len(objects)} objects in {len(series)} videos -> {out}")
    return EXIT_OK


def cmd_eval(cfg: dict, explicit: set) -> int:
    scores, gt = Path(cfg["scores"]), Path(cfg["gt"])
    score_files = (_require(scores / "object_scores.jsonl", "object scores"),
                   _require(scores / "frame_scores.csv", "frame scores"))
    gt_files = (_require(gt / "gt_regions.jsonl", "ground-truth regions"),
                _require(gt / "frame_labels.csv", "frame labels"))
    config = EvalConfig(cfg["iou_thr"], cfg["track_coverage"], cfg["max_fpr"], cfg["normalize_per_video"])
    report = evaluate(score_files, gt_files, config)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_report(out / "report.json", report)
    print(f"micro_auc {report.micro_auc:.4f}")
    print(f"macro_auc {report.macro_auc:.4f}")
    print(f"rbdc {report.rbdc:.4f}")
    print(f"tbdc {report.tbdc:.4f}")
    if cfg["plots"]:
        make_plots(out / "report.json", scores / "frame_scores.csv", gt / "frame_labels.csv", out)
    return EXIT_OK


def make_plots(report_path: Path, frame_path: Path, labels_path: Path, out: Path) -> list[Path]:
    """Score timeline per video with shaded GT intervals, plus the RBDC/TBDC curves."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    report = json.loads(report_path.read_text())
    series = read_frame_scores(frame_path)
    labels = read_frame_labels(labels_path)
    written = []
    for vid, s in series.items():
        fig, ax = plt.subplots(figsize=(8, 2.5))
        lab = labels.get(vid, np.zeros(len(s), dtype=int))
        ax.fill_between(np.arange(len(s)), 0, 1, where=lab > 0, step="mid", alpha=0.25,
                        color="tab:red", transform=ax.get_xaxis_transform(), label="anomaly")
        ax.plot(s, color="tab:blue", lw=1.2, label="score")
        ax.set_xlabel("frame")
        ax.set_title(vid)
        ax.legend(loc="upper right", fontsize=8)
        fig.tight_layout()
        path = out / f"timeline_{vid}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        written.append(path)
    fig, ax = plt.subplots(figsize=(4.5, 4))
    for name in ("rbdc", "tbdc"):
        c = report["curves"][name]
        ax.step(c["fp_per_frame"], c["detection_rate"], where="post",
                label=f"{name.upper()} {report[name]:.3f}")
    ax.set_xlim(0, report.get("max_fpr", 1.0))
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("false positives per frame")
    ax.set_ylabel("detection rate")
    ax.legend()
    fig.tight_layout()
    path = out / "detection_curves.png"
    fig.savefig(path, dpi=100)
    plt.close(fig)
    written.append(path)
    return written


def cmd_report(cfg: dict, explicit: set) -> int:
    scores, gt = Path(cfg["scores"]), Path(cfg["gt"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    paths = make_plots(_require(scores / "report.json", "report"),
                       _require(scores / "frame_scores.csv", "frame scores"),
                       _require(gt / "frame_labels.csv", "frame labels"), out)
    for p in paths:
        print(p)
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "score": cmd_score,
            "eval": cmd_eval, "report": cmd_report}


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    torch.set_num_threads(args.jobs)
    try:
        cfg, explicit = resolve(args.command, args)
        return COMMANDS[args.command](cfg, explicit)
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ValidationError, FrameLoadError, FlowError, TensorFormatError,
            FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
