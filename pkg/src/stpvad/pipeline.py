"""In-memory end-to-end runs over synthetic splits."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

from .evalmetrics import EvalConfig, EvalReport, PredictedRegion, evaluate_predictions
from .flow import TableFlowProvider
from .ingest import IngestConfig, build_samples, filter_detections, group_frames
from .model import NetworkConfig
from .score import ScoreConfig, score_video
from .synthworld import SynthDataset
from .train import Checkpoint, TrainConfig, TrainHistory, fit_checkpoint, train_model


@dataclass
class RunResult:
    checkpoint: Checkpoint
    history: TrainHistory
    report: EvalReport
    object_scores: list
    frame_series: dict


def dataset_samples(ds: SynthDataset, ingest: IngestConfig, downscale_ratio: float):
    dets = filter_detections(ds.detections, ingest.conf_threshold, ingest.min_area)
    return build_samples(ds.all_frames(), dets, TableFlowProvider(ds.flow_fields),
                         ingest.delta_t, downscale_ratio, ingest.flow_norm)


def train_on(ds: SynthDataset, net_config: NetworkConfig, train_config: TrainConfig,
             ingest: Optional[IngestConfig] = None) -> tuple[Checkpoint, TrainHistory]:
    ingest = ingest or IngestConfig(channels=net_config.in_channels)
    samples = dataset_samples(ds, ingest, train_config.downscale_ratio)
    net, history = train_model(samples, net_config, train_config)
    return fit_checkpoint(net, samples, net_config, train_config, ingest), history


def score_dataset(ckpt: Checkpoint, ds: SynthDataset, config: Optional[ScoreConfig] = None):
    provider = TableFlowProvider(ds.flow_fields)
    objects, series = [], {}
    for vid, frames in group_frames(ds.all_frames()).items():
        obj, s = score_video(ckpt, frames, ds.detections, config, provider)
        objects.extend(obj)
        series[vid] = s.scores
    return objects, series


def evaluate_run(ckpt: Checkpoint, test: SynthDataset, score_config: Optional[ScoreConfig] = None,
                 eval_config: Optional[EvalConfig] = None):
    objects, series = score_dataset(ckpt, test, score_config)
    preds = [PredictedRegion(o.video_id, o.frame_index, o.box, o.s) for o in objects]
    return evaluate_predictions(series, preds, test.ground_truth, eval_config), objects, series


def run(train: SynthDataset, test: SynthDataset, net_config: NetworkConfig,
        train_config: TrainConfig, score_config: Optional[ScoreConfig] = None) -> RunResult:
    ckpt, history = train_on(train, net_config, train_config)
    report, objects, series = evaluate_run(ckpt, test, score_config)
    return RunResult(ckpt, history, report, objects, series)
