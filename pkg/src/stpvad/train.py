"""Context-prediction training and fitting of the error normalization."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .ingest import DOWNSCALE_RATIO, IngestConfig, ObjectSample
from .model import (APPEARANCE_BRANCHES, BRANCHES, MOTION_BRANCHES, NetworkConfig,
                    PredictionBundle, PredictiveNet, init_network)
from .score import NormalizationStats, prediction_errors_batch, zscore_aggregate
from .tensorfile import load_container, save_container
from .types import ValidationError

log = logging.getLogger(__name__)

_TARGETS = {"A_prev": "A_prev", "M_prev": "M_prev", "M_next": "M_next", "A_next": "A_next"}


class NonFiniteLossError(RuntimeError):
    def __init__(self, epoch: int, batch: int):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 640
    epochs: int = 200
    seed: int = 0
    use_appearance_branches: bool = True
    use_motion_branches: bool = True
    downscale_ratio: float = DOWNSCALE_RATIO

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate", "must be > 0")
        if self.batch_size < 1:
            raise ValidationError("batch_size", "must be >= 1")
        if self.epochs < 0:
            raise ValidationError("epochs", "must be >= 0")
        if not (self.use_appearance_branches or self.use_motion_branches):
            raise ValidationError("use_appearance_branches", "at least one branch group must be enabled")

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        return cls(**{"batch_size": 64, "epochs": 20, **kw})

    @property
    def active(self) -> tuple[bool, ...]:
        return tuple((b in APPEARANCE_BRANCHES and self.use_appearance_branches)
                     or (b in MOTION_BRANCHES and self.use_motion_branches) for b in BRANCHES)

    @property
    def branches(self) -> tuple[str, ...]:
        return tuple(b for b, a in zip(BRANCHES, self.active) if a)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainHistory:
    total: list[float] = field(default_factory=list)
    per_branch: list[dict[str, float]] = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "total_loss"] + [f"loss_{b}" for b in BRANCHES])
            for epoch, (tot, br) in enumerate(zip(self.total, self.per_branch), 1):
                w.writerow([epoch, repr(tot)] + [repr(br[b]) for b in BRANCHES])


# -- losses ------------------------------------------------------------------

def logistic_loss(x_hat, x) -> float:
    """Summed binary cross-entropy -X log X_hat - (1 - X) log(1 - X_hat)."""
    x_hat = np.asarray(x_hat, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x_hat.shape != x.shape:
        raise ValidationError("X_hat", f"shape {x_hat.shape} != target shape {x.shape}")
    return float(np.sum(-x * np.log(x_hat) - (1.0 - x) * np.log1p(-x_hat)))


def context_loss(bundle: PredictionBundle, sample: ObjectSample,
                 branches: Sequence[str] = BRANCHES) -> float:
    """L_past + L_future; branches not listed contribute 0 and their targets are not read."""
    return sum(logistic_loss(bundle.get(b), getattr(sample, _TARGETS[b])) for b in branches)


def branch_losses_torch(logits: dict[str, torch.Tensor], targets: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Per-sample summed logistic loss for every branch present in ``logits``; shape (N,)."""
    return {b: F.binary_cross_entropy_with_logits(z, targets[b], reduction="none").flatten(1).sum(1)
            for b, z in logits.items()}


def batch_loss(net: PredictiveNet, q: torch.Tensor, targets: dict[str, torch.Tensor],
               branches: Sequence[str]) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Mean over samples of the per-sample context loss."""
    per = branch_losses_torch(net(q, branches), targets)
    total = sum(per.values())
    return total.mean(), {b: v.mean() for b, v in per.items()}


def _nchw(samples: Sequence[ObjectSample], name: str) -> torch.Tensor:
    arr = np.stack([getattr(s, name) for s in samples]).astype(np.float32).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr))


def train_model(samples: Sequence[ObjectSample], net_config: NetworkConfig,
                train_config: TrainConfig, progress=None) -> tuple[PredictiveNet, TrainHistory]:
    """Mini-batch Adam on the mean per-sample context loss."""
    if not samples:
        raise ValidationError("samples", "no training samples")
    torch.manual_seed(train_config.seed)
    net = init_network(net_config, train_config.seed)
    history = TrainHistory()
    if train_config.epochs == 0:
        return net, history
    branches = train_config.branches
    q = _nchw(samples, "Q")
    targets = {b: _nchw(samples, _TARGETS[b]) for b in branches}
    params = [p for name, p in net.named_parameters()
              if name.startswith("encoder") or name.split(".")[1] in branches]
    opt = torch.optim.Adam(params, lr=train_config.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    rng = np.random.default_rng([train_config.seed, 1])
    n = len(samples)
    bs = train_config.batch_size
    for epoch in range(1, train_config.epochs + 1):
        order = torch.from_numpy(rng.permutation(n))
        tot_sum = 0.0
        br_sum = dict.fromkeys(BRANCHES, 0.0)
        for bi, start in enumerate(range(0, n, bs)):
            idx = order[start:start + bs]
            loss, per = batch_loss(net, q[idx], {b: t[idx] for b, t in targets.items()}, branches)
            if not torch.isfinite(loss):
                raise NonFiniteLossError(epoch, bi)
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot_sum += loss.item() * len(idx)
            for b, v in per.items():
                br_sum[b] += v.item() * len(idx)
        history.total.append(tot_sum / n)
        history.per_branch.append({b: br_sum[b] / n for b in BRANCHES})
        if progress is not None:
            progress(epoch, history.total[-1])
        log.info("epoch %d loss %.4f", epoch, history.total[-1])
    return net, history


def fit_normalization(net: PredictiveNet, samples: Sequence[ObjectSample],
                      active: Sequence[bool] = (True,) * 4) -> NormalizationStats:
    """Sample mean and unbiased covariance of the training error vectors."""
    if len(samples) < 2:
        raise ValidationError("training_samples", "need at least 2 samples")
    return stats_from_errors(prediction_errors_batch(net, samples, active=active), active)


def stats_from_errors(errors: np.ndarray, active: Sequence[bool] = (True,) * 4) -> NormalizationStats:
    errors = np.asarray(errors, dtype=np.float64)
    if errors.shape[0] < 2:
        raise ValidationError("training_samples", "need at least 2 samples")
    mu = errors.mean(axis=0)
    sigma = np.cov(errors, rowvar=False, ddof=1)
    return NormalizationStats(mu, sigma, active=tuple(bool(a) for a in active))


# -- checkpoints -------------------------------------------------------------

@dataclass
class Checkpoint:
    net: PredictiveNet
    net_config: NetworkConfig
    train_config: TrainConfig
    ingest_config: IngestConfig
    stats: NormalizationStats
    empty_frame_value: float
    metadata: dict = field(default_factory=dict)


def fit_checkpoint(net: PredictiveNet, samples: Sequence[ObjectSample], net_config: NetworkConfig,
                   train_config: TrainConfig, ingest_config: IngestConfig,
                   metadata: Optional[dict] = None) -> Checkpoint:
    """Normalization stats plus the empty-frame sentinel (training minimum minus one)."""
    errors = prediction_errors_batch(net, samples, active=train_config.active)
    stats = stats_from_errors(errors, train_config.active)
    empty = float(np.min(zscore_aggregate(errors, stats)) - 1.0)
    return Checkpoint(net, net_config, train_config, ingest_config, stats, empty, dict(metadata or {}))


def save_checkpoint(prefix, ckpt: Checkpoint) -> tuple[Path, Path]:
    """Writes ``<prefix>.stpv`` (parameters) and ``<prefix>.json`` (configs, stats)."""
    prefix = Path(prefix)
    tensors = {k: v.detach().cpu().float().numpy() for k, v in ckpt.net.state_dict().items()}
    tensor_path = prefix.with_suffix(".stpv")
    json_path = prefix.with_suffix(".json")
    save_container(tensor_path, tensors)
    sidecar = {
        "network_config": ckpt.net_config.to_dict(),
        "train_config": ckpt.train_config.to_dict(),
        "ingest_config": asdict(ckpt.ingest_config),
        "stats": ckpt.stats.to_dict(),
        "empty_frame_value": ckpt.empty_frame_value,
        "metadata": {"created": time.strftime("%Y-%m-%dT%H:%M:%S"), **ckpt.metadata},
    }
    json_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return tensor_path, json_path


def load_checkpoint(prefix) -> Checkpoint:
    prefix = Path(prefix)
    json_path = prefix.with_suffix(".json")
    tensor_path = prefix.with_suffix(".stpv")
    sidecar = json.loads(json_path.read_text())
    net_config = NetworkConfig(**sidecar["network_config"])
    net = PredictiveNet(net_config)
    state = {k: torch.from_numpy(v.copy()) for k, v in load_container(tensor_path).items()}
    net.load_state_dict(state)
    net.eval()
    return Checkpoint(
        net=net,
        net_config=net_config,
        train_config=TrainConfig(**sidecar["train_config"]),
        ingest_config=IngestConfig(**sidecar["ingest_config"]),
        stats=NormalizationStats.from_dict(sidecar["stats"]),
        empty_frame_value=float(sidecar["empty_frame_value"]),
        metadata=sidecar.get("metadata", {}),
    )
