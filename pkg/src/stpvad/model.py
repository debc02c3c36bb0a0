"""Shared encoder with four decoding branches (past/future appearance and flow magnitude)."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable, Optional

import numpy as np
import torch
import torch.nn as nn

from .types import ValidationError

BRANCHES = ("A_prev", "M_prev", "M_next", "A_next")
APPEARANCE_BRANCHES = ("A_prev", "A_next")
MOTION_BRANCHES = ("M_prev", "M_next")


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int = 1
    base_filters: int = 16
    encoder_depth: int = 5
    decoder_depth: int = 5
    input_size: int = 64

    def __post_init__(self):
        if self.in_channels not in (1, 3):
            raise ValidationError("in_channels", "must be 1 or 3")
        if self.base_filters < 1:
            raise ValidationError("base_filters", "must be >= 1")
        if self.encoder_depth < 1 or self.decoder_depth < 1:
            raise ValidationError("encoder_depth", "depths must be >= 1")
        if self.input_size % (2 ** self.encoder_depth):
            raise ValidationError("encoder_depth",
                                  f"{self.input_size} is not divisible by 2**{self.encoder_depth}")
        if self.latent_size * 2 ** self.decoder_depth != self.input_size:
            raise ValidationError("decoder_depth",
                                  f"latent {self.latent_size} x 2**{self.decoder_depth} != {self.input_size}")

    @property
    def latent_size(self) -> int:
        return self.input_size // 2 ** self.encoder_depth

    @property
    def encoder_channels(self) -> list[int]:
        return [self.base_filters * 2 ** i for i in range(self.encoder_depth)]

    @property
    def latent_channels(self) -> int:
        return self.encoder_channels[-1]

    @property
    def decoder_channels(self) -> list[int]:
        """Output widths of the hidden transposed convolutions (halving each stage)."""
        chans, c = [], self.latent_channels
        for _ in range(self.decoder_depth - 1):
            c = max(1, c // 2)
            chans.append(c)
        return chans

    def out_channels(self, branch: str) -> int:
        if branch in APPEARANCE_BRANCHES:
            return self.in_channels
        if branch in MOTION_BRANCHES:
            return 1
        raise ValidationError("branch_id", f"unknown branch {branch!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def _decoder(config: NetworkConfig, out_channels: int) -> nn.Sequential:
    layers: list[nn.Module] = []
    c = config.latent_channels
    for nxt in config.decoder_channels:
        layers += [nn.ConvTranspose2d(c, nxt, 4, stride=2, padding=1), nn.ReLU()]
        c = nxt
    layers.append(nn.ConvTranspose2d(c, out_channels, 4, stride=2, padding=1))
    return nn.Sequential(*layers)


class PredictiveNet(nn.Module):
    """Encoder E and decoders D^{t-1}, D^{t-1->t}, D^{t->t+1}, D^{t+1}.

    Tensors are NCHW. ``decode_logits`` returns pre-sigmoid values; losses
    are computed on logits for numerical stability.
    """

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        layers: list[nn.Module] = []
        c = config.in_channels
        for nxt in config.encoder_channels:
            layers += [nn.Conv2d(c, nxt, 3, padding=1), nn.MaxPool2d(2), nn.ReLU()]
            c = nxt
        self.encoder = nn.Sequential(*layers)
        self.decoders = nn.ModuleDict({b: _decoder(config, config.out_channels(b)) for b in BRANCHES})
        self._check_shapes()

    def _check_shapes(self):
        cfg = self.config
        with torch.no_grad():
            x = torch.zeros(1, cfg.in_channels, cfg.input_size, cfg.input_size)
            z = self.encoder(x)
            expected = (1, cfg.latent_channels, cfg.latent_size, cfg.latent_size)
            if tuple(z.shape) != expected:
                raise ValidationError("network", f"latent shape {tuple(z.shape)} != {expected}")
            for b, dec in self.decoders.items():
                y = dec(z)
                expected = (1, cfg.out_channels(b), cfg.input_size, cfg.input_size)
                if tuple(y.shape) != expected:
                    raise ValidationError("network", f"{b} output {tuple(y.shape)} != {expected}")

    def encode(self, q: torch.Tensor) -> torch.Tensor:
        return self.encoder(q)

    def decode_logits(self, branch: str, z: torch.Tensor) -> torch.Tensor:
        if branch not in self.decoders:
            raise ValidationError("branch_id", f"unknown branch {branch!r}")
        return self.decoders[branch](z)

    def forward(self, q: torch.Tensor, branches: Iterable[str] = BRANCHES) -> dict[str, torch.Tensor]:
        z = self.encode(q)
        return {b: self.decode_logits(b, z) for b in branches}


def _fan_in(module: nn.Module) -> int:
    w = module.weight
    k = w.shape[2] * w.shape[3]
    if isinstance(module, nn.ConvTranspose2d):
        # each output pixel receives (k / stride)^2 taps per input channel
        s = module.stride[0] * module.stride[1]
        return w.shape[0] * k // s
    return w.shape[1] * k


def init_network(config: NetworkConfig, seed: int = 0) -> PredictiveNet:
    """He-uniform weights from a seeded generator, zero biases."""
    net = PredictiveNet(config)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for module in net.modules():
            if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
                bound = float(np.sqrt(6.0 / _fan_in(module)))
                module.weight.copy_(torch.rand(module.weight.shape, generator=gen) * 2 * bound - bound)
                module.bias.zero_()
    return net


def parameter_count(config: NetworkConfig) -> int:
    """Closed form: k*k*c_in*c_out + c_out per layer."""
    total = 0
    c = config.in_channels
    for nxt in config.encoder_channels:
        total += 9 * c * nxt + nxt
        c = nxt
    for b in BRANCHES:
        c = config.latent_channels
        for nxt in config.decoder_channels + [config.out_channels(b)]:
            total += 16 * c * nxt + nxt
            c = nxt
    return total


@dataclass
class PredictionBundle:
    A_prev_hat: np.ndarray
    M_prev_hat: np.ndarray
    M_next_hat: np.ndarray
    A_next_hat: np.ndarray

    def get(self, branch: str) -> np.ndarray:
        return getattr(self, f"{branch}_hat")


def _to_nchw(q: np.ndarray, net: PredictiveNet) -> tuple[torch.Tensor, bool]:
    q = np.asarray(q)
    single = q.ndim == 3
    if single:
        q = q[None]
    cfg = net.config
    expected = (cfg.input_size, cfg.input_size, cfg.in_channels)
    if q.ndim != 4 or q.shape[1:] != expected:
        raise ValidationError("Q", f"expected (..., {expected}), got {q.shape}")
    dtype = next(net.parameters()).dtype
    return torch.from_numpy(np.ascontiguousarray(q.transpose(0, 3, 1, 2))).to(dtype), single


def _to_nhwc(t: torch.Tensor, single: bool) -> np.ndarray:
    arr = t.detach().cpu().numpy().transpose(0, 2, 3, 1)
    return arr[0] if single else arr


def encode(net: PredictiveNet, q: np.ndarray) -> np.ndarray:
    x, single = _to_nchw(q, net)
    with torch.no_grad():
        return _to_nhwc(net.encode(x), single)


def decode_branch(net: PredictiveNet, branch: str, latent: np.ndarray) -> np.ndarray:
    if branch not in BRANCHES:
        raise ValidationError("branch_id", f"unknown branch {branch!r}")
    latent = np.asarray(latent)
    single = latent.ndim == 3
    z = latent[None] if single else latent
    dtype = next(net.parameters()).dtype
    zt = torch.from_numpy(np.ascontiguousarray(z.transpose(0, 3, 1, 2))).to(dtype)
    with torch.no_grad():
        return _to_nhwc(torch.sigmoid(net.decode_logits(branch, zt)), single)


def forward(net: PredictiveNet, q: np.ndarray, branches: Optional[Iterable[str]] = None) -> PredictionBundle:
    """Predictions for one query (H, W, C) or a batch (N, H, W, C).

    Branches left out of ``branches`` are returned as ``None``.
    """
    x, single = _to_nchw(q, net)
    wanted = tuple(BRANCHES if branches is None else branches)
    with torch.no_grad():
        out = net(x, wanted)
    vals = {b: _to_nhwc(torch.sigmoid(out[b]), single) if b in out else None for b in BRANCHES}
    return PredictionBundle(vals["A_prev"], vals["M_prev"], vals["M_next"], vals["A_next"])
