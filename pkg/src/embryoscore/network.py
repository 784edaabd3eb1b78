"""Width-reduced I3D backbone + spatial max/avg pooling + BiLSTM + two sigmoid heads.

The backbone follows the inflated Inception-V1 layout up to the last mixed
block (Mixed_5c). The global average pool and logits of the classification
model are dropped so that a (time, height, width) feature map survives for
the spatial pooling and the recurrent layer.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

CHECKPOINT_FORMAT = "embryoscore-checkpoint"
CHECKPOINT_VERSION = 1
# keeps both heads strictly inside (0, 1) even where float32 sigmoid saturates
PROB_EPS = 1e-7

# Default I3D channel table. Each mixed block lists
# (1x1, 3x3 reduce, 3x3, 3x3 reduce, 3x3, pool proj).
STEM_CHANNELS = {"conv1a": 64, "conv2b": 64, "conv2c": 192}
MIXED_CHANNELS = {
    "mixed_3b": (64, 96, 128, 16, 32, 32),
    "mixed_3c": (128, 128, 192, 32, 96, 64),
    "mixed_4b": (192, 96, 208, 16, 48, 64),
    "mixed_4c": (160, 112, 224, 24, 64, 64),
    "mixed_4d": (128, 128, 256, 24, 64, 64),
    "mixed_4e": (112, 144, 288, 32, 64, 64),
    "mixed_4f": (256, 160, 320, 32, 128, 128),
    "mixed_5b": (256, 160, 320, 32, 128, 128),
    "mixed_5c": (384, 192, 384, 48, 128, 128),
}
# (name, kernel, stride, padding) of the pools that sit between stages.
POOLS = {
    "pool2a": ((1, 3, 3), (1, 2, 2), (0, 1, 1)),
    "pool3a": ((1, 3, 3), (1, 2, 2), (0, 1, 1)),
    "pool4a": ((3, 3, 3), (2, 2, 2), (1, 1, 1)),
    "pool5a": ((2, 2, 2), (2, 2, 2), (0, 0, 0)),
}
LAYOUT = (
    "conv1a", "pool2a", "conv2b", "conv2c", "pool3a",
    "mixed_3b", "mixed_3c", "pool4a",
    "mixed_4b", "mixed_4c", "mixed_4d", "mixed_4e", "mixed_4f", "pool5a",
    "mixed_5b", "mixed_5c",
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    width_multiplier: float = 0.25
    lstm_units_per_direction: int = 128
    dropout_rate: float = 0.25
    input_frames: int = 128
    input_side: int = 256
    profile: str = "paper"

    def __post_init__(self):
        if not 0.0 < self.width_multiplier <= 1.0:
            raise ConfigError(f"width_multiplier must be in (0, 1], got {self.width_multiplier}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.lstm_units_per_direction < 1:
            raise ConfigError("lstm_units_per_direction must be >= 1")
        if self.input_frames % 8 or self.input_side % 32:
            raise ConfigError("input_frames must be a multiple of 8 and input_side of 32")
        if self.profile not in ("paper", "tiny"):
            raise ConfigError(f"unknown profile {self.profile!r}")
        scaled_channels(self.width_multiplier)

    @classmethod
    def paper(cls) -> "NetworkConfig":
        return cls()

    @classmethod
    def tiny(cls) -> "NetworkConfig":
        """Test-only profile: 32 frames of 64x64, 1/16 width, 16 LSTM units."""
        return cls(
            width_multiplier=1 / 16, lstm_units_per_direction=16, dropout_rate=0.25,
            input_frames=32, input_side=64, profile="tiny",
        )

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f.name for f in fields(cls)}
        bad = set(d) - known
        if bad:
            raise ConfigError(f"unknown network fields: {sorted(bad)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def scale_channels(c: int, multiplier: float) -> int:
    """Round-half-up scaling; a result of 0 rejects the configuration."""
    out = int(math.floor(c * multiplier + 0.5))
    if out < 1:
        raise ConfigError(f"{c} channels x {multiplier} rounds to 0")
    return out


def scaled_channels(multiplier: float) -> dict[str, tuple[int, ...]]:
    table = {k: (scale_channels(v, multiplier),) for k, v in STEM_CHANNELS.items()}
    table.update({k: tuple(scale_channels(c, multiplier) for c in v) for k, v in MIXED_CHANNELS.items()})
    return table


def mixed_out(ch: tuple[int, ...]) -> int:
    return ch[0] + ch[2] + ch[4] + ch[5]


class Unit3d(nn.Module):
    """Conv3d (no bias) -> BatchNorm3d -> ReLU, 'same' padding."""

    def __init__(self, cin, cout, kernel=1, stride=1):
        super().__init__()
        k = (kernel,) * 3 if isinstance(kernel, int) else kernel
        s = (stride,) * 3 if isinstance(stride, int) else stride
        self.conv = nn.Conv3d(cin, cout, k, s, padding=tuple(x // 2 for x in k), bias=False)
        self.bn = nn.BatchNorm3d(cout, eps=1e-3, momentum=0.01)

    def forward(self, x):
        return torch.relu(self.bn(self.conv(x)))


class Mixed(nn.Module):
    def __init__(self, cin, ch):
        super().__init__()
        self.b0 = Unit3d(cin, ch[0])
        self.b1 = nn.Sequential(Unit3d(cin, ch[1]), Unit3d(ch[1], ch[2], 3))
        self.b2 = nn.Sequential(Unit3d(cin, ch[3]), Unit3d(ch[3], ch[4], 3))
        self.b3 = nn.Sequential(nn.MaxPool3d(3, 1, 1), Unit3d(cin, ch[5]))
        self.out_channels = mixed_out(ch)

    def forward(self, x):
        return torch.cat([self.b0(x), self.b1(x), self.b2(x), self.b3(x)], dim=1)


class I3DBackbone(nn.Module):
    def __init__(self, multiplier: float, in_channels: int = 1):
        super().__init__()
        ch = scaled_channels(multiplier)
        layers = {}
        c = in_channels
        for name in LAYOUT:
            if name in POOLS:
                layers[name] = nn.MaxPool3d(*POOLS[name])
            elif name == "conv1a":
                layers[name] = Unit3d(c, ch[name][0], 7, 2)
                c = ch[name][0]
            elif name == "conv2b":
                layers[name] = Unit3d(c, ch[name][0], 1)
                c = ch[name][0]
            elif name == "conv2c":
                layers[name] = Unit3d(c, ch[name][0], 3)
                c = ch[name][0]
            else:
                layers[name] = Mixed(c, ch[name])
                c = layers[name].out_channels
        self.layers = nn.ModuleDict(layers)
        self.out_channels = c

    def forward(self, x, trace: list | None = None):
        for name, layer in self.layers.items():
            x = layer(x)
            if trace is not None:
                trace.append((name, tuple(x.shape[1:])))
        return x


class EmbryoNet(nn.Module):
    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        self.backbone = I3DBackbone(config.width_multiplier)
        feat = 2 * self.backbone.out_channels
        self.lstm = nn.LSTM(feat, config.lstm_units_per_direction, batch_first=True, bidirectional=True)
        self.dropout = nn.Dropout(config.dropout_rate)
        self.fh_head = nn.Linear(2 * config.lstm_units_per_direction, 1)
        self.discard_head = nn.Linear(2 * config.lstm_units_per_direction, 1)

    @property
    def feature_width(self) -> int:
        return 2 * self.backbone.out_channels

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """``x``: (batch, frames, side, side, 1) in [0, 1]. Returns (fh, discard) probabilities."""
        cfg = self.config
        expected = (cfg.input_frames, cfg.input_side, cfg.input_side, 1)
        if x.ndim != 5 or tuple(x.shape[1:]) != expected:
            raise ValueError(f"expected input (batch, {', '.join(map(str, expected))}), got {tuple(x.shape)}")
        fmap = self.backbone(x.permute(0, 4, 1, 2, 3))  # (B, C, T', H', W')
        pooled = torch.cat([fmap.amax(dim=(3, 4)), fmap.mean(dim=(3, 4))], dim=1)
        _, (h_n, _) = self.lstm(pooled.transpose(1, 2))  # h_n: (2, B, units)
        readout = self.dropout(torch.cat([h_n[0], h_n[1]], dim=1))
        fh = torch.sigmoid(self.fh_head(readout)).squeeze(1)
        discard = torch.sigmoid(self.discard_head(readout)).squeeze(1)
        return fh.clamp(PROB_EPS, 1.0 - PROB_EPS), discard.clamp(PROB_EPS, 1.0 - PROB_EPS)


def build_network(config: NetworkConfig, seed: int | None = None) -> EmbryoNet:
    if seed is not None:
        torch.manual_seed(seed)
    return EmbryoNet(config)


def to_input(frames) -> torch.Tensor:
    """uint8 (batch, T, S, S) array -> float (batch, T, S, S, 1) scaled to [0, 1]."""
    t = torch.as_tensor(np.asarray(frames))
    if t.dtype != torch.uint8:
        raise TypeError("frames must be uint8")
    return (t.to(torch.float32) / 255.0).unsqueeze(-1)


def forward(network: EmbryoNet, batch, training_mode: bool = False) -> tuple[torch.Tensor, torch.Tensor]:
    """Run the network on a batch of FrameSequences or a prepared input tensor."""
    if isinstance(batch, torch.Tensor):
        x = batch
    else:
        x = to_input(np.stack([s.data for s in batch]))
    network.train(training_mode)
    if training_mode:
        return network(x)
    with torch.no_grad():
        return network(x)


def shape_trace(config: NetworkConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Layer-by-layer output shapes (C, T, H, W) from stride arithmetic alone."""
    ch = scaled_channels(config.width_multiplier)
    t, s = config.input_frames, config.input_side
    c = 1
    out = []
    for name in LAYOUT:
        if name in POOLS:
            k, st, p = POOLS[name]
            t = (t + 2 * p[0] - k[0]) // st[0] + 1
            s = (s + 2 * p[1] - k[1]) // st[1] + 1
        elif name == "conv1a":
            c = ch[name][0]
            t, s = (t + 6 - 7) // 2 + 1, (s + 6 - 7) // 2 + 1
        elif name in ("conv2b", "conv2c"):
            c = ch[name][0]
        else:
            c = mixed_out(ch[name])
        out.append((name, (c, t, s, s)))
    return out


def count_parameters(network: nn.Module) -> int:
    return sum(p.numel() for p in network.parameters())


def save_checkpoint(path: str | Path, network: EmbryoNet, step: int, extra: dict | None = None) -> None:
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": network.config.to_dict(),
            "step": int(step),
            "state_dict": network.state_dict(),
            "extra": extra or {},
        },
        path,
    )


def load_checkpoint(path: str | Path) -> tuple[EmbryoNet, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    net = EmbryoNet(NetworkConfig.from_dict(payload["config"]))
    net.load_state_dict(payload["state_dict"])
    net.eval()
    return net, payload
