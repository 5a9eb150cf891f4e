"""GradResNet feature network.

A ResNet18-shaped backbone whose input gradient doubles as a denoiser:
bias-free convolutions, GELU, a single group-norm at the end of every basic
block, and parameter-free side connections across each stage. Every
modification can be switched off individually to recover the ablation
architectures (ReLU, BatchNorm, biases, no side connections).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterator

import torch
import torch.nn.functional as F
from torch import nn

from . import autodiff as ad

PIXEL_SCALE = 255.0


class ConfigError(ValueError):
    """Invalid architecture or run configuration."""


@dataclass(frozen=True)
class ArchConfig:
    input_channels: int = 3
    stage_channels: tuple[int, ...] = (64, 128, 256, 512)
    blocks_per_stage: tuple[int, ...] = (2, 2, 2, 2)
    feature_dim: int = 512
    activation: str = "gelu"
    norm: str = "groupnorm_biasfree"
    groups: int = 8
    biases: bool = False
    side_connections: bool = True
    first_conv: str = "small"
    maxpool: bool = False
    norm_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "blocks_per_stage", tuple(int(b) for b in self.blocks_per_stage))
        self.validate()

    def validate(self) -> None:
        if self.input_channels < 1:
            raise ConfigError("input_channels must be positive")
        if not self.stage_channels or len(self.stage_channels) != len(self.blocks_per_stage):
            raise ConfigError("stage_channels and blocks_per_stage must be non-empty and equal length")
        if any(c < 1 for c in self.stage_channels) or any(b < 1 for b in self.blocks_per_stage):
            raise ConfigError("stage widths and block counts must be positive")
        if self.feature_dim != self.stage_channels[-1]:
            raise ConfigError(
                f"feature_dim {self.feature_dim} must equal last stage width {self.stage_channels[-1]}")
        if self.activation not in ("gelu", "relu"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.norm not in ("groupnorm_biasfree", "batchnorm_eval", "none"):
            raise ConfigError(f"unknown norm {self.norm!r}")
        if self.first_conv not in ("small", "large"):
            raise ConfigError(f"unknown first_conv {self.first_conv!r}")
        if self.norm == "groupnorm_biasfree":
            for c in self.stage_channels:
                if self.groups < 1 or c % self.groups:
                    raise ConfigError(f"groups={self.groups} does not divide stage width {c}")
        for a, b in zip(self.stage_channels, self.stage_channels[1:]):
            if self.side_connections and b % a:
                raise ConfigError("side connections tile channels, so widths must divide each other")

    @property
    def homogeneous(self) -> bool:
        """True when the feature map is positively homogeneous of degree 1."""
        return self.activation == "relu" and self.norm == "none" and not self.biases

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        d["blocks_per_stage"] = list(self.blocks_per_stage)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ArchConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown arch keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def small_config(input_channels: int = 1, **overrides) -> ArchConfig:
    """Desk-scale configuration used for the Gaussian-mixture experiments."""
    kw = dict(input_channels=input_channels, stage_channels=(16, 32), blocks_per_stage=(2, 2),
              feature_dim=32, groups=8)
    kw.update(overrides)
    return ArchConfig(**kw)


class Conv(nn.Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int, padding: int, bias: bool):
        super().__init__()
        self.stride, self.padding = stride, padding
        self.weight = nn.Parameter(torch.empty(cout, cin, k, k))
        self.bias = nn.Parameter(torch.zeros(cout)) if bias else None

    def forward(self, x):
        return ad.conv2d(x, self.weight, self.stride, self.padding, self.bias)


class Norm(nn.Module):
    def __init__(self, kind: str, channels: int, groups: int, eps: float, bias: bool):
        super().__init__()
        self.kind, self.groups, self.eps = kind, groups, eps
        self.gain = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels)) if bias else None

    def forward(self, x):
        if self.kind == "groupnorm_biasfree":
            return ad.groupnorm_biasfree(x, self.gain, self.groups, self.eps, self.bias)
        return ad.batchnorm_eval(x, self.gain, self.eps, self.bias)


def _activation(name: str):
    return ad.gelu if name == "gelu" else ad.relu


class BasicBlock(nn.Module):
    """conv -> act -> conv -> norm, plus shortcut, then act."""

    def __init__(self, cin: int, cout: int, stride: int, cfg: ArchConfig):
        super().__init__()
        self.act = _activation(cfg.activation)
        self.conv1 = Conv(cin, cout, 3, stride, 1, cfg.biases)
        self.conv2 = Conv(cout, cout, 3, 1, 1, cfg.biases)
        self.norm = None if cfg.norm == "none" else Norm(cfg.norm, cout, cfg.groups, cfg.norm_eps, cfg.biases)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = Conv(cin, cout, 1, stride, 0, cfg.biases)

    def forward(self, x):
        out = self.conv2(self.act(self.conv1(x)))
        if self.norm is not None:
            out = self.norm(out)
        skip = x if self.shortcut is None else self.shortcut(x)
        return self.act(out + skip)


def align(stage_input: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Parameter-free map of ``stage_input`` onto the shape of ``like``.

    Spatial 2x2 average pooling until the resolutions agree, then channel
    tiling until the widths agree.
    """
    x = stage_input
    while x.shape[-1] > like.shape[-1] or x.shape[-2] > like.shape[-2]:
        x = F.avg_pool2d(x, 2)
    if x.shape[-2:] != like.shape[-2:]:
        raise ad.ShapeError(f"cannot align spatial size {tuple(stage_input.shape[-2:])} "
                            f"to {tuple(like.shape[-2:])}")
    cin, cout = x.shape[1], like.shape[1]
    if cout % cin:
        raise ad.ShapeError(f"cannot tile {cin} channels to {cout}")
    if cout != cin:
        x = x.repeat(1, cout // cin, 1, 1)
    return x


def side_connect(stage_input: torch.Tensor, stage_output: torch.Tensor, enabled: bool = True) -> torch.Tensor:
    if not enabled:
        return stage_output
    return stage_output + align(stage_input, stage_output)


class FeatureNet(nn.Module):
    """f: R^d -> R^K on images in the 0-255 pixel range."""

    def __init__(self, config: ArchConfig):
        super().__init__()
        self.config = config
        cfg = config
        self.act = _activation(cfg.activation)
        c0 = cfg.stage_channels[0]
        if cfg.first_conv == "small":
            self.stem = Conv(cfg.input_channels, c0, 3, 1, 1, cfg.biases)
        else:
            self.stem = Conv(cfg.input_channels, c0, 7, 2, 3, cfg.biases)
        self.stages = nn.ModuleList()
        cin = c0
        for i, (cout, nblocks) in enumerate(zip(cfg.stage_channels, cfg.blocks_per_stage)):
            stride = 1 if i == 0 else 2
            blocks = []
            for b in range(nblocks):
                blocks.append(BasicBlock(cin, cout, stride if b == 0 else 1, cfg))
                cin = cout
            self.stages.append(nn.Sequential(*blocks))

    @property
    def downsampling(self) -> int:
        factor = 2 ** (len(self.config.stage_channels) - 1)
        if self.config.first_conv == "large":
            factor *= 2
        if self.config.maxpool:
            factor *= 2
        return factor

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        ad._require_ndim(y, 4, "features input")
        if y.shape[1] != self.config.input_channels:
            raise ad.ShapeError(f"expected {self.config.input_channels} channels, got {y.shape[1]}")
        if y.shape[-1] % self.downsampling or y.shape[-2] % self.downsampling:
            raise ad.ShapeError(f"spatial size {tuple(y.shape[-2:])} not divisible by {self.downsampling}")
        x = self.act(self.stem(y / PIXEL_SCALE))
        if self.config.maxpool:
            x = F.max_pool2d(x, 3, 2, 1)
        for stage in self.stages:
            x = side_connect(x, stage(x), self.config.side_connections)
        return x.mean(dim=(2, 3))

    def named_tensors(self) -> Iterator[tuple[str, torch.Tensor]]:
        yield from self.named_parameters()


def init_parameters(module: nn.Module, seed: int) -> None:
    """Fan-in scaled uniform for weights, unit gains, zero biases."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in module.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "gain":
                p.fill_(1.0)
            elif leaf == "bias":
                p.zero_()
            else:
                fan_in = p[0].numel() if p.dim() > 1 else p.numel()
                bound = math.sqrt(6.0 / fan_in) if p.dim() == 4 else 1.0 / math.sqrt(fan_in)
                p.copy_(torch.empty(p.shape).uniform_(-bound, bound, generator=gen))


def build(config: ArchConfig, seed: int = 0) -> FeatureNet:
    config.validate()
    net = FeatureNet(config)
    init_parameters(net, seed)
    return net


def expected_parameter_count(config: ArchConfig) -> int:
    """Closed-form parameter count of ``FeatureNet(config)`` from layer shapes."""
    total = 0
    k0 = 3 if config.first_conv == "small" else 7
    c0 = config.stage_channels[0]
    total += config.input_channels * c0 * k0 * k0 + (c0 if config.biases else 0)
    cin = c0
    has_norm = config.norm != "none"
    for i, (cout, nblocks) in enumerate(zip(config.stage_channels, config.blocks_per_stage)):
        for b in range(nblocks):
            stride = 2 if (i > 0 and b == 0) else 1
            total += cin * cout * 9 + cout * cout * 9
            if config.biases:
                total += 2 * cout
            if has_norm:
                total += cout * (2 if config.biases else 1)
            if stride != 1 or cin != cout:
                total += cin * cout + (cout if config.biases else 0)
            cin = cout
    return total
