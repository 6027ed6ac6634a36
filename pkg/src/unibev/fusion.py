"""Unified feature fusion: channel unifier, shared residual encoder, softmax
concatenation fusion and fused residual encoder."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import torch
from torch import nn

from .radar import norm2d
from .rdl import ConfigError

__all__ = [
    "UFFConfig",
    "ChannelUnifier",
    "SharedEncoder",
    "SoftmaxConcatFusion",
    "FusedEncoder",
    "UnifiedFeatureFusion",
    "MODALITIES",
]

# concatenation order of the fused map: camera block, then radar block
MODALITIES = ("camera", "radar")


@dataclass
class UFFConfig:
    unified_channels: int = 128
    fused_channels: int = 128
    num_modalities: int = 2
    residual_layers: int = 2

    def __post_init__(self):
        if self.unified_channels < 1 or self.fused_channels < 1:
            raise ConfigError("UFF channel widths must be >= 1")
        if self.num_modalities < 2:
            raise ConfigError("fusion needs at least two modalities")
        if self.residual_layers < 1:
            raise ConfigError("residual blocks need at least one layer")


def _preact(cin: int, cout: int, k: int) -> nn.Sequential:
    return nn.Sequential(norm2d(cin), nn.ReLU(), nn.Conv2d(cin, cout, k, 1, k // 2, bias=False))


def _residual_branch(cin: int, cout: int, layers: int) -> nn.Sequential:
    mods = []
    for i in range(layers):
        mods += [_preact(cin if i == 0 else cout, cout, 1), _preact(cout, cout, 3)]
    return nn.Sequential(*mods)


class ChannelUnifier(nn.Module):
    """One 1x1 convolution per modality mapping its width to ``unified_channels``."""

    def __init__(self, in_channels: Mapping[str, int], unified_channels: int):
        super().__init__()
        self.proj = nn.ModuleDict({m: nn.Conv2d(c, unified_channels, 1)
                                   for m, c in in_channels.items()})
        self.unified_channels = unified_channels

    def forward(self, feat: torch.Tensor, modality_id: str) -> torch.Tensor:
        if modality_id not in self.proj:
            raise ConfigError(f"unknown modality {modality_id!r}")
        return self.proj[modality_id](feat)


class SharedEncoder(nn.Module):
    """``x + F(x)``; a single instance serves every modality."""

    def __init__(self, channels: int, layers: int = 2):
        super().__init__()
        self.channels = channels
        self.branch = _residual_branch(channels, channels, layers)

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        if feat.shape[1] != self.channels:
            raise ConfigError(f"shared encoder expects {self.channels} channels, got {feat.shape[1]}")
        return feat + self.branch(feat)


class SoftmaxConcatFusion(nn.Module):
    """Per-cell softmax weights over modalities, applied before concatenation."""

    def __init__(self, channels: int, num_modalities: int = 2):
        super().__init__()
        if num_modalities < 2:
            raise ConfigError("fusion needs at least two modalities")
        self.num_modalities = num_modalities
        self.channels = channels
        self.logit_heads = nn.ModuleList(nn.Conv2d(channels, 1, 1) for _ in range(num_modalities))

    def weights(self, feats: Sequence[torch.Tensor]) -> torch.Tensor:
        """(B, M, ny, nx) modality weights, summing to one over M."""
        if len(feats) != self.num_modalities:
            raise ConfigError(f"expected {self.num_modalities} modality maps, got {len(feats)}")
        shape = feats[0].shape
        if any(f.shape != shape for f in feats):
            raise ConfigError("modality maps must share a shape")
        logits = torch.cat([head(f) for head, f in zip(self.logit_heads, feats)], dim=1)
        return logits.softmax(dim=1)

    def forward(self, feats: Sequence[torch.Tensor]):
        w = self.weights(feats)
        fused = torch.cat([f * w[:, m:m + 1] for m, f in enumerate(feats)], dim=1)
        return fused, w


class FusedEncoder(nn.Module):
    """``P(x) + G(x)`` with P a pointwise projection to the fused width."""

    def __init__(self, in_channels: int, out_channels: int, layers: int = 2):
        super().__init__()
        self.in_channels = in_channels
        self.proj = nn.Conv2d(in_channels, out_channels, 1, bias=False)
        self.branch = _residual_branch(in_channels, out_channels, layers)
        self.out_channels = out_channels

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        if feat.shape[1] != self.in_channels:
            raise ConfigError(f"fused encoder expects {self.in_channels} channels, got {feat.shape[1]}")
        return self.proj(feat) + self.branch(feat)


class UnifiedFeatureFusion(nn.Module):
    def __init__(self, in_channels: Mapping[str, int], config: UFFConfig):
        super().__init__()
        if len(in_channels) != config.num_modalities:
            raise ConfigError("in_channels must list every modality")
        self.modalities = tuple(in_channels)
        self.unifier = ChannelUnifier(in_channels, config.unified_channels)
        self.shared = SharedEncoder(config.unified_channels, config.residual_layers)
        self.fusion = SoftmaxConcatFusion(config.unified_channels, config.num_modalities)
        self.fused = FusedEncoder(config.num_modalities * config.unified_channels,
                                  config.fused_channels, config.residual_layers)
        self.out_channels = config.fused_channels

    def forward(self, feats: Mapping[str, torch.Tensor]):
        """Returns the fused map and the per-cell modality weights."""
        encoded = [self.shared(self.unifier(feats[m], m)) for m in self.modalities]
        fused, weights = self.fusion(encoded)
        return self.fused(fused), weights
