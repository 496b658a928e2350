"""Residual trunk shared by every sub-network of the model.

Layout: 7x7/64 stride-2 stem, 3x3 stride-2 max pool, then three stages of
two basic residual blocks at 128 / 256 / 512 channels. The first stage keeps
stride 1; the later two halve resolution once each, so the trunk downsamples
by 16 overall (224 -> 14, 64 -> 4). All normalization is GroupNorm, which
keeps the statistics batch-independent.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

STAGE_CHANNELS = (128, 256, 512)
DOWNSAMPLE_FACTOR = 16
GN_EPS = 1e-5


def group_normalize(
    x: torch.Tensor,
    groups: int,
    scale: torch.Tensor | None = None,
    shift: torch.Tensor | None = None,
    eps: float = GN_EPS,
) -> torch.Tensor:
    """Standardize channel groups per sample, then apply the affine map.

    Statistics are taken over each group of channels and all spatial
    positions of a single sample, so the result does not depend on the
    rest of the batch.
    """
    if x.dim() < 2:
        raise ValueError(f"need at least (B, C) input, got shape {tuple(x.shape)}")
    if x.shape[1] % groups != 0:
        raise ValueError(f"channels {x.shape[1]} not divisible by groups {groups}")
    return F.group_norm(x, groups, scale, shift, eps)


class BasicBlock(nn.Module):
    """Two 3x3 convolutions with group normalization and an additive shortcut."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1, gn_groups: int = 32):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.gn1 = nn.GroupNorm(gn_groups, out_ch, eps=GN_EPS)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, stride=1, padding=1, bias=False)
        self.gn2 = nn.GroupNorm(gn_groups, out_ch, eps=GN_EPS)
        if stride != 1 or in_ch != out_ch:
            # 1x1 projection so the shortcut matches shape.
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.GroupNorm(gn_groups, out_ch, eps=GN_EPS),
            )
        else:
            self.shortcut = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        identity = x if self.shortcut is None else self.shortcut(x)
        out = F.relu(self.gn1(self.conv1(x)), inplace=True)
        out = self.gn2(self.conv2(out))
        return F.relu(out + identity, inplace=True)


class Trunk(nn.Module):
    """Stem plus three residual stages; returns a 512-channel feature map.

    in_channels is 64 when fed high-frequency stacks and 3 when fed raw
    images (the no-filter ablations). Input height and width must be
    divisible by DOWNSAMPLE_FACTOR.
    """

    def __init__(
        self,
        in_channels: int = 64,
        gn_groups: int = 32,
        stage_channels: tuple[int, int, int] = STAGE_CHANNELS,
    ):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = stage_channels[-1]
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, 64, 7, stride=2, padding=3, bias=False),
            nn.GroupNorm(gn_groups, 64, eps=GN_EPS),
            nn.ReLU(inplace=True),
        )
        self.pool = nn.MaxPool2d(3, stride=2, padding=1)
        self.stage1 = self._make_stage(64, stage_channels[0], stride=1, gn_groups=gn_groups)
        self.stage2 = self._make_stage(
            stage_channels[0], stage_channels[1], stride=2, gn_groups=gn_groups
        )
        self.stage3 = self._make_stage(
            stage_channels[1], stage_channels[2], stride=2, gn_groups=gn_groups
        )
        self.apply(self._init_weights)

    @staticmethod
    def _make_stage(in_ch: int, out_ch: int, stride: int, gn_groups: int) -> nn.Sequential:
        return nn.Sequential(
            BasicBlock(in_ch, out_ch, stride=stride, gn_groups=gn_groups),
            BasicBlock(out_ch, out_ch, stride=1, gn_groups=gn_groups),
        )

    @staticmethod
    def _init_weights(m: nn.Module) -> None:
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.GroupNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ValueError(
                f"expected (B, {self.in_channels}, H, W) input, got {tuple(x.shape)}"
            )
        if x.shape[-2] % DOWNSAMPLE_FACTOR or x.shape[-1] % DOWNSAMPLE_FACTOR:
            raise ValueError(
                f"input size {tuple(x.shape[-2:])} not divisible by {DOWNSAMPLE_FACTOR}"
            )
        x = self.pool(self.stem(x))
        x = self.stage1(x)
        x = self.stage2(x)
        return self.stage3(x)
