"""High-frequency residual filtering and image recomposition.

A fixed bank of eight 3x3 first-difference kernels turns a color image into
24 directional residual maps (8 directions per channel). Two small trainable
convolutions consume that stack: one produces the 64-channel high-frequency
input of the decomposition trunks, the other predicts a 3-channel additive
enhancement that is recomposed with the source image for the second branch.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

EDDF_DIRECTIONS = ("E", "NE", "N", "NW", "W", "SW", "S", "SE")

# Neighbor offsets (row, col) matching EDDF_DIRECTIONS. Image row index grows
# downward, so "N" is row -1.
_NEIGHBOR_OFFSETS = (
    (0, 1),
    (-1, 1),
    (-1, 0),
    (-1, -1),
    (0, -1),
    (1, -1),
    (1, 0),
    (1, 1),
)

HF_CHANNELS = 64


def eddf_kernels() -> torch.Tensor:
    """Return the eight fixed difference kernels as a (8, 3, 3) tensor.

    Kernel k has -1 at the center and +1 at the neighbor named by
    EDDF_DIRECTIONS[k], so any locally constant patch maps to zero.
    """
    bank = torch.zeros(8, 3, 3)
    for k, (dr, dc) in enumerate(_NEIGHBOR_OFFSETS):
        bank[k, 1, 1] = -1.0
        bank[k, 1 + dr, 1 + dc] = 1.0
    return bank


def apply_eddf(image: torch.Tensor) -> torch.Tensor:
    """Directional residual stack of a 3-channel image.

    Accepts (3, H, W) or (B, 3, H, W) and returns (24, H, W) or
    (B, 24, H, W). Kernel k applied to channel c lands at output channel
    8 * c + k. Borders are replicate-padded, so spatial size is preserved
    and a constant image yields exactly zero everywhere.
    """
    unbatched = image.dim() == 3
    x = image.unsqueeze(0) if unbatched else image
    if x.dim() != 4 or x.shape[1] != 3:
        raise ValueError(
            f"expected a 3-channel image of shape (3, H, W) or (B, 3, H, W), "
            f"got {tuple(image.shape)}"
        )
    # One depthwise-style grouped conv: tile the 8-kernel bank once per input
    # channel so output channel 8*c + k is kernel k on channel c.
    weight = eddf_kernels().to(dtype=x.dtype, device=x.device)
    weight = weight.unsqueeze(1).repeat(3, 1, 1, 1)
    padded = F.pad(x, (1, 1, 1, 1), mode="replicate")
    out = F.conv2d(padded, weight, groups=3)
    return out.squeeze(0) if unbatched else out


def recompose(image: torch.Tensor, enhancement: torch.Tensor) -> torch.Tensor:
    """Add a predicted enhancement onto an image, clamped to [0, 1]."""
    if image.shape != enhancement.shape:
        raise ValueError(
            f"image and enhancement shapes differ: "
            f"{tuple(image.shape)} vs {tuple(enhancement.shape)}"
        )
    return (image + enhancement).clamp(0.0, 1.0)


class PreprocessFilters(nn.Module):
    """Trainable heads on the shared residual stack.

    conv_hf: 24 -> 64 maps, 5x5, feeds the decomposition trunks.
    conv_aug: 24 -> 3 maps, 3x3, predicts the additive enhancement.

    Either head can be omitted for ablation variants that feed raw images
    to a trunk; absent heads simply do not exist in the state dict.
    """

    def __init__(self, with_hf: bool = True, with_aug: bool = True):
        super().__init__()
        self.conv_hf = (
            nn.Conv2d(24, HF_CHANNELS, kernel_size=5, padding=2) if with_hf else None
        )
        self.conv_aug = nn.Conv2d(24, 3, kernel_size=3, padding=1) if with_aug else None

    def high_freq(self, residuals: torch.Tensor) -> torch.Tensor:
        """64-channel high-frequency stack from the 24 residual maps."""
        if self.conv_hf is None:
            raise RuntimeError("this model was built without the high-frequency head")
        return self.conv_hf(residuals)

    def enhance(self, image: torch.Tensor, residuals: torch.Tensor) -> torch.Tensor:
        """Recomposed augmented image from the source and its residuals."""
        if self.conv_aug is None:
            raise RuntimeError("this model was built without the enhancement head")
        return recompose(image, self.conv_aug(residuals))
