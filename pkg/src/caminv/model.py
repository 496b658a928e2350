"""Two-branch anti-spoofing model with camera-feature decomposition.

The invariant branch runs two trunks over the shared high-frequency stack:
one learns the camera fingerprint (M_cam), the other a mixture (M_mix), and
their difference M_spf = M_mix - M_cam is the camera-invariant spoof feature.
A shared 1x1 camera classifier scores every spatial position of all three
maps. The augmentation branch classifies a recomposed, detail-enhanced image.
Each branch ends in a small two-layer head over globally pooled features.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import Trunk
from .errors import ConfigError
from .filters import HF_CHANNELS, PreprocessFilters, apply_eddf, recompose

FEATURE_CHANNELS = 512


@dataclass(frozen=True)
class ModelConfig:
    """Structural switches; defaults give the full two-branch model."""

    n_cameras: int = 2
    gn_groups: int = 32
    with_invariant_branch: bool = True
    with_augment_branch: bool = True
    with_camera_path: bool = True
    use_eddf_invariant: bool = True
    use_eddf_augment: bool = True

    def __post_init__(self):
        if not (self.with_invariant_branch or self.with_augment_branch):
            raise ConfigError("at least one branch must be enabled")
        if self.with_camera_path and not self.with_invariant_branch:
            raise ConfigError("the camera path requires the invariant branch")
        if self.with_camera_path and self.n_cameras < 2:
            raise ConfigError("camera-supervised training needs at least 2 cameras")
        if self.gn_groups < 1 or 64 % self.gn_groups:
            raise ConfigError("gn_groups must divide the stem width 64")


@dataclass
class BranchOutputs:
    """Everything a forward pass produces; fields absent from the active
    configuration stay None.

    m_*: 512-channel feature maps. o_*: per-position camera logits.
    f_*: globally pooled feature vectors. p_*: live probabilities in [0, 1].
    i_aug: the recomposed enhanced image.
    """

    m_cam: torch.Tensor | None = None
    m_mix: torch.Tensor | None = None
    m_spf: torch.Tensor | None = None
    o_cam: torch.Tensor | None = None
    o_mix: torch.Tensor | None = None
    o_spf: torch.Tensor | None = None
    f_mix: torch.Tensor | None = None
    f_spf: torch.Tensor | None = None
    f_aug: torch.Tensor | None = None
    p_mix: torch.Tensor | None = None
    p_spf: torch.Tensor | None = None
    p_aug: torch.Tensor | None = None
    i_aug: torch.Tensor | None = None


def decompose(m_mix: torch.Tensor, m_cam: torch.Tensor) -> torch.Tensor:
    """Camera-invariant residual feature, elementwise M_mix - M_cam."""
    if m_mix.shape != m_cam.shape:
        raise ValueError(
            f"feature shapes differ: {tuple(m_mix.shape)} vs {tuple(m_cam.shape)}"
        )
    return m_mix - m_cam


def image_camera_probs(camera_logits: torch.Tensor) -> torch.Tensor:
    """Image-level camera probability vector from a per-position logit map.

    Softmax over the camera dimension at each position, then mean over all
    positions. Accepts (Phi, H, W) or (B, Phi, H, W); returns (Phi,) or
    (B, Phi). The result sums to 1 because each per-position vector does.
    """
    unbatched = camera_logits.dim() == 3
    x = camera_logits.unsqueeze(0) if unbatched else camera_logits
    if x.dim() != 4:
        raise ValueError(f"expected a camera logit map, got shape {tuple(camera_logits.shape)}")
    probs = F.softmax(x, dim=1).mean(dim=(2, 3))
    return probs.squeeze(0) if unbatched else probs


class BinaryHead(nn.Module):
    """Pooled-feature classifier: affine, rectifier, affine, softmax.

    Returns a (B, 2) probability pair; index 0 is spoof, index 1 is live.
    """

    def __init__(self, in_features: int = FEATURE_CHANNELS, hidden: int = 128):
        super().__init__()
        self.fc1 = nn.Linear(in_features, hidden)
        self.fc2 = nn.Linear(hidden, 2)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        if f.dim() != 2 or f.shape[1] != self.fc1.in_features:
            raise ValueError(
                f"expected (B, {self.fc1.in_features}) pooled features, got {tuple(f.shape)}"
            )
        return F.softmax(self.fc2(F.relu(self.fc1(f))), dim=1)


def _pool(feature_map: torch.Tensor) -> torch.Tensor:
    return F.adaptive_avg_pool2d(feature_map, 1).flatten(1)


class CameraInvariantModel(nn.Module):
    """Full model; sub-networks exist only when the config enables them."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        gn = config.gn_groups

        with_hf = config.with_invariant_branch and config.use_eddf_invariant
        with_aug = config.with_augment_branch and config.use_eddf_augment
        self.filters = PreprocessFilters(with_hf=with_hf, with_aug=with_aug)

        if config.with_invariant_branch:
            trunk_in = HF_CHANNELS if config.use_eddf_invariant else 3
            self.trunk_mix = Trunk(in_channels=trunk_in, gn_groups=gn)
            self.head_mix = BinaryHead()
            if config.with_camera_path:
                self.trunk_cam = Trunk(in_channels=trunk_in, gn_groups=gn)
                self.conv_cam = nn.Conv2d(FEATURE_CHANNELS, config.n_cameras, 1)
                self.head_spf = BinaryHead()
            else:
                self.trunk_cam = None
                self.conv_cam = None
                self.head_spf = None
        else:
            self.trunk_mix = None
            self.head_mix = None
            self.trunk_cam = None
            self.conv_cam = None
            self.head_spf = None

        if config.with_augment_branch:
            self.trunk_aug = Trunk(in_channels=3, gn_groups=gn)
            self.head_aug = BinaryHead()
        else:
            self.trunk_aug = None
            self.head_aug = None

    def forward_invariant(self, image: torch.Tensor) -> BranchOutputs:
        """Decomposition branch: features, camera maps, live probabilities."""
        if self.trunk_mix is None:
            raise RuntimeError("this model was built without the invariant branch")
        out = BranchOutputs()
        if self.config.use_eddf_invariant:
            trunk_in = self.filters.high_freq(apply_eddf(image))
        else:
            trunk_in = image
        out.m_mix = self.trunk_mix(trunk_in)
        out.f_mix = _pool(out.m_mix)
        out.p_mix = self.head_mix(out.f_mix)[:, 1]
        if self.conv_cam is not None:
            out.m_cam = self.trunk_cam(trunk_in)
            out.m_spf = decompose(out.m_mix, out.m_cam)
            out.o_cam = self.conv_cam(out.m_cam)
            out.o_mix = self.conv_cam(out.m_mix)
            # The decomposed map is read with the classifier weights frozen:
            # the confusion objective on o_spf must push the trunks (through
            # the subtraction), not drive the shared classifier itself to
            # uniform output, which is the degenerate solution that satisfies
            # it without removing any camera information from the features.
            out.o_spf = F.conv2d(
                out.m_spf,
                self.conv_cam.weight.detach(),
                self.conv_cam.bias.detach(),
            )
            out.f_spf = _pool(out.m_spf)
            out.p_spf = self.head_spf(out.f_spf)[:, 1]
        return out

    def forward_augmentation(self, image: torch.Tensor) -> BranchOutputs:
        """Enhancement branch: recomposed image and its live probability."""
        if self.trunk_aug is None:
            raise RuntimeError("this model was built without the augmentation branch")
        out = BranchOutputs()
        if self.config.use_eddf_augment:
            out.i_aug = self.filters.enhance(image, apply_eddf(image))
        else:
            out.i_aug = image
        out.f_aug = _pool(self.trunk_aug(out.i_aug))
        out.p_aug = self.head_aug(out.f_aug)[:, 1]
        return out

    def forward(self, image: torch.Tensor) -> BranchOutputs:
        """Run every enabled branch and merge the outputs."""
        merged = BranchOutputs()
        if self.config.with_invariant_branch:
            merged = self.forward_invariant(image)
        if self.config.with_augment_branch:
            aug = self.forward_augmentation(image)
            merged.f_aug = aug.f_aug
            merged.p_aug = aug.p_aug
            merged.i_aug = aug.i_aug
        return merged

    def camera_head_params(self) -> int:
        """Number of cameras the classifier was built for (0 if absent)."""
        return 0 if self.conv_cam is None else self.conv_cam.out_channels
