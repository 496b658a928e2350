"""Focal camera/liveness losses, the de-identification loss, and the total.

Per-position losses are summed over all spatial positions of a sample and
averaged over the batch. Probabilities are floored at PROB_FLOOR inside the
logarithms, so no loss term can go non-finite from a saturated softmax.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import NumericError

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class HyperParams:
    """Loss shape and mixing constants, one set for every experiment."""

    alpha1: float = 0.5
    alpha2: float = 1.0
    gamma: float = 4.0
    lambda1: float = 0.005
    lambda2: float = 5.0
    lambda3: float = 0.1
    lambda4: float = 0.7

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        for name in ("lambda1", "lambda2", "lambda3", "lambda4"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def camera_focal_loss(
    camera_logits: torch.Tensor, camera_ids: torch.Tensor, gamma: float = 4.0
) -> torch.Tensor:
    """Per-position multi-class focal loss against the image's camera label.

    camera_logits: (B, Phi, M, N) map. camera_ids: (B,) integer labels in
    [0, Phi). The focal term (1 - P)^gamma * -log(P) is evaluated at the true
    class of every position, summed over positions, and averaged over the
    batch. gamma = 0 reduces it to plain summed cross-entropy.
    """
    if camera_logits.dim() != 4:
        raise ValueError(f"expected (B, Phi, M, N) logits, got {tuple(camera_logits.shape)}")
    if camera_ids.dim() != 1 or camera_ids.shape[0] != camera_logits.shape[0]:
        raise ValueError("camera_ids must be one label per image")
    phi = camera_logits.shape[1]
    if bool((camera_ids < 0).any()) or bool((camera_ids >= phi).any()):
        raise ValueError(f"camera id out of range for {phi} cameras")
    probs = F.softmax(camera_logits, dim=1)
    idx = camera_ids.view(-1, 1, 1, 1).expand(-1, 1, *camera_logits.shape[2:])
    p_true = probs.gather(1, idx).squeeze(1)
    per_pos = (1.0 - p_true) ** gamma * -torch.log(p_true.clamp_min(PROB_FLOOR))
    return per_pos.sum(dim=(1, 2)).mean()


def binary_focal_loss(
    p_live: torch.Tensor,
    labels: torch.Tensor,
    alpha1: float = 0.5,
    alpha2: float = 1.0,
    gamma: float = 4.0,
) -> torch.Tensor:
    """Class-weighted binary focal loss on live probabilities.

    p_live: (B,) predicted probability of the live class. labels: (B,) with
    1 = live, 0 = spoof. Live errors are weighted by alpha1, spoof errors by
    alpha2; both terms enter negatively so the loss is non-negative.
    """
    if p_live.shape != labels.shape:
        raise ValueError("p_live and labels must align")
    p = p_live.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
    y = labels.to(p.dtype)
    live_term = alpha1 * y * (1.0 - p) ** gamma * torch.log(p)
    spoof_term = alpha2 * (1.0 - y) * p**gamma * torch.log(1.0 - p)
    return (-live_term - spoof_term).mean()


def decam_loss(camera_logits: torch.Tensor) -> torch.Tensor:
    """Cross-entropy of every position's camera softmax against uniform.

    Minimized when each per-position distribution is exactly uniform over the
    Phi cameras; the minimum value is M * N * log(Phi) per image. Summed over
    positions, averaged over the batch.
    """
    if camera_logits.dim() != 4:
        raise ValueError(f"expected (B, Phi, M, N) logits, got {tuple(camera_logits.shape)}")
    probs = F.softmax(camera_logits, dim=1).clamp_min(PROB_FLOOR)
    per_pos = -torch.log(probs).mean(dim=1)  # (1/Phi) * sum over classes
    return per_pos.sum(dim=(1, 2)).mean()


def total_loss(
    l1_cam: torch.Tensor | float,
    l2_cam: torch.Tensor | float,
    l1_anti: torch.Tensor | float,
    l2_anti: torch.Tensor | float,
    l3_anti: torch.Tensor | float,
    l_decam: torch.Tensor | float,
    hp: HyperParams,
) -> torch.Tensor | float:
    """Weighted training objective.

    lambda1 scales the two camera-identification terms, lambda2 the three
    liveness terms, lambda3 the de-identification term. Raises NumericError
    if any component is non-finite, so a diverging run aborts loudly.
    """
    components = {
        "l1_cam": l1_cam,
        "l2_cam": l2_cam,
        "l1_anti": l1_anti,
        "l2_anti": l2_anti,
        "l3_anti": l3_anti,
        "l_decam": l_decam,
    }
    for name, value in components.items():
        v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(v):
            raise NumericError(f"loss component {name} is non-finite: {v!r}")
    return (
        hp.lambda1 * (l1_cam + l2_cam)
        + hp.lambda2 * (l1_anti + l2_anti + l3_anti)
        + hp.lambda3 * l_decam
    )
