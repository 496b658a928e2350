"""Score fusion, unknown-camera detection, and batched scoring.

The fused liveness score is a weighted mean of the invariant-branch and
augmentation-branch probabilities. At test time an image whose camera
softmax is not confidently close to any training camera can be flagged as
coming from an unknown camera; its camera feature map is then refined by a
gram-matrix attention pass before re-scoring, and the fusion leans harder
on the invariant branch.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import CalibrationError, ConfigError, DataError, MissingArtifactError
from .metrics import ScoreRow
from .model import CameraInvariantModel, image_camera_probs
from .synthdata import ImageStore, SampleRecord

DEFAULT_CONFIDENCE_FLOOR = 0.6


@dataclass(frozen=True)
class FusionWeights:
    """Branch mixing weights; the unknown-camera mode raises the invariant:
    augmentation ratio by the same factor it normally gives the augmentation
    branch (0.7 -> 0.49 on the augmentation side, invariant fixed at 1)."""

    w_inv: float = 1.0
    w_aug: float = 0.7
    w_aug_unknown: float = 0.49

    def __post_init__(self):
        for name in ("w_inv", "w_aug", "w_aug_unknown"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def fuse_scores(p_inv: float, p_aug: float, w_inv: float = 1.0, w_aug: float = 0.7) -> float:
    """Weighted mean of the two branch probabilities."""
    if w_inv <= 0 or w_aug <= 0:
        raise ValueError("fusion weights must be positive")
    for name, p in (("p_inv", p_inv), ("p_aug", p_aug)):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {p}")
    return (w_inv * p_inv + w_aug * p_aug) / (w_inv + w_aug)


@dataclass(frozen=True)
class CameraCalibration:
    """Gap threshold for unknown-camera scoring, fit on training images."""

    tau: float
    floor: float = DEFAULT_CONFIDENCE_FLOOR
    n_cameras: int = 2


def calibrate_tau(
    camera_probs: np.ndarray, floor: float = DEFAULT_CONFIDENCE_FLOOR
) -> CameraCalibration:
    """Fit the confidence-gap threshold from training camera probabilities.

    camera_probs: (n, Phi) image-level camera probability vectors. For each
    row whose top probability exceeds the floor, the descriptor is
    (p1 - p2) / (1 - p1); tau is the minimum descriptor, i.e. the least
    separation any confidently-classified training image achieved.
    """
    probs = np.asarray(camera_probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[1] < 2:
        raise ValueError(f"expected (n, Phi >= 2) probabilities, got {probs.shape}")
    if probs.size == 0:
        raise CalibrationError("no calibration samples given")
    top2 = np.partition(probs, probs.shape[1] - 2, axis=1)
    p1 = top2[:, -1]
    p2 = top2[:, -2]
    selected = p1 > floor
    if not selected.any():
        raise CalibrationError(
            f"no calibration sample has top camera probability above {floor}; "
            "lower the floor explicitly if this is intended"
        )
    descriptors = (p1 - p2) / np.maximum(1.0 - p1, 1e-12)
    return CameraCalibration(
        tau=float(descriptors[selected].min()),
        floor=float(floor),
        n_cameras=int(probs.shape[1]),
    )


def save_calibration(cal: CameraCalibration, path: str | Path) -> None:
    Path(path).write_text(
        f"tau={cal.tau!r}\nfloor={cal.floor!r}\nn_cameras={cal.n_cameras}\n"
    )


def load_calibration(path: str | Path) -> CameraCalibration:
    p = Path(path)
    if not p.exists():
        raise MissingArtifactError(f"calibration file not found: {p}")
    values: dict[str, str] = {}
    for line in p.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"bad calibration line: {line!r}")
        key, _, raw = line.partition("=")
        values[key.strip()] = raw.strip()
    try:
        return CameraCalibration(
            tau=float(values["tau"]),
            floor=float(values["floor"]),
            n_cameras=int(values["n_cameras"]),
        )
    except KeyError as exc:
        raise DataError(f"calibration file {p} is missing key {exc}") from exc


def unknown_probability(p1: float, p2: float, tau: float) -> float:
    """Unnormalized probability that the image's camera is not a training
    camera: 1 - (p1 - p2) / tau, clamped to [0, 1]. A gap as wide as tau
    (the narrowest confident training gap) drives it to 0."""
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if not (0.0 <= p2 <= p1 <= 1.0 + 1e-12):
        raise ValueError(f"need 0 <= p2 <= p1 <= 1, got p1={p1}, p2={p2}")
    return float(np.clip(1.0 - (p1 - p2) / tau, 0.0, 1.0))


def normalize_probs(known_probs: np.ndarray, p_unknown: float) -> np.ndarray:
    """Renormalize the Phi known-camera probabilities together with the
    unknown mass into a single (Phi + 1)-way distribution."""
    known = np.asarray(known_probs, dtype=np.float64)
    if known.ndim != 1 or known.size < 2:
        raise ValueError(f"expected a flat vector of >= 2 probabilities, got {known.shape}")
    if (known < 0).any() or p_unknown < 0 or not np.isfinite(known).all():
        raise ValueError("probabilities must be finite and non-negative")
    full = np.concatenate([known, [float(p_unknown)]])
    total = full.sum()
    if total <= 0:
        raise ValueError("probability mass is zero")
    return full / total


def classify_camera(normalized: np.ndarray) -> int:
    """1-based argmax category; index n_cameras + 1 means unknown camera.
    Ties resolve to the smallest index."""
    vec = np.asarray(normalized, dtype=np.float64)
    if vec.ndim != 1 or vec.size < 3:
        raise ValueError("expected a normalized (Phi + 1)-way distribution")
    return int(np.argmax(vec)) + 1


def attention_refine(x_cam: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Gram-matrix attention over spatial positions of a camera feature.

    x_cam: (C, HW) or (B, C, HW) flattened feature map. G = x^T x compares
    every pair of positions; H is the row-wise softmax of G (each row sums
    to 1); the refined feature is x @ H. Returns (x_att, H). A single
    position (HW = 1) is returned unchanged.
    """
    unbatched = x_cam.dim() == 2
    x = x_cam.unsqueeze(0) if unbatched else x_cam
    if x.dim() != 3 or x.shape[-1] < 1 or x.numel() == 0:
        raise ValueError(f"expected (C, HW) or (B, C, HW), got {tuple(x_cam.shape)}")
    gram = torch.bmm(x.transpose(1, 2), x)
    h = torch.softmax(gram, dim=2)
    x_att = torch.bmm(x, h)
    if unbatched:
        return x_att.squeeze(0), h.squeeze(0)
    return x_att, h


@dataclass
class PredictOutput:
    """Per-image outputs of predict(); branch fields are None when the model
    variant lacks that branch. camera_pred is 1-based, n_cameras + 1 meaning
    unknown, and 0 when the model has no camera path."""

    p_fused: float
    p_spf: float | None = None
    p_aug: float | None = None
    p_mix: float | None = None
    camera_pred: int = 0
    p_unknown: float = 0.0
    camera_probs: np.ndarray | None = None
    refined: bool = False


def _refined_spoof_probs(
    model: CameraInvariantModel, m_cam: torch.Tensor, m_mix: torch.Tensor
) -> torch.Tensor:
    b, c, h, w = m_cam.shape
    x_att, _ = attention_refine(m_cam.flatten(2))
    m_spf = m_mix - x_att.reshape(b, c, h, w)
    pooled = F.adaptive_avg_pool2d(m_spf, 1).flatten(1)
    return model.head_spf(pooled)[:, 1]


def score_batch(
    model: CameraInvariantModel,
    images: torch.Tensor,
    weights: FusionWeights | None = None,
    calibration: CameraCalibration | None = None,
    unknown_mode: bool = False,
) -> list[PredictOutput]:
    """Score a (B, 3, H, W) tensor of images in one forward pass."""
    weights = weights or FusionWeights()
    cfg = model.config
    if unknown_mode:
        if not cfg.with_camera_path:
            raise ConfigError("unknown-camera mode needs a model with the camera path")
        if calibration is None:
            raise MissingArtifactError("unknown-camera mode needs a tau calibration")
        if calibration.n_cameras != model.camera_head_params():
            raise ConfigError(
                f"calibration was fit for {calibration.n_cameras} cameras, "
                f"model has {model.camera_head_params()}"
            )

    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            out = model(images)
            batch = images.shape[0]
            p_mix = out.p_mix.tolist() if out.p_mix is not None else [None] * batch
            p_spf = out.p_spf.tolist() if out.p_spf is not None else [None] * batch
            p_aug = out.p_aug.tolist() if out.p_aug is not None else [None] * batch
            cam_probs = None
            if cfg.with_camera_path:
                cam_probs = image_camera_probs(out.o_cam).double().cpu().numpy()

            refined_mask = [False] * batch
            camera_pred = [0] * batch
            p_unknown = [0.0] * batch
            if cam_probs is not None:
                order = np.argsort(cam_probs, axis=1)
                p1 = np.take_along_axis(cam_probs, order[:, -1:], axis=1)[:, 0]
                p2 = np.take_along_axis(cam_probs, order[:, -2:-1], axis=1)[:, 0]
                if unknown_mode:
                    for i in range(batch):
                        raw = unknown_probability(float(p1[i]), float(p2[i]), calibration.tau)
                        normalized = normalize_probs(cam_probs[i], raw)
                        camera_pred[i] = classify_camera(normalized)
                        p_unknown[i] = float(normalized[-1])
                        refined_mask[i] = camera_pred[i] == cam_probs.shape[1] + 1
                else:
                    camera_pred = (np.argmax(cam_probs, axis=1) + 1).tolist()
            if any(refined_mask):
                idx = torch.tensor(
                    [i for i, r in enumerate(refined_mask) if r], device=images.device
                )
                refined = _refined_spoof_probs(model, out.m_cam[idx], out.m_mix[idx])
                for j, i in enumerate(idx.tolist()):
                    p_spf[i] = float(refined[j])
    finally:
        if was_training:
            model.train()

    results = []
    for i in range(batch):
        inv_score = p_spf[i] if cfg.with_camera_path else p_mix[i]
        w_aug = weights.w_aug_unknown if refined_mask[i] else weights.w_aug
        if inv_score is not None and p_aug[i] is not None:
            fused = fuse_scores(inv_score, p_aug[i], weights.w_inv, w_aug)
        elif inv_score is not None:
            fused = float(inv_score)
        else:
            fused = float(p_aug[i])
        results.append(
            PredictOutput(
                p_fused=fused,
                p_spf=p_spf[i],
                p_aug=p_aug[i],
                p_mix=p_mix[i],
                camera_pred=camera_pred[i],
                p_unknown=p_unknown[i],
                camera_probs=None if cam_probs is None else cam_probs[i],
                refined=refined_mask[i],
            )
        )
    return results


def predict(
    image: torch.Tensor,
    model: CameraInvariantModel,
    weights: FusionWeights | None = None,
    calibration: CameraCalibration | None = None,
    unknown_mode: bool = False,
) -> PredictOutput:
    """Score a single (3, H, W) image."""
    if image.dim() != 3:
        raise ValueError(f"expected a (3, H, W) image, got {tuple(image.shape)}")
    return score_batch(
        model, image.unsqueeze(0), weights=weights, calibration=calibration,
        unknown_mode=unknown_mode,
    )[0]


def collect_camera_probs(
    model: CameraInvariantModel,
    images_iter,
    batch_size: int = 32,
) -> np.ndarray:
    """Image-level camera probability vectors for a stream of (3, H, W)
    float tensors; used to fit the tau calibration on training images."""
    if not model.config.with_camera_path:
        raise ConfigError("the model has no camera classifier to calibrate")
    chunks: list[np.ndarray] = []
    buffer: list[torch.Tensor] = []

    def flush():
        if not buffer:
            return
        x = torch.stack(buffer)
        with torch.no_grad():
            out = model.forward_invariant(x)
            chunks.append(image_camera_probs(out.o_cam).double().cpu().numpy())
        buffer.clear()

    was_training = model.training
    model.eval()
    try:
        for img in images_iter:
            buffer.append(img)
            if len(buffer) >= batch_size:
                flush()
        flush()
    finally:
        if was_training:
            model.train()
    if not chunks:
        raise CalibrationError("no calibration samples given")
    return np.concatenate(chunks, axis=0)


def image_to_tensor(img: np.ndarray) -> torch.Tensor:
    """(H, W, 3) float array in [0, 1] to a (3, H, W) float32 tensor."""
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {img.shape}")
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).float()


def score_manifest(
    model: CameraInvariantModel,
    store: ImageStore,
    records: list[SampleRecord],
    batch_size: int = 32,
    weights: FusionWeights | None = None,
    calibration: CameraCalibration | None = None,
    unknown_mode: bool = False,
) -> list[ScoreRow]:
    """Score a list of manifest records, ordered by sample id.

    The p_spf column carries the invariant-branch score actually used in
    fusion: the decomposed head when the camera path exists, the mixed head
    otherwise, nan when the invariant branch is absent.
    """
    if not records:
        raise DataError("no records to score")
    ordered = sorted(records, key=lambda r: r.relative_path)
    rows: list[ScoreRow] = []
    for start in range(0, len(ordered), batch_size):
        chunk = ordered[start : start + batch_size]
        images = torch.stack([image_to_tensor(store.load(r.relative_path)) for r in chunk])
        outputs = score_batch(
            model, images, weights=weights, calibration=calibration,
            unknown_mode=unknown_mode,
        )
        for rec, o in zip(chunk, outputs):
            inv = o.p_spf if model.config.with_camera_path else o.p_mix
            rows.append(
                ScoreRow(
                    sample_id=rec.relative_path,
                    p_spf=float("nan") if inv is None else float(inv),
                    p_aug=float("nan") if o.p_aug is None else float(o.p_aug),
                    p_fused=float(o.p_fused),
                    label=rec.label,
                    pai_type=rec.pai_type,
                    camera_pred=o.camera_pred,
                    p_unknown=o.p_unknown,
                )
            )
    return rows
