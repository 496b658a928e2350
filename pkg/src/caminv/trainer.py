"""Training loop, data augmentation, and checkpointing.

Batches are packed half live / half spoof. The learning rate starts at lr0,
multiplies by decay_factor at decay_start and again every decay_every steps
after that. Every run is reproducible from its integer seed: model init,
batch sampling, and per-sample augmentation draws all derive from it.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .errors import CheckpointError, ConfigError, DataError, MissingArtifactError, NumericError
from .losses import HyperParams, binary_focal_loss, camera_focal_loss, decam_loss, total_loss
from .model import CameraInvariantModel, ModelConfig
from .synthdata import ImageStore, SampleRecord, read_manifest

CHECKPOINT_FORMAT_VERSION = 1
BRANCH_CHOICES = ("both", "invariant", "augmentation")
INPUT_SIZES = (64, 224)
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    """Optimization and variant switches for one run."""

    total_steps: int = 2000
    batch_size: int = 32
    lr0: float = 0.004
    decay_factor: float = 0.2
    decay_start: int = 20000
    decay_every: int = 10000
    seed: int = 0
    input_size: int = 224
    train_cameras: tuple[int, ...] | None = None
    no_eddf_branch1: bool = False
    no_eddf_branch2: bool = False
    no_cam_id: bool = False
    branches: str = "both"
    gn_groups: int = 32
    log_every: int = 50
    sequential: bool = False
    hp: HyperParams = field(default_factory=HyperParams)

    def __post_init__(self):
        if self.total_steps < 1:
            raise ConfigError("total_steps must be positive")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError("batch_size must be even (half live, half spoof)")
        if self.lr0 <= 0 or not 0 < self.decay_factor <= 1:
            raise ConfigError("bad learning-rate settings")
        if self.decay_start < 1 or self.decay_every < 1:
            raise ConfigError("decay thresholds must be positive")
        if self.input_size not in INPUT_SIZES:
            raise ConfigError(f"input_size must be one of {INPUT_SIZES}")
        if self.branches not in BRANCH_CHOICES:
            raise ConfigError(f"branches must be one of {BRANCH_CHOICES}")
        if self.log_every < 1:
            raise ConfigError("log_every must be positive")

    def model_config(self, n_cameras: int) -> ModelConfig:
        with_inv = self.branches in ("both", "invariant")
        return ModelConfig(
            n_cameras=max(n_cameras, 2),
            gn_groups=self.gn_groups,
            with_invariant_branch=with_inv,
            with_augment_branch=self.branches in ("both", "augmentation"),
            with_camera_path=with_inv and not self.no_cam_id,
            use_eddf_invariant=not self.no_eddf_branch1,
            use_eddf_augment=not self.no_eddf_branch2,
        )


def scaled_schedule(total_steps: int) -> tuple[int, int]:
    """Decay thresholds at the same fractions of the run as the reference
    schedule (first decay halfway, then every quarter)."""
    return max(1, total_steps // 2), max(1, total_steps // 4)


def desk_config(total_steps: int = 2000, **overrides) -> TrainConfig:
    """Small-input profile sized for a CPU: 64 px, batch 8, scaled decay.

    Three constants deviate from the full-scale defaults, because the profile
    must reproduce the reference training behavior (camera-identifiable mixed
    features, chance-level decomposed features, fusion gains) inside a short
    low-resolution budget:

    - lr0 0.004 -> 0.001: linear lr/batch scaling for batch 8 vs 32. At
      0.004 the combination of focal damping and augmentation noise keeps
      the camera terms on their chance plateau for the whole run.
    - lambda1 0.005 -> 1.0: the camera loss sums over (input/16)^2 = 16 map
      positions instead of 196, and the run is ~25x shorter, so at the
      default weight its share of the trunk gradient is under 1% and camera
      features never form.
    - lambda3 0.1 -> 2.0: rescaled with lambda1 so the confusion pressure
      keeps the decomposed map near-uniform once camera features exist; the
      equilibrium residual is second order in this weight.

    An explicit hp or lr0 override replaces the profile value. The echoed
    run config records whatever is in effect.
    """
    start, every = scaled_schedule(total_steps)
    settings = dict(
        total_steps=total_steps,
        batch_size=8,
        input_size=64,
        lr0=0.001,
        decay_start=start,
        decay_every=every,
        hp=replace(HyperParams(), lambda1=1.0, lambda3=2.0),
    )
    settings.update(overrides)
    return TrainConfig(**settings)


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Learning rate for a 0-based optimizer step index."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if step < cfg.decay_start:
        return cfg.lr0
    n = 1 + (step - cfg.decay_start) // cfg.decay_every
    return cfg.lr0 * cfg.decay_factor**n


def augment(image: np.ndarray, rng) -> np.ndarray:
    """Random flips, rotation within 15 degrees, and color jitter.

    Draw order is fixed (hflip, vflip, angle, brightness, contrast,
    saturation) so a run's augmentation stream is reproducible. Each scale
    is skipped when its draw lands exactly on the identity value, which
    makes an injected no-op rng an exact identity. Output stays in [0, 1].
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {image.shape}")
    out = image
    if rng.random() < 0.5:
        out = out[:, ::-1]
    if rng.random() < 0.5:
        out = out[::-1]
    angle = float(rng.uniform(-15.0, 15.0))
    if angle != 0.0:
        out = ndimage.rotate(out, angle, reshape=False, order=1, mode="nearest")
    brightness = float(rng.uniform(0.8, 1.2))
    contrast = float(rng.uniform(0.8, 1.2))
    saturation = float(rng.uniform(0.8, 1.2))
    out = np.asarray(out, dtype=np.float64)
    if brightness != 1.0:
        out = out * brightness
    if contrast != 1.0:
        mean = out.mean()
        out = (out - mean) * contrast + mean
    if saturation != 1.0:
        gray = out.mean(axis=2, keepdims=True)
        out = gray + (out - gray) * saturation
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def sample_batch(
    records: list[SampleRecord], rng: np.random.Generator, batch_size: int
) -> list[SampleRecord]:
    """Draw batch_size records, exactly half live and half spoof."""
    if batch_size < 2 or batch_size % 2:
        raise ConfigError("batch_size must be even")
    live = [r for r in records if r.label == 1]
    spoof = [r for r in records if r.label == 0]
    if not live or not spoof:
        raise DataError("training pool needs both live and spoof samples")
    half = batch_size // 2
    picked = [live[i] for i in rng.integers(0, len(live), half)]
    picked += [spoof[i] for i in rng.integers(0, len(spoof), half)]
    return picked


@dataclass
class TrainResult:
    checkpoint_path: Path
    log_path: Path
    camera_ids: tuple[int, ...]
    final_total: float


def _batch_tensors(
    records: list[SampleRecord],
    store: ImageStore,
    cfg: TrainConfig,
    step: int,
    cam_index: dict[int, int],
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    imgs, labels, cams = [], [], []
    for slot, rec in enumerate(records):
        img = store.load(rec.relative_path)
        if img.shape[0] != cfg.input_size or img.shape[1] != cfg.input_size:
            raise DataError(
                f"{rec.relative_path}: image is {img.shape[:2]}, "
                f"config expects {cfg.input_size}"
            )
        child = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, 202, step, slot])
        )
        img = augment(img, child)
        imgs.append(torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))))
        labels.append(float(rec.label))
        cams.append(cam_index.get(rec.camera_id, 0))
    x = torch.stack(imgs)
    return x, torch.tensor(labels), torch.tensor(cams, dtype=torch.long)


def train(cfg: TrainConfig, data_dir: str | Path, out_dir: str | Path) -> TrainResult:
    """Run one training job and write checkpoint.pt plus train_log.csv."""
    if cfg.sequential:
        torch.set_num_threads(1)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = read_manifest(data_dir)
    store = ImageStore(data_dir)

    wanted = set(cfg.train_cameras) if cfg.train_cameras is not None else None
    rows = [
        r
        for r in records
        if r.split == "train" and (wanted is None or r.camera_id in wanted)
    ]
    if not rows:
        raise DataError("no training rows match the requested cameras")
    camera_ids = tuple(sorted({r.camera_id for r in rows}))
    if wanted is not None and set(camera_ids) != wanted:
        missing = sorted(wanted - set(camera_ids))
        raise DataError(f"requested cameras have no training rows: {missing}")
    uses_camera_path = cfg.branches in ("both", "invariant") and not cfg.no_cam_id
    if uses_camera_path and len(camera_ids) < 2:
        raise DataError("camera-supervised training needs at least 2 cameras")
    cam_index = {cid: i for i, cid in enumerate(camera_ids)}

    torch.manual_seed(cfg.seed)
    model = CameraInvariantModel(cfg.model_config(len(camera_ids)))
    model.train()
    optimizer = torch.optim.Adam(
        model.parameters(), lr=cfg.lr0, betas=ADAM_BETAS, eps=ADAM_EPS
    )
    batch_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 101]))

    hp = cfg.hp
    log_path = out / "train_log.csv"
    log_fields = (
        "step", "lr", "l1_cam", "l2_cam", "l1_anti", "l2_anti", "l3_anti",
        "decam", "total",
    )
    final_total = float("nan")
    with open(log_path, "w", newline="") as log_fh:
        log = csv.writer(log_fh)
        log.writerow(log_fields)
        for step in range(cfg.total_steps):
            lr = lr_schedule(step, cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr
            batch = sample_batch(rows, batch_rng, cfg.batch_size)
            x, y, cams = _batch_tensors(batch, store, cfg, step, cam_index)
            outp = model(x)

            zero = torch.zeros(())
            l1_cam = l2_cam = l_decam = l2_anti = zero
            l1_anti = l3_anti = zero
            if outp.p_mix is not None:
                l1_anti = binary_focal_loss(outp.p_mix, y, hp.alpha1, hp.alpha2, hp.gamma)
            if outp.o_cam is not None:
                l1_cam = camera_focal_loss(outp.o_cam, cams, hp.gamma)
                l2_cam = camera_focal_loss(outp.o_mix, cams, hp.gamma)
                l_decam = decam_loss(outp.o_spf)
                l2_anti = binary_focal_loss(outp.p_spf, y, hp.alpha1, hp.alpha2, hp.gamma)
            if outp.p_aug is not None:
                l3_anti = binary_focal_loss(outp.p_aug, y, hp.alpha1, hp.alpha2, hp.gamma)
            try:
                total = total_loss(l1_cam, l2_cam, l1_anti, l2_anti, l3_anti, l_decam, hp)
            except NumericError as exc:
                raise NumericError(f"at step {step + 1}: {exc}") from exc

            optimizer.zero_grad(set_to_none=True)
            total.backward()
            optimizer.step()

            final_total = float(total.detach())
            if step == 0 or (step + 1) % cfg.log_every == 0 or step + 1 == cfg.total_steps:
                parts = (l1_cam, l2_cam, l1_anti, l2_anti, l3_anti, l_decam)
                log.writerow(
                    [step + 1, repr(lr)]
                    + [repr(float(v.detach())) for v in parts]
                    + [repr(final_total)]
                )

    ckpt_path = out / "checkpoint.pt"
    save_checkpoint(ckpt_path, model, optimizer, cfg.total_steps, cfg, camera_ids)
    return TrainResult(
        checkpoint_path=ckpt_path,
        log_path=log_path,
        camera_ids=camera_ids,
        final_total=final_total,
    )


def config_to_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)


def train_config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    hp = d.pop("hp", None)
    if isinstance(hp, dict):
        d["hp"] = HyperParams(**hp)
    elif hp is not None:
        d["hp"] = hp
    if d.get("train_cameras") is not None:
        d["train_cameras"] = tuple(d["train_cameras"])
    return TrainConfig(**d)


@dataclass
class Checkpoint:
    """Deserialized checkpoint payload."""

    format_version: int
    train_config: dict
    model_config: dict
    camera_ids: tuple[int, ...]
    step: int
    weights: dict
    optimizer: dict
    calibration: dict | None = None


def save_checkpoint(
    path: str | Path,
    model: CameraInvariantModel,
    optimizer: torch.optim.Optimizer | None,
    step: int,
    train_config: TrainConfig | None,
    camera_ids: tuple[int, ...],
    calibration: dict | None = None,
) -> None:
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "train_config": None if train_config is None else config_to_dict(train_config),
        "model_config": asdict(model.config),
        "camera_ids": list(camera_ids),
        "step": int(step),
        "weights": model.state_dict(),
        "optimizer": None if optimizer is None else optimizer.state_dict(),
        "calibration": calibration,
    }
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    p = Path(path)
    if not p.exists():
        raise MissingArtifactError(f"checkpoint not found: {p}")
    try:
        payload = torch.load(p, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {p}: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"{p} is not a checkpoint produced by this package")
    version = payload["format_version"]
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"{p}: format_version {version} unsupported "
            f"(expected {CHECKPOINT_FORMAT_VERSION})"
        )
    return Checkpoint(
        format_version=version,
        train_config=payload.get("train_config"),
        model_config=dict(payload["model_config"]),
        camera_ids=tuple(payload.get("camera_ids", ())),
        step=int(payload["step"]),
        weights=payload["weights"],
        optimizer=payload.get("optimizer"),
        calibration=payload.get("calibration"),
    )


def model_from_checkpoint(ckpt: Checkpoint) -> CameraInvariantModel:
    cfg = dict(ckpt.model_config)
    model = CameraInvariantModel(ModelConfig(**cfg))
    model.load_state_dict(ckpt.weights, strict=True)
    model.eval()
    return model


def _hash_value(h, value) -> None:
    if isinstance(value, torch.Tensor):
        t = value.detach().cpu().contiguous()
        h.update(f"tensor:{t.dtype}:{tuple(t.shape)}:".encode())
        h.update(t.numpy().tobytes())
    elif isinstance(value, dict):
        h.update(b"dict:")
        for k in sorted(value, key=str):
            h.update(f"key:{k}:".encode())
            _hash_value(h, value[k])
    elif isinstance(value, (list, tuple)):
        h.update(f"seq:{len(value)}:".encode())
        for v in value:
            _hash_value(h, v)
    else:
        h.update(f"scalar:{value!r}:".encode())


def checkpoint_content_hash(source: Checkpoint | str | Path) -> str:
    """Digest of a checkpoint's semantic content.

    Hashes config, step, calibration, and every weight and optimizer tensor
    (names sorted, raw bytes), rather than the saved file's bytes, because
    the container format embeds non-semantic metadata.
    """
    ckpt = source if isinstance(source, Checkpoint) else load_checkpoint(source)
    h = hashlib.sha256()
    _hash_value(h, {
        "format_version": ckpt.format_version,
        "train_config": ckpt.train_config,
        "model_config": ckpt.model_config,
        "camera_ids": ckpt.camera_ids,
        "step": ckpt.step,
        "weights": ckpt.weights,
        "optimizer": ckpt.optimizer,
        "calibration": ckpt.calibration,
    })
    return h.hexdigest()


def file_sha256(path: str | Path) -> str:
    p = Path(path)
    if not p.exists():
        raise MissingArtifactError(f"file not found: {p}")
    return hashlib.sha256(p.read_bytes()).hexdigest()
