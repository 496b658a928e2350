"""Controllable synthetic corpus: scenes, spoof artifacts, camera signatures.

Every image is a smooth face-like base scene, optionally degraded by a
presentation-attack texture (print grain or replay moire), then captured
through a simulated camera that applies a per-channel tone curve and a
fixed multiplicative sensor fingerprint. Camera identity is therefore a
high-frequency property of the pixels, separate from the spoof texture,
which is what the decomposition model is supposed to pull apart.

All randomness flows from one master seed through named SeedSequence spawn
keys, so regenerating a dataset is bitwise reproducible file by file.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage
from scipy.fft import dctn, idctn

from .errors import ConfigError, DataError, MissingArtifactError

MANIFEST_NAME = "manifest.csv"
MANIFEST_FIELDS = ("relative_path", "camera_id", "label", "pai_type", "split")
PAI_TYPES = ("none", "print", "replay")
SPLITS = ("train", "dev", "test")

# SeedSequence spawn-key tags; keep stable or every dataset changes.
_SCENE_TAG = 1
_CAMERA_TAG = 2
_IMAGE_TAG = 3


@dataclass(frozen=True)
class CameraProfile:
    """Fixed per-camera capture signature.

    The fingerprint is a deterministic zero-mean unit-variance field derived
    from fingerprint_seed, applied multiplicatively as I * (1 + a * F). Real
    capture pipelines leave more than raw sensor noise: demosaicing and
    readout shape its spectrum, so each camera's field is band-pass noise
    with its own center frequency and orientation bias. Those statistics,
    not the pixel pattern itself, are what a network can carry across
    scenes. response_gamma is a per-channel tone exponent.
    """

    camera_id: int
    fingerprint_seed: int
    noise_amplitude: float = 0.04
    band_freq: float = 0.25
    band_angle: float = 0.0
    bandwidth: float = 0.08
    anisotropy: float = 0.85
    response_gamma: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if not 0.0 < self.noise_amplitude <= 0.1:
            raise ConfigError(
                f"noise_amplitude must lie in (0, 0.1], got {self.noise_amplitude}"
            )
        if not 0.0 < self.band_freq < 0.5:
            raise ConfigError("band_freq must lie in (0, 0.5) cycles/px")
        if self.bandwidth <= 0.0:
            raise ConfigError("bandwidth must be positive")
        if not 0.0 <= self.anisotropy < 1.0:
            raise ConfigError("anisotropy must lie in [0, 1)")


@dataclass(frozen=True)
class SpoofProfile:
    """Parameters of one presentation-attack texture instance.

    print: band-limited grain around texture_frequency (cycles/pixel) at the
    given amplitude, plus a mild blur of the underlying scene.
    replay: two additive plane-wave gratings (a beating moire pattern) with
    per-grating frequency, orientation, and phase.
    """

    pai_type: str
    amplitude: float
    frequencies: tuple[float, float] = (0.0, 0.0)
    angles: tuple[float, float] = (0.0, 0.0)
    phases: tuple[float, float] = (0.0, 0.0)
    texture_frequency: float = 0.0
    blur_sigma: float = 0.0
    grain_seed: int = 0

    def __post_init__(self):
        if self.pai_type not in ("print", "replay"):
            raise DataError(f"unknown pai_type: {self.pai_type!r}")
        if self.amplitude < 0:
            raise ConfigError("spoof amplitude must be non-negative")


@dataclass(frozen=True)
class SampleRecord:
    """One manifest row."""

    relative_path: str
    camera_id: int
    label: int  # 1 live, 0 spoof
    pai_type: str
    split: str


@dataclass(frozen=True)
class GenConfig:
    """Generator knobs; defaults are the calibrated desk-scale settings."""

    out_dir: str
    master_seed: int = 0
    n_cameras: int = 3
    n_scenes: int = 60
    image_size: int = 64
    train_frac: float = 0.6
    dev_frac: float = 0.2
    pai_types: tuple[str, ...] = ("print", "replay")
    # camera signature strength: ladder rung s gets noise_amplitude * (1 + s * noise_step);
    # rungs are assigned outside-in so the highest camera id (the conventional
    # held-out camera) lands inside the span the other cameras cover
    noise_amplitude: float = 0.05
    noise_step: float = 0.4
    # fingerprint spectrum: ladder rung s's band center walks fp_freq_low..
    # fp_freq_high and the orientation axis rotates with camera id, so cameras
    # differ by texture statistics a classifier can carry to unseen scenes.
    # The fingerprint family deliberately sits BELOW the spoof-texture bands:
    # an unseen camera's print must read as camera evidence, not as attack
    # texture, or liveness scores cannot transfer across cameras at all
    fp_freq_low: float = 0.10
    fp_freq_high: float = 0.26
    fp_bandwidth: float = 0.05
    fp_anisotropy: float = 0.85
    gamma_low: float = 0.8
    gamma_high: float = 1.2
    # spoof texture strength and frequency ranges (cycles per pixel); kept
    # above the fingerprint family so the two cue classes are spectrally
    # disjoint (see fp_freq_* above)
    spoof_amplitude: float = 0.05
    moire_freq_low: float = 0.32
    moire_freq_high: float = 0.48
    grain_freq_low: float = 0.32
    grain_freq_high: float = 0.48
    print_blur_sigma: float = 0.6
    degradation: float = 0.0

    def __post_init__(self):
        if self.n_cameras < 2:
            raise ConfigError("need at least 2 cameras for camera-supervised training")
        if self.n_scenes < 1:
            raise ConfigError("need at least one scene")
        if self.image_size < 32 or self.image_size % 16:
            raise ConfigError("image_size must be a multiple of 16, at least 32")
        if not (0 < self.train_frac < 1 and 0 < self.dev_frac < 1):
            raise ConfigError("split fractions must lie in (0, 1)")
        if self.train_frac + self.dev_frac >= 1.0:
            raise ConfigError("train_frac + dev_frac must leave room for a test split")
        for t in self.pai_types:
            if t not in ("print", "replay"):
                raise ConfigError(f"unknown pai_type in config: {t!r}")
        if not 0.0 < self.noise_amplitude <= 0.1:
            raise ConfigError("noise_amplitude must lie in (0, 0.1]")
        if self.noise_amplitude * (1 + self.noise_step * (self.n_cameras - 1)) > 0.1:
            raise ConfigError("per-camera noise amplitude exceeds the 0.1 cap")
        if not 0.0 < self.fp_freq_low <= self.fp_freq_high < 0.5:
            raise ConfigError("fingerprint band must satisfy 0 < low <= high < 0.5")
        if self.fp_bandwidth <= 0.0:
            raise ConfigError("fp_bandwidth must be positive")
        if not 0.0 <= self.fp_anisotropy < 1.0:
            raise ConfigError("fp_anisotropy must lie in [0, 1)")
        if not 0 < self.gamma_low <= self.gamma_high:
            raise ConfigError("bad gamma range")
        if self.degradation < 0:
            raise ConfigError("degradation must be non-negative")

    def split_counts(self) -> tuple[int, int, int]:
        n_train = int(round(self.train_frac * self.n_scenes))
        n_dev = int(round(self.dev_frac * self.n_scenes))
        n_test = self.n_scenes - n_train - n_dev
        if min(n_train, n_dev, n_test) < 1:
            raise ConfigError(
                f"split fractions leave an empty split for {self.n_scenes} scenes"
            )
        return n_train, n_dev, n_test


def _seed_from(*key: int) -> int:
    return int(np.random.SeedSequence(list(key)).generate_state(1, np.uint64)[0])


def scene_seed(master_seed: int, scene_index: int) -> int:
    """Stable per-scene seed; disjoint scene indices give disjoint seeds."""
    return _seed_from(master_seed, _SCENE_TAG, scene_index)


def render_base_scene(seed: int, size: int = 64) -> np.ndarray:
    """Smooth face-like scene, float32 (size, size, 3) in [0, 1].

    Built from analytic gradients and soft blobs only, so all genuine
    high-frequency content in a finished image comes from the spoof texture
    and the camera, not the scene.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size

    base = rng.uniform(0.35, 0.6)
    slope_x = rng.uniform(-0.25, 0.25)
    slope_y = rng.uniform(-0.25, 0.25)
    background = base + slope_x * (xx - 0.5) + slope_y * (yy - 0.5)
    bg_tint = rng.uniform(-0.05, 0.05, size=3)

    cx = rng.uniform(0.42, 0.58)
    cy = rng.uniform(0.4, 0.55)
    rx = rng.uniform(0.2, 0.3)
    ry = rng.uniform(0.26, 0.36)
    d = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2
    face_mask = 1.0 / (1.0 + np.exp(-(1.0 - d) / 0.08))
    face_tone = np.array(
        [rng.uniform(0.6, 0.8), rng.uniform(0.5, 0.7), rng.uniform(0.4, 0.6)]
    )

    def blob(bx, by, sx, sy, depth):
        return depth * np.exp(-(((xx - bx) / sx) ** 2 + ((yy - by) / sy) ** 2))

    eye_dx = rng.uniform(0.35, 0.5) * rx
    eye_y = cy - 0.25 * ry
    eye_s = rng.uniform(0.03, 0.045)
    eyes = blob(cx - eye_dx, eye_y, eye_s, eye_s, rng.uniform(0.2, 0.3))
    eyes += blob(cx + eye_dx, eye_y, eye_s, eye_s, rng.uniform(0.2, 0.3))
    mouth = blob(cx, cy + 0.45 * ry, rng.uniform(0.08, 0.12), 0.03, rng.uniform(0.15, 0.25))

    img = np.empty((size, size, 3), dtype=np.float64)
    for c in range(3):
        img[:, :, c] = (
            (background + bg_tint[c]) * (1.0 - face_mask)
            + face_tone[c] * face_mask
            - (eyes + mouth) * face_mask
        )
    return np.clip(img, 0.02, 0.98).astype(np.float32)


def make_spoof_profile(pai_type: str, rng: np.random.Generator, cfg: GenConfig) -> SpoofProfile:
    """Sample one attack texture instance; draws depend only on rng state."""
    if pai_type == "replay":
        return SpoofProfile(
            pai_type="replay",
            amplitude=cfg.spoof_amplitude,
            frequencies=(
                float(rng.uniform(cfg.moire_freq_low, cfg.moire_freq_high)),
                float(rng.uniform(cfg.moire_freq_low, cfg.moire_freq_high)),
            ),
            angles=(float(rng.uniform(0, np.pi)), float(rng.uniform(0, np.pi))),
            phases=(float(rng.uniform(0, 2 * np.pi)), float(rng.uniform(0, 2 * np.pi))),
        )
    if pai_type == "print":
        return SpoofProfile(
            pai_type="print",
            amplitude=cfg.spoof_amplitude,
            texture_frequency=float(rng.uniform(cfg.grain_freq_low, cfg.grain_freq_high)),
            blur_sigma=cfg.print_blur_sigma,
            grain_seed=int(rng.integers(0, 2**31)),
        )
    raise DataError(f"unknown pai_type: {pai_type!r}")


def _bandpass_grain(seed: int, shape: tuple[int, int], frequency: float) -> np.ndarray:
    """Unit-variance noise field concentrated around the given frequency."""
    white = np.random.default_rng(seed).standard_normal(shape)
    sigma_in = 1.0 / (2.0 * np.pi * frequency)
    low = ndimage.gaussian_filter(white, sigma_in)
    grain = low - ndimage.gaussian_filter(white, 2.0 * sigma_in)
    std = grain.std()
    if std < 1e-12:
        raise DataError("degenerate grain field")
    return grain / std


def apply_spoof(image: np.ndarray, spoof: SpoofProfile) -> np.ndarray:
    """Overlay an attack texture; zero amplitude returns the image unchanged."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {image.shape}")
    if spoof.amplitude == 0.0:
        return image.copy()
    yy, xx = np.mgrid[0 : image.shape[0], 0 : image.shape[1]].astype(np.float64)
    out = image.astype(np.float64)
    if spoof.pai_type == "replay":
        pattern = np.zeros_like(xx)
        for f, theta, phase in zip(spoof.frequencies, spoof.angles, spoof.phases):
            coord = xx * np.cos(theta) + yy * np.sin(theta)
            pattern += np.sin(2.0 * np.pi * f * coord + phase)
        out = out + (spoof.amplitude / 2.0) * pattern[:, :, None]
    else:
        grain = _bandpass_grain(spoof.grain_seed, image.shape[:2], spoof.texture_frequency)
        for c in range(3):
            out[:, :, c] = ndimage.gaussian_filter(out[:, :, c], spoof.blur_sigma)
        out = out + spoof.amplitude * grain[:, :, None]
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def fingerprint_field(
    seed: int,
    size: int,
    band_freq: float = 0.25,
    band_angle: float = 0.0,
    bandwidth: float = 0.08,
    anisotropy: float = 0.0,
) -> np.ndarray:
    """Deterministic zero-mean, unit-variance sensor pattern, (size, size).

    White noise shaped in the frequency domain by a Gaussian annulus at
    band_freq (cycles/px) and, if anisotropy > 0, attenuated away from the
    band_angle axis. The orientation window is pi-periodic, which keeps the
    spectrum Hermitian and the field real.
    """
    white = np.random.default_rng(seed).standard_normal((size, size))
    spec = np.fft.fft2(white)
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    radial = np.exp(-0.5 * ((np.hypot(fx, fy) - band_freq) / bandwidth) ** 2)
    orient = 1.0 - anisotropy * np.sin(np.arctan2(fy, fx) - band_angle) ** 2
    field = np.fft.ifft2(spec * radial * orient).real
    field = field - field.mean()
    return field / field.std()


def apply_camera(image: np.ndarray, cam: CameraProfile, degradation: float = 0.0) -> np.ndarray:
    """Capture an image through a camera: tone curve, fingerprint, optional
    block-transform quantization."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {image.shape}")
    out = np.clip(image.astype(np.float64), 0.0, 1.0)
    for c, g in enumerate(cam.response_gamma):
        if g != 1.0:
            out[:, :, c] = np.power(out[:, :, c], g)
    fp = fingerprint_field(
        cam.fingerprint_seed,
        image.shape[0],
        band_freq=cam.band_freq,
        band_angle=cam.band_angle,
        bandwidth=cam.bandwidth,
        anisotropy=cam.anisotropy,
    )
    if fp.shape != image.shape[:2]:
        raise ValueError("fingerprint size does not match the image")
    out = out * (1.0 + cam.noise_amplitude * fp[:, :, None])
    if degradation > 0.0:
        out = _quantize_blocks(out, degradation)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _quantize_blocks(image: np.ndarray, strength: float, block: int = 8) -> np.ndarray:
    """Quantize block-transform coefficients, coarser toward high frequency."""
    h, w = image.shape[:2]
    if h % block or w % block:
        raise ValueError(f"image size must be a multiple of {block} for degradation")
    r = np.arange(block)
    step = strength * (1.0 + r[:, None] + r[None, :]) / 64.0
    step = step[None, :, None, :]
    out = np.empty_like(image)
    for c in range(image.shape[2]):
        blocks = image[:, :, c].reshape(h // block, block, w // block, block)
        coeffs = dctn(blocks, axes=(1, 3), norm="ortho")
        coeffs = np.round(coeffs / step) * step
        out[:, :, c] = idctn(coeffs, axes=(1, 3), norm="ortho").reshape(h, w)
    return out


def _ladder_slot(camera_id: int, n_cameras: int) -> int:
    """Outside-in ladder assignment: low ids take the extreme rungs, high
    ids the middle ones, so the conventional held-out camera (highest id)
    has a signature inside the span covered by the training cameras and
    cross-camera evaluation tests unseen-but-in-family hardware instead of
    extrapolation."""
    half, odd = divmod(camera_id, 2)
    return half if not odd else n_cameras - 1 - half


def make_camera_profile(cfg: GenConfig, camera_id: int) -> CameraProfile:
    """Deterministic camera signature for one camera id under a master seed.

    Band center and orientation follow per-id ladders (with a small seeded
    angle jitter), so any two cameras are spectrally separated by
    construction rather than by luck of the draw.
    """
    rng = np.random.default_rng(
        np.random.SeedSequence([cfg.master_seed, _CAMERA_TAG, camera_id])
    )
    slot = _ladder_slot(camera_id, cfg.n_cameras)
    amplitude = cfg.noise_amplitude * (1.0 + cfg.noise_step * slot)
    span = max(cfg.n_cameras - 1, 1)
    band = cfg.fp_freq_low + (cfg.fp_freq_high - cfg.fp_freq_low) * slot / span
    angle = np.pi * camera_id / cfg.n_cameras
    return CameraProfile(
        camera_id=camera_id,
        fingerprint_seed=int(rng.integers(0, 2**31)),
        noise_amplitude=float(amplitude),
        band_freq=float(band),
        band_angle=float(angle + rng.uniform(-np.pi / 12, np.pi / 12)),
        bandwidth=cfg.fp_bandwidth,
        anisotropy=cfg.fp_anisotropy,
        response_gamma=tuple(float(g) for g in rng.uniform(cfg.gamma_low, cfg.gamma_high, 3)),
    )


def _image_rng(cfg: GenConfig, scene_index: int, camera_id: int, pai: str) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(
            [cfg.master_seed, _IMAGE_TAG, scene_index, camera_id, PAI_TYPES.index(pai)]
        )
    )


def _split_of(cfg: GenConfig, scene_index: int) -> str:
    n_train, n_dev, _ = cfg.split_counts()
    if scene_index < n_train:
        return "train"
    if scene_index < n_train + n_dev:
        return "dev"
    return "test"


def write_image(img: np.ndarray, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path, format="PNG")


def load_image(path: str | Path) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise MissingArtifactError(f"image not found: {p}")
    arr = np.asarray(Image.open(p).convert("RGB"), dtype=np.float32)
    return arr / 255.0


def generate_dataset(cfg: GenConfig) -> list[SampleRecord]:
    """Render the full corpus and its manifest; returns the manifest rows.

    Layout: <out_dir>/cam<k>/scene<idx>_<pai>.png. Scenes are assigned to
    train/dev/test in contiguous index blocks, so no base scene leaks across
    splits. Re-running with the same config writes identical bytes.
    """
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cameras = [make_camera_profile(cfg, k) for k in range(cfg.n_cameras)]
    pai_list = ("none",) + tuple(cfg.pai_types)
    records: list[SampleRecord] = []
    for idx in range(cfg.n_scenes):
        split = _split_of(cfg, idx)
        base = render_base_scene(scene_seed(cfg.master_seed, idx), cfg.image_size)
        for cam in cameras:
            for pai in pai_list:
                if pai == "none":
                    presented = base
                else:
                    rng = _image_rng(cfg, idx, cam.camera_id, pai)
                    presented = apply_spoof(base, make_spoof_profile(pai, rng, cfg))
                captured = apply_camera(presented, cam, cfg.degradation)
                rel = f"cam{cam.camera_id}/scene{idx:05d}_{pai}.png"
                write_image(captured, out / rel)
                records.append(
                    SampleRecord(
                        relative_path=rel,
                        camera_id=cam.camera_id,
                        label=1 if pai == "none" else 0,
                        pai_type=pai,
                        split=split,
                    )
                )
    write_manifest(records, out / MANIFEST_NAME)
    return records


def write_manifest(records: list[SampleRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_FIELDS)
        for r in records:
            writer.writerow([r.relative_path, r.camera_id, r.label, r.pai_type, r.split])


def read_manifest(path: str | Path) -> list[SampleRecord]:
    """Parse and validate a manifest; label/pai consistency is enforced."""
    p = Path(path)
    if p.is_dir():
        p = p / MANIFEST_NAME
    if not p.exists():
        raise MissingArtifactError(f"manifest not found: {p}")
    records: list[SampleRecord] = []
    with open(p, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != MANIFEST_FIELDS:
            raise DataError(f"unexpected manifest header in {p}: {reader.fieldnames}")
        for i, row in enumerate(reader, start=2):
            try:
                rec = SampleRecord(
                    relative_path=row["relative_path"],
                    camera_id=int(row["camera_id"]),
                    label=int(row["label"]),
                    pai_type=row["pai_type"],
                    split=row["split"],
                )
            except (TypeError, ValueError) as exc:
                raise DataError(f"{p}:{i}: malformed row: {exc}") from exc
            if rec.label not in (0, 1):
                raise DataError(f"{p}:{i}: label must be 0 or 1")
            if rec.pai_type not in PAI_TYPES:
                raise DataError(f"{p}:{i}: unknown pai_type {rec.pai_type!r}")
            if (rec.label == 1) != (rec.pai_type == "none"):
                raise DataError(f"{p}:{i}: label {rec.label} inconsistent with pai_type")
            if rec.split not in SPLITS:
                raise DataError(f"{p}:{i}: unknown split {rec.split!r}")
            records.append(rec)
    if not records:
        raise DataError(f"manifest {p} has no rows")
    return records


def manifest_sha256(path: str | Path) -> str:
    p = Path(path)
    if p.is_dir():
        p = p / MANIFEST_NAME
    if not p.exists():
        raise MissingArtifactError(f"manifest not found: {p}")
    return hashlib.sha256(p.read_bytes()).hexdigest()


class ImageStore:
    """Loads dataset images by manifest-relative path, caching decoded
    float arrays; the training loop touches every image many times."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self._cache: dict[str, np.ndarray] = {}

    def load(self, relative_path: str) -> np.ndarray:
        cached = self._cache.get(relative_path)
        if cached is None:
            cached = load_image(self.root / relative_path)
            self._cache[relative_path] = cached
        return cached
