"""Synthetic corpus generator: determinism, texture structure, attribution.

The spectral and template-matching tests are deliberately model-free: they
establish with classical signal processing that the generated images carry
a recoverable camera identity and a recoverable spoof texture, which is the
premise every training test builds on.
"""

import math

import numpy as np
import pytest
from scipy import ndimage

from caminv.errors import ConfigError, DataError, MissingArtifactError
from caminv.synthdata import (
    MANIFEST_FIELDS,
    MANIFEST_NAME,
    PAI_TYPES,
    CameraProfile,
    GenConfig,
    ImageStore,
    SampleRecord,
    SpoofProfile,
    apply_camera,
    apply_spoof,
    fingerprint_field,
    generate_dataset,
    load_image,
    make_camera_profile,
    make_spoof_profile,
    manifest_sha256,
    read_manifest,
    render_base_scene,
    scene_seed,
    write_image,
    write_manifest,
)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    cfg = GenConfig(out_dir=str(root), master_seed=3, n_cameras=3, n_scenes=12,
                    image_size=32)
    records = generate_dataset(cfg)
    return cfg, root, records


def grayscale(img):
    return img.astype(np.float64).mean(axis=2)


def highpass(field, sigma=2.0):
    return field - ndimage.gaussian_filter(field, sigma)


def pearson(a, b):
    a = a.ravel() - a.mean()
    b = b.ravel() - b.mean()
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b) + 1e-12))


class TestBaseScene:
    def test_range_and_dtype(self):
        img = render_base_scene(scene_seed(0, 0), 64)
        assert img.shape == (64, 64, 3)
        assert img.dtype == np.float32
        assert img.min() >= 0.02 and img.max() <= 0.98

    def test_deterministic_and_scene_distinct(self):
        a = render_base_scene(scene_seed(5, 2), 32)
        b = render_base_scene(scene_seed(5, 2), 32)
        c = render_base_scene(scene_seed(5, 3), 32)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_scene_is_smooth(self):
        # all high-frequency content must come from spoof/camera stages
        img = grayscale(render_base_scene(scene_seed(1, 0), 64))
        hf = highpass(img, 1.5)
        assert hf.std() < 0.01


class TestSpoofTextures:
    def test_zero_amplitude_is_identity_copy(self):
        img = render_base_scene(scene_seed(0, 1), 32)
        spoof = SpoofProfile(pai_type="replay", amplitude=0.0)
        out = apply_spoof(img, spoof)
        assert np.array_equal(out, img)
        assert out is not img

    def test_replay_gratings_peak_at_configured_frequencies(self):
        flat = np.full((64, 64, 3), 0.5, dtype=np.float32)
        spoof = SpoofProfile(
            pai_type="replay", amplitude=0.05,
            frequencies=(0.25, 0.125), angles=(0.0, math.pi / 2),
            phases=(0.0, 0.0),
        )
        delta = apply_spoof(flat, spoof)[:, :, 0].astype(np.float64) - 0.5
        # row 0: the y-grating contributes sin(0) = 0, leaving the pure
        # x-grating; its DFT peak sits at bin f * W = 16 with |X| = (A/2)(W/2)
        row_spec = np.abs(np.fft.rfft(delta[0, :]))
        assert int(np.argmax(row_spec[1:])) + 1 == 16
        assert row_spec[16] == pytest.approx(0.025 * 32, abs=1e-3)
        col_spec = np.abs(np.fft.rfft(delta[:, 0]))
        assert int(np.argmax(col_spec[1:])) + 1 == 8
        assert col_spec[8] == pytest.approx(0.025 * 32, abs=1e-3)

    def test_print_matches_grain_construction(self):
        flat = np.full((48, 48, 3), 0.5, dtype=np.float32)
        spoof = SpoofProfile(
            pai_type="print", amplitude=0.05, texture_frequency=0.3,
            blur_sigma=0.6, grain_seed=123,
        )
        out = apply_spoof(flat, spoof)
        white = np.random.default_rng(123).standard_normal((48, 48))
        sigma = 1.0 / (2.0 * np.pi * 0.3)
        grain = ndimage.gaussian_filter(white, sigma) - ndimage.gaussian_filter(
            white, 2.0 * sigma
        )
        grain = grain / grain.std()
        expected = np.clip(0.5 + 0.05 * grain, 0.0, 1.0)
        assert np.allclose(out[:, :, 1], expected, atol=1e-6)

    def test_print_grain_is_band_limited(self):
        flat = np.full((64, 64, 3), 0.5, dtype=np.float32)
        f0 = 0.3
        spoof = SpoofProfile(
            pai_type="print", amplitude=0.05, texture_frequency=f0,
            blur_sigma=0.6, grain_seed=7,
        )
        delta = apply_spoof(flat, spoof)[:, :, 0].astype(np.float64) - 0.5
        power = np.abs(np.fft.fft2(delta)) ** 2
        fy = np.fft.fftfreq(64)[:, None]
        fx = np.fft.fftfreq(64)[None, :]
        r = np.sqrt(fx**2 + fy**2)
        total = power.sum() - power[0, 0]
        near_dc = power[(r < 0.1) & (r > 0)].sum()
        in_band = power[(r >= 0.5 * f0) & (r <= 1.8 * f0)].sum()
        assert near_dc / total < 0.05
        assert in_band / total > 0.6

    def test_all_spoofed_pixels_stay_in_range(self):
        rng = np.random.default_rng(8)
        cfg = GenConfig(out_dir="unused", image_size=32)
        img = render_base_scene(scene_seed(0, 3), 32)
        for pai in ("print", "replay"):
            out = apply_spoof(img, make_spoof_profile(pai, rng, cfg))
            assert out.min() >= 0.0 and out.max() <= 1.0
            assert not np.array_equal(out, img)

    def test_profile_validation(self):
        with pytest.raises(DataError):
            SpoofProfile(pai_type="mask", amplitude=0.05)
        with pytest.raises(ConfigError):
            SpoofProfile(pai_type="print", amplitude=-0.1)
        with pytest.raises(DataError):
            make_spoof_profile("mask", np.random.default_rng(0), GenConfig(out_dir="x"))


def _profile_field(cam: CameraProfile, size: int) -> np.ndarray:
    return fingerprint_field(
        cam.fingerprint_seed, size, cam.band_freq, cam.band_angle,
        cam.bandwidth, cam.anisotropy,
    )


class TestCameraModel:
    def test_fingerprint_is_standardized_and_deterministic(self):
        f1 = fingerprint_field(42, 32, 0.3)
        f2 = fingerprint_field(42, 32, 0.3)
        f3 = fingerprint_field(43, 32, 0.3)
        assert np.array_equal(f1, f2)
        assert not np.array_equal(f1, f3)
        assert abs(f1.mean()) < 1e-12
        assert f1.std() == pytest.approx(1.0, abs=1e-12)
        # spectral knobs all matter
        assert not np.array_equal(f1, fingerprint_field(42, 32, 0.2))
        assert not np.array_equal(
            fingerprint_field(42, 32, 0.3, 0.0, 0.08, 0.8),
            fingerprint_field(42, 32, 0.3, 1.0, 0.08, 0.8),
        )

    def test_fingerprint_band_is_where_configured(self):
        f = fingerprint_field(5, 64, band_freq=0.3, bandwidth=0.05)
        ps = np.abs(np.fft.fft2(f)) ** 2
        fy = np.fft.fftfreq(64)[:, None]
        fx = np.fft.fftfreq(64)[None, :]
        r = np.hypot(fx, fy)
        in_band = ps[(r > 0.2) & (r < 0.4)].sum()
        assert in_band / ps.sum() > 0.9

    def test_multiplicative_form(self):
        rng = np.random.default_rng(9)
        img = rng.uniform(0.2, 0.8, (32, 32, 3)).astype(np.float32)
        cam = CameraProfile(camera_id=0, fingerprint_seed=11, noise_amplitude=0.02)
        out = apply_camera(img, cam)
        field = _profile_field(cam, 32)
        expected = img.astype(np.float64) * (1.0 + 0.02 * field[:, :, None])
        assert np.allclose(out, expected, atol=1e-6)
        # per-pixel gain is shared across channels
        ratio = out.astype(np.float64) / img
        assert np.allclose(ratio[:, :, 0], ratio[:, :, 1], atol=1e-5)

    def test_tone_curve_applied_per_channel(self):
        img = np.full((32, 32, 3), 0.25, dtype=np.float32)
        cam = CameraProfile(
            camera_id=0, fingerprint_seed=11, noise_amplitude=0.02,
            response_gamma=(2.0, 1.0, 0.5),
        )
        out = apply_camera(img, cam).astype(np.float64)
        gain = 1.0 + 0.02 * _profile_field(cam, 32)
        assert np.allclose(out[:, :, 0], 0.25**2 * gain, atol=1e-6)
        assert np.allclose(out[:, :, 1], 0.25 * gain, atol=1e-6)
        assert np.allclose(out[:, :, 2], 0.5 * gain, atol=1e-6)

    def test_degradation_zero_is_identity(self):
        rng = np.random.default_rng(10)
        img = rng.uniform(0.2, 0.8, (32, 32, 3)).astype(np.float32)
        cam = CameraProfile(camera_id=0, fingerprint_seed=3, noise_amplitude=0.02)
        assert np.array_equal(apply_camera(img, cam, 0.0), apply_camera(img, cam))
        degraded = apply_camera(img, cam, 0.5)
        assert not np.array_equal(degraded, apply_camera(img, cam))
        assert degraded.min() >= 0.0 and degraded.max() <= 1.0

    def test_non_square_image_rejected(self):
        cam = CameraProfile(camera_id=0, fingerprint_seed=3, noise_amplitude=0.02)
        with pytest.raises(ValueError):
            apply_camera(np.zeros((16, 32, 3), dtype=np.float32), cam)

    def test_profile_validation(self):
        with pytest.raises(ConfigError):
            CameraProfile(camera_id=0, fingerprint_seed=1, noise_amplitude=0.0)
        with pytest.raises(ConfigError):
            CameraProfile(camera_id=0, fingerprint_seed=1, band_freq=0.5)
        with pytest.raises(ConfigError):
            CameraProfile(camera_id=0, fingerprint_seed=1, anisotropy=1.0)

    def test_default_profile_ladders(self):
        cfg = GenConfig(out_dir="unused")
        profiles = [make_camera_profile(cfg, k) for k in range(3)]
        amps = [p.noise_amplitude for p in profiles]
        assert amps == pytest.approx([0.05, 0.09, 0.07], abs=1e-12)
        bands = [p.band_freq for p in profiles]
        assert bands == pytest.approx([0.10, 0.26, 0.18], abs=1e-12)
        # the last camera is bracketed by the others in both signature axes,
        # so holding it out tests in-family transfer, not extrapolation
        assert min(amps[:2]) < amps[2] < max(amps[:2])
        assert min(bands[:2]) < bands[2] < max(bands[:2])
        # orientation axes are spread over the half-circle, jitter < pi/12
        for k, p in enumerate(profiles):
            assert abs(p.band_angle - np.pi * k / 3) <= np.pi / 12
        assert len({p.fingerprint_seed for p in profiles}) == 3
        assert make_camera_profile(cfg, 1) == profiles[1]


class TestGenerateDataset:
    def test_layout_counts_and_manifest(self, corpus):
        cfg, root, records = corpus
        assert len(records) == 12 * 3 * 3
        assert (root / MANIFEST_NAME).exists()
        assert read_manifest(root) == records
        for r in records[:6]:
            assert (root / r.relative_path).exists()
        assert records[0].relative_path == "cam0/scene00000_none.png"
        assert {r.pai_type for r in records} == set(PAI_TYPES)

    def test_split_blocks_are_disjoint_scene_ranges(self, corpus):
        cfg, _, records = corpus
        by_split = {}
        for r in records:
            idx = int(r.relative_path.split("scene")[1][:5])
            by_split.setdefault(r.split, set()).add(idx)
        n_train, n_dev, n_test = cfg.split_counts()
        assert by_split["train"] == set(range(n_train))
        assert by_split["dev"] == set(range(n_train, n_train + n_dev))
        assert by_split["test"] == set(range(n_train + n_dev, 12))
        assert (n_train, n_dev, n_test) == (7, 2, 3)

    def test_regeneration_is_bitwise_identical(self, tmp_path):
        cfg_a = GenConfig(out_dir=str(tmp_path / "a"), master_seed=9, n_scenes=4,
                          n_cameras=2, image_size=32)
        cfg_b = GenConfig(out_dir=str(tmp_path / "b"), master_seed=9, n_scenes=4,
                          n_cameras=2, image_size=32)
        recs_a = generate_dataset(cfg_a)
        recs_b = generate_dataset(cfg_b)
        assert recs_a == recs_b
        assert manifest_sha256(tmp_path / "a") == manifest_sha256(tmp_path / "b")
        for r in recs_a:
            a = (tmp_path / "a" / r.relative_path).read_bytes()
            b = (tmp_path / "b" / r.relative_path).read_bytes()
            assert a == b

    def test_master_seed_changes_content(self, tmp_path):
        cfg_a = GenConfig(out_dir=str(tmp_path / "a"), master_seed=1, n_scenes=4,
                          n_cameras=2, image_size=32)
        cfg_b = GenConfig(out_dir=str(tmp_path / "b"), master_seed=2, n_scenes=4,
                          n_cameras=2, image_size=32)
        generate_dataset(cfg_a)
        generate_dataset(cfg_b)
        assert manifest_sha256(tmp_path / "a") == manifest_sha256(tmp_path / "b")
        live = "cam0/scene00000_none.png"
        assert (tmp_path / "a" / live).read_bytes() != (tmp_path / "b" / live).read_bytes()


class TestRecoverability:
    """Classical-baseline checks that the corpus is actually learnable."""

    def test_template_matching_recovers_camera(self, corpus):
        cfg, root, records = corpus
        store = ImageStore(root)
        templates = []
        for k in range(cfg.n_cameras):
            p = make_camera_profile(cfg, k)
            templates.append(highpass(_profile_field(p, 32)))
        hits = 0
        for r in records:
            residual = highpass(grayscale(store.load(r.relative_path)))
            scores = [pearson(residual, t) for t in templates]
            hits += int(np.argmax(scores)) == r.camera_id
        assert hits / len(records) >= 0.9

    def test_high_frequency_energy_separates_within_camera(self, corpus):
        cfg, root, records = corpus
        store = ImageStore(root)

        def hf_energy(rel):
            return highpass(grayscale(store.load(rel)), 1.5).std()

        def auc(live_vals, spoof_vals):
            wins = sum(s > l for l in live_vals for s in spoof_vals)
            return wins / (len(live_vals) * len(spoof_vals))

        per_camera = []
        pooled_live, pooled_spoof = [], []
        for k in range(cfg.n_cameras):
            lives = [hf_energy(r.relative_path) for r in records
                     if r.camera_id == k and r.label == 1]
            spoofs = [hf_energy(r.relative_path) for r in records
                      if r.camera_id == k and r.label == 0]
            per_camera.append(auc(lives, spoofs))
            pooled_live += lives
            pooled_spoof += spoofs
        assert min(per_camera) >= 0.9
        # across cameras the noise ladder overlaps the spoof band, so a raw
        # high-frequency threshold is not a complete solution
        assert auc(pooled_live, pooled_spoof) < 0.999

    def test_noise_ladder_is_monotone_on_lives(self, corpus):
        # amplitude rungs are assigned outside-in over camera ids, so live
        # high-frequency energy follows the rung order, with the held-out
        # camera (highest id) in the middle
        cfg, root, records = corpus
        store = ImageStore(root)
        means = []
        for k in range(cfg.n_cameras):
            vals = [highpass(grayscale(store.load(r.relative_path)), 1.5).std()
                    for r in records if r.camera_id == k and r.label == 1]
            means.append(np.mean(vals))
        assert means[0] < means[2] < means[1]


class TestManifestIO:
    def rows(self):
        return [
            SampleRecord("cam0/a.png", 0, 1, "none", "train"),
            SampleRecord("cam1/b.png", 1, 0, "replay", "test"),
        ]

    def test_round_trip(self, tmp_path):
        path = tmp_path / MANIFEST_NAME
        write_manifest(self.rows(), path)
        assert read_manifest(path) == self.rows()
        header = path.read_text().splitlines()[0]
        assert tuple(header.split(",")) == MANIFEST_FIELDS

    def test_missing_and_malformed(self, tmp_path):
        with pytest.raises(MissingArtifactError):
            read_manifest(tmp_path / "nope.csv")
        bad = tmp_path / "bad.csv"
        bad.write_text("a,b\n1,2\n")
        with pytest.raises(DataError):
            read_manifest(bad)

    @pytest.mark.parametrize(
        "row",
        [
            "cam0/x.png,0,2,none,train",        # label out of range
            "cam0/x.png,0,1,print,train",       # live with an attack type
            "cam0/x.png,0,0,none,train",        # spoof without one
            "cam0/x.png,0,0,mask,train",        # unknown attack type
            "cam0/x.png,0,1,none,holdout",      # unknown split
            "cam0/x.png,zero,1,none,train",     # non-integer camera
        ],
    )
    def test_invalid_rows_rejected(self, tmp_path, row):
        p = tmp_path / "m.csv"
        p.write_text(",".join(MANIFEST_FIELDS) + "\n" + row + "\n")
        with pytest.raises(DataError):
            read_manifest(p)

    def test_empty_manifest_rejected(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text(",".join(MANIFEST_FIELDS) + "\n")
        with pytest.raises(DataError):
            read_manifest(p)


class TestImageIO:
    def test_png_round_trip_bound(self, tmp_path):
        rng = np.random.default_rng(2)
        img = rng.uniform(0, 1, (32, 32, 3)).astype(np.float32)
        path = tmp_path / "x.png"
        write_image(img, path)
        back = load_image(path)
        assert back.shape == img.shape
        assert np.abs(back - img).max() <= 0.5 / 255.0 + 1e-6

    def test_missing_image_raises(self, tmp_path):
        with pytest.raises(MissingArtifactError):
            load_image(tmp_path / "nope.png")

    def test_store_caches(self, tmp_path):
        img = np.full((16, 16, 3), 0.5, dtype=np.float32)
        write_image(img, tmp_path / "x.png")
        store = ImageStore(tmp_path)
        first = store.load("x.png")
        assert store.load("x.png") is first


class TestGenConfigValidation:
    def test_rejects_bad_values(self, tmp_path):
        ok = dict(out_dir=str(tmp_path))
        with pytest.raises(ConfigError):
            GenConfig(**ok, n_cameras=1)
        with pytest.raises(ConfigError):
            GenConfig(**ok, image_size=40)  # not a multiple of 16
        with pytest.raises(ConfigError):
            GenConfig(**ok, image_size=16)  # below the minimum
        with pytest.raises(ConfigError):
            GenConfig(**ok, train_frac=0.7, dev_frac=0.3)
        with pytest.raises(ConfigError):
            GenConfig(**ok, pai_types=("mask",))
        with pytest.raises(ConfigError):
            GenConfig(**ok, noise_amplitude=0.06)  # cam2 would exceed the cap
        with pytest.raises(ConfigError):
            GenConfig(**ok, gamma_low=1.2, gamma_high=0.8)
        with pytest.raises(ConfigError):
            GenConfig(**ok, degradation=-1.0)

    def test_split_counts_guard(self, tmp_path):
        cfg = GenConfig(out_dir=str(tmp_path), n_scenes=2)
        with pytest.raises(ConfigError):
            cfg.split_counts()
