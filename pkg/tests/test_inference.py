"""Fusion, unknown-camera handling, and attention refinement.

The 2x2 attention example and the fusion/threshold spot values are hand
computed; batched scoring is cross-checked against a manual re-run of the
same forward pieces.
"""

import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from caminv.errors import (
    CalibrationError,
    ConfigError,
    DataError,
    MissingArtifactError,
)
from caminv.inference import (
    CameraCalibration,
    FusionWeights,
    attention_refine,
    calibrate_tau,
    classify_camera,
    collect_camera_probs,
    fuse_scores,
    image_to_tensor,
    load_calibration,
    normalize_probs,
    predict,
    save_calibration,
    score_batch,
    score_manifest,
    unknown_probability,
)
from caminv.model import CameraInvariantModel, ModelConfig, image_camera_probs
from caminv.synthdata import ImageStore, SampleRecord, write_image


def tiny_model(**overrides):
    torch.manual_seed(7)
    cfg = ModelConfig(n_cameras=3, **overrides)
    return CameraInvariantModel(cfg).eval()


def tiny_batch(n=4, size=32, seed=11):
    torch.manual_seed(seed)
    return torch.rand(n, 3, size, size)


class TestFusion:
    def test_closed_form_spot(self):
        # (1.0 * 0.8 + 0.7 * 0.6) / 1.7
        assert fuse_scores(0.8, 0.6, 1.0, 0.7) == pytest.approx(
            0.7176470588235294, abs=1e-12
        )

    def test_defaults_match_explicit_weights(self):
        assert fuse_scores(0.3, 0.9) == fuse_scores(0.3, 0.9, 1.0, 0.7)

    def test_equal_weights_is_mean(self):
        assert fuse_scores(0.2, 0.8, 1.0, 1.0) == pytest.approx(0.5)

    @settings(max_examples=80, deadline=None)
    @given(
        st.floats(0, 1), st.floats(0, 1),
        st.floats(0.01, 10), st.floats(0.01, 10),
    )
    def test_between_inputs(self, a, b, wi, wa):
        fused = fuse_scores(a, b, wi, wa)
        assert min(a, b) - 1e-12 <= fused <= max(a, b) + 1e-12

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            fuse_scores(1.2, 0.5)
        with pytest.raises(ValueError):
            fuse_scores(0.5, 0.5, 0.0, 0.7)
        with pytest.raises(ValueError):
            FusionWeights(w_aug=-1.0)


class TestTauCalibration:
    def test_worked_example(self):
        probs = np.array(
            [
                [0.8, 0.1, 0.1],  # gap 0.7, headroom 0.2 -> 3.5
                [0.9, 0.05, 0.05],  # -> 8.5
                [0.5, 0.3, 0.2],  # top prob at the floor, excluded
            ]
        )
        cal = calibrate_tau(probs, floor=0.6)
        assert cal.tau == pytest.approx(3.5, abs=1e-12)
        assert cal.n_cameras == 3
        assert cal.floor == 0.6

    def test_tau_exceeds_half_by_construction(self):
        # any selected row has p1 > 0.6, so gap > 0.2 and headroom < 0.4
        rng = np.random.default_rng(5)
        raw = rng.uniform(0, 1, (200, 4))
        probs = raw / raw.sum(axis=1, keepdims=True)
        probs[0] = [0.61, 0.3, 0.05, 0.04]  # ensure at least one row qualifies
        cal = calibrate_tau(probs)
        assert cal.tau > 0.5

    def test_no_confident_rows_raises(self):
        with pytest.raises(CalibrationError):
            calibrate_tau(np.full((4, 3), 1.0 / 3.0))

    def test_bad_shape_raises(self):
        with pytest.raises(ValueError):
            calibrate_tau(np.array([0.9, 0.1]))

    def test_round_trip_file(self, tmp_path):
        cal = CameraCalibration(tau=3.5, floor=0.6, n_cameras=3)
        path = tmp_path / "calibration.txt"
        save_calibration(cal, path)
        assert load_calibration(path) == cal

    def test_missing_file_raises(self, tmp_path):
        with pytest.raises(MissingArtifactError):
            load_calibration(tmp_path / "nope.txt")

    def test_malformed_file_raises(self, tmp_path):
        p = tmp_path / "bad.txt"
        p.write_text("tau 3.5\n")
        with pytest.raises(DataError):
            load_calibration(p)
        p.write_text("tau=3.5\n")
        with pytest.raises(DataError):  # floor and n_cameras missing
            load_calibration(p)


class TestUnknownProbability:
    def test_worked_example(self):
        assert unknown_probability(0.9, 0.2, 3.5) == pytest.approx(0.8, abs=1e-12)

    def test_clamps(self):
        assert unknown_probability(0.9, 0.1, 0.5) == 0.0  # gap wider than tau
        assert unknown_probability(0.4, 0.4, 3.5) == 1.0  # no gap at all

    def test_validation(self):
        with pytest.raises(ValueError):
            unknown_probability(0.9, 0.2, 0.0)
        with pytest.raises(ValueError):
            unknown_probability(0.2, 0.9, 3.5)

    @settings(max_examples=60, deadline=None)
    @given(st.floats(0, 1), st.floats(0, 1), st.floats(0.01, 100))
    def test_range_and_monotonicity(self, a, b, tau):
        p1, p2 = max(a, b), min(a, b)
        u = unknown_probability(p1, p2, tau)
        assert 0.0 <= u <= 1.0
        # widening the gap cannot raise the unknown probability
        if p2 >= 0.05:
            assert unknown_probability(min(p1 + 0.05, 1.0), p2 - 0.05, tau) <= u + 1e-12


class TestNormalizeAndClassify:
    def test_full_unknown_mass_caps_at_half(self):
        out = normalize_probs(np.array([0.7, 0.3]), 1.0)
        assert out[-1] == pytest.approx(0.5, abs=1e-12)
        assert out.sum() == pytest.approx(1.0, abs=1e-12)

    def test_zero_unknown_keeps_known_probs(self):
        out = normalize_probs(np.array([0.7, 0.3]), 0.0)
        assert np.allclose(out, [0.7, 0.3, 0.0], atol=1e-15)

    def test_classify_is_one_based(self):
        assert classify_camera(np.array([0.1, 0.7, 0.2])) == 2
        assert classify_camera(np.array([0.2, 0.3, 0.5])) == 3  # unknown slot

    def test_classify_tie_takes_smallest(self):
        assert classify_camera(np.array([0.4, 0.4, 0.2])) == 1

    def test_validation(self):
        with pytest.raises(ValueError):
            normalize_probs(np.array([0.5]), 0.1)
        with pytest.raises(ValueError):
            normalize_probs(np.array([0.5, -0.1]), 0.1)
        with pytest.raises(ValueError):
            classify_camera(np.array([0.5, 0.5]))


def softmax_rows_oracle(gram):
    out = np.empty_like(gram)
    for i in range(gram.shape[0]):
        row = gram[i] - gram[i].max()
        e = np.exp(row)
        out[i] = e / e.sum()
    return out


class TestAttentionRefine:
    def test_identity_2x2_example(self):
        x = torch.eye(2)
        x_att, h = attention_refine(x)
        e = math.e
        expected = torch.tensor(
            [[e / (e + 1), 1 / (e + 1)], [1 / (e + 1), e / (e + 1)]]
        )
        assert torch.allclose(h, expected, atol=1e-6)
        assert abs(h[0, 0].item() - 0.731059) < 1e-6
        assert abs(h[0, 1].item() - 0.268941) < 1e-6
        # x @ H with x = I reproduces H
        assert torch.allclose(x_att, expected, atol=1e-6)

    def test_rows_sum_to_one(self):
        torch.manual_seed(3)
        x = torch.randn(2, 16, 25)
        _, h = attention_refine(x)
        assert torch.allclose(h.sum(dim=2), torch.ones(2, 25), atol=1e-9)

    def test_single_position_is_exact_identity(self):
        x = torch.randn(8, 1)
        x_att, h = attention_refine(x)
        assert torch.equal(x_att, x)
        assert torch.allclose(h, torch.ones(1, 1))

    def test_matches_nested_loop_oracle(self):
        torch.manual_seed(4)
        x = torch.randn(6, 9)
        x_att, h = attention_refine(x)
        xn = x.double().numpy()
        gram = np.zeros((9, 9))
        for i in range(9):
            for j in range(9):
                gram[i, j] = sum(xn[c, i] * xn[c, j] for c in range(6))
        h_exp = softmax_rows_oracle(gram)
        att_exp = np.zeros((6, 9))
        for c in range(6):
            for j in range(9):
                att_exp[c, j] = sum(xn[c, k] * h_exp[k, j] for k in range(9))
        assert np.allclose(h.numpy(), h_exp, atol=1e-6)
        assert np.allclose(x_att.numpy(), att_exp, atol=1e-5)

    def test_batched_matches_per_sample(self):
        torch.manual_seed(5)
        x = torch.randn(3, 4, 7)
        batched_att, batched_h = attention_refine(x)
        for b in range(3):
            single_att, single_h = attention_refine(x[b])
            assert torch.allclose(batched_att[b], single_att, atol=1e-7)
            assert torch.allclose(batched_h[b], single_h, atol=1e-7)


class TestScoreBatch:
    def test_known_mode_fusion_arithmetic(self):
        model = tiny_model()
        images = tiny_batch(3)
        outs = score_batch(model, images)
        assert len(outs) == 3
        for o in outs:
            assert o.refined is False
            assert 1 <= o.camera_pred <= 3
            assert o.camera_pred == int(np.argmax(o.camera_probs)) + 1
            assert o.p_fused == pytest.approx(
                fuse_scores(o.p_spf, o.p_aug, 1.0, 0.7), abs=1e-12
            )

    def test_tiny_tau_keeps_known_path(self):
        model = tiny_model()
        images = tiny_batch(3)
        cal = CameraCalibration(tau=1e-9, floor=0.6, n_cameras=3)
        outs = score_batch(model, images, calibration=cal, unknown_mode=True)
        plain = score_batch(model, images)
        for o, p in zip(outs, plain):
            assert o.refined is False
            assert o.p_unknown == 0.0
            assert o.p_spf == p.p_spf
            assert o.p_fused == pytest.approx(p.p_fused, abs=1e-12)

    def test_huge_tau_forces_refined_path(self):
        model = tiny_model()
        images = tiny_batch(3)
        cal = CameraCalibration(tau=1e9, floor=0.6, n_cameras=3)
        outs = score_batch(model, images, calibration=cal, unknown_mode=True)

        with torch.no_grad():
            fwd = model(images)
            b, c, h, w = fwd.m_cam.shape
            x_att, _ = attention_refine(fwd.m_cam.flatten(2))
            m_spf = fwd.m_mix - x_att.reshape(b, c, h, w)
            pooled = F.adaptive_avg_pool2d(m_spf, 1).flatten(1)
            refined = model.head_spf(pooled)[:, 1]
            p_aug = fwd.p_aug

        for i, o in enumerate(outs):
            assert o.refined is True
            assert o.camera_pred == 4  # n_cameras + 1
            assert o.p_unknown == pytest.approx(0.5, abs=1e-6)
            assert o.p_spf == pytest.approx(float(refined[i]), abs=1e-9)
            expected = (1.0 * float(refined[i]) + 0.49 * float(p_aug[i])) / 1.49
            assert o.p_fused == pytest.approx(expected, abs=1e-9)

    def test_unknown_mode_requirements(self):
        model = tiny_model()
        images = tiny_batch(2)
        with pytest.raises(MissingArtifactError):
            score_batch(model, images, unknown_mode=True)
        with pytest.raises(ConfigError):
            score_batch(
                model, images, unknown_mode=True,
                calibration=CameraCalibration(tau=2.0, n_cameras=5),
            )
        no_cam = tiny_model(with_camera_path=False)
        with pytest.raises(ConfigError):
            score_batch(
                no_cam, images, unknown_mode=True,
                calibration=CameraCalibration(tau=2.0, n_cameras=3),
            )

    def test_single_branch_models_pass_through(self):
        inv_only = tiny_model(with_augment_branch=False)
        aug_only = tiny_model(
            with_invariant_branch=False, with_camera_path=False
        )
        images = tiny_batch(2)
        for o in score_batch(inv_only, images):
            assert o.p_aug is None
            assert o.p_fused == o.p_spf
        for o in score_batch(aug_only, images):
            assert o.p_spf is None and o.p_mix is None
            assert o.camera_pred == 0
            assert o.p_fused == o.p_aug

    def test_restores_training_mode(self):
        model = tiny_model().train()
        score_batch(model, tiny_batch(2))
        assert model.training is True

    def test_predict_matches_batch(self):
        model = tiny_model()
        images = tiny_batch(2)
        single = predict(images[0], model)
        batch = score_batch(model, images)[0]
        # float32 conv kernels tile differently per batch size
        assert single.p_fused == pytest.approx(batch.p_fused, abs=1e-6)
        with pytest.raises(ValueError):
            predict(images, model)


class TestCollectCameraProbs:
    def test_matches_direct_forward(self):
        model = tiny_model()
        images = tiny_batch(6)
        probs = collect_camera_probs(model, (img for img in images), batch_size=4)
        with torch.no_grad():
            out = model.forward_invariant(images)
            expected = image_camera_probs(out.o_cam).double().numpy()
        assert probs.shape == (6, 3)
        assert np.allclose(probs, expected, atol=1e-6)
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-9)

    def test_empty_stream_raises(self):
        with pytest.raises(CalibrationError):
            collect_camera_probs(tiny_model(), iter(()))

    def test_needs_camera_path(self):
        with pytest.raises(ConfigError):
            collect_camera_probs(tiny_model(with_camera_path=False), iter(()))


class TestScoreManifest:
    def make_corpus(self, tmp_path, n=5):
        rng = np.random.default_rng(21)
        records = []
        for i in range(n):
            rel = f"cam{i % 2}/img{i:03d}.png"
            img = rng.uniform(0.1, 0.9, (32, 32, 3)).astype(np.float32)
            write_image(img, tmp_path / rel)
            records.append(
                SampleRecord(
                    relative_path=rel,
                    camera_id=i % 2,
                    label=i % 2,
                    pai_type="none" if i % 2 else "print",
                    split="test",
                )
            )
        return records

    def test_rows_sorted_and_consistent(self, tmp_path):
        records = self.make_corpus(tmp_path)
        model = tiny_model()
        store = ImageStore(tmp_path)
        shuffled = list(reversed(records))
        rows = score_manifest(model, store, shuffled, batch_size=2)
        assert [r.sample_id for r in rows] == sorted(r.relative_path for r in records)
        by_rel = {r.relative_path: r for r in records}
        for row in rows:
            rec = by_rel[row.sample_id]
            assert row.label == rec.label
            assert row.pai_type == rec.pai_type
            single = predict(image_to_tensor(store.load(row.sample_id)), model)
            assert row.p_fused == pytest.approx(single.p_fused, abs=1e-6)
            assert row.p_spf == pytest.approx(single.p_spf, abs=1e-6)
            assert 1 <= row.camera_pred <= 3

    def test_no_camera_path_uses_mixed_head(self, tmp_path):
        records = self.make_corpus(tmp_path, n=3)
        model = tiny_model(with_camera_path=False)
        rows = score_manifest(model, ImageStore(tmp_path), records)
        for row in rows:
            assert math.isfinite(row.p_spf)
            single = predict(
                image_to_tensor(ImageStore(tmp_path).load(row.sample_id)), model
            )
            assert row.p_spf == pytest.approx(single.p_mix, abs=1e-6)
            assert row.camera_pred == 0

    def test_empty_records_raise(self, tmp_path):
        with pytest.raises(DataError):
            score_manifest(tiny_model(), ImageStore(tmp_path), [])


class TestImageToTensor:
    def test_layout_and_dtype(self):
        img = np.random.default_rng(1).uniform(0, 1, (8, 6, 3)).astype(np.float32)
        t = image_to_tensor(img)
        assert t.shape == (3, 8, 6)
        assert t.dtype == torch.float32
        assert t[1, 4, 2] == pytest.approx(img[4, 2, 1])

    def test_rejects_bad_shape(self):
        with pytest.raises(ValueError):
            image_to_tensor(np.zeros((8, 6)))
