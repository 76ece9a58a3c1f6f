"""Tests for crop arithmetic, NCC, homographies, and the synthetic dataset."""

import filecmp
import json

import numpy as np
import pytest

from ispkit import datapipe as dp
from ispkit.errors import ShapeError
from ispkit.flowwarp import warp
from ispkit.images import RgbImage, downsample_bilinear_2x, upsample_nearest_2x
from ispkit.rawproc import gamma_process

from oracles import ncc_oracle


# ---------------------------------------------------------------------------
# sliding crops


def test_sliding_crops_exact_cover():
    origins = dp.sliding_crops((8, 8), crop=4, stride=4)
    assert origins == [(0, 0), (0, 4), (4, 0), (4, 4)]


def test_sliding_crops_overlap_and_remainder():
    # 10 wide, crop 4, stride 3: cols 0, 3, 6 (origin 7 would overflow)
    origins = dp.sliding_crops((4, 10), crop=4, stride=3)
    assert origins == [(0, 0), (0, 3), (0, 6)]


def test_sliding_crops_too_large_is_empty():
    assert dp.sliding_crops((3, 3), crop=4, stride=1) == []


def test_sliding_crops_accepts_image():
    img = RgbImage(np.zeros((3, 6, 6), dtype=np.float32))
    assert len(dp.sliding_crops(img, crop=2, stride=2)) == 9


def test_sliding_crops_rejects_bad_args():
    with pytest.raises(ValueError):
        dp.sliding_crops((8, 8), crop=0, stride=1)
    with pytest.raises(ValueError):
        dp.sliding_crops((8, 8), crop=4, stride=-2)


# ---------------------------------------------------------------------------
# ncc


def test_ncc_self_is_one():
    rng = np.random.default_rng(0)
    a = rng.uniform(0, 1, (3, 16, 16))
    assert dp.ncc(a, a) == pytest.approx(1.0)


def test_ncc_negated_is_minus_one():
    rng = np.random.default_rng(1)
    a = rng.uniform(0, 1, (3, 16, 16))
    assert dp.ncc(a, 1.0 - a) == pytest.approx(-1.0)


def test_ncc_constant_input_is_zero():
    a = np.full((3, 8, 8), 0.5)
    b = np.random.default_rng(2).uniform(0, 1, (3, 8, 8))
    assert dp.ncc(a, b) == 0.0
    assert dp.ncc(b, a) == 0.0


def test_ncc_shift_invariance():
    # adding a constant or scaling by a positive factor never changes ncc
    rng = np.random.default_rng(3)
    a = rng.uniform(0, 1, (3, 12, 12))
    b = rng.uniform(0, 1, (3, 12, 12))
    base = dp.ncc(a, b)
    assert dp.ncc(a + 0.3, b) == pytest.approx(base, abs=1e-12)
    assert dp.ncc(a, 2.5 * b) == pytest.approx(base, abs=1e-12)


def test_ncc_matches_oracle():
    rng = np.random.default_rng(4)
    for _ in range(5):
        a = rng.uniform(0, 1, (3, 9, 7))
        b = rng.uniform(0, 1, (3, 9, 7))
        assert dp.ncc(a, b) == pytest.approx(ncc_oracle(a, b), abs=1e-12)


def test_ncc_shape_mismatch():
    with pytest.raises(ShapeError):
        dp.ncc(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)))


# ---------------------------------------------------------------------------
# homography


def _random_homography(rng, scale=0.05):
    h = np.eye(3) + rng.uniform(-scale, scale, (3, 3))
    return h / h[2, 2]


def _map_points(h, pts):
    ph = np.concatenate([pts, np.ones((pts.shape[0], 1))], axis=1) @ h.T
    return ph[:, :2] / ph[:, 2:3]


def test_dlt_recovers_synthetic_homography():
    rng = np.random.default_rng(10)
    corners = np.array([[0.0, 0.0], [100.0, 0.0], [0.0, 100.0], [100.0, 100.0]])
    for _ in range(10):
        h_true = _random_homography(rng)
        src = rng.uniform(0, 100, (12, 2))
        dst = _map_points(h_true, src)
        h_est = dp.homography_dlt(np.concatenate([src, dst], axis=1))
        err = np.abs(_map_points(h_est, corners) - _map_points(h_true, corners))
        assert err.max() < 1e-6


def test_dlt_minimal_four_points():
    rng = np.random.default_rng(11)
    h_true = _random_homography(rng)
    src = np.array([[0.0, 0.0], [50.0, 3.0], [4.0, 60.0], [55.0, 52.0]])
    dst = _map_points(h_true, src)
    h_est = dp.homography_dlt(np.concatenate([src, dst], axis=1))
    assert np.abs(_map_points(h_est, src) - dst).max() < 1e-8


def test_dlt_rejects_too_few_points():
    with pytest.raises(ValueError):
        dp.homography_dlt(np.zeros((3, 4)))


def test_dlt_rejects_degenerate_collinear():
    # all points on one line: infinitely many homographies fit
    src = np.stack([np.arange(6.0), 2.0 * np.arange(6.0)], axis=1)
    pairs = np.concatenate([src, src + 1.0], axis=1)
    with pytest.raises(ValueError):
        dp.homography_dlt(pairs)


def test_dlt_rejects_bad_shape():
    with pytest.raises(ShapeError):
        dp.homography_dlt(np.zeros((5, 3)))


def test_warp_homography_identity():
    rng = np.random.default_rng(12)
    img = rng.uniform(0, 1, (3, 16, 16))
    assert np.allclose(dp.warp_homography(img, np.eye(3)), img)


def test_warp_homography_matches_translation_warp():
    # a pure-translation homography must agree with the flow-based warp
    rng = np.random.default_rng(13)
    img = rng.uniform(0, 1, (3, 20, 20)).astype(np.float32)
    h = np.array([[1.0, 0.0, -2.0], [0.0, 1.0, 3.0], [0.0, 0.0, 1.0]])
    # content of warp_homography at p is img(H^-1 p) = img(p + (2, -3))
    flow = dp.homography_flow(h, 20, 20)
    via_flow = warp(img, flow)
    via_h = dp.warp_homography(img, h)
    assert np.allclose(via_h, via_flow, atol=1e-6)


def test_warp_homography_rejects_singular():
    h = np.eye(3)
    h[2, 2] = 0.0
    h[2, 0] = 0.0
    h = np.zeros((3, 3))
    with pytest.raises(ValueError):
        dp.warp_homography(np.zeros((3, 4, 4)), h)


def test_warp_homography_round_trip_interior():
    rng = np.random.default_rng(14)
    # smooth image so interpolation error stays small
    img = dp.render_scene(rng, 64, 64, blobs=3, gradients=1, edges=0,
                          blob_radius_range=(0.3, 0.5))
    h = _random_homography(rng, scale=0.01)
    there = dp.warp_homography(img, h)
    back = dp.warp_homography(there, np.linalg.inv(h))
    interior = (slice(None), slice(8, -8), slice(8, -8))
    assert np.abs(back[interior] - img[interior]).max() < 2e-2


# ---------------------------------------------------------------------------
# synthetic dataset


def test_synth_identity_mode_matches_target(tmp_path):
    man = dp.synth_dataset(4, 11, tmp_path, dp.SynthConfig.identity_oracle())
    for rec in man.samples:
        s = dp.load_sample(man, rec)
        vis = gamma_process(s.raw)
        down = downsample_bilinear_2x(s.target)
        assert np.abs(vis.data - down.data).max() < 1e-2


def test_synth_deterministic_bytes(tmp_path):
    cfg = dp.SynthConfig(distractors=1)
    dp.synth_dataset(6, 7, tmp_path / "a", cfg)
    dp.synth_dataset(6, 7, tmp_path / "b", cfg)
    files = sorted(p.relative_to(tmp_path / "a")
                   for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files, "generator produced no files"
    for rel in files:
        assert filecmp.cmp(tmp_path / "a" / rel, tmp_path / "b" / rel,
                           shallow=False), f"{rel} differs between runs"


def test_synth_seed_changes_content(tmp_path):
    dp.synth_dataset(2, 1, tmp_path / "a", dp.SynthConfig())
    dp.synth_dataset(2, 2, tmp_path / "b", dp.SynthConfig())
    a = (tmp_path / "a" / "sample0000" / "raw.raw4").read_bytes()
    b = (tmp_path / "b" / "sample0000" / "raw.raw4").read_bytes()
    assert a != b


def test_synth_translation_flow_aligns_target(tmp_path):
    # warping the stored target by the backward flow restores alignment
    cfg = dp.SynthConfig(read_noise=0.0, shot_noise=0.0, identity_color=True,
                         edges=0, misalign="translation")
    man = dp.synth_dataset(3, 5, tmp_path, cfg)
    for rec in man.samples:
        s = dp.load_sample(man, rec)
        aligned = warp(s.target, s.flow_bwd)
        vis = upsample_nearest_2x(gamma_process(s.raw))
        shift = int(np.ceil(cfg.max_shift)) + 1
        interior = (slice(None), slice(2 * shift, -2 * shift),
                    slice(2 * shift, -2 * shift))
        before = np.abs(s.target.data[interior] - vis.data[interior]).mean()
        after = np.abs(aligned.data[interior] - vis.data[interior]).mean()
        assert after < before
        # nearest-neighbor upsampling leaves a half-pixel blur; alignment
        # error proper should be well below the misalignment it removes
        assert after < 0.05


def test_synth_homography_mode_emits_consistent_flows(tmp_path):
    cfg = dp.SynthConfig(misalign="homography", read_noise=0.0, shot_noise=0.0)
    man = dp.synth_dataset(2, 9, tmp_path, cfg)
    for rec in man.samples:
        s = dp.load_sample(man, rec)
        # forward and backward must be near-inverse: mask mostly valid
        assert s.mask is not None
        assert s.mask.data.mean() > 0.95


def test_synth_distractors_masked_out(tmp_path):
    cfg = dp.SynthConfig(distractors=2, distractor_size=16,
                         misalign="translation")
    man = dp.synth_dataset(3, 21, tmp_path, cfg)
    for rec in man.samples:
        s = dp.load_sample(man, rec)
        zeros = int((s.mask.data == 0).sum())
        # two 16x16 target-resolution patches cover 2*64 RAW pixels; overlap
        # between patches can only reduce the count
        assert 64 <= zeros <= 128
        assert s.mask.data.mean() > 0.8


def test_synth_ncc_recorded_and_high_for_true_pairs(tmp_path):
    man = dp.synth_dataset(6, 3, tmp_path, dp.SynthConfig())
    for rec in man.samples:
        assert rec.ncc >= 0.5
    kept = dp.filter_pairs(man)
    assert len(kept.samples) == 6
    assert kept.rejected_count == 0


def test_filter_pairs_drops_low_ncc(tmp_path):
    man = dp.synth_dataset(4, 3, tmp_path, dp.SynthConfig())
    man.samples[1].ncc = 0.2
    man.samples[3].ncc = -0.1
    kept = dp.filter_pairs(man)
    assert [s.id for s in kept.samples] == [man.samples[0].id, man.samples[2].id]
    assert kept.rejected_count == 2


def test_unrelated_pairs_rejected():
    # textured scenes: cross-pair correlation concentrates near zero
    kw = dict(blobs=24, gradients=0, edges=4, blob_radius_range=(0.03, 0.08))
    rejected = 0
    for k in range(100):
        a = dp.render_scene(np.random.default_rng((501, k)), 64, 64, **kw)
        b = dp.render_scene(np.random.default_rng((502, k)), 64, 64, **kw)
        if dp.ncc(a, b) < 0.5:
            rejected += 1
    assert rejected >= 99


# ---------------------------------------------------------------------------
# manifest


def test_manifest_round_trip(tmp_path):
    man = dp.synth_dataset(5, 13, tmp_path, dp.SynthConfig())
    loaded = dp.Manifest.load(tmp_path / "manifest.json")
    assert len(loaded.samples) == 5
    assert [s.id for s in loaded.samples] == [s.id for s in man.samples]
    assert loaded.samples[0].ncc == pytest.approx(man.samples[0].ncc)


def test_manifest_missing_file_rejected(tmp_path):
    dp.synth_dataset(2, 13, tmp_path, dp.SynthConfig())
    (tmp_path / "sample0001" / "raw.raw4").unlink()
    with pytest.raises(FileNotFoundError):
        dp.Manifest.load(tmp_path / "manifest.json")


def test_manifest_split_leak_rejected(tmp_path):
    dp.synth_dataset(4, 13, tmp_path, dp.SynthConfig(samples_per_capture=4))
    path = tmp_path / "manifest.json"
    doc = json.loads(path.read_text())
    doc["samples"][0]["split"] = "test"  # same capture as the other three
    path.write_text(json.dumps(doc))
    with pytest.raises(ValueError):
        dp.Manifest.load(path)


def test_manifest_unknown_key_rejected(tmp_path):
    dp.synth_dataset(1, 13, tmp_path, dp.SynthConfig())
    path = tmp_path / "manifest.json"
    doc = json.loads(path.read_text())
    doc["samples"][0]["surprise"] = 1
    path.write_text(json.dumps(doc))
    with pytest.raises(ValueError):
        dp.Manifest.load(path)


def test_manifest_splits_by_capture(tmp_path):
    cfg = dp.SynthConfig(samples_per_capture=1, split_fractions=(0.6, 0.2, 0.2))
    man = dp.synth_dataset(10, 17, tmp_path, cfg)
    assert len(man.split("train")) == 6
    assert len(man.split("val")) == 2
    assert len(man.split("test")) == 2
    captures = {}
    for s in man.samples:
        captures.setdefault(s.capture, set()).add(s.split)
    assert all(len(v) == 1 for v in captures.values())
