import hashlib
from pathlib import Path

import numpy as np
import pytest

from hiermil import data
from hiermil.errors import (ChecksumMismatchError, ConfigurationError,
                            InvalidInputError, NotFoundError,
                            PayloadMismatchError, PayloadTruncatedError,
                            SamplingError, VolumeHeaderError)


# --- binarize_score -------------------------------------------------------------

@pytest.mark.parametrize("score,label", [(1, 0), (2, 0), (3, 1), (4, 1), (5, 1)])
def test_binarize_score(score, label):
    assert data.binarize_score(score) == label


@pytest.mark.parametrize("bad", [0, 6, -1, 2.5])
def test_binarize_score_rejects(bad):
    with pytest.raises(InvalidInputError):
        data.binarize_score(bad)


# --- generation --------------------------------------------------------------------

def test_generation_is_byte_deterministic(tmp_path):
    cfg = data.SynthConfig(n_volumes=6, seed=99)
    data.generate_synthetic_dataset(cfg, tmp_path / "a")
    data.generate_synthetic_dataset(cfg, tmp_path / "b")
    for name in sorted(p.name for p in (tmp_path / "a").iterdir()):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_generation_exact_balance(tmp_path):
    cfg = data.SynthConfig(n_volumes=12, class_balance=0.5, seed=1)
    man = data.generate_synthetic_dataset(cfg, tmp_path)
    labels = [e.label for e in man.entries]
    assert sum(labels) == 6 and len(labels) == 12


def test_defect_rate_zero_all_diagnostic(tmp_path):
    cfg = data.SynthConfig(n_volumes=6, defect_rate=0.0, class_balance=0.5, seed=2)
    man = data.generate_synthetic_dataset(cfg, tmp_path)
    assert all(e.label == 1 for e in man.entries)


def test_label_consistency_and_scores(small_dataset):
    manifest, _cfg = small_dataset
    for e in manifest.entries:
        vol = data.load_volume(manifest.volume_path(e.id))
        assert data.binarize_score(vol.score) == vol.label == e.label
        assert vol.mask.any()
        if vol.label == 0:
            assert vol.score in (1, 2) and vol.artifact_record


def test_unsatisfiable_configs():
    with pytest.raises(ConfigurationError):
        data.SynthConfig(n_volumes=2).validate()
    with pytest.raises(ConfigurationError):
        data.SynthConfig(class_balance=1.5).validate()
    with pytest.raises(ConfigurationError):
        data.SynthConfig(dims=(64, 16, 24)).validate()
    with pytest.raises(ConfigurationError):
        data.SynthConfig(artifact_kinds=("sparkles",)).validate()


def test_parallel_generation_matches_serial(tmp_path):
    cfg = data.SynthConfig(n_volumes=6, seed=31)
    data.generate_synthetic_dataset(cfg, tmp_path / "serial", workers=1)
    data.generate_synthetic_dataset(cfg, tmp_path / "parallel", workers=3)
    for name in sorted(p.name for p in (tmp_path / "serial").iterdir()):
        assert (tmp_path / "serial" / name).read_bytes() == \
            (tmp_path / "parallel" / name).read_bytes()


# --- splitting ------------------------------------------------------------------------

def _fake_manifest(n, pos_fraction=0.5):
    entries = [data.ManifestEntry(id=f"v{i:03d}", path=f"v{i:03d}.volhdr",
                                  score=4 if i < n * pos_fraction else 2,
                                  label=1 if i < n * pos_fraction else 0)
               for i in range(n)]
    return data.Manifest(entries=entries, seed=0)


def test_split_sizes_100():
    man = data.split_dataset(_fake_manifest(100), ratios=(0.64, 0.16, 0.20), seed=4)
    counts = {s: len(man.ids(s)) for s in ("train", "val", "test")}
    assert counts == {"train": 64, "val": 16, "test": 20}


def test_split_stratification_within_one():
    man = data.split_dataset(_fake_manifest(100, 0.3), seed=5)
    for split, total in (("train", 64), ("val", 16), ("test", 20)):
        pos = sum(e.label for e in man.entries if e.split == split)
        assert abs(pos - 0.3 * total) <= 1


def test_split_deterministic_and_exhaustive():
    a = data.split_dataset(_fake_manifest(40), seed=6)
    b = data.split_dataset(_fake_manifest(40), seed=6)
    assert [e.split for e in a.entries] == [e.split for e in b.entries]
    assert all(e.split in ("train", "val", "test") for e in a.entries)
    c = data.split_dataset(_fake_manifest(40), seed=7)
    assert [e.split for e in a.entries] != [e.split for e in c.entries]


def test_split_rejects_bad_ratios_and_tiny_class():
    with pytest.raises(ConfigurationError):
        data.split_dataset(_fake_manifest(40), ratios=(0.5, 0.2, 0.2), seed=0)
    with pytest.raises(ConfigurationError):
        data.split_dataset(_fake_manifest(8, pos_fraction=0.25 / 2), seed=0)


# --- normalisation -----------------------------------------------------------------------

def _toy_volume(seed=0, dims=(40, 40, 12)):
    gen = np.random.default_rng(seed)
    vox = gen.normal(3.0, 2.0, dims).astype(np.float32)
    mask = np.zeros(dims, dtype=bool)
    mask[8:32, 8:32, 2:10] = True
    return data.Volume(voxels=vox, mask=mask, score=4, label=1, id=f"toy{seed}")


def test_normalize_masked_stats():
    v = data.normalize_volume(_toy_volume())
    vals = v.voxels[v.mask]
    assert abs(vals.mean()) < 1e-5
    assert abs(vals.std() - 1.0) < 1e-5


def test_normalize_idempotent():
    v1 = data.normalize_volume(_toy_volume(1))
    v2 = data.normalize_volume(v1)
    np.testing.assert_allclose(v1.voxels, v2.voxels, atol=1e-5)


def test_normalize_affine_invariant():
    v = _toy_volume(2)
    shifted = data.Volume(voxels=(2.5 * v.voxels + 7).astype(np.float32), mask=v.mask,
                          score=v.score, label=v.label, id=v.id)
    np.testing.assert_allclose(data.normalize_volume(v).voxels,
                               data.normalize_volume(shifted).voxels, atol=1e-5)


def test_normalize_constant_rejected():
    v = _toy_volume(3)
    v.voxels[:] = 1.0
    with pytest.raises(InvalidInputError):
        data.normalize_volume(v)


# --- sub-bag sampling ----------------------------------------------------------------------

def _two_slice_volume():
    dims = (40, 40, 6)
    vox = np.random.default_rng(0).standard_normal(dims).astype(np.float32)
    mask = np.zeros(dims, dtype=bool)
    mask[5:35, 5:35, 2] = True
    mask[5:35, 5:35, 4] = True
    return data.Volume(voxels=vox, mask=mask, score=4, label=1, id="twoslice")


def test_sampling_single_eligible_slice_deterministic():
    v = _two_slice_volume()
    v.mask[:, :, 4] = False
    for seed in range(5):
        sb = data.sample_subbags(v, M=1, K=2, r=8, c=8,
                                 rng=np.random.default_rng(seed))
        assert sb.slice_indices.tolist() == [2]


def test_sampling_shapes_and_origins(small_dataset):
    manifest, _ = small_dataset
    v = data.load_volume(manifest.volume_path(manifest.entries[0].id))
    sb = data.sample_subbags(v, M=3, K=5, r=16, c=16, rng=np.random.default_rng(1))
    assert sb.patches.shape == (3, 5, 16, 16)
    assert sb.origins.shape == (3, 5, 2)
    assert len(set(sb.slice_indices.tolist())) == 3
    # patches lie inside the slice and match the stored origin
    for m in range(3):
        for k in range(5):
            i, j = sb.origins[m, k]
            np.testing.assert_array_equal(
                sb.patches[m, k], v.voxels[i:i + 16, j:j + 16, sb.slice_indices[m]])


def test_sampling_uniform_over_two_slices():
    # binomial bound: 10_000 draws, p = 0.5 -> 5000 +/- 300 (~6 sigma)
    v = _two_slice_volume()
    rng = np.random.default_rng(123)
    hits = 0
    table = data.eligible_slices(v, 8, 8)
    for _ in range(10_000):
        sb = data.sample_subbags(v, M=1, K=1, r=8, c=8, rng=rng, slice_table=table)
        hits += sb.slice_indices[0] == 2
    assert abs(hits - 5000) <= 300


def test_sampling_respects_mask_overlap(small_dataset):
    manifest, _ = small_dataset
    v = data.load_volume(manifest.volume_path(manifest.entries[3].id))
    sb = data.sample_subbags(v, M=4, K=8, r=16, c=16, rng=np.random.default_rng(2))
    for m in range(4):
        s = sb.slice_indices[m]
        for k in range(8):
            i, j = sb.origins[m, k]
            assert v.mask[i:i + 16, j:j + 16, s].sum() >= 0.25 * 256


def test_sampling_error_names_volume():
    v = _two_slice_volume()
    with pytest.raises(SamplingError) as err:
        data.sample_subbags(v, M=3, K=2, r=8, c=8, rng=np.random.default_rng(0))
    assert err.value.volume_id == "twoslice"
    assert "twoslice" in str(err.value)


# --- crop ------------------------------------------------------------------------------------

def test_crop_margin_zero_is_tight_bbox():
    v = _toy_volume(4)
    sub = data.crop_subvolume(v, margin=0)
    assert sub.shape == (24, 24, 8)


def test_crop_margin_expands_in_plane_only():
    v = _toy_volume(5, dims=(120, 120, 12))
    v.mask[:] = False
    v.mask[40:60, 45:65, 3:9] = True
    sub = data.crop_subvolume(v, margin=30)
    assert sub.shape == (20 + 60, 20 + 60, 6)


def test_crop_clips_at_borders():
    v = _toy_volume(6)
    sub = data.crop_subvolume(v, margin=30)        # mask near borders: clip, no padding
    assert sub.shape == (40, 40, 8)


# --- container I/O -----------------------------------------------------------------------------

def test_volume_round_trip_bit_exact(tmp_path):
    v = _toy_volume(7)
    v.artifact_record = [(3, "blur"), (5, "noise")]
    path = data.save_volume(v, tmp_path / "v")
    w = data.load_volume(path)
    np.testing.assert_array_equal(v.voxels, w.voxels)
    np.testing.assert_array_equal(v.mask, w.mask)
    assert (w.score, w.label, w.id) == (v.score, v.label, v.id)
    assert w.artifact_record == v.artifact_record
    assert w.provenance == v.provenance


def test_truncated_payload(tmp_path):
    path = data.save_volume(_toy_volume(8), tmp_path / "v")
    raw = path.with_suffix(".volraw")
    raw.write_bytes(raw.read_bytes()[:-1])
    with pytest.raises(PayloadTruncatedError):
        data.load_volume(path)


def test_header_payload_size_mismatch(tmp_path):
    path = data.save_volume(_toy_volume(9), tmp_path / "v")
    text = path.read_text().replace("dims: 40 40 12", "dims: 40 40 10")
    path.write_text(text)
    with pytest.raises(PayloadMismatchError):
        data.load_volume(path)


def test_checksum_mismatch(tmp_path):
    path = data.save_volume(_toy_volume(10), tmp_path / "v")
    raw = path.with_suffix(".volraw")
    blob = bytearray(raw.read_bytes())
    blob[100] ^= 0xFF
    raw.write_bytes(bytes(blob))
    with pytest.raises(ChecksumMismatchError):
        data.load_volume(path)


def test_corrupt_header(tmp_path):
    path = data.save_volume(_toy_volume(11), tmp_path / "v")
    path.write_text("not a header\nat all\n")
    with pytest.raises(VolumeHeaderError):
        data.load_volume(path)
    path.write_text("format_version: 1\ndims: 40 40 12\n")
    with pytest.raises(VolumeHeaderError):
        data.load_volume(path)


def test_missing_volume(tmp_path):
    with pytest.raises(NotFoundError):
        data.load_volume(tmp_path / "ghost.volhdr")


def test_manifest_round_trip(tmp_path, small_dataset):
    manifest, _ = small_dataset
    path = data.save_manifest(manifest, tmp_path / "manifest.txt")
    again = data.load_manifest(path)
    assert [e.id for e in again.entries] == [e.id for e in manifest.entries]
    assert [e.split for e in again.entries] == [e.split for e in manifest.entries]
    assert again.seed == manifest.seed
    assert again.ratios == pytest.approx(manifest.ratios)
    with pytest.raises(NotFoundError):
        again.entry("nope")


# --- separability oracle ------------------------------------------------------------------------

def test_hf_oracle_separates_small_dataset(small_dataset):
    manifest, _ = small_dataset
    scores, labels = [], []
    for e in manifest.entries:
        vol = data.load_volume(manifest.volume_path(e.id))
        scores.append(data.hf_anomaly_score(vol))
        labels.append(e.label)
    scores, labels = np.asarray(scores), np.asarray(labels)
    pos = scores[labels == 0]          # corrupted volumes score high
    neg = scores[labels == 1]
    auc = np.mean([(p > n) + 0.5 * (p == n) for p in pos for n in neg])
    assert auc >= 0.95
