import json
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from covtanet.data import (CLASSES, SynthConfig, VolumeSample, class_counts, extract_slices, lesion_fraction,
                           load_dataset, load_volume, make_folds, normalize, parse_mix, prepare_slices,
                           resample_indices, resample_slices, save_volume, synth_dataset, synth_generate,
                           synth_volume)
from covtanet.errors import ConfigError, CorruptDataError, MissingAnnotationError, ValidationError


def volume(s=4, h=6, w=5, masks=True, diagnosis=1, severity=0, seed=0):
    rng = np.random.default_rng(seed)
    m = (rng.random((s, h, w)) > 0.7).astype(np.uint8) if masks else None
    return VolumeSample(rng.random((s, h, w)).astype(np.float32), diagnosis, severity, m, id=f"v{seed}")


# -- container

def test_round_trip_bit_identical(tmp_path):
    v = volume(seed=3)
    v.spacing = (0.7, 0.7, 5.0)
    save_volume(v, tmp_path / "v")
    back = load_volume(tmp_path / "v")
    assert back.slices.tobytes() == v.slices.tobytes() and back.masks.tobytes() == v.masks.tobytes()
    assert (back.diagnosis, back.severity, back.id, back.spacing) == (1, 0, "v3", (0.7, 0.7, 5.0))
    meta = json.loads((tmp_path / "v" / "meta.json").read_text())
    assert set(meta["crc32"]) == {"slices.f32", "masks.u8"}
    assert meta["num_slices"] == 4 and meta["has_masks"] is True


def test_normal_volume_has_no_severity_key(tmp_path):
    save_volume(volume(diagnosis=0, severity=None, masks=False), tmp_path / "n")
    meta = json.loads((tmp_path / "n" / "meta.json").read_text())
    assert "severity" not in meta and meta["has_masks"] is False
    assert not (tmp_path / "n" / "masks.u8").exists()


def test_truncated_slices(tmp_path):
    save_volume(volume(), tmp_path / "v")
    path = tmp_path / "v" / "slices.f32"
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(CorruptDataError):
        load_volume(tmp_path / "v")


def test_checksum_mismatch(tmp_path):
    save_volume(volume(), tmp_path / "v")
    path = tmp_path / "v" / "masks.u8"
    data = bytearray(path.read_bytes())
    data[0] ^= 1
    path.write_bytes(bytes(data))
    with pytest.raises(CorruptDataError):
        load_volume(tmp_path / "v")


def test_severity_without_diagnosis(tmp_path):
    save_volume(volume(diagnosis=0, severity=None), tmp_path / "v")
    meta_path = tmp_path / "v" / "meta.json"
    meta = json.loads(meta_path.read_text())
    meta["severity"] = 1
    meta_path.write_text(json.dumps(meta))
    with pytest.raises(ValidationError):
        load_volume(tmp_path / "v")


def test_missing_masks_when_required(tmp_path):
    save_volume(volume(masks=False), tmp_path / "v")
    assert load_volume(tmp_path / "v").masks is None
    with pytest.raises(MissingAnnotationError):
        load_volume(tmp_path / "v", require_masks=True)


def test_volume_invariants():
    with pytest.raises(ValidationError):
        VolumeSample(np.zeros((2, 3, 3)), 1, None)
    with pytest.raises(ValidationError):
        VolumeSample(np.zeros((2, 3, 3)), 1, 0, masks=np.zeros((2, 3, 4)))
    with pytest.raises(ValidationError):
        VolumeSample(np.zeros((3, 3)), 0)


# -- slices

def test_extract_slices():
    v = volume(s=8)
    pairs = extract_slices(v)
    assert len(pairs) == 8
    for i, (img, m) in enumerate(pairs):
        assert np.array_equal(img, v.slices[i]) and np.array_equal(m, v.masks[i])
    assert all(m is None for _, m in extract_slices(volume(s=3, masks=False)))


def test_resample_identity_and_idempotent():
    v = volume(s=8)
    r = resample_slices(v, 8)
    assert np.array_equal(r.slices, v.slices) and np.array_equal(r.masks, v.masks)
    r2 = resample_slices(r, 8)
    assert np.array_equal(r2.slices, r.slices)


def test_resample_pads_with_zeros():
    v = volume(s=4)
    r = resample_slices(v, 8)
    assert r.slices.shape[0] == 8
    assert np.array_equal(r.slices[:4], v.slices) and not r.slices[4:].any() and not r.masks[4:].any()


def test_resample_forty_to_eight():
    assert resample_indices(40, 8).tolist() == [0, 5, 11, 16, 22, 27, 33, 39]
    with pytest.raises(ConfigError):
        resample_indices(8, 0)


def test_normalize_rules():
    assert not normalize(np.full((4, 4), 100.0)).any()
    x = np.array([-1250.0, -500.0, 250.0, 1000.0])
    out = normalize(x)
    assert out[2] == 1.0 and out[3] == 1.0 and out[0] == 0.0
    assert out[1] == pytest.approx(750 / 1500, abs=1e-7)
    with pytest.raises(ConfigError):
        normalize(x, (10, 10))


def test_prepare_passes_unit_range_through():
    x = np.random.default_rng(0).random((2, 4, 4)).astype(np.float32)
    assert prepare_slices(x) is x or np.array_equal(prepare_slices(x), x)
    hu = np.stack([np.linspace(-1500, 500, 16).reshape(4, 4)] * 2)
    out = prepare_slices(hu)
    assert out.min() == 0.0 and out.max() == 1.0


# -- synthetic generator

def test_all_normal_mix():
    vols = synth_dataset(0, 6, "1:0:0", SynthConfig(slices=2, height=32, width=32))
    assert all(v.diagnosis == 0 and v.severity is None and not v.masks.any() for v in vols)


def test_synth_deterministic(tmp_path):
    synth_generate(tmp_path / "a", 7, 6, (3, 32, 32))
    synth_generate(tmp_path / "b", 7, 6, (3, 32, 32))
    for name in sorted(os.listdir(tmp_path / "a")):
        a, b = tmp_path / "a" / name, tmp_path / "b" / name
        files = os.listdir(a) if a.is_dir() else [""]
        for f in files:
            assert (a / f).read_bytes() == (b / f).read_bytes()


def test_severe_ratio_by_pixel_count():
    cfg = SynthConfig(slices=4, height=32, width=32)
    for seed in range(5):
        v, lung = synth_volume("severe", np.random.default_rng(seed), cfg)
        lesion = int(v.masks.sum())
        lung_px = int(lung.sum()) * v.num_slices
        assert lesion / lung_px > 0.25
        v, lung = synth_volume("mild", np.random.default_rng(seed), cfg)
        assert 0 < v.masks.sum() / (lung.sum() * v.num_slices) < 0.25


def test_labels_consistent_with_masks():
    vols = synth_dataset(3, 12, "1:1:1", SynthConfig(slices=3, height=32, width=32))
    assert [sum(v.label_class == c for v in vols) for c in CLASSES] == [4, 4, 4]
    for v in vols:
        assert (v.diagnosis == 1) == bool(v.masks.any())
        assert v.slices.min() >= 0 and v.slices.max() <= 1


def test_mix_errors():
    with pytest.raises(ConfigError):
        parse_mix("1:1")
    with pytest.raises(ConfigError):
        parse_mix("0:0:0")
    with pytest.raises(ConfigError):
        parse_mix("a:b:c")
    assert class_counts(10, "1:1:1") == {"normal": 4, "mild": 3, "severe": 3}


def test_dataset_round_trip(tmp_path):
    vols = synth_generate(tmp_path, 1, 15, (2, 32, 32))
    loaded, folds = load_dataset(tmp_path)
    assert [v.id for v in loaded] == [v.id for v in vols]
    assert sorted(i for f in folds for i in f) == sorted(v.id for v in vols)


# -- folds

def test_folds_balanced():
    ids = [f"s{i}" for i in range(50)]
    labels = [i % 2 for i in range(50)]
    folds = make_folds(ids, labels, 0)
    assert [len(f) for f in folds] == [10] * 5
    assert sorted(sum(folds, [])) == sorted(ids)


def test_folds_insufficient():
    with pytest.raises(ConfigError):
        make_folds(list("abcdefg"), [0] * 4 + [1] * 3, 0)


@settings(max_examples=30, deadline=None)
@given(sizes=st.lists(st.integers(5, 30), min_size=1, max_size=4), seed=st.integers(0, 1000))
def test_folds_stratified(sizes, seed):
    labels = [k for k, n in enumerate(sizes) for _ in range(n)]
    ids = list(range(len(labels)))
    folds = make_folds(ids, labels, seed)
    assert make_folds(ids, labels, seed) == folds
    flat = sum(folds, [])
    assert sorted(flat) == ids
    for f in folds:
        for k, size in enumerate(sizes):
            have = sum(labels[i] == k for i in f)
            assert abs(have - size / 5) < 1
            assert have >= 1
    assert max(map(len, folds)) - min(map(len, folds)) <= 1
