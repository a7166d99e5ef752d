"""Synthetic data generator, container round trips, batching."""

import math

import numpy as np
import pytest

from promptlab.datasets import (
    BASE_NOISE_STD,
    SIGNAL_AMP,
    LabeledSet,
    SynthSpec,
    batch_iter,
    class_signature,
    load_data,
    load_set,
    save_set,
    synth_generate,
)
from promptlab.model import CheckpointError, write_named_arrays


def test_same_seed_bitwise_identical():
    a = synth_generate(4, 3, difficulty=1.0, seed=11, image_size=16)
    b = synth_generate(4, 3, difficulty=1.0, seed=11, image_size=16)
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_different_seed_differs():
    a = synth_generate(4, 3, difficulty=1.0, seed=11, image_size=16)
    b = synth_generate(4, 3, difficulty=1.0, seed=12, image_size=16)
    assert not np.array_equal(a.images, b.images)


def test_shapes_dtypes_and_balance():
    ds = synth_generate(5, 7, difficulty=0.5, seed=0, image_size=16)
    assert ds.images.shape == (35, 16, 16, 3)
    assert ds.images.dtype == np.float32
    assert ds.labels.dtype == np.int64
    assert len(ds) == 35
    counts = np.bincount(ds.labels, minlength=5)
    assert counts.tolist() == [7] * 5


def test_pixels_stay_in_unit_interval():
    # high difficulty drives pixels into the clip; range must still hold
    ds = synth_generate(3, 5, difficulty=3.0, seed=2, image_size=16)
    assert float(ds.images.min()) >= 0.0
    assert float(ds.images.max()) <= 1.0


def test_difficulty_zero_matches_clean_template():
    # at difficulty 0 each image is its class grating plus only base noise
    size = 16
    ds = synth_generate(4, 6, difficulty=0.0, seed=3, image_size=size)
    coords = (np.arange(size, dtype=np.float32) + 0.5) / size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    for label in range(4):
        theta, freq = class_signature(label, 4)
        wave = np.sin(2.0 * math.pi * freq * (xx * math.cos(theta) + yy * math.sin(theta)))
        template = np.clip(0.5 + SIGNAL_AMP * wave, 0.0, 1.0)[:, :, None]
        rows = ds.images[ds.labels == label]
        dev = np.abs(rows - template)
        assert dev.mean() < 3.0 * BASE_NOISE_STD
        assert dev.max() < 8.0 * BASE_NOISE_STD


def test_difficulty_spreads_samples_within_class():
    base = synth_generate(2, 8, difficulty=0.0, seed=4, image_size=16)
    hard = synth_generate(2, 8, difficulty=2.0, seed=4, image_size=16)

    def within_class_spread(ds):
        rows = ds.images[ds.labels == 0]
        return float(np.var(rows, axis=0).mean())

    assert within_class_spread(hard) > 4.0 * within_class_spread(base)


def test_generate_argument_validation():
    with pytest.raises(ValueError):
        synth_generate(1, 4)
    with pytest.raises(ValueError):
        synth_generate(3, 0)
    with pytest.raises(ValueError):
        synth_generate(3, 4, difficulty=-0.1)


def test_labeled_set_validation():
    img = np.zeros((2, 4, 4, 3), dtype=np.float32)
    with pytest.raises(ValueError):
        LabeledSet(images=np.zeros((4, 4, 3)), labels=np.zeros(2), class_count=2)
    with pytest.raises(ValueError):
        LabeledSet(images=img, labels=np.zeros(3), class_count=2)
    with pytest.raises(ValueError):
        LabeledSet(images=img, labels=np.array([0, 2]), class_count=2)
    with pytest.raises(ValueError):
        LabeledSet(images=img + 1.5, labels=np.array([0, 1]), class_count=2)


def test_save_load_round_trip(tmp_path):
    ds = synth_generate(3, 4, difficulty=1.0, seed=5, image_size=16)
    path = str(tmp_path / "set.bin")
    save_set(ds, path)
    back = load_set(path)
    np.testing.assert_array_equal(back.images, ds.images)
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert back.class_count == 3


def test_load_rejects_non_dataset_container(tmp_path):
    path = str(tmp_path / "other.bin")
    write_named_arrays(path, {"w": np.ones((2, 2), dtype=np.float32)}, {"kind": "other"})
    with pytest.raises(CheckpointError, match="not a dataset"):
        load_set(path)


def test_load_rejects_bad_magic(tmp_path):
    path = str(tmp_path / "junk.bin")
    with open(path, "wb") as fh:
        fh.write(b"JUNKJUNKJUNK")
    with pytest.raises(CheckpointError):
        load_set(path)


def test_load_rejects_truncation(tmp_path):
    ds = synth_generate(2, 2, difficulty=0.0, seed=6, image_size=8)
    path = str(tmp_path / "set.bin")
    save_set(ds, path)
    blob = open(path, "rb").read()
    cut = str(tmp_path / "cut.bin")
    with open(cut, "wb") as fh:
        fh.write(blob[: len(blob) // 2])
    with pytest.raises(CheckpointError, match="byte"):
        load_set(cut)


def test_batch_iter_in_order_without_shuffle():
    ds = synth_generate(2, 5, seed=7, image_size=8)  # 10 rows
    batches = list(batch_iter(ds, 4, shuffle=False))
    assert [len(b[1]) for b in batches] == [4, 4, 2]  # final partial batch kept
    np.testing.assert_array_equal(np.concatenate([b[1] for b in batches]), ds.labels)
    np.testing.assert_array_equal(batches[0][0], ds.images[:4])


def test_batch_iter_shuffle_is_seeded_permutation():
    ds = synth_generate(2, 6, seed=8, image_size=8)
    run1 = np.concatenate([b[1] for b in batch_iter(ds, 5, seed=3, shuffle=True)])
    run2 = np.concatenate([b[1] for b in batch_iter(ds, 5, seed=3, shuffle=True)])
    run3 = np.concatenate([b[1] for b in batch_iter(ds, 5, seed=4, shuffle=True)])
    np.testing.assert_array_equal(run1, run2)
    assert not np.array_equal(run1, run3)
    # every row appears exactly once
    assert sorted(run1.tolist()) == sorted(ds.labels.tolist())


def test_batch_iter_rejects_bad_batch_size():
    ds = synth_generate(2, 2, seed=0, image_size=8)
    with pytest.raises(ValueError):
        list(batch_iter(ds, 0))


def test_spec_parse_and_format_round_trip():
    spec = SynthSpec.parse("synth:10x20@2.0#42")
    assert spec.classes == 10
    assert spec.samples_per_class == 20
    assert spec.difficulty == 2.0
    assert spec.seed == 42
    assert SynthSpec.parse(str(spec)) == spec


@pytest.mark.parametrize(
    "bad", ["synth:10x20", "synth:x2@1#0", "10x20@1#0", "synth:10x20@1.0#-3", "synth:a"]
)
def test_spec_parse_rejects_malformed(bad):
    with pytest.raises(ValueError):
        SynthSpec.parse(bad)


def test_load_data_spec_equals_direct_generation():
    via_spec = load_data("synth:3x4@1.5#9", image_size=16)
    direct = synth_generate(3, 4, difficulty=1.5, seed=9, image_size=16)
    np.testing.assert_array_equal(via_spec.images, direct.images)


def test_load_data_path_and_missing(tmp_path):
    ds = synth_generate(2, 2, seed=1, image_size=8)
    path = str(tmp_path / "d.bin")
    save_set(ds, path)
    back = load_data(path)
    np.testing.assert_array_equal(back.images, ds.images)
    with pytest.raises(FileNotFoundError):
        load_data(str(tmp_path / "missing.bin"))
