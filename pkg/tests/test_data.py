import hashlib
import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from essnet.data import (
    BODY,
    NUM_CLASSES,
    STYLE_A,
    STYLE_B,
    AnatomyConfig,
    DataError,
    DatasetConfig,
    LabeledSplit,
    ModalityStyle,
    ShapeMismatchError,
    batch_indices,
    build_dataset,
    load_dataset,
    load_split,
    render_modality,
    sample_anatomy,
    save_split,
    to_png_array,
    unpaired_batches,
)

SMALL = DatasetConfig(n_a_train=4, n_a_val=2, n_b_train=3, n_b_val=2, n_b_test=3, seed=5)


def test_sample_anatomy_deterministic():
    a, b = sample_anatomy(7), sample_anatomy(7)
    assert a == b
    assert a.labels.ids.tobytes() == b.labels.ids.tobytes()


def test_sample_anatomy_seed_sensitivity():
    assert not np.array_equal(sample_anatomy(7).labels.ids, sample_anatomy(8).labels.ids)


def test_every_class_present_over_100_seeds():
    for seed in range(100):
        hist = np.bincount(sample_anatomy(seed).labels.ids.ravel(), minlength=NUM_CLASSES)
        assert hist[0] > 0 and hist[BODY] > 0
        assert (hist > 0).all(), (seed, hist)
        assert hist.size == NUM_CLASSES


def test_organs_inside_body():
    for seed in range(30):
        layout = sample_anatomy(seed)
        body = layout.body
        for org in layout.organs.values():
            assert body.contains(org.boundary()).all()


def test_spleen_scale_in_range():
    cfg = AnatomyConfig(spleen_scale=(1.2, 1.5))
    for seed in range(20):
        assert 1.2 <= sample_anatomy(seed, cfg).spleen_scale <= 1.5


@pytest.mark.parametrize("size", [(62, 64), (64, 30), (28, 28)])
def test_sample_anatomy_rejects_bad_sizes(size):
    with pytest.raises(DataError):
        sample_anatomy(0, AnatomyConfig(*size))


def test_render_noise_free_is_piecewise_constant():
    layout = sample_anatomy(3)
    style = ModalityStyle("A", STYLE_A.class_means, noise_sigma=0.0, bias_amplitude=0.0, gamma=1.0)
    img = render_modality(layout, style, seed=0)
    expected = np.asarray(STYLE_A.class_means, dtype=np.float32)[layout.labels.ids]
    np.testing.assert_array_equal(img.pixels, expected)


def test_render_noise_mean_absolute_deviation():
    layout = sample_anatomy(3)
    clean = render_modality(layout, replace(STYLE_B, noise_sigma=0.0, bias_amplitude=0.0, gamma=1.0), 0)
    noisy_style = replace(STYLE_B, noise_sigma=0.1, bias_amplitude=0.0, gamma=1.0)
    mads = [np.abs(render_modality(layout, noisy_style, s).pixels - clean.pixels).mean() for s in range(50)]
    expected = 0.1 * math.sqrt(2 / math.pi)
    assert abs(np.mean(mads) - expected) < 0.2 * expected
    assert not np.array_equal(render_modality(layout, noisy_style, 0).pixels, clean.pixels)


def test_render_deterministic_and_bounded():
    layout = sample_anatomy(11)
    a = render_modality(layout, STYLE_B, 4)
    b = render_modality(layout, STYLE_B, 4)
    np.testing.assert_array_equal(a.pixels, b.pixels)
    assert a.pixels.min() >= -1 and a.pixels.max() <= 1
    assert np.isfinite(a.pixels).all()


def test_styles_have_different_orderings():
    assert np.argsort(STYLE_A.class_means).tolist() != np.argsort(STYLE_B.class_means).tolist()


def test_default_preset_counts():
    cfg = DatasetConfig()
    assert cfg.n_a_train == 60 and cfg.n_b_test == 19


def test_build_dataset_splits_and_guard(tmp_path):
    bundle = build_dataset(SMALL, tmp_path / "ds")
    assert bundle.counts() == SMALL.counts()
    assert bundle.B_train.labels.access_count == 0
    assert all(it.labels is None for it in bundle.B_train.items)
    seeds = [it.anatomy_seed for n in ("A_train", "A_val", "B_train", "B_val", "B_test")
             for it in getattr(bundle, n).items]
    assert len(seeds) == len(set(seeds))
    for split in (bundle.A_train, bundle.B_test):
        for it in split.items:
            assert it.labels.ids.max() < NUM_CLASSES
            assert -1 <= it.image.pixels.min() and it.image.pixels.max() <= 1
    assert {it.image.modality for it in bundle.A_train.items} == {"A"}
    assert {it.image.modality for it in bundle.B_train.items} == {"B"}


def test_guard_counts_reads():
    bundle = build_dataset(SMALL)
    bundle.B_train.labels.read(0)
    bundle.B_train.labels.read(1)
    assert bundle.B_train.labels.access_count == 2


@pytest.mark.parametrize("bad", ["n_a_train", "n_b_test"])
def test_build_dataset_rejects_empty_split(bad):
    with pytest.raises(DataError):
        build_dataset(replace(SMALL, **{bad: 0}))


def _tree_hash(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_rebuild_is_byte_identical(tmp_path):
    build_dataset(SMALL, tmp_path / "a")
    build_dataset(SMALL, tmp_path / "b")
    assert _tree_hash(tmp_path / "a") == _tree_hash(tmp_path / "b")


def test_dataset_round_trip(tmp_path):
    bundle = build_dataset(SMALL, tmp_path / "ds")
    loaded = load_dataset(tmp_path / "ds")
    assert loaded.counts() == bundle.counts()
    for name in ("A_train", "B_train", "B_test"):
        for a, b in zip(getattr(bundle, name).items, getattr(loaded, name).items):
            assert a.image.pixels.tobytes() == b.image.pixels.tobytes()
    assert loaded.B_train.labels.access_count == 0
    assert all(it.labels is None for it in loaded.B_train.items)


def test_unpaired_batches_epoch_length_and_cycling():
    bundle = build_dataset(replace(SMALL, n_a_train=3, n_b_train=2))
    triples = list(unpaired_batches(bundle.A_train, bundle.B_train, seed=1, batch_size=1))
    assert len(triples) == 3
    pairs = batch_indices(3, 2, seed=1)
    assert sorted(i for i, _ in pairs) == [0, 1, 2]
    b_idx = [j for _, j in pairs]
    assert set(b_idx[:2]) == {0, 1}
    for (x, m, y), (i, j) in zip(triples, pairs):
        assert x[0] is bundle.A_train.items[i].image
        assert m[0] is bundle.A_train.items[i].labels
        assert y[0] is bundle.B_train.items[j].image
    assert bundle.B_train.labels.access_count == 0


def test_unpaired_batches_deterministic():
    assert batch_indices(5, 4, seed=9, epoch=2) == batch_indices(5, 4, seed=9, epoch=2)
    assert batch_indices(5, 4, seed=9, epoch=2) != batch_indices(5, 4, seed=9, epoch=3)


def test_unpaired_pairing_varies():
    pairs = set()
    epoch = 0
    draws = 0
    while draws < 1000:
        batch = batch_indices(7, 5, seed=3, epoch=epoch)
        pairs.update(batch)
        draws += len(batch)
        epoch += 1
    assert len(pairs) > 7


def test_unpaired_batches_batch_size():
    bundle = build_dataset(SMALL)
    batches = list(unpaired_batches(bundle.A_train, bundle.B_train, seed=0, batch_size=3))
    assert [len(x) for x, _, _ in batches] == [3, 1]


def test_unpaired_batches_rejects_empty():
    bundle = build_dataset(SMALL)
    with pytest.raises(DataError):
        list(unpaired_batches(LabeledSplit("e", []), bundle.B_train, seed=0))


def test_split_round_trip_bitwise(tmp_path):
    bundle = build_dataset(SMALL)
    save_split(bundle.A_train.items, tmp_path / "s")
    loaded = load_split(tmp_path / "s")
    for a, b in zip(bundle.A_train.items, loaded):
        assert a.image.pixels.tobytes() == b.image.pixels.tobytes()
        assert a.labels.ids.tobytes() == b.labels.ids.tobytes()


def test_truncated_blob_is_shape_error(tmp_path):
    bundle = build_dataset(SMALL)
    save_split(bundle.A_train.items, tmp_path / "s")
    blob = tmp_path / "s" / bundle.A_train.items[0].item_id / "image.f32"
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(ShapeMismatchError):
        load_split(tmp_path / "s")


def test_corrupt_and_missing_manifest(tmp_path):
    bundle = build_dataset(SMALL)
    save_split(bundle.A_train.items, tmp_path / "s")
    (tmp_path / "s" / "split.json").write_text("{not json")
    with pytest.raises(DataError):
        load_split(tmp_path / "s")
    with pytest.raises(DataError):
        load_split(tmp_path / "missing")


def test_png_endpoints():
    px = to_png_array(np.array([[-1.0, 1.0, 0.0]]))
    assert px[0, 0] == 0 and px[0, 1] == 255
