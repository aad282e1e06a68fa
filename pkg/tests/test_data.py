import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sharpminima import net, optim
from sharpminima.data import (AugmentPolicy, Dataset, IMAGES_MAGIC, LABELS_MAGIC, adversarial_examples, augment,
                              encode_idx, load_idx, parse_idx, synth_gaussian, synth_teacher, transform_image,
                              write_idx)
from sharpminima.errors import FormatError, SpecError


def image_dataset(m=12, h=5, w=6, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 256, (m, h * w)) / 255.0
    return Dataset(X, rng.integers(0, 3, m), 3, (h, w))


# Dataset


def test_dataset_validation():
    with pytest.raises(SpecError):
        Dataset(np.zeros((2, 3)), [0, 3], 3)
    with pytest.raises(SpecError):
        Dataset(np.array([[np.nan]]), [0], 2)
    with pytest.raises(SpecError):
        Dataset(np.zeros((2, 4)), [0, 1], 2, (3, 3))
    with pytest.raises(SpecError):
        Dataset(np.zeros((2, 4)), [0], 2)


# IDX


def test_idx_header_example(tmp_path):
    img = struct.pack(">IIII", IMAGES_MAGIC, 2, 2, 2) + bytes([0, 255, 51, 102, 1, 2, 3, 4])
    lbl = struct.pack(">II", LABELS_MAGIC, 2) + bytes([1, 0])
    (tmp_path / "i").write_bytes(img)
    (tmp_path / "l").write_bytes(lbl)
    d = load_idx(tmp_path / "i", tmp_path / "l")
    assert len(d) == 2 and d.dim == 4 and d.image_shape == (2, 2)
    assert d.features[0, 1] == 1.0
    assert d.features[0, 2] == 0.2
    assert list(d.labels) == [1, 0]


@pytest.mark.parametrize("compress", [False, True])
def test_idx_round_trip_is_bit_exact(tmp_path, compress):
    d = image_dataset(20, 7, 4)
    write_idx(d, tmp_path / "i", tmp_path / "l", compress)
    back = load_idx(tmp_path / "i", tmp_path / "l", 3)
    assert np.array_equal(back.features, d.features)
    assert np.array_equal(back.labels, d.labels)
    assert back.image_shape == (7, 4)


def test_idx_gzip_output_is_reproducible(tmp_path):
    d = image_dataset()
    write_idx(d, tmp_path / "a", tmp_path / "b", compress=True)
    first = (tmp_path / "a").read_bytes()
    write_idx(d, tmp_path / "a", tmp_path / "b", compress=True)
    assert (tmp_path / "a").read_bytes() == first
    assert gzip.decompress(first)[:4] == IMAGES_MAGIC.to_bytes(4, "big")


def test_idx_errors(tmp_path):
    good = encode_idx(np.zeros((2, 2, 2), np.uint8), IMAGES_MAGIC)
    with pytest.raises(FormatError, match="offset"):
        parse_idx(good[:-1], IMAGES_MAGIC)
    with pytest.raises(FormatError):
        parse_idx(good + b"\0", IMAGES_MAGIC)
    with pytest.raises(FormatError):
        parse_idx(good, LABELS_MAGIC)
    with pytest.raises(FormatError):
        parse_idx(good[:6], IMAGES_MAGIC)
    (tmp_path / "i").write_bytes(good)
    (tmp_path / "l").write_bytes(encode_idx(np.zeros(3, np.uint8), LABELS_MAGIC))
    with pytest.raises(FormatError):
        load_idx(tmp_path / "i", tmp_path / "l")
    (tmp_path / "l").write_bytes(encode_idx(np.array([0, 11], np.uint8), LABELS_MAGIC))
    with pytest.raises(FormatError):
        load_idx(tmp_path / "i", tmp_path / "l")
    (tmp_path / "z").write_bytes(b"\x1f\x8b garbage")
    with pytest.raises(FormatError):
        load_idx(tmp_path / "z", tmp_path / "l")


def header_mutations(raw: bytes, header_len: int, count: int, seed: int):
    """``count`` distinct single-byte corruptions inside the header."""
    rng = np.random.default_rng(seed)
    seen = set()
    while len(seen) < count:
        pos = int(rng.integers(0, header_len))
        val = int(rng.integers(0, 256))
        if val != raw[pos] and (pos, val) not in seen:
            seen.add((pos, val))
            yield pos, val, raw[:pos] + bytes([val]) + raw[pos + 1:]


def test_idx_header_fuzz_all_rejected(tmp_path):
    imgs = encode_idx(np.arange(3 * 4 * 5, dtype=np.uint8).reshape(3, 4, 5), IMAGES_MAGIC)
    lbls = encode_idx(np.array([0, 1, 2], np.uint8), LABELS_MAGIC)
    (tmp_path / "l").write_bytes(lbls)
    for pos, val, bad in header_mutations(imgs, 16, 100, 0):
        (tmp_path / "i").write_bytes(bad)
        with pytest.raises(FormatError):
            load_idx(tmp_path / "i", tmp_path / "l")


@settings(max_examples=200, deadline=None)
@given(raw=st.binary(max_size=64))
def test_parse_idx_never_crashes(raw):
    try:
        parse_idx(raw, IMAGES_MAGIC)
    except FormatError:
        pass


# Synthetic data


def test_synthetic_is_deterministic_and_disjoint():
    a = synth_gaussian(50, 30, 4, 3, 2.0, 9)
    b = synth_gaussian(50, 30, 4, 3, 2.0, 9)
    assert np.array_equal(a[0].features, b[0].features) and np.array_equal(a[1].labels, b[1].labels)
    train_rows = {r.tobytes() for r in a[0].features}
    assert not any(r.tobytes() in train_rows for r in a[1].features)


def _fit(train, test, epochs=30):
    spec = net.NetworkSpec(train.dim, [net.Dense(train.dim, train.num_classes, True),
                                       net.SoftmaxCrossEntropyOutput(train.num_classes)])
    trace = optim.train(spec, train, test, optim.OptimizerConfig(lr=0.02), optim.BatchSampler(len(train), 32),
                        optim.StopRule(max_epochs=epochs))
    return trace.records[trace.best_epoch].test_acc


def test_zero_separation_is_chance_level():
    train, test = synth_gaussian(1000, 4000, 5, 4, 0.0, 1)
    assert abs(_fit(train, test) - 0.25) <= 0.05


def test_large_separation_is_linearly_learnable():
    train, test = synth_gaussian(1000, 1000, 5, 4, 12.0, 1)
    assert _fit(train, test) >= 0.99


def test_teacher_labels_are_deterministic_and_cover_classes():
    a, _ = synth_teacher(500, 10, 8, 4, 16, 3)
    b, _ = synth_teacher(500, 10, 8, 4, 16, 3)
    assert np.array_equal(a.labels, b.labels)
    assert len(set(a.labels.tolist())) >= 3


# Augmentation


def test_zero_limit_policy_is_identity():
    d = image_dataset()
    out = augment(d, AugmentPolicy(horizontal_flip=False, max_rotation_degrees=0.0, max_translation_fraction=0.0))
    assert np.array_equal(out.features, d.features)


def test_double_flip_restores():
    img = np.random.default_rng(0).random((5, 7))
    once = transform_image(img, True, 0.0, 0.0, 0.0)
    assert np.array_equal(once, img[:, ::-1])
    assert np.array_equal(transform_image(once, True, 0.0, 0.0, 0.0), img)


def test_one_pixel_translation():
    img = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = transform_image(img, False, 0.0, 0.0, 1.0)
    assert np.array_equal(out, [[0.0, 1.0], [0.0, 3.0]])


def test_integer_rotation_by_90_degrees_permutes_pixels():
    img = np.arange(9.0).reshape(3, 3)
    out = transform_image(img, False, 90.0, 0.0, 0.0)
    assert np.allclose(out, np.rot90(img, 1), atol=1e-12) or np.allclose(out, np.rot90(img, -1), atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**6), epoch=st.integers(0, 100))
def test_augment_preserves_size_labels_and_range(seed, epoch):
    d = image_dataset(6, 4, 4, seed % 97)
    out = augment(d, AugmentPolicy(seed=seed), epoch)
    assert out.features.shape == d.features.shape
    assert np.array_equal(out.labels, d.labels)
    assert out.features.min() >= 0.0 and out.features.max() <= 1.0 + 1e-12


def test_augment_defaults_and_shape_requirement():
    p = AugmentPolicy()
    assert p.max_rotation_degrees == 10.0 and p.max_translation_fraction == 0.2 and p.horizontal_flip
    with pytest.raises(SpecError):
        augment(Dataset(np.zeros((2, 3)), [0, 1], 2), p)


# Adversarial examples


def _trained_toy():
    rng = np.random.default_rng(0)
    X = rng.random((300, 16))
    y = (X[:, :8].sum(axis=1) > X[:, 8:].sum(axis=1)).astype(int)
    d = Dataset(X, y, 2, (4, 4))
    spec = net.mlp_spec(16, [16], 2, batchnorm=False)
    trace = optim.train(spec, d, None, optim.OptimizerConfig(lr=0.01), optim.BatchSampler(300, 30),
                        optim.StopRule(max_epochs=60))
    return spec, trace.final, d


def test_adversarial_zero_eta_is_identity():
    spec, p, d = _trained_toy()
    assert adversarial_examples(spec, p, d, 0.0) is d


def test_adversarial_bounds_and_accuracy_drop():
    spec, p, d = _trained_toy()
    adv = adversarial_examples(spec, p, d, 0.1)
    assert np.max(np.abs(adv.features - d.features)) <= 0.1 + 1e-15
    assert adv.features.min() >= 0.0 and adv.features.max() <= 1.0
    assert np.array_equal(adv.labels, d.labels)
    assert net.accuracy(spec, p, adv) <= net.accuracy(spec, p, d)
    with pytest.raises(SpecError):
        adversarial_examples(spec, p, d, -0.1)


def test_adversarial_hook_mixes_clean_and_perturbed_rows():
    spec, p, d = _trained_toy()
    hook = optim.adversarial_hook(spec, d, 0.1, seed=4)
    out = hook(p, 1)
    changed = np.any(out.features != d.features, axis=1)
    assert 0.3 < changed.mean() < 0.7
    assert np.array_equal(hook(p, 1).features, out.features)
    assert optim.adversarial_hook(spec, d, 0.0)(p, 1) is d
