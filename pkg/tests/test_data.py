import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from explicit_transfer.data import (LANE_CHANGE_CLASSES, TOY_CLASSES, ImageDataset, LabeledSequence,
                                    SequenceDataset, ToyConfig, generate_toy_lane_changes, label_and_weight,
                                    limit_dataset, load_image_pool, load_sequence_dir, make_rotated_domain,
                                    read_idx, read_sequence_file, split_dataset, stack_sequences, toy_noise,
                                    write_idx, write_sequence_dir, write_sequence_file)


# -- IDX -------------------------------------------------------------------------------

def test_idx_image_header_arithmetic(tmp_path):
    payload = bytes(range(256)) * 6 + bytes(32)   # 1568 bytes
    p = tmp_path / "img"
    p.write_bytes(struct.pack(">IIII", 0x803, 2, 28, 28) + payload)
    arr = read_idx(p)
    assert arr.shape == (2, 28, 28)
    assert arr.min() >= 0 and arr.max() <= 1
    assert arr.reshape(-1)[255] == 1.0


def test_idx_label_file(tmp_path):
    p = tmp_path / "lab"
    p.write_bytes(struct.pack(">II", 0x801, 10) + bytes(range(10)))
    np.testing.assert_array_equal(read_idx(p), np.arange(10))


def test_idx_roundtrip_and_gzip(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, (3, 4, 5)).astype(np.uint8)
    p = tmp_path / "x.idx"
    write_idx(p, imgs)
    np.testing.assert_array_equal(np.round(read_idx(p) * 255).astype(np.uint8), imgs)
    gz = tmp_path / "x.idx.gz"
    gz.write_bytes(gzip.compress(p.read_bytes()))
    np.testing.assert_array_equal(read_idx(gz), read_idx(p))


def test_idx_errors(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(struct.pack(">II", 0x802, 1) + b"\0")
    with pytest.raises(ValueError, match="magic"):
        read_idx(p)
    p.write_bytes(struct.pack(">IIII", 0x803, 2, 28, 28) + bytes(1000))
    with pytest.raises(ValueError, match="truncated"):
        read_idx(p)
    p.write_bytes(struct.pack(">I", 0x803) + b"\0\0")
    with pytest.raises(ValueError, match="truncated"):
        read_idx(p)
    with pytest.raises(OSError):
        read_idx(tmp_path / "missing")


def test_image_pool_from_idx_dir(tmp_path):
    rng = np.random.default_rng(1)
    write_idx(tmp_path / "train-images-idx3-ubyte", rng.integers(0, 256, (20, 28, 28)).astype(np.uint8))
    write_idx(tmp_path / "train-labels-idx1-ubyte", (np.arange(20) % 10).astype(np.uint8))
    ds = load_image_pool(tmp_path, "mnist", max_count=12)
    assert len(ds) == 12 and ds.images.shape[1:] == (28, 28)
    with pytest.raises((OSError, ValueError)):
        load_image_pool(tmp_path / "nowhere", "mnist")


# -- rotated domain ----------------------------------------------------------------------

@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2 ** 31))
@settings(max_examples=50, deadline=None)
def test_rotation_is_an_involution(h, w, seed):
    rng = np.random.default_rng(seed)
    ds = ImageDataset(rng.random((3, h, w)), rng.integers(0, 10, 3))
    back = make_rotated_domain(make_rotated_domain(ds))
    np.testing.assert_array_equal(back.images, ds.images)
    np.testing.assert_array_equal(back.labels, ds.labels)


def test_rotation_moves_corner_pixel_and_keeps_labels():
    img = np.zeros((1, 4, 6))
    img[0, 0, 0] = 1.0
    rot = make_rotated_domain(ImageDataset(img, [7]))
    assert rot.images[0, 3, 5] == 1.0 and rot.images.sum() == 1.0
    assert rot.labels.tolist() == [7] and rot.domain == "B"


def test_image_dataset_validation():
    with pytest.raises(ValueError):
        ImageDataset(np.zeros((2, 3)), [0, 1])
    with pytest.raises(ValueError):
        ImageDataset(np.zeros((2, 3, 3)), [0])
    with pytest.raises(ValueError):
        ImageDataset(np.full((1, 2, 2), 2.0), [0]).validate()


# -- toy generator -----------------------------------------------------------------------

@pytest.fixture(scope="module")
def toy_pair():
    cfg = ToyConfig()
    return cfg, generate_toy_lane_changes(cfg, "clean", 300, 5), generate_toy_lane_changes(cfg, "noisy", 300, 5)


def test_toy_invariants(toy_pair):
    cfg, clean, noisy = toy_pair
    first, _ = cfg.exec_frame_range()
    k_h = int(round(cfg.horizon_s * cfg.frame_rate))
    n_changes = 0
    for ds in (clean, noisy):
        assert ds.classes == TOY_CLASSES
        for s in ds:
            assert len(s) == 150
            assert s.frames.min() >= 0 and s.frames.max() <= 1
            assert np.all(s.weights >= 0)
            for d, e in s.maneuvers:
                n_changes += 1
                assert e >= cfg.horizon_s * cfg.frame_rate and e >= first
                assert d in ("L", "R")
            lc = np.flatnonzero(s.labels == 1)
            if s.maneuvers:
                e = s.maneuvers[0][1]
                np.testing.assert_array_equal(lc, np.arange(e - k_h, e))
            else:
                assert lc.size == 0
    assert 0.35 < n_changes / 600 < 0.65


def test_toy_noise_is_the_only_difference(toy_pair):
    cfg, clean, noisy = toy_pair
    noise = toy_noise(cfg, len(clean), 5)
    for c, n, eps in zip(clean, noisy, noise):
        assert c.maneuvers == n.maneuvers
        np.testing.assert_array_equal(c.labels, n.labels)
        np.testing.assert_array_equal(n.frames, np.clip(c.frames + eps, 0.0, 1.0))


def test_zero_noise_equals_clean():
    cfg = ToyConfig(sigma_noise=0.0)
    clean = generate_toy_lane_changes(cfg, "clean", 20, 3)
    noisy = generate_toy_lane_changes(cfg, "noisy", 20, 3)
    for c, n in zip(clean, noisy):
        np.testing.assert_array_equal(c.frames, n.frames)
        np.testing.assert_array_equal(c.weights, n.weights)


def test_toy_generation_is_deterministic():
    a = generate_toy_lane_changes(ToyConfig(), "noisy", 10, 9)
    b = generate_toy_lane_changes(ToyConfig(), "noisy", 10, 9)
    c = generate_toy_lane_changes(ToyConfig(), "noisy", 10, 10)
    assert all(np.array_equal(x.frames, y.frames) for x, y in zip(a, b))
    assert not all(np.array_equal(x.frames, y.frames) for x, y in zip(a, c))


def test_toy_with_velocity_has_two_features():
    ds = generate_toy_lane_changes(ToyConfig(with_velocity=True), "noisy", 10, 0)
    assert ds.n_features == 2 and ds.classes == LANE_CHANGE_CLASSES


@pytest.mark.parametrize("kwargs", [{"sigma_noise": -0.1}, {"transition_s": 0.0}, {"length_s": 0.0},
                                    {"frame_rate": -1.0}, {"length_s": 3.0}, {"p_lane_change": 1.5}])
def test_toy_config_errors(kwargs):
    with pytest.raises(ValueError):
        generate_toy_lane_changes(ToyConfig(**kwargs), "clean", 5, 0)


def test_toy_domain_and_count_errors():
    with pytest.raises(ValueError):
        generate_toy_lane_changes(ToyConfig(), "blurry", 5, 0)
    with pytest.raises(ValueError):
        generate_toy_lane_changes(ToyConfig(), "clean", 0, 0)


# -- labeling ------------------------------------------------------------------------

def _bare(length, maneuvers, rate=10.0):
    return LabeledSequence(np.zeros((length, 1)), np.zeros(length, dtype=np.int64), np.ones(length),
                           maneuvers, rate)


def test_label_window_and_ignore_frames():
    ds = label_and_weight(SequenceDataset([_bare(150, [("L", 100)])], LANE_CHANGE_CLASSES),
                          horizon_s=3.0, ignore_s=0.5, alpha=1.0, post_ignore_s=1.0)
    s = ds[0]
    np.testing.assert_array_equal(np.flatnonzero(s.labels), np.arange(70, 100))
    assert np.all(s.labels[70:100] == LANE_CHANGE_CLASSES.index("L"))
    assert np.all(s.weights[65:70] == 0) and np.all(s.weights[100:110] == 0)
    assert np.all(s.weights[:65] > 0) and np.all(s.weights[110:] > 0) and np.all(s.weights[70:100] > 0)
    # exponential ramp towards the execution frame
    assert np.all(np.diff(s.weights[70:100]) > 0)


def test_alpha_zero_gives_constant_maneuver_weight():
    ds = label_and_weight(SequenceDataset([_bare(150, [("R", 100)]), _bare(150, [])], LANE_CHANGE_CLASSES),
                          alpha=0.0)
    w = ds[0].weights[70:100]
    assert np.all(w == w[0])


def test_inverse_frequency_class_weights():
    # 9 follow-only sequences of 30 frames plus one with 30 F and 30 L frames: 300 F vs 30 L
    seqs = [_bare(30, []) for _ in range(9)] + [_bare(60, [("L", 60)])]
    ds = label_and_weight(SequenceDataset(seqs, LANE_CHANGE_CLASSES), horizon_s=3.0, ignore_s=0.0,
                          alpha=0.0, post_ignore_s=0.0)
    w_f = ds[0].weights[0]
    w_l = ds[9].weights[59]
    assert w_l / w_f == pytest.approx(10.0)
    seqs = [_bare(10, []) for _ in range(24)] + [_bare(60, [("L", 60)])]   # 240+30 F, 30 L -> 90 / 10
    ds = label_and_weight(SequenceDataset(seqs, LANE_CHANGE_CLASSES), horizon_s=3.0, ignore_s=0.0,
                          alpha=0.0, post_ignore_s=0.0)
    assert ds[-1].weights[59] / ds[0].weights[0] == pytest.approx(9.0)


def test_overlapping_maneuvers_rejected():
    with pytest.raises(ValueError):
        label_and_weight(SequenceDataset([_bare(200, [("L", 60), ("R", 80)])], LANE_CHANGE_CLASSES))


# -- subsets ------------------------------------------------------------------------------

@given(st.integers(20, 200), st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_limit_dataset_is_nested(n, seed):
    ds = ImageDataset(np.zeros((n, 1, 1)), np.arange(n))
    small = limit_dataset(ds, 5, seed).labels
    big = limit_dataset(ds, 15, seed).labels
    np.testing.assert_array_equal(big[:5], small)
    full = limit_dataset(ds, n, seed).labels
    assert sorted(full.tolist()) == list(range(n))


def test_limit_dataset_errors():
    ds = ImageDataset(np.zeros((4, 1, 1)), np.arange(4))
    with pytest.raises(ValueError):
        limit_dataset(ds, 5, 0)
    with pytest.raises(ValueError):
        limit_dataset(ds, 0, 0)


def test_split_is_a_partition():
    ds = ImageDataset(np.zeros((50, 1, 1)), np.arange(50))
    train, test = split_dataset(ds, 0.2, 3)
    assert len(test) == 10 and len(train) == 40
    assert sorted(train.labels.tolist() + test.labels.tolist()) == list(range(50))


def test_stack_sequences_pads():
    ds = SequenceDataset([_bare(3, []), _bare(5, [])])
    frames, labels, weights, valid = stack_sequences(ds)
    assert frames.shape == (2, 5, 1)
    np.testing.assert_array_equal(valid[0], [1, 1, 1, 0, 0])
    np.testing.assert_array_equal(weights[0], [1, 1, 1, 0, 0])


# -- sequence files ------------------------------------------------------------------------

def test_sequence_file_roundtrip(tmp_path):
    ds = generate_toy_lane_changes(ToyConfig(with_velocity=True), "noisy", 6, 2)
    write_sequence_dir(tmp_path / "B", ds)
    back = load_sequence_dir(tmp_path / "B", domain="B")
    assert len(back) == 6 and back.domain == "B"
    for a, b in zip(ds, back):
        np.testing.assert_array_equal(a.frames, b.frames)
        np.testing.assert_array_equal(a.labels, b.labels)
        np.testing.assert_array_equal(a.weights, b.weights)
        assert a.maneuvers == b.maneuvers


def test_toy_sequence_file_keeps_change_class(tmp_path):
    ds = generate_toy_lane_changes(ToyConfig(p_lane_change=1.0), "clean", 2, 2)
    write_sequence_file(tmp_path / "s.csv", ds[0], ds.classes)
    back = read_sequence_file(tmp_path / "s.csv", TOY_CLASSES, features=("m",))
    np.testing.assert_array_equal(back.labels, ds[0].labels)
    np.testing.assert_array_equal(back.frames, ds[0].frames)


def test_sequence_file_errors(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("rate=10\n")
    with pytest.raises(ValueError, match="frame_rate"):
        read_sequence_file(p)
    p.write_text("frame_rate=10\n0.5,0.0,X,1.0\n")
    with pytest.raises(ValueError, match=":2:"):
        read_sequence_file(p)
    p.write_text("frame_rate=10\n# lc,U,5\n")
    with pytest.raises(ValueError, match="annotation"):
        read_sequence_file(p)
    p.write_text("frame_rate=10\n0.5,0.0\n")
    with pytest.raises(ValueError):
        read_sequence_file(p)
    with pytest.raises(FileNotFoundError):
        load_sequence_dir(tmp_path / "empty")
