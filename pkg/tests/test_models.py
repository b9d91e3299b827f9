import numpy as np
import pytest

from explicit_transfer.core.gradcheck import check_gradients
from explicit_transfer.core.tensor import Tensor
from explicit_transfer.models import (CHECKPOINT_MAGIC, Converter, Model, build_converter, build_model,
                                      load_checkpoint, save_checkpoint)
from explicit_transfer.transforms import make_euclidean


def small_cnn():
    return build_model({"kind": "cnn-classifier", "height": 8, "width": 8, "channels": [2, 3]}, seed=0)


def test_model_output_shapes():
    m = small_cnn()
    x = np.random.default_rng(0).random((5, 8, 8))
    assert m.forward(Tensor(x)).shape == (5, 10)
    assert m.predict(x, batch_size=2).shape == (5,)
    np.testing.assert_allclose(m.probabilities(x).sum(axis=1), 1.0)
    tagger = build_model({"kind": "lstm-tagger", "features": 2, "hidden": 4, "classes": 3}, seed=0)
    xs = np.random.default_rng(1).random((3, 7, 2))
    assert tagger.forward(Tensor(xs)).shape == (3, 7, 3)
    assert tagger.predict(xs).shape == (3, 7)


def test_build_is_deterministic_per_seed():
    a, b, c = (build_model("lstm-tagger", seed=s) for s in (3, 3, 4))
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)
    assert any(not np.array_equal(a.params[k].data, c.params[k].data) for k in a.params)


def test_build_rejects_bad_specs():
    with pytest.raises(ValueError):
        build_model("mlp")
    with pytest.raises(ValueError):
        build_model({"kind": "lstm-tagger", "hidden": 0})
    with pytest.raises(ValueError):
        build_model({"kind": "lstm-tagger", "depth": 3})
    with pytest.raises(ValueError):
        build_converter({"kind": "lstm-converter", "family": "conformal"})
    with pytest.raises(ValueError):
        build_converter({"kind": "lstm-converter", "activation": "tanh"})


def test_freeze_and_head():
    m = small_cnn()
    m.freeze()
    assert all(m.frozen_mask.values())
    m.set_trainable(m.head)
    assert [k for k, frozen in m.frozen_mask.items() if not frozen] == ["out.w", "out.b"]


def test_clone_and_state_are_independent():
    m = small_cnn()
    c = m.clone()
    c.params["out.b"].data += 1.0
    assert not np.array_equal(m.params["out.b"].data, c.params["out.b"].data)
    m.load_state(c.state())
    np.testing.assert_array_equal(m.params["out.b"].data, c.params["out.b"].data)
    with pytest.raises((KeyError, ValueError)):
        m.load_state({"out.b": np.zeros(3)})


def test_zero_head_converters_are_identity():
    rng = np.random.default_rng(2)
    seq = rng.random((3, 6, 2))
    c = build_converter({"kind": "lstm-converter", "features": 2, "hidden": 4, "zero_head": True})
    mats = c.matrices(seq).data
    np.testing.assert_array_equal(mats, np.broadcast_to(np.eye(3), (3, 6, 3, 3)))
    np.testing.assert_array_equal(c.convert(seq).data, seq)
    img = rng.random((2, 8, 8))
    ci = build_converter({"kind": "cnn-converter", "height": 8, "width": 8, "channels": [2],
                          "zero_head": True})
    np.testing.assert_array_equal(ci.convert(img).data, img)


def test_affine_converter_keeps_last_row():
    c = build_converter({"kind": "lstm-converter", "features": 1, "hidden": 3, "head_scale": 2.0})
    mats = c.matrices(np.random.default_rng(3).random((2, 5, 1))).data
    np.testing.assert_array_equal(mats[..., 1, :], np.broadcast_to([0.0, 1.0], (2, 5, 2)))


def test_euclidean_converter_matrices_are_rigid():
    c = build_converter({"kind": "cnn-converter", "height": 8, "width": 8, "channels": [2], "head_scale": 5.0})
    mats = c.matrices(np.random.default_rng(4).random((4, 8, 8))).data
    for m in mats:
        np.testing.assert_allclose(m[:2, :2].T @ m[:2, :2], np.eye(2), atol=1e-12)


def test_direct_converters_shapes_and_no_matrices():
    c = build_converter({"kind": "direct-converter", "features": 2, "hidden": 3})
    x = np.zeros((2, 4, 2))
    assert c.convert(x).shape == (2, 4, 2)
    with pytest.raises(ValueError):
        c.matrices(x)
    ci = build_converter({"kind": "cnn-direct-converter", "height": 8, "width": 8, "channels": [2]})
    assert ci.convert(np.zeros((3, 8, 8))).shape == (3, 8, 8)


def test_converter_gradients():
    rng = np.random.default_rng(5)
    c = build_converter({"kind": "lstm-converter", "features": 1, "hidden": 3, "head_scale": 1.0}, seed=1)
    x = rng.random((2, 4, 1))
    proj = rng.standard_normal((2, 4, 1))
    params = list(c.params.values())
    assert check_gradients(lambda: (c.convert(x) * proj).sum(), params) < 1e-4


def test_sequence_converter_rejects_bad_input():
    c = build_converter({"kind": "lstm-converter", "features": 1, "hidden": 3})
    with pytest.raises(ValueError):
        c.matrices(np.zeros((2, 0, 1)))


@pytest.mark.parametrize("spec,cls", [
    ({"kind": "cnn-classifier", "height": 8, "width": 8, "channels": [2, 3]}, Model),
    ({"kind": "lstm-tagger", "hidden": 5}, Model),
    ({"kind": "lstm-converter", "features": 2, "hidden": 3}, Converter),
    ({"kind": "cnn-converter", "height": 8, "width": 8, "channels": [2]}, Converter),
])
def test_checkpoint_roundtrip(tmp_path, spec, cls):
    net = (build_model if cls is Model else build_converter)(spec, seed=7)
    path = tmp_path / "net.ckpt"
    save_checkpoint(path, net)
    back = load_checkpoint(path)
    assert isinstance(back, cls)
    assert back.arch == net.arch
    for k in net.params:
        np.testing.assert_array_equal(back.params[k].data, net.params[k].data)


def test_checkpoint_corruption_is_reported(tmp_path):
    path = tmp_path / "net.ckpt"
    save_checkpoint(path, build_model({"kind": "lstm-tagger", "hidden": 3}))
    raw = path.read_bytes()
    assert raw.startswith(CHECKPOINT_MAGIC)
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError, match="not a checkpoint"):
        load_checkpoint(bad)
    bad.write_bytes(raw[:-8])
    with pytest.raises(ValueError, match="truncated"):
        load_checkpoint(bad)
    bad.write_bytes(raw + b"\0")
    with pytest.raises(ValueError, match="trailing"):
        load_checkpoint(bad)
    bad.write_bytes(raw[:4] + (99).to_bytes(4, "little") + raw[8:])
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(bad)
    with pytest.raises(OSError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_half_turn_converter_reproduces_rotation():
    # a euclidean head whose bias encodes pi rotates every input by 180 degrees
    c = build_converter({"kind": "cnn-converter", "height": 8, "width": 8, "channels": [2], "zero_head": True})
    c.params["head.b"].data = np.array([np.pi, 0.0, 0.0])
    img = np.random.default_rng(6).random((2, 8, 8))
    np.testing.assert_allclose(c.convert(img).data, img[:, ::-1, ::-1], atol=1e-9)
    np.testing.assert_allclose(c.matrices(img).data[0], make_euclidean(np.pi).entries, atol=1e-15)
