"""Base models (CNN classifier, LSTM tagger), Converter networks, and the
binary checkpoint format."""
from __future__ import annotations

import copy
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .core.graph import Graph
from .core.nn import conv2d, glorot_uniform, lstm, maxpool2d, softmax
from .core.tensor import relu
from .core.tensor import Tensor, as_tensor, no_grad
from .transforms import FAMILIES, euclidean_matrices, grid_sample, transform_frames

MODEL_KINDS = ("cnn-classifier", "lstm-tagger")
CONVERTER_KINDS = ("cnn-converter", "lstm-converter", "direct-converter", "cnn-direct-converter")

DEFAULTS = {
    "cnn-classifier": {"height": 28, "width": 28, "channels": [8, 16, 32], "kernel": 3,
                       "classes": 10, "padding": "same"},
    "lstm-tagger": {"features": 2, "hidden": 64, "classes": 3},
    "cnn-converter": {"height": 28, "width": 28, "channels": [8, 16], "kernel": 3,
                      "family": "euclidean", "activation": "linear", "head_scale": 0.1,
                      "zero_head": False},
    "lstm-converter": {"features": 1, "hidden": 16, "family": "affine", "activation": "linear",
                       "head_scale": 0.1, "zero_head": False},
    "direct-converter": {"features": 1, "hidden": 16},
    "cnn-direct-converter": {"height": 28, "width": 28, "channels": [8, 16], "kernel": 3},
}


def _resolve(spec, kinds) -> dict:
    if isinstance(spec, str):
        spec = {"kind": spec}
    spec = dict(spec)
    kind = spec.get("kind")
    if kind not in kinds:
        raise ValueError(f"unknown architecture {kind!r}; expected one of {kinds}")
    arch = {"kind": kind, **copy.deepcopy(DEFAULTS[kind])}
    unknown = set(spec) - set(arch)
    if unknown:
        raise ValueError(f"unknown options for {kind}: {sorted(unknown)}")
    arch.update(spec)
    for key in ("height", "width", "kernel", "classes", "features", "hidden"):
        if key in arch and int(arch[key]) <= 0:
            raise ValueError(f"{key} must be positive")
    if "channels" in arch:
        arch["channels"] = [int(c) for c in arch["channels"]]
        if any(c <= 0 for c in arch["channels"]):
            raise ValueError("channel counts must be positive")
    return arch


class Network:
    """Ordered parameter dict plus a forward function."""

    def __init__(self, arch: dict, params: dict[str, Tensor]):
        self.arch = arch
        self.params = params

    @property
    def kind(self) -> str:
        return self.arch["kind"]

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def set_trainable(self, names=None) -> None:
        """Enable gradients for ``names`` (all if None) and disable the rest."""
        names = set(self.params) if names is None else set(names)
        for k, p in self.params.items():
            p.requires_grad = k in names

    def freeze(self) -> None:
        self.set_trainable(())

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise ValueError(f"shape mismatch for {k}")
            p.data = np.array(state[k], dtype=np.float64)

    def clone(self):
        other = copy.copy(self)
        other.arch = copy.deepcopy(self.arch)
        other.params = {k: Tensor(p.data.copy(), requires_grad=p.requires_grad, name=k)
                        for k, p in self.params.items()}
        return other

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    @property
    def graph(self) -> Graph:
        return Graph(lambda params, inputs: {"output": self.forward(inputs["x"])},
                     self.params, ("x",))


class Model(Network):
    """Base model M; ``head`` names the parameters of the final layer L."""

    @property
    def head(self) -> tuple[str, ...]:
        return ("out.w", "out.b")

    @property
    def frozen_mask(self) -> dict[str, bool]:
        return {k: not p.requires_grad for k, p in self.params.items()}

    def forward(self, x: Tensor) -> Tensor:
        x = as_tensor(x)
        if self.kind == "cnn-classifier":
            h = x.reshape((x.shape[0], 1) + x.shape[1:])
            for i in range(len(self.arch["channels"])):
                h = conv2d(h, self.params[f"conv{i + 1}.w"], self.params[f"conv{i + 1}.b"],
                           self.arch["padding"])
                h = maxpool2d(relu(h))
            h = h.reshape((h.shape[0], -1))
            return h @ self.params["out.w"] + self.params["out.b"]
        h = lstm(x, {"w_x": self.params["lstm.w_x"], "w_h": self.params["lstm.w_h"],
                     "b": self.params["lstm.b"]})
        return h @ self.params["out.w"] + self.params["out.b"]

    def probabilities(self, x) -> np.ndarray:
        with no_grad():
            return softmax(self.forward(as_tensor(x))).data

    def predict(self, x, batch_size: int = 512) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        out = []
        with no_grad():
            for i in range(0, len(x), batch_size):
                out.append(self.forward(Tensor(x[i:i + batch_size])).data.argmax(axis=-1))
        return np.concatenate(out) if out else np.zeros((0,), dtype=np.int64)


def _cnn_body_params(arch: dict, rng: np.random.Generator, in_ch: int = 1) -> tuple[dict, int]:
    params = {}
    h, w = arch["height"], arch["width"]
    k = arch["kernel"]
    for i, ch in enumerate(arch["channels"]):
        params[f"conv{i + 1}.w"] = glorot_uniform(rng, (ch, in_ch, k, k), in_ch * k * k, ch * k * k)
        params[f"conv{i + 1}.b"] = np.zeros(ch)
        if arch.get("padding", "same") == "valid":
            h, w = h - k + 1, w - k + 1
        h, w = h // 2, w // 2
        if h <= 0 or w <= 0:
            raise ValueError("input too small for the number of conv/pool stages")
        in_ch = ch
    return params, in_ch * h * w


def _lstm_params(n_in: int, hidden: int, rng: np.random.Generator, prefix: str = "lstm") -> dict:
    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = 1.0   # forget-gate bias
    return {
        f"{prefix}.w_x": glorot_uniform(rng, (n_in, 4 * hidden), n_in, 4 * hidden),
        f"{prefix}.w_h": glorot_uniform(rng, (hidden, 4 * hidden), hidden, 4 * hidden),
        f"{prefix}.b": b,
    }


def _wrap(raw: dict) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in raw.items()}


def build_model(spec, seed: int = 0) -> Model:
    arch = _resolve(spec, MODEL_KINDS)
    rng = np.random.default_rng([seed, 10])
    if arch["kind"] == "cnn-classifier":
        raw, n_flat = _cnn_body_params(arch, rng)
        raw["out.w"] = glorot_uniform(rng, (n_flat, arch["classes"]), n_flat, arch["classes"])
        raw["out.b"] = np.zeros(arch["classes"])
    else:
        raw = _lstm_params(arch["features"], arch["hidden"], rng)
        raw["out.w"] = glorot_uniform(rng, (arch["hidden"], arch["classes"]), arch["hidden"], arch["classes"])
        raw["out.b"] = np.zeros(arch["classes"])
    return Model(arch, _wrap(raw))


class Converter(Network):
    """Maps target-domain samples to transformation matrices (matrix mode) or
    directly to converted samples (direct mode)."""

    @property
    def output_mode(self) -> str:
        return "direct" if "direct" in self.kind else "matrix"

    @property
    def family(self) -> str:
        return self.arch.get("family", "unrestricted")

    @property
    def activation(self) -> str:
        return self.arch.get("activation", "linear")

    def _cnn_features(self, x: Tensor) -> Tensor:
        h = x.reshape((x.shape[0], 1) + x.shape[1:])
        for i in range(len(self.arch["channels"])):
            h = maxpool2d(relu(conv2d(h, self.params[f"conv{i + 1}.w"], self.params[f"conv{i + 1}.b"])))
        return h.reshape((h.shape[0], -1))

    def matrices(self, x) -> Tensor:
        """Per-image (N, 3, 3) or per-frame (N, T, f+1, f+1) transforms."""
        if self.output_mode != "matrix":
            raise ValueError("direct-mode converters do not produce matrices")
        x = as_tensor(x)
        if self.kind == "cnn-converter":
            out = self._cnn_features(x) @ self.params["head.w"] + self.params["head.b"]
            if self.family == "euclidean":
                return euclidean_matrices(out)
            return self._finish_matrices(out, 2)
        if x.ndim != 3 or x.shape[1] == 0:
            raise ValueError("sequence converters expect non-empty input of shape (N, T, f)")
        h = lstm(x, {"w_x": self.params["lstm.w_x"], "w_h": self.params["lstm.w_h"],
                     "b": self.params["lstm.b"]})
        out = h @ self.params["head.w"] + self.params["head.b"]
        return self._finish_matrices(out, x.shape[-1])

    def _finish_matrices(self, logits: Tensor, d: int) -> Tensor:
        if self.activation == "softmax":
            logits = softmax(logits, axis=-1)
        mats = logits.reshape(logits.shape[:-1] + (d + 1, d + 1))
        if self.family in ("affine", "euclidean"):
            keep = np.ones((d + 1, d + 1))
            keep[d] = 0.0
            corner = np.zeros((d + 1, d + 1))
            corner[d, d] = 1.0
            mats = mats * keep + corner
        return mats

    def convert(self, x) -> Tensor:
        x = as_tensor(x)
        if self.kind == "direct-converter":
            h = lstm(x, {"w_x": self.params["lstm.w_x"], "w_h": self.params["lstm.w_h"],
                         "b": self.params["lstm.b"]})
            return h @ self.params["head.w"] + self.params["head.b"]
        if self.kind == "cnn-direct-converter":
            out = self._cnn_features(x) @ self.params["head.w"] + self.params["head.b"]
            return out.reshape(x.shape)
        mats = self.matrices(x)
        if self.kind == "cnn-converter":
            return grid_sample(x, mats)
        return transform_frames(mats, x, self.family)

    def forward(self, x) -> Tensor:
        return self.convert(x)


def _identity_entries(d: int) -> np.ndarray:
    return np.eye(d + 1).reshape(-1)


def build_converter(spec, seed: int = 0) -> Converter:
    arch = _resolve(spec, CONVERTER_KINDS)
    if arch.get("family", "affine") not in FAMILIES:
        raise ValueError(f"unknown transform family {arch['family']!r}")
    if arch.get("activation", "linear") not in ("linear", "softmax"):
        raise ValueError("activation must be 'linear' or 'softmax'")
    rng = np.random.default_rng([seed, 11])
    kind = arch["kind"]
    if kind in ("cnn-converter", "cnn-direct-converter"):
        raw, n_in = _cnn_body_params(arch, rng)
    else:
        raw = _lstm_params(arch["features"], arch["hidden"], rng)
        n_in = arch["hidden"]

    if kind == "cnn-converter":
        if arch["family"] == "euclidean":
            n_out, bias = 3, np.zeros(3)
        else:
            n_out, bias = 9, _identity_entries(2)
    elif kind == "lstm-converter":
        d = arch["features"]
        n_out, bias = (d + 1) ** 2, _identity_entries(d)
    elif kind == "direct-converter":
        n_out, bias = arch["features"], np.zeros(arch["features"])
    else:
        n_out, bias = arch["height"] * arch["width"], np.zeros(arch["height"] * arch["width"])

    w = glorot_uniform(rng, (n_in, n_out), n_in, n_out)
    if kind in ("cnn-converter", "lstm-converter"):
        w = np.zeros_like(w) if arch["zero_head"] else w * arch["head_scale"]
    raw["head.w"] = w
    raw["head.b"] = bias
    return Converter(arch, _wrap(raw))


# -- checkpoints ---------------------------------------------------------------

CHECKPOINT_MAGIC = b"EXTC"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, net: Network) -> None:
    """magic, u32 version, u32 header length, JSON header, float64 LE values."""
    header = {
        "arch": net.arch,
        "role": "converter" if isinstance(net, Converter) else "model",
        "params": [[k, list(p.shape)] for k, p in net.params.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for p in net.params.values():
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> Network:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, n_header = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[12:12 + n_header].decode("utf-8"))
    offset = 12 + n_header
    arch = header["arch"]
    net = build_converter(arch) if header["role"] == "converter" else build_model(arch)
    for name, shape in header["params"]:
        count = int(np.prod(shape))
        if offset + 8 * count > len(raw):
            raise ValueError(f"{path}: truncated parameter data")
        net.params[name].data = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * count
    if offset != len(raw):
        raise ValueError(f"{path}: trailing bytes after parameter data")
    return net
