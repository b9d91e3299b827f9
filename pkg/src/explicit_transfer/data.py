"""Datasets: IDX image files, the rotated-image domain, simulated lane changes,
frame labelling/weighting, subsampling and the delimited sequence file format.
"""
from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

IDX_LABEL_MAGIC = 0x00000801
IDX_IMAGE_MAGIC = 0x00000803

TOY_CLASSES = ("F", "C")
LANE_CHANGE_CLASSES = ("F", "L", "R")


# -- images -----------------------------------------------------------------

@dataclass
class ImageDataset:
    images: np.ndarray          # (N, H, W), values in [0, 1]
    labels: np.ndarray          # (N,) int
    domain: str = "A"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 3:
            raise ValueError("images must have shape (N, H, W)")
        if len(self.images) != len(self.labels):
            raise ValueError("image and label counts differ")

    def validate(self) -> None:
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "ImageDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return ImageDataset(self.images[idx], self.labels[idx], self.domain)


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Parse an IDX file of unsigned bytes.

    Label files (magic 0x801) give an int64 vector; image files (0x803) give
    float64 images scaled to [0, 1].
    """
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise ValueError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic not in (IDX_LABEL_MAGIC, IDX_IMAGE_MAGIC):
        raise ValueError(f"{path}: bad IDX magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ValueError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims))
    payload = raw[header:]
    if len(payload) < expected:
        raise ValueError(f"{path}: truncated payload, expected {expected} bytes, got {len(payload)}")
    arr = np.frombuffer(payload[:expected], dtype=np.uint8).reshape(dims)
    if magic == IDX_LABEL_MAGIC:
        return arr.astype(np.int64)
    return arr.astype(np.float64) / 255.0


def write_idx(path, arr: np.ndarray) -> None:
    """Write uint8 data as IDX; 1-D arrays become label files, 3-D image files."""
    arr = np.asarray(arr)
    if arr.ndim == 1:
        magic = IDX_LABEL_MAGIC
    elif arr.ndim == 3:
        magic = IDX_IMAGE_MAGIC
    else:
        raise ValueError("IDX writer supports 1-D labels or 3-D images")
    if arr.dtype != np.uint8:
        if np.issubdtype(arr.dtype, np.floating):
            arr = np.round(np.clip(arr, 0, 1) * 255)
        arr = arr.astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


MNIST_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")


def find_mnist(data_dir) -> tuple[Path, Path] | None:
    if data_dir is None:
        return None
    root = Path(data_dir)
    found = []
    for stem in MNIST_FILES:
        for cand in (root / stem, root / f"{stem}.gz"):
            if cand.exists():
                found.append(cand)
                break
        else:
            return None
    return found[0], found[1]


IMAGE_SOURCES = ("auto", "mnist", "mnist-5k", "digits")


def _bundled_mnist_subset():
    try:
        from mlxtend.data import mnist_data
    except ImportError:
        return None
    images, labels = mnist_data()
    return images.reshape(-1, 28, 28) / 255.0, labels


def load_image_pool(data_dir=None, source: str = "auto", max_count: int | None = None) -> ImageDataset:
    """Load the unrotated image pool.

    ``"mnist"`` reads IDX files from ``data_dir``; ``"mnist-5k"`` is the
    5000-image MNIST subset shipped with mlxtend; ``"digits"`` the 8x8 digits
    bundled with scikit-learn.  ``"auto"`` takes the first available in that
    order.
    """
    if source not in IMAGE_SOURCES:
        raise ValueError(f"unknown image source {source!r}")
    loaded = None
    if source in ("auto", "mnist"):
        paths = find_mnist(data_dir)
        if paths is not None:
            loaded = read_idx(paths[0]), read_idx(paths[1])
        elif source == "mnist":
            raise FileNotFoundError(f"no MNIST IDX files in {data_dir}")
    if loaded is None and source in ("auto", "mnist-5k"):
        loaded = _bundled_mnist_subset()
        if loaded is None and source == "mnist-5k":
            raise ImportError("the mnist-5k source needs the mlxtend package")
    if loaded is None:
        from sklearn.datasets import load_digits
        digits = load_digits()
        loaded = digits.images / 16.0, digits.target
    images, labels = loaded
    if max_count is not None:
        images, labels = images[:max_count], labels[:max_count]
    ds = ImageDataset(images, labels, "A")
    ds.validate()
    return ds


def make_rotated_domain(ds: ImageDataset, domain: str = "B") -> ImageDataset:
    """Rotate every image by 180 degrees (reverse both axes)."""
    return ImageDataset(ds.images[:, ::-1, ::-1].copy(), ds.labels.copy(), domain)


# -- sequences --------------------------------------------------------------

@dataclass
class LabeledSequence:
    frames: np.ndarray                      # (T, f)
    labels: np.ndarray                      # (T,) class index
    weights: np.ndarray                     # (T,)
    maneuvers: list = field(default_factory=list)   # [(direction "L"/"R", exec_frame)]
    frame_rate: float = 10.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim == 1:
            self.frames = self.frames[:, None]
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        n = len(self.frames)
        if len(self.labels) != n or len(self.weights) != n:
            raise ValueError("frames, labels and weights must have equal length")
        if np.any(self.weights < 0):
            raise ValueError("frame weights must be nonnegative")
        self.maneuvers = [(str(d), int(e)) for d, e in self.maneuvers]

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def has_lane_change(self) -> bool:
        return bool(self.maneuvers)


@dataclass
class SequenceDataset:
    sequences: list
    classes: tuple = TOY_CLASSES
    domain: str = "A"

    def __len__(self) -> int:
        return len(self.sequences)

    def __getitem__(self, i) -> LabeledSequence:
        return self.sequences[i]

    def __iter__(self):
        return iter(self.sequences)

    @property
    def n_features(self) -> int:
        return self.sequences[0].frames.shape[1]

    @property
    def frame_rate(self) -> float:
        return self.sequences[0].frame_rate

    def subset(self, idx) -> "SequenceDataset":
        return SequenceDataset([self.sequences[int(i)] for i in idx], self.classes, self.domain)

    def map_frames(self, fn, domain: str | None = None) -> "SequenceDataset":
        seqs = [replace(s, frames=fn(s.frames)) for s in self.sequences]
        return SequenceDataset(seqs, self.classes, domain or self.domain)


def maneuver_class(direction: str, classes: Sequence[str]) -> int:
    if "C" in classes:
        return list(classes).index("C")
    return list(classes).index(direction)


def stack_sequences(ds: SequenceDataset) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Pad to a common length: frames (N, T, f), labels (N, T), weights (N, T), valid mask (N, T)."""
    t_max = max(len(s) for s in ds)
    n, f = len(ds), ds.n_features
    frames = np.zeros((n, t_max, f))
    labels = np.zeros((n, t_max), dtype=np.int64)
    weights = np.zeros((n, t_max))
    valid = np.zeros((n, t_max))
    for i, s in enumerate(ds):
        t = len(s)
        frames[i, :t], labels[i, :t], weights[i, :t], valid[i, :t] = s.frames, s.labels, s.weights, 1.0
    return frames, labels, weights, valid


@dataclass
class ToyConfig:
    frame_rate: float = 10.0
    length_s: float = 15.0
    p_lane_change: float = 0.5
    transition_s: float = 2.0
    sigma_noise: float = 0.05
    horizon_s: float = 3.0
    ignore_s: float = 0.5
    post_ignore_s: float = 1.5
    alpha: float = 1.0
    wander_amplitude: float = 0.1
    wander_period_s: tuple = (3.0, 8.0)
    with_velocity: bool = False
    sigma_noise_v: float = 0.2

    def validate(self) -> None:
        if self.sigma_noise < 0 or self.sigma_noise_v < 0:
            raise ValueError("noise levels must be nonnegative")
        if min(self.frame_rate, self.length_s, self.transition_s, self.horizon_s) <= 0:
            raise ValueError("rates and durations must be positive")
        if self.ignore_s < 0 or self.post_ignore_s < 0:
            raise ValueError("ignore durations must be nonnegative")
        if not 0 <= self.p_lane_change <= 1:
            raise ValueError("p_lane_change must be a probability")
        earliest, latest = self.exec_frame_range()
        if earliest > latest:
            raise ValueError("sequence too short for a labelled lane change")

    @property
    def length(self) -> int:
        return int(round(self.length_s * self.frame_rate))

    def exec_frame_range(self) -> tuple[int, int]:
        first = math.ceil((self.horizon_s + self.ignore_s) * self.frame_rate) + 1
        last = self.length - math.ceil(max(self.post_ignore_s, self.transition_s / 2) * self.frame_rate) - 1
        return first, last


def _toy_trajectory(cfg: ToyConfig, rng: np.random.Generator):
    """Lateral position in lane units (0.5 = lane centre), plus maneuvers."""
    n = cfg.length
    t = np.arange(n) / cfg.frame_rate
    amp = rng.uniform(0.0, cfg.wander_amplitude)
    period = rng.uniform(*cfg.wander_period_s)
    phase = rng.uniform(0.0, 2 * np.pi)
    q = 0.5 + amp * np.sin(2 * np.pi * t / period + phase)
    maneuvers = []
    if rng.random() < cfg.p_lane_change:
        direction = "L" if rng.random() < 0.5 else "R"
        sign = -1.0 if direction == "L" else 1.0
        first, last = cfg.exec_frame_range()
        centre = rng.integers(first + 2, last - 1)
        scale = cfg.transition_s / (2.0 * np.log(19.0))   # 5%..95% over transition_s
        q = q + sign / (1.0 + np.exp(-(t - centre / cfg.frame_rate) / scale))
        crossed = np.nonzero(q < 0.0)[0] if sign < 0 else np.nonzero(q > 1.0)[0]
        exec_frame = int(crossed[0])
        maneuvers.append((direction, exec_frame))
    return q, maneuvers


def toy_noise(cfg: ToyConfig, count: int, seed: int) -> np.ndarray:
    """The additive noise realization used for the noisy domain, (count, T, f)."""
    rng = np.random.default_rng([seed, 1])
    f = 2 if cfg.with_velocity else 1
    scales = np.array([cfg.sigma_noise, cfg.sigma_noise_v][:f])
    return rng.standard_normal((count, cfg.length, f)) * scales


def generate_toy_lane_changes(cfg: ToyConfig, domain: str, count: int, seed: int,
                              label: bool = True) -> SequenceDataset:
    """Simulate lane-following / lane-change sequences of the centre-line distance m.

    ``domain`` is ``"clean"`` or ``"noisy"``; both draw identical trajectories
    for the same seed, the noisy one adds clipped Gaussian noise.
    """
    if count <= 0:
        raise ValueError("count must be positive")
    if domain not in ("clean", "noisy"):
        raise ValueError(f"domain must be 'clean' or 'noisy', got {domain!r}")
    cfg.validate()
    # exec frames are read off the trajectory; redraw in the rare case a wandering
    # start pushes the crossing outside the labelled range
    rng = np.random.default_rng([seed, 0])
    first, last = cfg.exec_frame_range()
    seqs = []
    while len(seqs) < count:
        q, maneuvers = _toy_trajectory(cfg, rng)
        if maneuvers and not first <= maneuvers[0][1] <= last:
            continue
        m = q - np.floor(q)
        feats = [m]
        if cfg.with_velocity:
            feats.append(np.gradient(q) * cfg.frame_rate)
        frames = np.stack(feats, axis=1)
        seqs.append(LabeledSequence(frames, np.zeros(len(m), dtype=np.int64), np.ones(len(m)),
                                    maneuvers, cfg.frame_rate))
    if domain == "noisy":
        noise = toy_noise(cfg, count, seed)
        for s, eps in zip(seqs, noise):
            noisy = s.frames + eps
            noisy[:, 0] = np.clip(noisy[:, 0], 0.0, 1.0)
            s.frames = noisy
    classes = LANE_CHANGE_CLASSES if cfg.with_velocity else TOY_CLASSES
    ds = SequenceDataset(seqs, classes, "B" if domain == "noisy" else "A")
    if label:
        ds = label_and_weight(ds, cfg.horizon_s, cfg.ignore_s, cfg.alpha, cfg.post_ignore_s)
    return ds


def label_and_weight(ds: SequenceDataset, horizon_s: float = 3.0, ignore_s: float = 0.5,
                     alpha: float = 1.0, post_ignore_s: float | None = None) -> SequenceDataset:
    """Assign per-frame labels and loss weights from maneuver annotations.

    Frames in [exec - horizon, exec) get the maneuver's class; ``ignore_s``
    before that window and ``post_ignore_s`` from the execution frame on get
    weight 0; everything else is F.  Weights are inverse class frequency, and
    maneuver frames are further scaled by exp(alpha * (1 - t_to_exec / horizon)).
    """
    if post_ignore_s is None:
        post_ignore_s = ignore_s
    out = []
    for s in ds:
        rate = s.frame_rate
        k_h = int(round(horizon_s * rate))
        k_pre, k_post = int(round(ignore_s * rate)), int(round(post_ignore_s * rate))
        n = len(s)
        labels = np.zeros(n, dtype=np.int64)
        active = np.ones(n, dtype=bool)
        to_exec = np.full(n, np.nan)
        prev_end = -1
        for direction, e in sorted(s.maneuvers, key=lambda m: m[1]):
            onset = e - k_h
            if onset - k_pre < prev_end:
                raise ValueError(f"maneuvers closer than the labelling window (exec frame {e})")
            lo = max(onset, 0)
            labels[lo:e] = maneuver_class(direction, ds.classes)
            to_exec[lo:e] = (e - np.arange(lo, e)) / rate
            active[max(onset - k_pre, 0):lo] = False
            active[e:min(e + k_post, n)] = False
            prev_end = e + k_post
        out.append((s, labels, active, to_exec))

    counts = np.zeros(len(ds.classes))
    for _, labels, active, _ in out:
        counts += np.bincount(labels[active], minlength=len(ds.classes))
    present = counts > 0
    class_w = np.zeros(len(ds.classes))
    class_w[present] = counts.sum() / (present.sum() * counts[present])

    seqs = []
    for s, labels, active, to_exec in out:
        w = class_w[labels] * active
        lc = labels != 0
        w[lc] *= np.exp(alpha * (1.0 - to_exec[lc] / horizon_s))
        seqs.append(replace(s, labels=labels, weights=w))
    return SequenceDataset(seqs, ds.classes, ds.domain)


# -- subsampling --------------------------------------------------------------

def permutation(n: int, seed: int) -> np.ndarray:
    return np.random.default_rng([seed, 2]).permutation(n)


def limit_dataset(ds, b: int, seed: int):
    """First ``b`` elements of a seed-determined permutation (nested in ``b``)."""
    if b > len(ds):
        raise ValueError(f"cannot limit a dataset of {len(ds)} samples to b={b}")
    if b <= 0:
        raise ValueError("b must be positive")
    return ds.subset(permutation(len(ds), seed)[:b])


def split_dataset(ds, test_fraction: float, seed: int):
    """Seeded (train, test) split; the test side is the permutation's tail."""
    perm = np.random.default_rng([seed, 3]).permutation(len(ds))
    n_test = int(round(len(ds) * test_fraction))
    return ds.subset(perm[:len(ds) - n_test]), ds.subset(perm[len(ds) - n_test:])


# -- delimited sequence files ------------------------------------------------

def write_sequence_file(path, seq: LabeledSequence, classes: Sequence[str] = LANE_CHANGE_CLASSES) -> None:
    """``frame_rate=<Hz>`` header, ``# lc,<L|R>,<exec>`` comments, rows ``m,v,label,weight``."""
    lines = [f"frame_rate={seq.frame_rate:g}"]
    lines += [f"# lc,{d},{e}" for d, e in seq.maneuvers]
    frames = seq.frames
    if frames.shape[1] == 1:
        v = np.gradient(frames[:, 0]) * seq.frame_rate
        frames = np.column_stack([frames[:, 0], v])
    directions = _frame_directions(seq, classes)
    for row, lab, w in zip(frames, directions, seq.weights):
        lines.append(f"{float(row[0])!r},{float(row[1])!r},{lab},{float(w)!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def _frame_directions(seq: LabeledSequence, classes: Sequence[str]) -> list[str]:
    names = list(classes)
    letters = [names[l] for l in seq.labels]
    if "C" not in names:
        return letters
    # map the generic change class back to the direction of the maneuver it precedes
    out = list(letters)
    for d, e in seq.maneuvers:
        for i in range(e - 1, -1, -1):
            if out[i] != "C":
                break
            out[i] = d
    return ["F" if l == "C" else l for l in out]


def read_sequence_file(path, classes: Sequence[str] = LANE_CHANGE_CLASSES,
                       features: Sequence[str] = ("m", "v")) -> LabeledSequence:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith("frame_rate="):
        raise ValueError(f"{path}: first line must be 'frame_rate=<Hz>'")
    rate = float(text[0].split("=", 1)[1])
    if rate <= 0:
        raise ValueError(f"{path}: frame rate must be positive")
    maneuvers, rows, labels, weights = [], [], [], []
    names = list(classes)
    for lineno, line in enumerate(text[1:], start=2):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = [p.strip() for p in line[1:].split(",")]
            if len(parts) != 3 or parts[0] != "lc" or parts[1] not in ("L", "R"):
                raise ValueError(f"{path}:{lineno}: bad maneuver annotation {line!r}")
            maneuvers.append((parts[1], int(parts[2])))
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 'm,v,label,weight'")
        m, v, lab, w = parts
        if lab not in ("F", "L", "R"):
            raise ValueError(f"{path}:{lineno}: unknown label {lab!r}")
        rows.append((float(m), float(v)))
        labels.append(names.index("C") if "C" in names and lab != "F" else names.index(lab))
        weights.append(float(w))
    cols = [("m", "v").index(f) for f in features]
    frames = np.asarray(rows, dtype=np.float64)[:, cols]
    return LabeledSequence(frames, labels, weights, maneuvers, rate)


def load_sequence_dir(path, classes: Sequence[str] = LANE_CHANGE_CLASSES,
                      features: Sequence[str] = ("m", "v"), domain: str = "A") -> SequenceDataset:
    files = sorted(Path(path).glob("*.csv"))
    if not files:
        raise FileNotFoundError(f"no sequence files (*.csv) in {path}")
    return SequenceDataset([read_sequence_file(f, classes, features) for f in files], tuple(classes), domain)


def write_sequence_dir(path, ds: SequenceDataset) -> list[Path]:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    width = max(5, len(str(len(ds))))
    out = []
    for i, s in enumerate(ds):
        p = root / f"seq_{i:0{width}d}.csv"
        write_sequence_file(p, s, ds.classes)
        out.append(p)
    return out
