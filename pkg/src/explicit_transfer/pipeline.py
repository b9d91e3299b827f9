"""Converter pre-training, correspondence training, fine-tuning modes and CORAL.

Training data are passed as dicts of arrays:

* images: ``x`` (N, H, W), ``y`` (N,)
* sequences: ``x`` (N, T, f), ``y`` (N, T), ``w`` (N, T) loss weights,
  ``valid`` (N, T) frame mask

Correspondence partners are arrays aligned with ``x``: ``partners``
(N, n, *sample_shape) and, for sequences, ``partner_mask`` (N, n, T).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core.nn import cross_entropy, frobenius_loss
from .core.optim import OptimizerState, optimizer_step
from .core.tensor import Tensor, no_grad
from .correspondence import batch_correspondence_loss
from .data import ImageDataset, SequenceDataset
from .models import Converter, Model

log = logging.getLogger(__name__)

MODES = (0, 1, 2, "finetune-only", "imp", "coral")
STEPS = ("pretrain", "correspondence", "finetune")


@dataclass
class TrainPlan:
    steps: tuple = STEPS
    mode: object = 1
    pretrain_target: str = "T1"
    lambda_corr: float = 1.0
    pretrain_epochs: int = 20
    corr_epochs: int = 20
    finetune_epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    finetune_lr: float | None = None
    patience: int = 5
    val_fraction: float = 0.2
    squared_corr: bool = False
    clip_norm: float | None = None
    seed: int = 0
    history: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        unknown = set(self.steps) - set(STEPS)
        if unknown:
            raise ValueError(f"unknown steps {sorted(unknown)}")
        if self.mode == "imp" and "pretrain" in self.steps:
            raise ValueError("the imp baseline cannot be pre-trained (no matrix output)")
        if self.mode == 2 and "correspondence" in self.steps:
            raise ValueError("mode 2 excludes correspondence training")
        if self.mode in ("finetune-only", "coral") and set(self.steps) != {"finetune"}:
            raise ValueError(f"mode {self.mode} only has a fine-tuning step")
        if self.lambda_corr < 0:
            raise ValueError("lambda_corr must be nonnegative")
        if self.pretrain_target not in ("T1", "T2"):
            raise ValueError("pretrain_target must be T1 or T2")


def _is_sequence(data: dict) -> bool:
    return data["x"].ndim == 3 and "valid" in data


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _trainable(nets: dict[str, object]) -> dict[str, Tensor]:
    out = {}
    for prefix, net in nets.items():
        if net is None:
            continue
        for k, p in net.params.items():
            if p.requires_grad:
                out[f"{prefix}.{k}"] = p
    return out


def _step(params: dict[str, Tensor], loss: Tensor, state: OptimizerState) -> None:
    for p in params.values():
        p.grad = None
    loss.backward()
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    optimizer_step(params, grads, state)


# -- step 1 ------------------------------------------------------------------------

def pretrain_converter(c: Converter, data: dict, target_fn: Callable[[dict, np.ndarray], tuple],
                       plan: TrainPlan) -> Converter:
    """Regress the converter's matrices onto ``target_fn(data, idx)``.

    ``target_fn`` returns (targets, mask) for the batch indices ``idx``;
    targets match ``c.matrices(x)`` in shape, mask weights the matrices.
    """
    if c.output_mode != "matrix":
        raise ValueError("only matrix-mode converters can be pre-trained")
    if plan.pretrain_epochs <= 0:
        return c
    c.set_trainable()
    params = _trainable({"converter": c})
    state = OptimizerState(learning_rate=plan.lr, clip_norm=plan.clip_norm)
    rng = np.random.default_rng([plan.seed, 20])
    losses = []
    n = len(data["x"])
    for epoch in range(plan.pretrain_epochs):
        total = 0.0
        for idx in _batches(n, plan.batch_size, rng):
            targets, mask = target_fn(data, idx)
            mats = c.matrices(Tensor(data["x"][idx]))
            if targets.shape != mats.shape:
                raise ValueError(f"target matrices {targets.shape} do not match converter output {mats.shape}")
            loss = frobenius_loss(mats, targets, mask=mask)
            _step(params, loss, state)
            total += float(loss.data) * len(idx)
        losses.append(total / n)
        log.debug("pretrain epoch %d loss %.6f", epoch, losses[-1])
    plan.history.setdefault("pretrain", []).extend(losses)
    c.freeze()
    return c


def pretrain_error(c: Converter, data: dict, target_fn) -> float:
    """Mean Frobenius distance between converter output and targets."""
    with no_grad():
        idx = np.arange(len(data["x"]))
        targets, mask = target_fn(data, idx)
        return float(frobenius_loss(c.matrices(Tensor(data["x"])), targets, mask=mask).data)


# -- step 2 -----------------------------------------------------------------------

def _corr_loss(c: Converter, data: dict, idx: np.ndarray, plan: TrainPlan) -> Tensor:
    converted = c.convert(Tensor(data["x"][idx]))
    mask = data["partner_mask"][idx] if "partner_mask" in data else None
    return batch_correspondence_loss(converted, data["partners"][idx], mask,
                                     per_frame=mask is not None, squared=plan.squared_corr)


def correspondence_error(c: Converter, data: dict, idx: np.ndarray | None = None,
                         plan: TrainPlan | None = None) -> float:
    plan = plan or TrainPlan()
    idx = np.arange(len(data["x"])) if idx is None else idx
    with no_grad():
        return float(_corr_loss(c, data, idx, plan).data)


def train_correspondence(c: Converter, data: dict, plan: TrainPlan) -> Converter:
    """Minimize the mean correspondence loss with early stopping on a held-out split.

    The parameters of the epoch with the lowest held-out loss are restored.
    """
    n = len(data["x"])
    if n == 0 or "partners" not in data:
        raise ValueError("correspondence training needs a non-empty correspondence set")
    rng = np.random.default_rng([plan.seed, 21])
    perm = rng.permutation(n)
    n_val = int(round(n * plan.val_fraction)) if n >= 5 else 0
    val_idx, train_idx = np.sort(perm[:n_val]), perm[n_val:]
    c.set_trainable()
    params = _trainable({"converter": c})
    state = OptimizerState(learning_rate=plan.lr, clip_norm=plan.clip_norm)
    monitor = val_idx if n_val else train_idx
    best = correspondence_error(c, data, monitor, plan)
    best_state = c.state()
    stale = 0
    curve = []
    for epoch in range(plan.corr_epochs):
        total = 0.0
        for pos in _batches(len(train_idx), plan.batch_size, rng):
            idx = train_idx[pos]
            loss = _corr_loss(c, data, idx, plan)
            _step(params, loss, state)
            total += float(loss.data) * len(idx)
        val = correspondence_error(c, data, monitor, plan)
        curve.append({"train": total / len(train_idx), "heldout": val})
        log.debug("correspondence epoch %d train %.6f heldout %.6f", epoch, curve[-1]["train"], val)
        if val < best:
            best, best_state, stale = val, c.state(), 0
        else:
            stale += 1
            if stale >= plan.patience:
                break
    c.load_state(best_state)
    plan.history.setdefault("correspondence", []).extend(curve)
    c.freeze()
    return c


# -- step 3 ------------------------------------------------------------------------

def task_loss(m: Model, x: Tensor, data: dict, idx: np.ndarray) -> Tensor:
    logits = m.forward(x)
    if _is_sequence(data):
        return cross_entropy(logits, data["y"][idx], data["w"][idx], normalize="weight")
    return cross_entropy(logits, data["y"][idx], normalize="count")


def fine_tune(m: Model, c: Converter | None, data: dict, plan: TrainPlan) -> tuple[Model, Converter | None]:
    """Retrain the head of ``m`` (and, by mode, the converter) on target data."""
    mode = plan.mode
    if mode in ("finetune-only", "coral"):
        if c is not None:
            raise ValueError(f"mode {mode} does not use a converter")
    elif c is None:
        raise ValueError(f"mode {mode} requires a converter")
    if mode in (1, "imp") and plan.lambda_corr > 0 and "partners" not in data:
        raise ValueError(f"mode {mode} requires correspondences")
    if mode == "imp" and c.output_mode != "direct":
        raise ValueError("the imp baseline needs a direct-mode converter")

    m.set_trainable(m.head)
    if c is not None:
        if mode in (1, 2, "imp"):
            c.set_trainable()
        else:
            c.freeze()
    params = _trainable({"model": m, "converter": c})
    state = OptimizerState(learning_rate=plan.finetune_lr or plan.lr, clip_norm=plan.clip_norm)
    rng = np.random.default_rng([plan.seed, 22])
    use_corr = mode in (1, "imp") and "partners" in data
    curve = []
    n = len(data["x"])
    for epoch in range(plan.finetune_epochs):
        total = 0.0
        for idx in _batches(n, plan.batch_size, rng):
            x = Tensor(data["x"][idx])
            inp = c.convert(x) if c is not None else x
            loss = task_loss(m, inp, data, idx)
            if use_corr:
                loss = loss + plan.lambda_corr * _corr_loss(c, data, idx, plan)
            _step(params, loss, state)
            total += float(loss.data) * len(idx)
        curve.append(total / n)
        log.debug("finetune epoch %d loss %.6f", epoch, curve[-1])
    plan.history.setdefault("finetune", []).extend(curve)
    m.freeze()
    if c is not None:
        c.freeze()
    return m, c


def train_full(m: Model, data: dict, plan: TrainPlan, epochs: int) -> Model:
    """Train every parameter of ``m`` from its current state (domain-A base
    model, or the B-on-B reference)."""
    m.set_trainable()
    params = _trainable({"model": m})
    state = OptimizerState(learning_rate=plan.lr, clip_norm=plan.clip_norm)
    rng = np.random.default_rng([plan.seed, 23])
    curve = []
    n = len(data["x"])
    for epoch in range(epochs):
        total = 0.0
        for idx in _batches(n, plan.batch_size, rng):
            loss = task_loss(m, Tensor(data["x"][idx]), data, idx)
            _step(params, loss, state)
            total += float(loss.data) * len(idx)
        curve.append(total / n)
        log.debug("full training epoch %d loss %.6f", epoch, curve[-1])
    plan.history.setdefault("full", []).extend(curve)
    m.freeze()
    return m


def run_plan(m: Model, c: Converter | None, data: dict, plan: TrainPlan,
             target_fn=None) -> tuple[Model, Converter | None]:
    """Execute the enabled steps of ``plan`` in order."""
    plan.validate()
    if "pretrain" in plan.steps:
        if target_fn is None:
            raise ValueError("pre-training needs a target function")
        pretrain_converter(c, data, target_fn, plan)
    if "correspondence" in plan.steps:
        train_correspondence(c, data, plan)
    if "finetune" in plan.steps:
        fine_tune(m, c, data, plan)
    return m, c


# -- CORAL ---------------------------------------------------------------------------

def _sym_power(cov: np.ndarray, power: float, what: str) -> np.ndarray:
    vals, vecs = np.linalg.eigh(cov)
    if vals.min() <= 1e-12 * max(vals.max(), 1.0):
        raise np.linalg.LinAlgError(f"{what} covariance is singular; use ridge > 0")
    return (vecs * vals ** power) @ vecs.T


def coral_matrix(target: np.ndarray, source: np.ndarray, ridge: float = 1.0) -> np.ndarray:
    """A = (C_t + ridge I)^(-1/2) (C_s + ridge I)^(1/2) for row-vector features."""
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    d = target.shape[1]
    if source.shape[1] != d:
        raise ValueError("target and source feature dimensions differ")
    c_t = np.atleast_2d(np.cov(target, rowvar=False)) + ridge * np.eye(d)
    c_s = np.atleast_2d(np.cov(source, rowvar=False)) + ridge * np.eye(d)
    return _sym_power(c_t, -0.5, "target") @ _sym_power(c_s, 0.5, "source")


def _features(ds) -> np.ndarray:
    if isinstance(ds, ImageDataset):
        return ds.images.reshape(len(ds), -1)
    if isinstance(ds, SequenceDataset):
        return np.concatenate([s.frames for s in ds])
    arr = np.asarray(ds, dtype=np.float64)
    return arr[:, None] if arr.ndim == 1 else arr


def coral_align(target_ds, source_ds, ridge: float = 1.0):
    """Whiten target features with its covariance, re-colour with the source's.

    Accepts feature arrays (rows are observations), image datasets (pixels are
    features) or sequence datasets (every frame is an observation) and returns
    the same kind of object.
    """
    xt, xs = _features(target_ds), _features(source_ds)
    a = coral_matrix(xt, xs, ridge)
    if isinstance(target_ds, ImageDataset):
        return ImageDataset((xt @ a).reshape(target_ds.images.shape), target_ds.labels, target_ds.domain)
    if isinstance(target_ds, SequenceDataset):
        return target_ds.map_frames(lambda f: f @ a)
    out = xt @ a
    return out[:, 0] if np.ndim(target_ds) == 1 else out


@dataclass
class CoralTransform:
    """Standardize target features, align covariances to the standardized
    source, then map back to the source's scale."""
    mean_t: np.ndarray
    std_t: np.ndarray
    mean_s: np.ndarray
    std_s: np.ndarray
    matrix: np.ndarray

    @classmethod
    def fit(cls, target: np.ndarray, source: np.ndarray, ridge: float = 1.0) -> "CoralTransform":
        def stats(x):
            mu, sd = x.mean(axis=0), x.std(axis=0)
            return mu, np.where(sd > 1e-12, sd, 1.0)
        mt, st = stats(target)
        ms, ss = stats(source)
        a = coral_matrix((target - mt) / st, (source - ms) / ss, ridge)
        return cls(mt, st, ms, ss, a)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        shape = x.shape
        flat = x.reshape(-1, self.matrix.shape[0])
        z = ((flat - self.mean_t) / self.std_t) @ self.matrix
        return (z * self.std_s + self.mean_s).reshape(shape)
