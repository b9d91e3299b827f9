"""Experiment grid: per seed, train the base model on A, evaluate the reference
rows, then run every (method, b) grid point on subsets of B."""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .correspondence import aligned_partners, pair_by_label, pair_sequences
from .core.tensor import Tensor, no_grad
from .data import (ImageDataset, SequenceDataset, generate_toy_lane_changes, limit_dataset,
                   load_image_pool, load_sequence_dir, make_rotated_domain, permutation,
                   split_dataset, stack_sequences, LANE_CHANGE_CLASSES)
from .metrics import aggregate_score, evaluate_classification, evaluate_lane_change
from .models import Converter, Model, build_converter, build_model
from .pipeline import CoralTransform, TrainPlan, pretrain_converter, run_plan, train_full
from .transforms import follow_target, identity, make_euclidean

log = logging.getLogger(__name__)

REFERENCE_ROWS = ("A on B", "B on B")
B_SEED_OFFSET = 1_000_003   # toy domain B is drawn from a stream disjoint from A


# -- task adapters ----------------------------------------------------------------

class ImageTask:
    sequence = False

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg

    def load(self, seed: int):
        pool = load_image_pool(self.cfg.data_dir, self.cfg.image_source, self.cfg.max_images)
        perm = permutation(len(pool), seed)
        half = len(pool) // 2
        a = ImageDataset(pool.images[perm[:half]], pool.labels[perm[:half]], "A")
        b = make_rotated_domain(pool.subset(perm[half:]))
        a_train, a_test = split_dataset(a, self.cfg.test_fraction, seed)
        b_train, b_test = split_dataset(b, self.cfg.test_fraction, seed)
        return a_train, a_test, b_train, b_test

    def arrays(self, ds: ImageDataset) -> dict:
        return {"x": ds.images, "y": ds.labels}

    def model_spec(self, ds: ImageDataset) -> dict:
        h, w = ds.images.shape[1:]
        return {"kind": "cnn-classifier", "height": h, "width": w, "channels": self.cfg.channels,
                "classes": int(max(ds.labels.max() + 1, 10))}

    def converter_spec(self, ds: ImageDataset, direct: bool) -> dict:
        h, w = ds.images.shape[1:]
        if direct:
            return {"kind": "cnn-direct-converter", "height": h, "width": w,
                    "channels": self.cfg.converter_channels}
        return {"kind": "cnn-converter", "height": h, "width": w, "channels": self.cfg.converter_channels,
                "family": self.cfg.family or "euclidean", "activation": self.cfg.activation,
                "head_scale": self.cfg.head_scale}

    def target_fn(self, which: str):
        mat = (make_euclidean(math.pi) if which == "T2" else identity(2)).entries

        def fn(data, idx):
            return np.broadcast_to(mat, (len(idx), 3, 3)), None
        return fn

    def add_correspondences(self, data: dict, b_ds, a_ds, seed: int) -> None:
        corr = pair_by_label(b_ds.labels, a_ds.labels, self.cfg.n_corr, seed)
        data["partners"] = a_ds.images[corr.partners]

    def evaluate(self, model: Model, convert, ds: ImageDataset, baseline=None) -> dict:
        x = convert(ds.images)
        return {"accuracy": evaluate_classification(model.predict(x), ds.labels)}

    def converted_rows(self, convert, ds: ImageDataset, partners_ds, count: int):
        rows = []
        x = ds.images[:count]
        conv = convert(x)
        for i in range(len(x)):
            for p, (vin, vout) in enumerate(zip(x[i].ravel(), conv[i].ravel())):
                rows.append((i, p, 0, int(ds.labels[i]), vin, vout, float("nan")))
        return rows


class SequenceTask:
    sequence = True

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg

    def load(self, seed: int):
        cfg = self.cfg
        if cfg.task == "toy-sequences":
            a = generate_toy_lane_changes(cfg.toy, "clean", cfg.n_a, seed)
            b = generate_toy_lane_changes(cfg.toy, "noisy", cfg.n_b, seed + B_SEED_OFFSET)
        else:
            if cfg.data_dir is None:
                raise FileNotFoundError("the lane-change task needs a data directory with A/ and B/")
            root = Path(cfg.data_dir)
            a = load_sequence_dir(root / "A", LANE_CHANGE_CLASSES, domain="A")
            b = load_sequence_dir(root / "B", LANE_CHANGE_CLASSES, domain="B")
        a_train, a_test = split_dataset(a, cfg.test_fraction, seed)
        b_train, b_test = split_dataset(b, cfg.test_fraction, seed)
        return a_train, a_test, b_train, b_test

    def arrays(self, ds: SequenceDataset) -> dict:
        x, y, w, valid = stack_sequences(ds)
        return {"x": x, "y": y, "w": w, "valid": valid}

    def model_spec(self, ds: SequenceDataset) -> dict:
        return {"kind": "lstm-tagger", "features": ds.n_features, "hidden": self.cfg.hidden,
                "classes": len(ds.classes)}

    def converter_spec(self, ds: SequenceDataset, direct: bool) -> dict:
        if direct:
            return {"kind": "direct-converter", "features": ds.n_features, "hidden": self.cfg.converter_hidden}
        return {"kind": "lstm-converter", "features": ds.n_features, "hidden": self.cfg.converter_hidden,
                "family": self.cfg.family or "affine", "activation": self.cfg.activation,
                "head_scale": self.cfg.head_scale}

    def target_fn(self, which: str, n_features: int):
        eye = identity(n_features).entries
        neutral = np.zeros(n_features)
        neutral[0] = 0.5
        follow = follow_target(neutral).entries

        def fn(data, idx):
            labels = data["y"][idx]
            if which == "T1":
                mats = np.broadcast_to(eye, labels.shape + eye.shape)
            else:
                mats = np.where((labels == 0)[..., None, None], follow, eye)
            return mats, data["valid"][idx]
        return fn

    def add_correspondences(self, data: dict, b_ds, a_ds, seed: int) -> None:
        corr = pair_sequences(b_ds, a_ds, self.cfg.n_corr, seed)
        frames, mask = aligned_partners(b_ds, a_ds, corr, data["x"].shape[1])
        data["partners"] = frames
        data["partner_mask"] = mask * data["valid"][:, None, :]

    def _predictions(self, model: Model, convert, ds: SequenceDataset) -> list[np.ndarray]:
        x, _, _, _ = stack_sequences(ds)
        pred = model.predict(convert(x), batch_size=256)
        return [pred[i, :len(s)] for i, s in enumerate(ds)]

    def evaluate(self, model: Model, convert, ds: SequenceDataset, baseline=None) -> dict:
        rep = evaluate_lane_change(self._predictions(model, convert, ds), ds, self.cfg.toy.horizon_s)
        out = rep.as_dict()
        out["report"] = rep
        return out

    def follow_band_share(self, convert, ds: SequenceDataset, lo: float = 0.4, hi: float = 0.6) -> float:
        """Share of converted follow frames (label F, weight > 0) whose m lies in [lo, hi]."""
        x, y, w, valid = stack_sequences(ds)
        m = convert(x)[..., 0]
        sel = (y == 0) & (w > 0) & (valid > 0)
        return float(((m[sel] >= lo) & (m[sel] <= hi)).mean())

    def converted_rows(self, convert, ds: SequenceDataset, partners, count: int):
        # lane changes first, then follow-only sequences
        order = [i for i, s in enumerate(ds) if s.maneuvers] + [i for i, s in enumerate(ds) if not s.maneuvers]
        order = order[:count]
        x, y, _, valid = stack_sequences(ds.subset(order))
        conv = convert(x)
        rows = []
        for i in range(len(order)):
            t_len = int(valid[i].sum())
            for t in range(t_len):
                for f in range(x.shape[2]):
                    rows.append((order[i], t, f, int(y[i, t]), x[i, t, f], conv[i, t, f],
                                 float("nan") if partners is None else partners[i][t, f]))
        return rows


def make_task(cfg: ExperimentConfig):
    return ImageTask(cfg) if cfg.task == "rotated-images" else SequenceTask(cfg)


# -- methods --------------------------------------------------------------------

def method_plan(method: str, cfg: ExperimentConfig, seed: int) -> TrainPlan:
    common = dict(lambda_corr=cfg.lambda_corr, pretrain_epochs=cfg.pretrain_epochs, corr_epochs=cfg.corr_epochs,
                  finetune_epochs=cfg.finetune_epochs, batch_size=cfg.batch_size, lr=cfg.lr,
                  finetune_lr=cfg.finetune_lr, patience=cfg.patience, val_fraction=cfg.val_fraction,
                  squared_corr=cfg.squared_corr, clip_norm=cfg.clip_norm, seed=seed)
    if method == "finetune":
        return TrainPlan(steps=("finetune",), mode="finetune-only", **common)
    if method == "coral":
        return TrainPlan(steps=("finetune",), mode="coral", **common)
    if method == "imp":
        return TrainPlan(steps=("correspondence", "finetune"), mode="imp", **common)
    kind, target = method.split("-")
    if kind == "ours":
        return TrainPlan(steps=("pretrain", "correspondence", "finetune"), mode=cfg.mode,
                         pretrain_target=target, **common)
    return TrainPlan(steps=("pretrain", "finetune"), mode=int(kind[-1]), pretrain_target=target, **common)


def base_plan(cfg: ExperimentConfig, seed: int) -> TrainPlan:
    return TrainPlan(steps=(), batch_size=cfg.batch_size, lr=cfg.base_lr or cfg.lr,
                     clip_norm=cfg.clip_norm, seed=seed)


def converter_fn(c: Converter | None, batch: int = 256):
    def convert(x: np.ndarray) -> np.ndarray:
        if c is None:
            return x
        out = []
        with no_grad():
            for i in range(0, len(x), batch):
                out.append(c.convert(Tensor(x[i:i + batch])).data)
        return np.concatenate(out)
    return convert


@dataclass
class SeedContext:
    """Everything grid points of one seed share: data splits and the base model."""
    seed: int
    a_train: object
    a_test: object
    b_train: object
    b_test: object
    base_state: dict
    model_spec: dict
    references: dict = field(default_factory=dict)
    history: dict = field(default_factory=dict)


def prepare_seed(cfg: ExperimentConfig, seed: int, base_state: dict | None = None) -> SeedContext:
    task = make_task(cfg)
    a_train, a_test, b_train, b_test = task.load(seed)
    spec = task.model_spec(a_train)
    plan = base_plan(cfg, seed)
    model = build_model(spec, seed)
    if base_state is not None:
        model.load_state(base_state)
    else:
        t0 = time.perf_counter()
        train_full(model, task.arrays(a_train), plan, cfg.base_epochs)
        log.info("seed %d: base model trained in %.1fs", seed, time.perf_counter() - t0)
    ctx = SeedContext(seed, a_train, a_test, b_train, b_test, model.state(), spec,
                      history={"base": plan.history.get("full", [])})
    ident = converter_fn(None)
    ctx.references["A on A"] = task.evaluate(model, ident, a_test)
    ctx.references["A on B"] = task.evaluate(model, ident, b_test)

    b_model = build_model(spec, seed)
    b_plan = base_plan(cfg, seed)
    train_full(b_model, task.arrays(b_train), b_plan, cfg.base_epochs)
    ctx.references["B on B"] = task.evaluate(b_model, ident, b_test)
    ctx.history["B on B"] = b_plan.history.get("full", [])
    return ctx


@dataclass
class GridResult:
    method: str
    b: int
    seed: int
    metrics: dict
    history: dict
    diagnostics: dict
    converted: list
    seconds: float


def run_grid_point(cfg: ExperimentConfig, ctx: SeedContext, method: str, b: int) -> GridResult:
    t0 = time.perf_counter()
    task = make_task(cfg)
    seed = ctx.seed
    b_ds = limit_dataset(ctx.b_train, b, seed)
    test = ctx.b_test
    data = task.arrays(b_ds)
    plan = method_plan(method, cfg, seed)
    model = build_model(ctx.model_spec, seed)
    model.load_state(ctx.base_state)

    converter = None
    transform = None
    if method == "coral":
        feats = (lambda ds: ds.images.reshape(len(ds), -1)) if not task.sequence else \
            (lambda ds: np.concatenate([s.frames for s in ds]))
        transform = CoralTransform.fit(feats(b_ds), feats(ctx.a_train), cfg.coral_ridge)
        data["x"] = transform(data["x"])
    elif method != "finetune":
        converter = build_converter(task.converter_spec(b_ds, direct=method == "imp"), seed)
    if "correspondence" in plan.steps or plan.mode in (1, "imp"):
        task.add_correspondences(data, b_ds, ctx.a_train, seed)
    target_fn = None
    if "pretrain" in plan.steps:
        target_fn = task.target_fn(plan.pretrain_target) if not task.sequence else \
            task.target_fn(plan.pretrain_target, b_ds.n_features)

    diagnostics = {}
    if task.sequence and "pretrain" in plan.steps:
        # follow-band share right after step 1, measured on the test split
        pretrain_converter(converter, data, target_fn, plan)
        diagnostics["follow_band_after_pretrain"] = task.follow_band_share(converter_fn(converter), test)
        plan.steps = tuple(s for s in plan.steps if s != "pretrain")
    run_plan(model, converter, data, plan, target_fn)

    if transform is not None:
        convert = transform
    else:
        convert = converter_fn(converter)
    metrics = task.evaluate(model, convert, test)
    if task.sequence and converter is not None:
        diagnostics["follow_band_final"] = task.follow_band_share(convert, test)
    converted = []
    if cfg.converted_samples > 0 and (converter is not None or transform is not None):
        partners = None
        if task.sequence:
            order = [i for i, s in enumerate(test) if s.maneuvers] + [i for i, s in enumerate(test) if not s.maneuvers]
            sub = test.subset(order[:cfg.converted_samples])
            tmp = task.arrays(sub)
            task.add_correspondences(tmp, sub, ctx.a_train, seed)
            covered = tmp["partner_mask"][:, 0, :, None] > 0
            partners = np.where(covered, tmp["partners"][:, 0], np.nan)
        converted = task.converted_rows(convert, test, partners, cfg.converted_samples)
    return GridResult(method, b, seed, metrics, plan.history, diagnostics, converted, time.perf_counter() - t0)


def _grid_worker(args):
    cfg, ctx, method, b = args
    return run_grid_point(cfg, ctx, method, b)


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    contexts: list
    results: list
    failures: list = field(default_factory=list)


def run_experiment(cfg: ExperimentConfig, jobs: int = 1, base_states: dict | None = None) -> ExperimentReport:
    """Run every (seed, method, b) grid point; ``base_states`` maps seed to a
    pre-trained base model state to skip training on A."""
    cfg.validate()
    contexts = [prepare_seed(cfg, s, (base_states or {}).get(s)) for s in cfg.seeds]
    points = [(cfg, ctx, m, b) for ctx in contexts for b in cfg.b_values for m in cfg.methods]
    for ctx in contexts:
        if max(cfg.b_values) > len(ctx.b_train):
            raise ValueError(f"b={max(cfg.b_values)} exceeds the {len(ctx.b_train)} training samples of domain B")
    results, failures = [], []
    if jobs > 1 and len(points) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_grid_worker, p) for p in points]
            for p, fut in zip(points, futures):
                try:
                    results.append(fut.result())
                except Exception as exc:   # noqa: BLE001 - reported per grid point
                    failures.append((p[1].seed, p[2], p[3], repr(exc)))
    else:
        for p in points:
            try:
                results.append(_grid_worker(p))
            except Exception as exc:   # noqa: BLE001
                log.exception("grid point failed")
                failures.append((p[1].seed, p[2], p[3], repr(exc)))
    return ExperimentReport(cfg, contexts, results, failures)


def score_against(metrics: dict, baseline: dict) -> float:
    if "report" not in metrics or "report" not in baseline:
        return float("nan")
    try:
        return aggregate_score(metrics["report"], baseline["report"])
    except ZeroDivisionError:
        return float("nan")
