"""Lane-change metrics (Frequency, Delay, Miss), the aggregated Score and
classification accuracy."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .data import SequenceDataset, maneuver_class


@dataclass
class MetricsReport:
    frequency: float = float("nan")
    delay_s: float = float("nan")
    miss: float = float("nan")
    accuracy: float | None = None
    n_events: int = 0
    n_detected: int = 0
    n_false_episodes: int = 0
    n_follow_frames: int = 0
    n_change_frames: int = 0

    def as_dict(self) -> dict:
        return asdict(self)

    @property
    def follow_share(self) -> float:
        return self.n_follow_frames / (self.n_follow_frames + self.n_change_frames)

    @property
    def change_share(self) -> float:
        return self.n_change_frames / (self.n_follow_frames + self.n_change_frames)


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Maximal [start, end) runs of True."""
    padded = np.concatenate([[False], mask, [False]])
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    return list(zip(edges[0::2], edges[1::2]))


def false_episodes(pred: np.ndarray, labels: np.ndarray, weights: np.ndarray) -> int:
    """Runs of non-F predictions lying entirely inside F-labelled, weighted frames."""
    follow = (labels == 0) & (weights > 0)
    return sum(1 for a, b in _runs(pred != 0) if follow[a:b].all())


def evaluate_lane_change(predictions: Sequence[np.ndarray], ds: SequenceDataset,
                         horizon_s: float = 3.0) -> MetricsReport:
    """Score per-frame class predictions (one array per sequence) against ``ds``."""
    if len(predictions) != len(ds):
        raise ValueError(f"{len(predictions)} prediction arrays for {len(ds)} sequences")
    n_events = n_detected = n_false = 0
    delay_total = Fraction(0)
    n_follow = n_change = 0
    correct = counted = 0
    for pred, seq in zip(predictions, ds):
        pred = np.asarray(pred, dtype=np.int64)
        if pred.shape != seq.labels.shape:
            raise ValueError("predictions are not aligned with the sequence frames")
        active = seq.weights > 0
        n_follow += int(((seq.labels == 0) & active).sum())
        n_change += int(((seq.labels != 0) & active).sum())
        correct += int((pred[active] == seq.labels[active]).sum())
        counted += int(active.sum())
        n_false += false_episodes(pred, seq.labels, seq.weights)
        k_h = int(round(horizon_s * seq.frame_rate))
        for direction, e in seq.maneuvers:
            n_events += 1
            onset = max(e - k_h, 0)
            hits = np.flatnonzero(pred[onset:e] == maneuver_class(direction, ds.classes))
            if hits.size:
                n_detected += 1
                delay_total += Fraction(int(hits[0])) / Fraction(float(seq.frame_rate))
    if n_events == 0:
        raise ValueError("Frequency is undefined without ground-truth lane changes")
    # exact arithmetic keeps Delay independent of sequence order, rounded once
    delay = float(delay_total / n_detected) if n_detected else float("nan")
    return MetricsReport(
        frequency=n_false / n_events,
        delay_s=delay,
        miss=(n_events - n_detected) / n_events,
        accuracy=correct / counted if counted else None,
        n_events=n_events,
        n_detected=n_detected,
        n_false_episodes=n_false,
        n_follow_frames=n_follow,
        n_change_frames=n_change,
    )


def aggregate_score(report: MetricsReport, baseline: MetricsReport,
                    s_f: float | None = None, s_lc: float | None = None) -> float:
    """Share-weighted sum of relative improvements over ``baseline``.

    s_f weights Frequency, s_lc weights Delay and Miss each.  Defaults are the
    fractions of weighted frames labelled F and L/R in the report's test set.
    """
    if s_f is None or s_lc is None:
        total = report.n_follow_frames + report.n_change_frames
        if total == 0:
            raise ValueError("no labelled frames to derive class shares from")
        s_f = report.n_follow_frames / total if s_f is None else s_f
        s_lc = report.n_change_frames / total if s_lc is None else s_lc
    for name in ("frequency", "delay_s", "miss"):
        if getattr(baseline, name) == 0:
            raise ZeroDivisionError(f"baseline {name} is 0; relative change undefined")
    return (s_f * (baseline.frequency - report.frequency) / baseline.frequency
            + s_lc * (baseline.delay_s - report.delay_s) / baseline.delay_s
            + s_lc * (baseline.miss - report.miss) / baseline.miss)


def evaluate_classification(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError("predictions and labels differ in length")
    if labels.size == 0:
        raise ValueError("cannot compute accuracy of an empty set")
    return float((predictions == labels).mean())
