"""Loosely coupled correspondences between a target and a source domain and
the correspondence loss (mean L2 distance to the partners)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core.nn import l2_norm
from .core.tensor import Tensor, as_tensor
from .data import SequenceDataset


@dataclass
class CorrespondenceSet:
    partners: np.ndarray            # (N, n) source indices per target sample
    shifts: np.ndarray | None = None  # (N, n) frame offset target_frame - source_frame

    def __post_init__(self):
        self.partners = np.asarray(self.partners, dtype=np.int64)
        if self.partners.ndim != 2 or self.partners.shape[1] == 0:
            raise ValueError("partners must have shape (N, n) with n >= 1")
        if self.shifts is not None:
            self.shifts = np.asarray(self.shifts, dtype=np.int64)
            if self.shifts.shape != self.partners.shape:
                raise ValueError("shifts must match partners")

    @property
    def n(self) -> int:
        return self.partners.shape[1]

    def __len__(self) -> int:
        return len(self.partners)

    def subset(self, idx) -> "CorrespondenceSet":
        idx = np.asarray(idx, dtype=np.int64)
        return CorrespondenceSet(self.partners[idx], None if self.shifts is None else self.shifts[idx])


def _draw(rng: np.random.Generator, candidates: np.ndarray, n: int) -> np.ndarray:
    return rng.choice(candidates, size=n, replace=len(candidates) < n)


def pair_by_label(target_labels, source_labels, n: int, seed: int) -> CorrespondenceSet:
    """For each target sample draw ``n`` source samples with the same label."""
    if n <= 0:
        raise ValueError("n must be positive")
    target_labels = np.asarray(getattr(target_labels, "labels", target_labels))
    source_labels = np.asarray(getattr(source_labels, "labels", source_labels))
    by_label = {lab: np.flatnonzero(source_labels == lab) for lab in np.unique(source_labels)}
    rng = np.random.default_rng([seed, 4])
    partners = np.zeros((len(target_labels), n), dtype=np.int64)
    for i, lab in enumerate(target_labels):
        cands = by_label.get(lab)
        if cands is None:
            raise ValueError(f"label {lab} does not occur in the source domain")
        partners[i] = _draw(rng, cands, n)
    return CorrespondenceSet(partners)


def pair_sequences(target_ds: SequenceDataset, source_ds: SequenceDataset, n: int,
                   seed: int) -> CorrespondenceSet:
    """Follow-only targets get random follow-only partners; lane changes get the
    ``n`` same-direction source lane changes whose execution frames are closest
    (ties by source index).  Alignment uses each sequence's first maneuver."""
    if n <= 0:
        raise ValueError("n must be positive")
    follow_only = np.array([i for i, s in enumerate(source_ds) if not s.maneuvers], dtype=np.int64)
    changes: dict[str, list[tuple[int, int]]] = {"L": [], "R": []}
    for i, s in enumerate(source_ds):
        if s.maneuvers:
            d, e = s.maneuvers[0]
            changes[d].append((i, e))
    rng = np.random.default_rng([seed, 5])
    partners = np.zeros((len(target_ds), n), dtype=np.int64)
    shifts = np.zeros((len(target_ds), n), dtype=np.int64)
    for i, s in enumerate(target_ds):
        if not s.maneuvers:
            if follow_only.size == 0:
                raise ValueError("source domain has no follow-only sequences")
            partners[i] = _draw(rng, follow_only, n)
            continue
        d, e = s.maneuvers[0]
        cands = changes[d]
        if not cands:
            raise ValueError(f"source domain has no lane changes to the {d}")
        ranked = sorted(cands, key=lambda c: (abs(e - c[1]), c[0]))
        picked = [ranked[k % len(ranked)] for k in range(n)]
        partners[i] = [c[0] for c in picked]
        shifts[i] = [e - c[1] for c in picked]
    return CorrespondenceSet(partners, shifts)


def aligned_partners(target_ds: SequenceDataset, source_ds: SequenceDataset,
                     corr: CorrespondenceSet, length: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Partner frames shifted onto the target's time axis.

    Returns frames (N, n, T, f) and a mask (N, n, T) that is 0 on padding,
    where a shifted partner does not cover the target frame.
    """
    t_len = length or max(len(s) for s in target_ds)
    f = source_ds.n_features
    frames = np.zeros((len(corr), corr.n, t_len, f))
    mask = np.zeros((len(corr), corr.n, t_len))
    for i in range(len(corr)):
        t_target = min(len(target_ds[i]), t_len)
        for k in range(corr.n):
            src = source_ds[int(corr.partners[i, k])]
            shift = 0 if corr.shifts is None else int(corr.shifts[i, k])
            lo = max(0, shift)
            hi = min(t_target, len(src) + shift)
            if hi > lo:
                frames[i, k, lo:hi] = src.frames[lo - shift:hi - shift]
                mask[i, k, lo:hi] = 1.0
    return frames, mask


def batch_correspondence_loss(converted: Tensor, partners, mask=None, per_frame: bool = False,
                              squared: bool = False) -> Tensor:
    """Mean over the batch of (1/n) * sum_i ||converted - partner_i||.

    converted: (B, *S); partners: (B, n, *S).  With ``per_frame`` the sample
    shape is (T, f): norms are taken per frame and summed over frames,
    weighted by ``mask`` (B, n, T).
    """
    partners = as_tensor(partners)
    if partners.ndim != converted.ndim + 1 or partners.shape[0] != converted.shape[0] \
            or partners.shape[2:] != converted.shape[1:]:
        raise ValueError(f"partners {partners.shape} do not match converted samples {converted.shape}")
    b, n = partners.shape[:2]
    if n == 0:
        raise ValueError("at least one partner is required")
    diff = converted.reshape((b, 1) + converted.shape[1:]) - partners
    if per_frame:
        dist = (diff * diff).sum(axis=-1) if squared else l2_norm(diff, axis=-1)   # (B, n, T)
        if mask is not None:
            dist = dist * np.asarray(mask, dtype=np.float64)
        per_partner = dist.sum(axis=-1)
    else:
        flat = diff.reshape((b, n, -1))
        per_partner = (flat * flat).sum(axis=-1) if squared else l2_norm(flat, axis=-1)
    return per_partner.mean()


def correspondence_loss(converted, partners, mask=None, per_frame: bool = False,
                        squared: bool = False) -> Tensor:
    """Loss of a single converted sample against its ``n`` partners (n, *S)."""
    converted = as_tensor(converted)
    partners = as_tensor(partners)
    if partners.shape[1:] != converted.shape:
        raise ValueError(f"partner shape {partners.shape[1:]} differs from sample shape {converted.shape}")
    if partners.shape[0] == 0:
        raise ValueError("at least one partner is required")
    batch_mask = None if mask is None else np.asarray(mask)[None]
    return batch_correspondence_loss(converted.reshape((1,) + converted.shape),
                                     partners.reshape((1,) + partners.shape),
                                     batch_mask, per_frame, squared)
