"""Batch augmentations: time/frequency shift, time mask, mixup, and
piecewise-linear per-frequency gain.

The mean-teacher step splits these into two stages: geometry-changing
augmentations (shift, mixup) are drawn once and shared by student and
teacher so their output grids stay aligned, while label-preserving
perturbations (time mask, filter gain) are drawn independently per view.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch

from .batch import Batch

# dB-to-log-power factor: a gain of g dB adds g * ln(10) / 10 to log(power)
_DB_TO_LOG = math.log(10.0) / 10.0


@dataclass
class AugmentConfig:
    time_shift: bool = True
    max_shift_frames: int = 90    # input frames; 4 input frames = 1 output frame
    freq_shift: bool = True
    max_freq_bins: int = 2
    time_mask: bool = True
    max_mask_frames: int = 100
    mixup: bool = True
    mixup_alpha: float = 0.2
    filter_aug: bool = True
    filter_knots: tuple = (2, 5)
    filter_db: float = 6.0
    logmel_channels: tuple = (0, 1)  # filter gain skips the DCT channel

    @classmethod
    def disabled(cls):
        return cls(time_shift=False, freq_shift=False, time_mask=False,
                   mixup=False, filter_aug=False)


def shift_time(batch: Batch, rng, config: AugmentConfig) -> Batch:
    """Circular shift along input frames; strong grids follow at 1/4 rate."""
    out = batch.clone()
    ratio = out.features.shape[2] / max(out.strong.shape[1], 1)
    for i in range(out.size):
        n = int(rng.integers(-config.max_shift_frames, config.max_shift_frames + 1))
        if n == 0:
            continue
        out.features[i] = torch.roll(out.features[i], shifts=n, dims=1)
        out.strong[i] = torch.roll(out.strong[i], shifts=int(round(n / ratio)), dims=0)
    return out


def shift_freq(batch: Batch, rng, config: AugmentConfig) -> Batch:
    out = batch.clone()
    for i in range(out.size):
        n = int(rng.integers(-config.max_freq_bins, config.max_freq_bins + 1))
        if n != 0:
            out.features[i] = torch.roll(out.features[i], shifts=n, dims=2)
    return out


def mask_time(batch: Batch, rng, config: AugmentConfig) -> Batch:
    """Zero one contiguous span of input frames per example."""
    out = batch.clone()
    n_frames = out.features.shape[2]
    for i in range(out.size):
        span = int(rng.integers(0, config.max_mask_frames + 1))
        if span == 0:
            continue
        start = int(rng.integers(0, n_frames - span + 1))
        out.features[i, :, start:start + span, :] = 0.0
    return out


def mixup(batch: Batch, rng, config: AugmentConfig, lam=None) -> Batch:
    """Convex combination of feature tensors and label grids, pairing
    examples only within the same source."""
    out = batch.clone()
    groups = {}
    for i, source in enumerate(out.sources):
        groups.setdefault(source, []).append(i)
    for indices in groups.values():
        if len(indices) < 2:
            continue
        partners = [indices[j] for j in rng.permutation(len(indices))]
        for i, j in zip(indices, partners):
            lam_i = float(rng.beta(config.mixup_alpha, config.mixup_alpha)) \
                if lam is None else float(lam)
            if i == j or lam_i == 1.0:
                continue
            out.features[i] = lam_i * batch.features[i] + (1 - lam_i) * batch.features[j]
            out.strong[i] = lam_i * batch.strong[i] + (1 - lam_i) * batch.strong[j]
            out.weak[i] = lam_i * batch.weak[i] + (1 - lam_i) * batch.weak[j]
            out.soft[i] = lam_i * batch.soft[i] + (1 - lam_i) * batch.soft[j]
    return out


def filter_gain(batch: Batch, rng, config: AugmentConfig) -> Batch:
    """Add a random piecewise-linear per-frequency gain (in dB) to the
    log-mel channels."""
    out = batch.clone()
    n_bins = out.features.shape[3]
    for i in range(out.size):
        n_knots = int(rng.integers(config.filter_knots[0], config.filter_knots[1] + 1))
        interior = sorted(rng.choice(np.arange(1, n_bins - 1),
                                     size=max(n_knots - 2, 0), replace=False))
        positions = np.array([0, *interior, n_bins - 1], dtype=np.float64)
        gains_db = rng.uniform(-config.filter_db, config.filter_db, size=len(positions))
        curve = np.interp(np.arange(n_bins), positions, gains_db) * _DB_TO_LOG
        offset = torch.as_tensor(curve, dtype=out.features.dtype)
        for ch in config.logmel_channels:
            out.features[i, ch] += offset
    return out


def augment_shared(batch: Batch, rng, config: AugmentConfig) -> Batch:
    """Geometry-changing stage, drawn once per step (shift + mixup)."""
    out = batch
    if config.time_shift:
        out = shift_time(out, rng, config)
    if config.freq_shift:
        out = shift_freq(out, rng, config)
    if config.mixup:
        out = mixup(out, rng, config)
    return out


def augment_view(batch: Batch, rng, config: AugmentConfig) -> Batch:
    """Label-preserving stage, drawn independently per student/teacher view."""
    out = batch
    if config.time_mask:
        out = mask_time(out, rng, config)
    if config.filter_aug:
        out = filter_gain(out, rng, config)
    return out


def augment(batch: Batch, rng, config: AugmentConfig = None) -> Batch:
    """Apply the full augmentation chain; identity when all are disabled."""
    config = config if config is not None else AugmentConfig()
    return augment_view(augment_shared(batch, rng, config), rng, config)
