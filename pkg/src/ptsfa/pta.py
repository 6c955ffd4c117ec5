"""Progressive target-approaching: stage schedule, selection, intermediate domains."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .domainstats import ClassStats, class_stats
from .errors import ConfigError, RangeError

log = logging.getLogger(__name__)


@dataclass
class StagePlan:
    total_epochs: int = 100
    warmup_epochs: int = 10
    epochs_per_stage: int = 5
    sigma_s0: float = 1.0
    sigma_t0: float = 0.0
    delta_sigma_s: float = 0.05
    delta_sigma_t: float = 0.05

    def __post_init__(self):
        if self.epochs_per_stage < 1:
            raise ConfigError("epochs_per_stage must be >= 1")
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ConfigError("warmup_epochs must lie in [0, total_epochs)")

    @property
    def num_stages(self):
        return math.ceil((self.total_epochs - self.warmup_epochs) / self.epochs_per_stage)

    def is_stage_start(self, epoch):
        k = stage_of_epoch(epoch, self)
        return k is not None and epoch == self.warmup_epochs + k * self.epochs_per_stage


def stage_of_epoch(epoch, plan):
    """Stage index of ``epoch``, or ``None`` during warm-up."""
    if not 0 <= epoch < plan.total_epochs:
        raise RangeError(f"epoch {epoch} outside [0, {plan.total_epochs})")
    if epoch < plan.warmup_epochs:
        return None
    return (epoch - plan.warmup_epochs) // plan.epochs_per_stage


def _clamp01(x):
    # rounding keeps e.g. 1.0 - 10 * 0.05 exactly at 0.5
    return min(1.0, max(0.0, round(x, 12)))


def ratios_for_stage(k, plan):
    """Source and target selection ratios for stage ``k``."""
    if k < 0:
        raise RangeError(f"stage index must be >= 0, got {k}")
    return (
        _clamp01(plan.sigma_s0 - k * plan.delta_sigma_s),
        _clamp01(plan.sigma_t0 + k * plan.delta_sigma_t),
    )


def keep_count(sigma, n):
    """round-half-up(sigma * n), but at least one member when sigma > 0 and n > 0."""
    if sigma <= 0 or n == 0:
        return 0
    return max(1, min(n, int(math.floor(sigma * n + 0.5))))


def select_samples(confidences, labels, sigma, num_classes):
    """Per class, the ``keep_count`` most confident indices.

    Ties in confidence are broken by ascending index, so selections at a
    larger ``sigma`` always contain those at a smaller one.
    """
    if not 0.0 <= sigma <= 1.0:
        raise RangeError(f"sigma must lie in [0, 1], got {sigma}")
    confidences = np.asarray(confidences)
    labels = np.asarray(labels)
    out = {}
    for c in range(num_classes):
        members = np.flatnonzero(labels == c)
        # lexsort: last key is primary
        order = members[np.lexsort((members, -confidences[members]))]
        out[c] = order[: keep_count(sigma, len(members))]
    return out


@dataclass
class IntermediateDomain:
    stats: ClassStats
    delta_mu: np.ndarray  # (C, D)
    cov: np.ndarray  # covariance used for augmentation, Sigma_s on degraded classes
    degraded: np.ndarray  # (C,) bool
    source_selected: dict
    target_selected: dict

    @property
    def mean(self):
        return self.stats.mean


def build_intermediate(source_bank, target_bank, sigma_s, sigma_t, source_stats, full=False):
    """Pool the selected source and target features of each class and compare to the source."""
    C = source_stats.num_classes
    src_sel = select_samples(source_bank.confidences, source_bank.labels, sigma_s, C)
    tgt_sel = select_samples(target_bank.confidences, target_bank.labels, sigma_t, C)

    feats = np.concatenate([source_bank.features, target_bank.features], axis=0)
    labels = np.concatenate([source_bank.labels, target_bank.labels])
    offset = len(source_bank)
    # row order kept as in the banks, so a whole-class selection reproduces
    # the source statistics bit for bit
    idx = np.sort(np.concatenate(
        [np.concatenate([src_sel[c] for c in range(C)]),
         offset + np.concatenate([tgt_sel[c] for c in range(C)])]
    ).astype(np.int64))

    stats = class_stats(feats, labels, C, indices=idx, full=full)
    degraded = stats.empty | source_stats.empty
    if degraded.all():
        raise ConfigError("every class is empty in the intermediate domain")
    delta = stats.mean - source_stats.mean
    cov = stats.cov.copy()
    delta[degraded] = 0.0
    cov[degraded] = source_stats.cov[degraded]
    if degraded.any():
        log.info("degraded classes in intermediate domain: %s", np.flatnonzero(degraded).tolist())
    return IntermediateDomain(stats, delta, cov, degraded, src_sel, tgt_sel)
