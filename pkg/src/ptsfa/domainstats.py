"""Feature/confidence/label pools and per-class Gaussian statistics."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import EmptyInputError
from .model import encode_dataset, predict_batch

VARIANCE_RIDGE = 1e-6


@dataclass(frozen=True)
class DomainBank:
    """Detached snapshot of one domain under fixed parameters.

    ``labels`` are ground truth for the source domain and argmax
    pseudo-labels for the target domain.
    """

    features: np.ndarray
    confidences: np.ndarray
    labels: np.ndarray
    domain: str
    stage: int = -1

    def __len__(self):
        return len(self.labels)


@dataclass
class ClassStats:
    """Per-class mean and covariance.

    ``cov`` is (C, D) in diagonal mode or (C, D, D) in full mode. Rows of
    empty classes are zero and flagged in ``empty``.
    """

    mean: np.ndarray
    cov: np.ndarray
    count: np.ndarray

    @property
    def empty(self):
        return self.count == 0

    @property
    def diagonal(self):
        return self.cov.ndim == 2

    @property
    def num_classes(self):
        return len(self.count)


def refresh_bank(dataset, params, domain, stage=-1):
    """Run inference over a whole split and freeze the resulting pools."""
    if len(dataset) == 0:
        raise EmptyInputError(f"cannot build a {domain} bank from an empty dataset")
    feats = encode_dataset(dataset.points, params)
    _, conf, pred = predict_batch(feats, params)
    labels = dataset.labels.copy() if domain == "source" else pred.astype(np.int64)
    for arr in (feats, conf, labels):
        arr.setflags(write=False)
    return DomainBank(feats, conf, labels, domain, stage)


def class_stats(features, labels, num_classes, indices=None, full=False, eps=VARIANCE_RIDGE):
    """Mean and population covariance per class, with ``eps`` added on the diagonal.

    ``indices`` restricts the computation to a subset of rows.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if indices is not None:
        indices = np.asarray(indices, dtype=np.int64)
        features, labels = features[indices], labels[indices]
    D = features.shape[1]
    mean = np.zeros((num_classes, D))
    cov = np.zeros((num_classes, D, D) if full else (num_classes, D))
    count = np.bincount(labels, minlength=num_classes)[:num_classes]
    for c in range(num_classes):
        if count[c] == 0:
            continue
        x = features[labels == c]
        mu = x.mean(axis=0)
        centred = x - mu
        mean[c] = mu
        if full:
            cov[c] = centred.T @ centred / count[c] + eps * np.eye(D)
        else:
            cov[c] = (centred**2).mean(axis=0) + eps
    return ClassStats(mean, cov, count)


def write_stats_csv(rows, path):
    """Append-style diagnostic dump: one row per (stage, domain, class)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "domain", "class", "count", "mean_norm", "cov_trace"])
        for stage, domain, stats in rows:
            for c in range(stats.num_classes):
                tr = stats.cov[c].sum() if stats.diagonal else np.trace(stats.cov[c])
                w.writerow([stage, domain, c, int(stats.count[c]),
                            f"{np.linalg.norm(stats.mean[c]):.6g}", f"{tr:.6g}"])
