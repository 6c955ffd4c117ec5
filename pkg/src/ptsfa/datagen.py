"""Synthetic point-cloud domains and the PCDS on-disk format.

Five parametric surface families (sphere, cube, cylinder, cone, torus) make
up the clean source domain. A :class:`ShiftRecipe` corrupts clouds into a
target domain: anisotropic scaling, one-sided occlusion, density-biased
dropout with re-padding, and Gaussian jitter, applied in that order.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateSampleError, FormatError, RangeError

CATEGORIES = ("sphere", "cube", "cylinder", "cone", "torus")

MAGIC = b"PCDS"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")


@dataclass
class PointCloudSample:
    points: np.ndarray
    label: int


@dataclass
class PointCloudDataset:
    """A rectangular stack of samples: ``points`` is (N, m, 3), ``labels`` is (N,)."""

    points: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.points.ndim != 3 or self.points.shape[2] != 3:
            raise RangeError(f"points must be (N, m, 3), got {self.points.shape}")
        if len(self.labels) != len(self.points):
            raise RangeError("points and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise RangeError("label outside [0, num_classes)")

    def __len__(self):
        return len(self.labels)

    @property
    def num_points(self):
        return self.points.shape[1]

    def samples(self):
        return [PointCloudSample(p, int(y)) for p, y in zip(self.points, self.labels)]

    @classmethod
    def from_samples(cls, samples, num_classes):
        points = np.stack([s.points for s in samples]).astype(np.float32)
        labels = np.array([s.label for s in samples], dtype=np.int64)
        return cls(points, labels, num_classes)


@dataclass
class ShiftRecipe:
    jitter_sigma: float = 0.0
    dropout_fraction: float = 0.0
    anisotropic_scale: tuple = (1.0, 1.0, 1.0)
    occlusion_fraction: float = 0.0
    density_bias: float = 0.0
    seed: int = 0

    def validate(self):
        if self.jitter_sigma < 0:
            raise RangeError("jitter_sigma must be >= 0")
        if not 0.0 <= self.dropout_fraction < 1.0:
            raise RangeError("dropout_fraction must lie in [0, 1)")
        if self.density_bias < 0:
            raise RangeError("density_bias must be >= 0")
        if len(self.anisotropic_scale) != 3:
            raise RangeError("anisotropic_scale must have 3 entries")
        if self.occlusion_fraction < 0:
            raise RangeError("occlusion_fraction must be >= 0")

    def with_seed(self, seed):
        return ShiftRecipe(
            self.jitter_sigma,
            self.dropout_fraction,
            tuple(self.anisotropic_scale),
            self.occlusion_fraction,
            self.density_bias,
            int(seed),
        )


SHIFT_PRESETS = {
    "mild": ShiftRecipe(
        jitter_sigma=0.01,
        dropout_fraction=0.2,
        anisotropic_scale=(1.15, 0.9, 1.0),
        occlusion_fraction=0.1,
        density_bias=0.5,
    ),
    "heavy": ShiftRecipe(
        jitter_sigma=0.03,
        dropout_fraction=0.4,
        anisotropic_scale=(1.5, 0.7, 0.85),
        occlusion_fraction=0.25,
        density_bias=2.0,
    ),
}


def _unit_rows(v):
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _sample_sphere(rng, m):
    return _unit_rows(rng.standard_normal((m, 3)))


def _sample_cube(rng, m):
    # area-uniform: pick a face uniformly, then a uniform point on it
    pts = rng.uniform(-1.0, 1.0, size=(m, 3))
    axis = rng.integers(0, 3, size=m)
    sign = np.where(rng.random(m) < 0.5, -1.0, 1.0)
    pts[np.arange(m), axis] = sign
    return pts


def _sample_cylinder(rng, m, radius, half_height):
    side = 2 * math.pi * radius * 2 * half_height
    cap = math.pi * radius**2
    part = rng.choice(3, size=m, p=np.array([side, cap, cap]) / (side + 2 * cap))
    theta = rng.uniform(0, 2 * math.pi, m)
    r = np.where(part == 0, radius, radius * np.sqrt(rng.random(m)))
    z = np.where(part == 0, rng.uniform(-half_height, half_height, m),
                 np.where(part == 1, half_height, -half_height))
    return np.column_stack([r * np.cos(theta), r * np.sin(theta), z])


def _sample_cone(rng, m, radius, height):
    slant = math.hypot(radius, height)
    lateral = math.pi * radius * slant
    base = math.pi * radius**2
    on_base = rng.random(m) < base / (lateral + base)
    theta = rng.uniform(0, 2 * math.pi, m)
    u = np.sqrt(rng.random(m))
    # lateral: radius grows linearly from apex (u=0) to base (u=1)
    r = radius * u
    z = np.where(on_base, -height / 2, height / 2 - height * u)
    return np.column_stack([r * np.cos(theta), r * np.sin(theta), z])


def _sample_torus(rng, m, major, minor):
    # rejection on the area element (R + r cos v)
    out = np.empty((0, 3))
    while len(out) < m:
        u = rng.uniform(0, 2 * math.pi, 2 * m)
        v = rng.uniform(0, 2 * math.pi, 2 * m)
        keep = rng.uniform(0, major + minor, 2 * m) < major + minor * np.cos(v)
        u, v = u[keep], v[keep]
        ring = major + minor * np.cos(v)
        pts = np.column_stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)])
        out = np.vstack([out, pts])
    return out[:m]


def generate_shape(category, m, rng_seed, num_classes=len(CATEGORIES)):
    """Sample ``m`` surface points of a shape family, scaled to unit max-norm.

    Shapes are built centred at the origin; per-sample proportions are drawn
    from the same seeded generator, so output is a pure function of the
    arguments.
    """
    if not 0 <= category < min(num_classes, len(CATEGORIES)):
        raise RangeError(f"unknown category {category}")
    if m < 8:
        raise RangeError(f"need at least 8 points, got {m}")
    rng = np.random.default_rng(rng_seed)
    name = CATEGORIES[category]
    if name == "sphere":
        pts = _sample_sphere(rng, m)
    elif name == "cube":
        pts = _sample_cube(rng, m)
    elif name == "cylinder":
        pts = _sample_cylinder(rng, m, rng.uniform(0.5, 0.8), rng.uniform(0.7, 1.0))
    elif name == "cone":
        pts = _sample_cone(rng, m, rng.uniform(0.6, 0.9), rng.uniform(1.2, 1.8))
    else:
        pts = _sample_torus(rng, m, 1.0, rng.uniform(0.25, 0.45))
    pts /= np.max(np.linalg.norm(pts, axis=1))
    return PointCloudSample(pts, int(category))


def apply_shift(sample, recipe):
    """Corrupt a sample according to ``recipe``; label and point count are kept."""
    recipe.validate()
    pts = np.array(sample.points, dtype=np.float64)
    m = len(pts)
    rng = np.random.default_rng(recipe.seed)

    pts = pts * np.asarray(recipe.anisotropic_scale, dtype=np.float64)

    if recipe.occlusion_fraction > 0:
        normal = _sample_sphere(rng, 1)[0]
        proj = pts @ normal
        n_drop = int(math.floor(recipe.occlusion_fraction * m))
        if n_drop >= m:
            raise DegenerateSampleError("occlusion removes every point")
        # offset = the projection quantile that removes exactly n_drop points
        order = np.argsort(-proj, kind="stable")
        keep = np.sort(order[n_drop:])
        pts = pts[keep]

    if recipe.dropout_fraction > 0:
        n = len(pts)
        n_keep = n - int(math.floor(recipe.dropout_fraction * n))
        if recipe.density_bias > 0:
            direction = _sample_sphere(rng, 1)[0]
            w = np.exp(recipe.density_bias * (pts @ direction))
            p = w / w.sum()
        else:
            p = None
        keep = np.sort(rng.choice(n, size=n_keep, replace=False, p=p))
        pts = pts[keep]

    if len(pts) == 0:
        raise DegenerateSampleError("no points survive the shift")
    if len(pts) < m:
        extra = rng.integers(0, len(pts), size=m - len(pts))
        pts = np.vstack([pts, pts[extra]])

    if recipe.jitter_sigma > 0:
        pts = pts + rng.normal(0.0, recipe.jitter_sigma, size=pts.shape)

    return PointCloudSample(pts, sample.label)


def generate_domain(num_classes, per_class, m, seed, recipe=None):
    """Balanced dataset of ``per_class`` samples per category, optionally shifted."""
    ss = np.random.SeedSequence(seed)
    shape_seeds = ss.generate_state(num_classes * per_class, dtype=np.uint64)
    shift_seeds = ss.spawn(1)[0].generate_state(num_classes * per_class, dtype=np.uint64)
    samples = []
    for i in range(num_classes * per_class):
        c = i % num_classes
        s = generate_shape(c, m, int(shape_seeds[i]), num_classes)
        if recipe is not None:
            s = apply_shift(s, recipe.with_seed(int(shift_seeds[i])))
        samples.append(s)
    return PointCloudDataset.from_samples(samples, num_classes)


def write_dataset(dataset, path):
    """Write a dataset in PCDS v1 (little-endian, float32 coordinates)."""
    n = len(dataset)
    if n == 0:
        raise RangeError("refusing to write an empty dataset")
    m = dataset.num_points
    header = _HEADER.pack(MAGIC, VERSION, n, m, dataset.num_classes)
    rec = np.empty(n, dtype=np.dtype([("label", "<u2"), ("pts", "<f4", (m, 3))]))
    rec["label"] = dataset.labels
    rec["pts"] = dataset.points
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(rec.tobytes())


def read_dataset(path):
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError("truncated header", len(raw))
    magic, version, n, m, num_classes = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if n == 0:
        raise FormatError("dataset declares zero samples", 8)
    if m < 1:
        raise FormatError("dataset declares zero points per sample", 12)
    dt = np.dtype([("label", "<u2"), ("pts", "<f4", (m, 3))])
    expected = _HEADER.size + n * dt.itemsize
    if len(raw) < expected:
        # offset of the first incomplete record
        done = (len(raw) - _HEADER.size) // dt.itemsize
        raise FormatError(
            f"truncated body: {n} samples declared, {done} complete",
            _HEADER.size + done * dt.itemsize,
        )
    if len(raw) > expected:
        raise FormatError("trailing bytes after last sample", expected)
    rec = np.frombuffer(raw, dtype=dt, count=n, offset=_HEADER.size)
    labels = rec["label"].astype(np.int64)
    if labels.max() >= num_classes:
        bad = int(np.argmax(labels >= num_classes))
        raise FormatError(f"label {labels[bad]} >= num_classes", _HEADER.size + bad * dt.itemsize)
    return PointCloudDataset(np.array(rec["pts"], dtype=np.float32), labels, num_classes)
