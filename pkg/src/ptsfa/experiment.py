"""The synthetic source-to-target benchmark and method comparisons on it."""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass

import numpy as np

from .datagen import SHIFT_PRESETS, generate_domain
from .trainer import Datasets, RunConfig, train

SPLITS = ("source_train", "source_test", "target_train", "target_test")


def make_benchmark(seed=0, preset="heavy", classes=5, points=256, train_per_class=200,
                   test_per_class=50, recipe=None):
    """Clean source splits and shifted target splits, all derived from ``seed``."""
    recipe = SHIFT_PRESETS[preset] if recipe is None else recipe
    seeds = np.random.SeedSequence(seed).generate_state(4)
    sizes = (train_per_class, test_per_class, train_per_class, test_per_class)
    shifts = (None, None, recipe, recipe)
    return Datasets(*(
        generate_domain(classes, n, points, int(s), r) for s, n, r in zip(seeds, sizes, shifts)
    ))


@dataclass
class MethodResult:
    method: str
    seed: int
    final_acc: float
    seconds: float


def compare_methods(methods=("full", "tsfa", "source_only"), seeds=(0, 1, 2), preset="heavy",
                    config=None, **bench_kwargs):
    """Train each method on the benchmark built from each seed."""
    base = RunConfig() if config is None else config
    results = []
    for seed in seeds:
        data = make_benchmark(seed, preset, **bench_kwargs)
        for method in methods:
            cfg = dataclasses.replace(base, method=method, seed=seed)
            t0 = time.perf_counter()
            out = train(cfg, data)
            results.append(MethodResult(method, seed, out.reports[-1].tgt_acc,
                                        time.perf_counter() - t0))
    return results


def mean_accuracy(results, method):
    return float(np.mean([r.final_acc for r in results if r.method == method]))
