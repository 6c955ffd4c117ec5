"""Independent checks for the closed-form loss, the gradients and the statistics.

None of these routines share code paths with what they verify, except the
:mod:`ptsfa.kernels` cross-entropy sweep used by the Monte-Carlo estimator,
which is itself cross-checked against a numpy evaluation in the tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .domainstats import ClassStats
from .errors import NumericError, RangeError
from .losses import AugmentationContext, cross_entropy, ida_loss, ptsfa_loss_and_grads


def box_muller_normals(n, seed):
    """``n`` standard normals from Box-Muller over a Philox counter stream."""
    rng = np.random.Generator(np.random.Philox(seed))
    pairs = (n + 1) // 2
    u1 = 1.0 - rng.random(pairs)  # (0, 1]
    u2 = rng.random(pairs)
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.empty(2 * pairs)
    z[0::2] = r * np.cos(2.0 * np.pi * u2)
    z[1::2] = r * np.sin(2.0 * np.pi * u2)
    return z[:n]


def mc_augmented_loss(f, y, W, b, ctx, M, seed):
    """Monte-Carlo estimate of the expected CE over augmented copies of ``f``.

    Draws ``f~ ~ N(f + dmu_y, lam * Sigma_y)`` ``M`` times and averages the
    softmax cross-entropy. Returns ``(estimate, standard_error)``.
    """
    if M < 2:
        raise RangeError(f"need at least 2 draws, got {M}")
    f = np.asarray(f, dtype=np.float64)
    D = f.shape[0]
    z = box_muller_normals(M * D, seed).reshape(M, D)
    cov = ctx.cov[y]
    if cov.ndim == 1:
        draws = f + ctx.delta_mu[y] + z * np.sqrt(ctx.lam * cov)
    else:
        L = np.linalg.cholesky(cov) * math.sqrt(ctx.lam)
        draws = f + ctx.delta_mu[y] + z @ L.T
    ce = kernels.mc_cross_entropy(draws, W, b, y)
    if np.all(ce == ce[0]):  # zero covariance: every draw is the same point
        return float(ce[0]), 0.0
    return float(ce.mean()), float(ce.std() / math.sqrt(M))


def finite_diff_grad(fn, x, h=1e-4, coords=None, pattern=None, min_h=1e-8):
    """Central-difference gradient of scalar ``fn`` at array ``x``.

    ``x`` is perturbed in place and restored. ``coords`` limits the flat
    indices evaluated; others are left as NaN.

    For piecewise-smooth functions, ``pattern`` returns a fingerprint of the
    active piece (e.g. ReLU masks and pooling winners). When a step of ``h``
    crosses into another piece the step is shrunk tenfold until it stays on
    one piece; below ``min_h`` the coordinate is left as NaN.
    """
    flat = x.reshape(-1)
    grad = np.full(flat.shape, np.nan)
    idx = range(flat.size) if coords is None else coords
    for i in idx:
        orig = flat[i]
        base = None if pattern is None else pattern()
        step = h
        while step >= min_h:
            flat[i] = orig + step
            fp = fn()
            same = base is None or pattern() == base
            flat[i] = orig - step
            fm = fn()
            same = same and (base is None or pattern() == base)
            flat[i] = orig
            if same:
                break
            step /= 10.0
        else:
            continue
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError(f"non-finite loss when perturbing coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * step)
    return grad.reshape(x.shape)


def relative_error(analytic, numeric):
    """Elementwise ``|a - g| / max(|a|, |g|, 1e-8)``, ignoring NaN entries of ``numeric``."""
    a = np.asarray(analytic, dtype=np.float64)
    g = np.asarray(numeric, dtype=np.float64)
    mask = ~np.isnan(g)
    a, g = a[mask], g[mask]
    return np.abs(a - g) / np.maximum(np.maximum(np.abs(a), np.abs(g)), 1e-8)


def bruteforce_class_stats(features, labels, num_classes):
    """Textbook two-pass per-class mean and population variance (no ridge)."""
    features = np.asarray(features, dtype=np.float64)
    D = features.shape[1]
    mean = np.zeros((num_classes, D))
    var = np.zeros((num_classes, D))
    count = np.zeros(num_classes, dtype=np.int64)
    for c in range(num_classes):
        rows = [features[i] for i in range(len(labels)) if labels[i] == c]
        count[c] = len(rows)
        if not rows:
            continue
        for d in range(D):
            total = 0.0
            for r in rows:
                total += r[d]
            mu = total / len(rows)
            sq = 0.0
            for r in rows:
                sq += (r[d] - mu) ** 2
            mean[c, d] = mu
            var[c, d] = sq / len(rows)
    return ClassStats(mean, var, count)


@dataclass
class BoundRow:
    instance: int
    estimate: float
    stderr: float
    closed_form: float

    @property
    def passed(self):
        return self.estimate <= self.closed_form + 3.0 * self.stderr


def random_bound_instance(rng, max_dim=8, max_classes=4):
    D = int(rng.integers(1, max_dim + 1))
    C = int(rng.integers(2, max_classes + 1))
    y = int(rng.integers(0, C))
    W = rng.normal(0.0, 1.0, (C, D))
    b = rng.normal(0.0, 0.5, C)
    f = rng.normal(0.0, 1.0, D)
    ctx = AugmentationContext(
        delta_mu=rng.normal(0.0, 0.5, (C, D)),
        cov=rng.uniform(0.0, 1.0, (C, D)),
        lam=float(rng.uniform(0.0, 0.5)),
    )
    return f, y, W, b, ctx


def jensen_bound_suite(instances=100, seed=0, draws=100_000):
    """Compare the MC estimate of the augmented loss with its closed-form bound."""
    if instances < 1:
        raise RangeError("need at least one instance")
    ss = np.random.SeedSequence(seed)
    rng = np.random.default_rng(ss)
    mc_seeds = ss.spawn(1)[0].generate_state(instances, dtype=np.uint64)
    rows = []
    for i in range(instances):
        f, y, W, b, ctx = random_bound_instance(rng)
        est, se = mc_augmented_loss(f, y, W, b, ctx, draws, int(mc_seeds[i]))
        bound, _ = ptsfa_loss_and_grads(f[None], np.array([y]), W, b, ctx)
        rows.append(BoundRow(i, est, se, bound))
    return rows


def _max_err(analytic, numeric):
    err = relative_error(analytic, numeric)
    return float(err.max()) if err.size else 0.0


def _random_context(rng, C, D, full=False):
    if full:
        A = rng.normal(size=(C, D, D))
        cov = np.einsum("cij,ckj->cik", A, A) / D
    else:
        cov = rng.uniform(0.0, 1.0, (C, D))
    return AugmentationContext(rng.normal(0.0, 0.5, (C, D)), cov, float(rng.uniform(0.0, 0.5)))


def _check_ptsfa(rng):
    B, D, C = int(rng.integers(1, 6)), int(rng.integers(1, 9)), int(rng.integers(2, 5))
    F, y = rng.normal(size=(B, D)), rng.integers(0, C, B)
    W, b = rng.normal(size=(C, D)), rng.normal(size=C)
    ctx = _random_context(rng, C, D, full=bool(rng.integers(0, 2)))
    _, g = ptsfa_loss_and_grads(F, y, W, b, ctx)

    def loss():
        return ptsfa_loss_and_grads(F, y, W, b, ctx)[0]

    return max(_max_err(g[k], finite_diff_grad(loss, a)) for k, a in (("W", W), ("b", b), ("F", F)))


def _check_ida(rng, drop_class):
    B, D, C = int(rng.integers(1, 6)), int(rng.integers(2, 9)), int(rng.integers(2, 5))
    F, means = rng.normal(size=(B, D)), rng.normal(size=(C, D))
    labels = rng.integers(0, C, B)
    valid = np.ones(C, dtype=bool)
    if drop_class:
        # pseudo-labelled target batches may hit degraded classes
        valid[rng.integers(0, C)] = False
        if not valid[labels].any():
            labels[0] = int(np.flatnonzero(valid)[0])
    _, g = ida_loss(F, labels, means, 2.0, valid)
    num = finite_diff_grad(lambda: ida_loss(F, labels, means, 2.0, valid)[0], F)
    return _max_err(g, num)


def _check_ce(rng):
    B, C = int(rng.integers(1, 6)), int(rng.integers(2, 6))
    z, y = rng.normal(size=(B, C)) * 2, rng.integers(0, C, B)
    _, g = cross_entropy(z, y)
    return _max_err(g, finite_diff_grad(lambda: cross_entropy(z, y)[0], z))


def _check_pipeline(rng, coords_per_tensor=24):
    # local import: the trainer depends on most of the package
    from .model import encode_batch, init_params
    from .trainer import objective_and_grads

    C = int(rng.integers(2, 5))
    p = init_params(C, rng)
    for arr in (p.b1, p.b2, p.W, p.b):
        arr[:] = rng.normal(0.0, 0.3, arr.shape)
    bs, bt, m = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(2, 17))
    ps, pt = rng.uniform(-1, 1, (bs, m, 3)), rng.uniform(-1, 1, (bt, m, 3))
    ys, yt = rng.integers(0, C, bs), rng.integers(0, C, bt)
    ctx = _random_context(rng, C, p.W.shape[1])
    means = rng.normal(size=(C, p.W.shape[1]))
    valid = np.ones(C, dtype=bool)

    pts = np.concatenate([ps, pt])

    def run():
        return objective_and_grads(p, ps, ys, pt, yt, ctx, means, valid, 2.0)

    def pattern():
        _, (_, argmax, _) = encode_batch(pts, p)
        return argmax.tobytes() + ((pts @ p.W1.T + p.b1) > 0).tobytes()

    _, grads, _ = run()
    worst = 0.0
    for name, arr in p.as_dict().items():
        coords = rng.choice(arr.size, min(arr.size, coords_per_tensor), replace=False)
        num = finite_diff_grad(lambda: run()[0].total, arr, coords=coords, pattern=pattern)
        worst = max(worst, _max_err(grads[name], num))
    return worst


GRADIENT_SUITES = ("ptsfa", "ida_source", "ida_target", "warmup_ce", "pipeline")


def gradient_suite(trials=50, seed=0):
    """Worst relative error of each analytic gradient against central differences."""
    if trials < 1:
        raise RangeError("need at least one trial")
    checks = {
        "ptsfa": _check_ptsfa,
        "ida_source": lambda r: _check_ida(r, drop_class=False),
        "ida_target": lambda r: _check_ida(r, drop_class=True),
        "warmup_ce": _check_ce,
        "pipeline": _check_pipeline,
    }
    seeds = np.random.SeedSequence(seed).spawn(len(checks))
    out = {}
    for (name, check), ss in zip(checks.items(), seeds):
        rng = np.random.default_rng(ss)
        out[name] = max(check(rng) for _ in range(trials))
    return out
