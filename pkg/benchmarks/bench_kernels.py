"""Time the numba and numpy kernel paths side by side.

    python3 benchmarks/bench_kernels.py [--points 256] [--seconds 1.0]

Both paths are called directly, so the PTSFA_NO_NUMBA switch does not matter
here. Outputs are compared before timing.
"""

import argparse
import time

import numpy as np

from ptsfa import kernels, model


def best_time(fn, seconds):
    fn()  # warm-up, includes JIT compilation on first use
    runs = []
    start = time.perf_counter()
    while time.perf_counter() - start < seconds or len(runs) < 3:
        t = time.perf_counter()
        fn()
        runs.append(time.perf_counter() - t)
    return min(runs)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--points", type=int, default=256)
    ap.add_argument("--seconds", type=float, default=1.0)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    p = model.init_params(5, rng)
    p.b1[:] = rng.normal(0, 0.1, p.b1.shape)
    p.b2[:] = rng.normal(0, 0.1, p.b2.shape)
    enc = (p.W1, p.b1, p.W2, p.b2)

    print(f"{'kernel':<16}{'batch':>8}{'numba ms':>11}{'numpy ms':>11}{'speedup':>9}")
    for B in (16, 256):
        pts = rng.uniform(-1, 1, (B, args.points, 3))
        f_nb, a_nb = kernels.encoder_forward_nb(pts, *enc)
        f_np, a_np = kernels.encoder_forward_np(pts, *enc)
        assert np.allclose(f_nb, f_np, rtol=0, atol=1e-10) and np.array_equal(a_nb, a_np)
        g = rng.normal(size=f_nb.shape)

        cases = {
            "encoder fwd": (lambda: kernels.encoder_forward_nb(pts, *enc),
                            lambda: kernels.encoder_forward_np(pts, *enc)),
            "encoder bwd": (
                lambda: kernels.encoder_backward_nb(g, pts, a_nb, f_nb, p.W1, p.b1, p.W2),
                lambda: kernels.encoder_backward_np(g, pts, a_np, f_np, p.W1, p.b1, p.W2),
            ),
        }
        for name, (nb, npy) in cases.items():
            t_nb, t_np = best_time(nb, args.seconds), best_time(npy, args.seconds)
            print(f"{name:<16}{B:>8}{t_nb * 1e3:>11.3f}{t_np * 1e3:>11.3f}{t_np / t_nb:>8.1f}x")

    draws = rng.normal(size=(100_000, 8))
    W, b = rng.normal(size=(4, 8)), rng.normal(size=4)
    assert np.allclose(kernels.mc_cross_entropy_nb(draws, W, b, 1),
                       kernels.mc_cross_entropy_np(draws, W, b, 1))
    t_nb = best_time(lambda: kernels.mc_cross_entropy_nb(draws, W, b, 1), args.seconds)
    t_np = best_time(lambda: kernels.mc_cross_entropy_np(draws, W, b, 1), args.seconds)
    print(f"{'mc cross-entropy':<16}{len(draws):>8}{t_nb * 1e3:>11.3f}{t_np * 1e3:>11.3f}"
          f"{t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
