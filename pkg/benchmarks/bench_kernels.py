"""Compare the numba and numpy convolution kernels.

    python3 benchmarks/bench_kernels.py [--repeat N]

The numba path is compiled once before timing. Both paths are called
directly, so GRIDPLAN_DISABLE_NUMBA has no effect here.
"""

import argparse
import timeit

import numpy as np

from gridplan import _kernels

# (batch, channels in, channels out, height, width, kernel)
SIZES = [
    (2, 4, 4, 16, 16, 3),
    (4, 16, 16, 32, 32, 3),
    (8, 32, 32, 13, 13, 3),
    (4, 8, 16, 27, 27, 5),
]


def bench(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    if _kernels.numba is None:
        raise SystemExit("numba is not importable; nothing to compare")

    rng = np.random.default_rng(0)
    print(f"{'shape (n,ci,co,h,w,k)':<26}{'kernel':<14}{'numpy ms':>10}{'numba ms':>10}{'ratio':>8}")
    for n, ci, co, h, w, k in SIZES:
        xpad = rng.standard_normal((n, ci, h + k - 1, w))
        kern = rng.standard_normal((co, ci, k, k))
        dy = rng.standard_normal((n, co, h, w))
        cases = {
            "correlate": (
                lambda: _kernels.correlate_rows(xpad, kern, use_numba=False),
                lambda: _kernels.correlate_rows(xpad, kern, use_numba=True),
            ),
            "weight_grad": (
                lambda: _kernels.weight_grad(xpad, dy, k, k, use_numba=False),
                lambda: _kernels.weight_grad(xpad, dy, k, k, use_numba=True),
            ),
        }
        for name, (np_fn, nb_fn) in cases.items():
            nb_fn()  # compile
            assert np.allclose(np_fn(), nb_fn(), atol=1e-9)
            t_np, t_nb = bench(np_fn, args.repeat), bench(nb_fn, args.repeat)
            print(f"{str((n, ci, co, h, w, k)):<26}{name:<14}{t_np * 1e3:>10.2f}{t_nb * 1e3:>10.2f}"
                  f"{t_np / t_nb:>8.2f}")


if __name__ == "__main__":
    main()
