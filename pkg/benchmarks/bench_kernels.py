"""Time the numba and numpy warp kernels on the same inputs.

Usage::

    python benchmarks/bench_kernels.py --size 32 --channels 3 --repeat 5
"""

import argparse
import logging
import timeit

import numpy as np

from tractpipe import kernels
from tractpipe._accel import HAS_NUMBA

log = logging.getLogger("bench_kernels")


def _best(fn, repeat: int) -> float:
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def run(size: int, channels: int, repeat: int, seed: int) -> list[tuple[str, str, float]]:
    rng = np.random.default_rng(seed)
    vol = rng.normal(size=(size, size, size, channels))
    field = rng.uniform(-2.0, 2.0, size=(size, size, size, 3))
    cases = [
        ("warp", "numpy", lambda: kernels.warp_field_numpy(vol, field)),
        ("warp+jacobian", "numpy", lambda: kernels.warp_field_jacobian_numpy(vol, field)),
    ]
    if HAS_NUMBA:
        # first call compiles (or loads the on-disk cache)
        kernels.warp_field_numba(vol, field)
        kernels.warp_field_jacobian_numba(vol, field)
        if kernels.warp_field_numba(vol, field).tobytes() != kernels.warp_field_numpy(vol, field).tobytes():
            raise SystemExit("backends disagree")
        cases += [
            ("warp", "numba", lambda: kernels.warp_field_numba(vol, field)),
            ("warp+jacobian", "numba", lambda: kernels.warp_field_jacobian_numba(vol, field)),
        ]
    else:
        log.warning("numba is not installed; timing the numpy kernels only")
    return [(name, backend, _best(fn, repeat)) for name, backend, fn in cases]


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--size", type=int, default=32)
    parser.add_argument("--channels", type=int, default=3)
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")

    results = run(args.size, args.channels, args.repeat, args.seed)
    print(f"grid {args.size}^3 x {args.channels} channels, best of {args.repeat}")
    print(f"{'kernel':<15}{'backend':<9}{'ms':>9}")
    for name, backend, sec in results:
        print(f"{name:<15}{backend:<9}{1e3 * sec:9.2f}")
    by = {(n, b): s for n, b, s in results}
    for name in ("warp", "warp+jacobian"):
        if (name, "numba") in by:
            print(f"{name}: numba speedup x{by[(name, 'numpy')] / by[(name, 'numba')]:.1f}")


if __name__ == "__main__":
    main()
