"""
Time each hot kernel under numba and under the pure-numpy fallback.

    python3 benchmarks/bench_kernels.py [--size BYTES] [--repeat N] [--json]

Both paths run in the same process through NUMBA_KERNELS / NUMPY_KERNELS, so
the environment flag does not matter here. Outputs are compared before timing.
"""

import argparse
import json
import time

import numpy as np

from tee_fabric import _accel


def inputs(size: int, rng: np.random.Generator) -> dict:
    data = rng.integers(0, 256, size, dtype=np.uint8)
    table = np.unique(rng.integers(0, 1 << 62, size // 8, dtype=np.uint64))
    codes = _accel.NUMPY_KERNELS["window_codes"](data)
    labels = rng.choice(np.array([0, 0, 0, 1, 2], dtype=np.int32), size)
    side = max(8, int(round((size / 64) ** (1 / 3) * 4)))
    a, b = rng.standard_normal((side, side)), rng.standard_normal((side, side))
    return {
        "keystream_xor": (data, np.uint64(0x1234)),
        "window_codes": (data,),
        "count_hits": (table, codes),
        "count_foreign": (labels, np.int32(1)),
        "all_zero": (np.zeros(size, dtype=np.uint8),),
        "matmul": (a, b),
    }


def best_of(fn, args, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def same(x, y) -> bool:
    if isinstance(x, np.ndarray):
        return x.shape == y.shape and (np.allclose(x, y) if x.dtype.kind == "f" else np.array_equal(x, y))
    return x == y


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.strip().splitlines()[0])
    ap.add_argument("--size", type=int, default=1 << 22)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", action="store_true")
    args = ap.parse_args(argv)

    if not _accel.NUMBA_KERNELS:
        print("numba is not importable; nothing to compare")
        return 1
    rows = []
    for name, kargs in inputs(args.size, np.random.default_rng(args.seed)).items():
        fast, slow = _accel.NUMBA_KERNELS[name], _accel.NUMPY_KERNELS[name]
        out_fast = fast(*kargs)  # first call compiles
        if not same(out_fast, slow(*kargs)):
            raise SystemExit(f"{name}: numba and numpy disagree")
        t_fast, t_slow = best_of(fast, kargs, args.repeat), best_of(slow, kargs, args.repeat)
        rows.append({"kernel": name, "numba_s": t_fast, "numpy_s": t_slow, "speedup": t_slow / t_fast if t_fast else float("inf")})

    if args.json:
        print(json.dumps({"size": args.size, "repeat": args.repeat, "rows": rows}, indent=2))
    else:
        print(f"{'kernel':<15}{'numba ms':>12}{'numpy ms':>12}{'speedup':>10}")
        for r in rows:
            print(f"{r['kernel']:<15}{r['numba_s'] * 1e3:>12.3f}{r['numpy_s'] * 1e3:>12.3f}{r['speedup']:>9.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
