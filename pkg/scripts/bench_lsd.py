#!/usr/bin/env python3
"""Wall-clock acceptance bench for the fast LSD engine (kept out of CI).

Targets on a 96^3 synthetic sphere volume, sigma = 8 nm, 1 nm isotropic:
  - fast engine >= 10x faster than the brute-force oracle (default threads)
  - fast engine output bitwise identical for 1 vs default thread count

Exit status 0 iff both targets hold. Usage: python scripts/bench_lsd.py
"""

from __future__ import annotations

import json
import sys
import time

import numpy as np

from emshape import VoxelSpacing
from emshape.lsd import LsdParams, compute_lsd_fast, compute_lsd_oracle
from emshape.synth import SynthKind, SynthSpec, generate


def main() -> int:
    spec = SynthSpec(
        kind=SynthKind.SPHERES,
        shape=(96, 96, 96),
        count=24,
        size_range=(6.0, 12.0),
        seed=4,
        spacing=VoxelSpacing(1.0, 1.0, 1.0),
    )
    labels = generate(spec)
    params = LsdParams(sigma_nm=8.0)

    t0 = time.perf_counter()
    fast = compute_lsd_fast(labels, params)
    fast_s = time.perf_counter() - t0

    t0 = time.perf_counter()
    oracle = compute_lsd_oracle(labels, params)
    oracle_s = time.perf_counter() - t0

    diff = float(np.max(np.abs(fast.data - oracle.data)))
    single = compute_lsd_fast(labels, params, threads=1)
    invariant = bool(np.array_equal(single.data, fast.data))
    speedup = oracle_s / fast_s

    result = {
        "volume": "96^3 spheres",
        "sigma_nm": 8.0,
        "oracle_s": round(oracle_s, 3),
        "fast_s": round(fast_s, 3),
        "speedup": round(speedup, 2),
        "max_abs_diff": diff,
        "thread_invariant_bitwise": invariant,
        "pass": speedup >= 10.0 and invariant and diff <= 1e-4,
    }
    print(json.dumps(result, indent=2))
    return 0 if result["pass"] else 1


if __name__ == "__main__":
    sys.exit(main())
