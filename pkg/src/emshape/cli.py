"""Command-line surface: synth | lsd | eval | ssm-check | fact-check | version.

Exit codes: 0 success, 2 usage error, 3 data error, 4 check failure.
Every command is deterministic given its flags, seed, and thread count;
wall-clock timings go only into the optional --report JSON.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import __version__, fact, lsd, metrics, ssm, synth
from .volume import LabelVolume, VolumeFormatError, VoxelSpacing, read_volume

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_CHECK = 4

_DATA_ERRORS = (
    VolumeFormatError,
    FileNotFoundError,
    IsADirectoryError,
    PermissionError,
    ValueError,
    KeyError,
    synth.PackingError,
    lsd.StencilSizeError,
)


def _positive_float(text: str) -> float:
    value = float(text)
    if not np.isfinite(value) or value <= 0:
        raise argparse.ArgumentTypeError(f"must be a positive finite number, got {text}")
    return value


def _positive_int(text: str) -> int:
    value = int(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return value


def _nonneg_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be a non-negative integer, got {text}")
    return value


def _resolve_threads(args: argparse.Namespace) -> Optional[int]:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("EMSHAPE_THREADS")
    if env:
        n = int(env)
        if n <= 0:
            raise ValueError(f"EMSHAPE_THREADS must be positive, got {env}")
        return n
    return None


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _read_labels(path: str) -> LabelVolume:
    vol = read_volume(path)
    if not isinstance(vol, LabelVolume):
        raise VolumeFormatError(f"{path} is not a u64 label volume (dtype {vol.dtype})")
    return vol


def cmd_synth(args: argparse.Namespace) -> int:
    spec = synth.SynthSpec(
        kind=synth.SynthKind(args.kind),
        shape=tuple(args.shape),
        count=args.count,
        size_range=(args.size_min, args.size_max),
        seed=args.seed,
        spacing=VoxelSpacing(*args.spacing),
    )
    volume, meta = synth.generate_detailed(spec)
    from .volume import write_volume

    write_volume(volume, args.out)
    print(f"instances={len(meta)}")
    return EXIT_OK


def cmd_lsd(args: argparse.Namespace) -> int:
    labels = _read_labels(args.labels)
    threads = _resolve_threads(args)
    params = lsd.LsdParams(
        sigma_nm=args.sigma,
        weighting=lsd.Weighting(args.mode),
        normalize=args.normalize,
    )
    stats: Dict[str, int] = {}
    t0 = time.perf_counter()
    max_abs_diff = None
    if args.engine == "both":
        fast = lsd.compute_lsd_fast(labels, params, threads=threads, stats=stats)
        oracle = lsd.compute_lsd_oracle(labels, params)
        max_abs_diff = float(np.max(np.abs(fast.data - oracle.data))) if fast.data.size else 0.0
        result = fast
        if params.normalize:
            result = lsd.normalize_lsd(result, params)
    elif args.engine == "oracle":
        result = lsd.compute_lsd_oracle(labels, params)
        if params.normalize:
            result = lsd.normalize_lsd(result, params)
    else:
        result = lsd.compute_lsd_fast(labels, params, threads=threads, stats=stats)
        if params.normalize:
            result = lsd.normalize_lsd(result, params)
    wall = time.perf_counter() - t0

    lsd.write_lsd(result, args.out)
    d, h, w = result.shape
    line = f"wrote {args.out} shape={d}x{h}x{w} channels=10"
    if max_abs_diff is not None:
        line += f" max_abs_diff={max_abs_diff:.6e}"
    print(line)

    if args.report:
        payload = {
            "command": "lsd",
            "engine": args.engine,
            "sigma_nm": args.sigma,
            "mode": args.mode,
            "normalize": bool(args.normalize),
            "wall_time_s": wall,
            "threads": threads,
            "segments": stats.get("segments"),
            "peak_tasks": stats.get("tasks"),
        }
        if max_abs_diff is not None:
            payload["max_abs_diff"] = max_abs_diff
        _write_json(Path(args.report), payload)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    pred = _read_labels(args.pred)
    gt = _read_labels(args.gt)
    report = metrics.evaluate_labels(pred, gt)
    _write_json(Path(args.report), report.to_json_dict())
    if args.csv:
        path = Path(args.csv)
        new = not path.exists()
        with path.open("a", newline="") as fh:
            writer = csv.writer(fh)
            if new:
                writer.writerow(["pred", "gt", "instance_dice", "map"])
            writer.writerow([args.pred, args.gt, f"{report.instance_dice:.9f}", f"{report.map:.9f}"])
    print(f"instance_dice={report.instance_dice:.6f} map={report.map:.6f}")
    return EXIT_OK


def _max_rel_diff(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(b))), 1e-300)
    return float(np.max(np.abs(a - b)) / scale)


def cmd_ssm_check(args: argparse.Namespace) -> int:
    rng = np.random.default_rng(args.seed)
    length, channels, state = args.length, args.channels, args.state
    tol = args.tol
    checks: Dict[str, Dict[str, object]] = {}

    params = ssm.random_ssm_params(channels, state, rng)
    tokens = ssm.TokenSequence(rng.normal(0.0, 1.0, size=(length, channels)))

    seq = ssm.scan_sequential(params, tokens).features
    par = ssm.scan_parallel(params, tokens).features
    diff = _max_rel_diff(par, seq)
    checks["parallel_vs_sequential"] = {"max_rel_diff": diff, "pass": diff <= tol}

    one = ssm.TokenSequence(tokens.features[:1])
    seq1 = ssm.scan_sequential(params, one).features
    par1 = ssm.scan_parallel(params, one).features
    checks["single_token"] = {
        "max_rel_diff": _max_rel_diff(par1, seq1),
        "pass": bool(np.array_equal(par1, seq1)),
    }

    delta0 = np.zeros((length, channels))
    b0 = rng.normal(size=(length, state))
    c0 = rng.normal(size=(length, state))
    y0 = ssm.selective_scan_sequential(
        params.a, params.d, delta0, b0, c0, tokens.features, ssm.Discretization.ZOH
    )
    identity = params.d * tokens.features
    checks["zoh_zero_delta_identity"] = {
        "max_rel_diff": _max_rel_diff(y0, identity),
        "pass": bool(np.array_equal(y0, identity)),
    }

    t_cut = length // 2
    bumped = tokens.features.copy()
    bumped[t_cut] += 1.0
    y_base = ssm.scan_sequential(params, tokens).features
    y_bump = ssm.scan_sequential(params, ssm.TokenSequence(bumped)).features
    causal_ok = bool(np.array_equal(y_base[:t_cut], y_bump[:t_cut]))
    checks["causality"] = {
        "max_rel_diff": 0.0 if causal_ok else _max_rel_diff(y_bump[:t_cut], y_base[:t_cut]),
        "pass": causal_ok,
    }

    delta, b_seq, c_seq = ssm.selective_inputs(params, tokens.features)
    x2 = rng.normal(size=tokens.features.shape)
    alpha, beta = 0.7, -1.3
    lhs = ssm.selective_scan_sequential(
        params.a, params.d, delta, b_seq, c_seq,
        alpha * tokens.features + beta * x2, params.discretization,
    )
    rhs = alpha * ssm.selective_scan_sequential(
        params.a, params.d, delta, b_seq, c_seq, tokens.features, params.discretization
    ) + beta * ssm.selective_scan_sequential(
        params.a, params.d, delta, b_seq, c_seq, x2, params.discretization
    )
    lin_diff = _max_rel_diff(lhs, rhs)
    checks["linearity_frozen_inputs"] = {"max_rel_diff": lin_diff, "pass": lin_diff <= tol}

    failures = [name for name, c in checks.items() if not c["pass"]]
    payload = {
        "pass": not failures,
        "seed": args.seed,
        "length": length,
        "channels": channels,
        "state": state,
        "tolerance": tol,
        "checks": checks,
        "first_failure": failures[0] if failures else None,
    }
    print(json.dumps(payload, sort_keys=True, indent=2))
    return EXIT_OK if not failures else EXIT_CHECK


def cmd_fact_check(args: argparse.Namespace) -> int:
    rng = np.random.default_rng(args.seed)
    d, r, n_sites = args.dim, args.rank, args.sites
    checks: Dict[str, Dict[str, object]] = {}

    sites = [fact.WeightSite((layer, "qkv"), rng.normal(size=(d, d))) for layer in range(n_sites)]
    inc = fact.FactIncrement(
        mode=fact.FactMode.TENSOR_TRAIN,
        u=rng.normal(size=(d, r)),
        v=rng.normal(size=(d, r)),
        scale=float(rng.uniform(0.5, 2.0)),
        cores={s.site_id: rng.normal(size=(r, r)) for s in sites},
    )

    max_err = 0.0
    for site in sites:
        dense = inc.scale * np.einsum(
            "ir,rq,jq->ij", inc.u, np.asarray(inc.cores[site.site_id]), inc.v
        )
        max_err = max(max_err, float(np.max(np.abs(fact.reconstruct_delta(inc, site) - dense))))
    checks["reconstruction_vs_dense"] = {"max_abs_err": max_err, "pass": max_err <= 1e-6}

    site = sites[0]
    undone = fact.apply_increment(inc, site) + fact.reconstruct_delta(
        fact.FactIncrement(
            mode=inc.mode, u=inc.u, v=inc.v, scale=-inc.scale, cores=inc.cores
        ),
        site,
    )
    add_err = float(np.max(np.abs(undone - site.base_weight)))
    checks["apply_additivity"] = {"max_abs_err": add_err, "pass": add_err <= 1e-9}

    count = fact.trainable_param_count(inc)
    enum = inc.stored_scalar_count()
    checks["param_count_formula"] = {
        "formula": count.trainable,
        "enumerated": enum,
        "pass": count.trainable == enum,
    }

    sv = np.linalg.svd(fact.reconstruct_delta(inc, sites[0]), compute_uv=False)
    leak = float(sv[r:].max()) if sv.size > r else 0.0
    bound = 1e-8 * float(sv[0]) if sv.size else 0.0
    checks["rank_bound"] = {"excess_singular_value": leak, "pass": leak <= bound}

    failures = [name for name, c in checks.items() if not c["pass"]]
    payload = {
        "pass": not failures,
        "seed": args.seed,
        "dim": d,
        "rank": r,
        "sites": n_sites,
        "checks": checks,
        "first_failure": failures[0] if failures else None,
    }
    print(json.dumps(payload, sort_keys=True, indent=2))
    return EXIT_OK if not failures else EXIT_CHECK


def cmd_version(args: argparse.Namespace) -> int:
    print(f"emshape {__version__}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="emshape",
        description="Local shape descriptors, instance metrics, and kernel self-checks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic label volume")
    p.add_argument("--out", required=True, help="output payload path (sidecar written next to it)")
    p.add_argument("--kind", choices=[k.value for k in synth.SynthKind], default="spheres")
    p.add_argument("--shape", type=_positive_int, nargs=3, required=True, metavar=("D", "H", "W"))
    p.add_argument("--count", type=_nonneg_int, default=5)
    p.add_argument("--size-min", type=_positive_float, default=3.0)
    p.add_argument("--size-max", type=_positive_float, default=6.0)
    p.add_argument("--spacing", type=_positive_float, nargs=3, default=[1.0, 1.0, 1.0],
                   metavar=("Z", "Y", "X"))
    p.add_argument("--seed", type=_nonneg_int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("lsd", help="compute the 10-channel shape descriptor volume")
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sigma", type=_positive_float, required=True, help="neighborhood radius in nm")
    p.add_argument("--mode", choices=["ball", "gaussian"], default="ball")
    p.add_argument("--normalize", action="store_true")
    p.add_argument("--engine", choices=["fast", "oracle", "both"], default="fast")
    p.add_argument("--threads", type=_positive_int, default=None)
    p.add_argument("--report", default=None, help="write timing/comparison JSON here")
    p.set_defaults(func=cmd_lsd)

    p = sub.add_parser("eval", help="instance Dice and 3D mAP between two label volumes")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--report", required=True, help="output JSON path")
    p.add_argument("--csv", default=None, help="append a summary row to this CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ssm-check", help="self-check the selective scan kernels")
    p.add_argument("--length", type=_positive_int, default=64)
    p.add_argument("--channels", type=_positive_int, default=4)
    p.add_argument("--state", type=_positive_int, default=8)
    p.add_argument("--seed", type=_nonneg_int, default=0)
    p.add_argument("--tol", type=float, default=1e-5)
    p.set_defaults(func=cmd_ssm_check)

    p = sub.add_parser("fact-check", help="self-check the factorized increment algebra")
    p.add_argument("--dim", type=_positive_int, default=8)
    p.add_argument("--rank", type=_positive_int, default=2)
    p.add_argument("--sites", type=_positive_int, default=3)
    p.add_argument("--seed", type=_nonneg_int, default=0)
    p.set_defaults(func=cmd_fact_check)

    p = sub.add_parser("version", help="print the toolkit version")
    p.set_defaults(func=cmd_version)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
