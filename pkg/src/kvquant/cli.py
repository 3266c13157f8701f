"""``kvq`` command line: bench, calibrate, mse, selftest.

Exit codes: 0 success, 1 property failure, 2 usage error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import ConfigurationError, FormatError, KVQuantError

EXIT_OK, EXIT_PROPERTY, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
BITS_CHOICES = (1, 2, 4, 8, 16)

log = logging.getLogger("kvquant")


class UsageError(KVQuantError):
    pass


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma separated list of integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("list is empty")
    return values


def _float_list(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma separated list of numbers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("grid is empty")
    return values


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _non_negative(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _workload_flags(p: argparse.ArgumentParser, bits_default: str, dist_default: str, n_default: str) -> None:
    p.add_argument("--bits", type=_int_list, default=_int_list(bits_default),
                   help="bitwidth(s), comma separated; 16 selects the fp32 baseline path")
    p.add_argument("--heads", type=_positive, default=8)
    p.add_argument("--n", type=_int_list, default=_int_list(n_default), help="prefill tokens (comma list sweeps)")
    p.add_argument("--d", type=_positive, default=64, help="head dimension")
    p.add_argument("--seed", type=_non_negative, default=0)
    p.add_argument("--dist", choices=("gaussian", "heavy_tailed", "outlier_channels"), default=dist_default)
    p.add_argument("--dof", type=float, default=3.0, help="student-t degrees of freedom (heavy_tailed)")
    p.add_argument("--outlier-fraction", type=float, default=0.125)
    p.add_argument("--outlier-scale", type=float, default=10.0)
    p.add_argument("--mode", choices=("channel_wise", "global"), default="channel_wise")
    p.add_argument("--grid", type=_float_list, default=[0.0, 1.0, 2.0, 3.0],
                   help="calibration tau values, comma separated (searched over grid x grid)")
    p.add_argument("--workers", type=_positive, default=None,
                   help="kernel worker count (default: $KVQ_WORKERS, else CPU count)")
    p.add_argument("--out", type=Path, default=None, help="directory for CSV / manifest files")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kvq", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    bench = sub.add_parser("bench", help="decode throughput, memory and softmax MSE per variant")
    _workload_flags(bench, "1,16", "gaussian", "1024")
    bench.add_argument("--steps", type=_non_negative, default=16)
    bench.add_argument("--calibrated", choices=("on", "off"), default="on")
    bench.add_argument("--params", type=Path, default=None, help="calibration manifest written by `kvq calibrate`")

    cal = sub.add_parser("calibrate", help="grid-search (tau1, tau2) on generated calibration workloads")
    _workload_flags(cal, "1", "heavy_tailed", "1024")
    cal.add_argument("--cal-size", type=int, default=4, help="number of calibration workloads")

    mse = sub.add_parser("mse", help="per-head softmax MSE and score histograms (CSV)")
    _workload_flags(mse, "1", "heavy_tailed", "2048")
    mse.add_argument("--params", type=Path, default=None)
    mse.add_argument("--cal-size", type=int, default=4)
    mse.add_argument("--bins", type=_positive, default=50)

    st = sub.add_parser("selftest", help="run the built-in property suites")
    st.add_argument("--inject-fault", choices=("bitflip",), default=None, help=argparse.SUPPRESS)
    return parser


def _distribution(args):
    from .tensor_core import Gaussian, HeavyTailed, OutlierChannels

    if args.dist == "gaussian":
        dist = Gaussian()
    elif args.dist == "heavy_tailed":
        dist = HeavyTailed(args.dof)
    else:
        dist = OutlierChannels(1.0, args.outlier_fraction, args.outlier_scale)
    dist.validate()
    return dist


def _workers(args) -> int:
    from .kernels import default_workers

    return args.workers if args.workers is not None else default_workers()


def _check_bits(bits: list[int], allow_fp32: bool) -> None:
    allowed = BITS_CHOICES if allow_fp32 else BITS_CHOICES[:-1]
    for b in bits:
        if b not in allowed:
            raise UsageError(f"--bits must be from {allowed}, got {b}")


def _single_bits(args) -> int:
    _check_bits(args.bits, allow_fp32=False)
    if len(args.bits) != 1:
        raise UsageError("this command takes exactly one --bits value")
    return args.bits[0]


def _out_dir(args) -> Path:
    out = args.out or Path(".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_params(path: Path):
    from .calibration import CalibrationParams

    try:
        data = json.loads(path.read_text())
        return CalibrationParams(data["tau1"], data["tau2"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{path} is not a calibration manifest: {exc}") from None


def _calibration_set(args, bits: int):
    from .calibration import sample_from_workload
    from .quantizer import QuantizationConfig
    from .tensor_core import WorkloadSpec, generate

    if args.cal_size < 1:
        raise UsageError("--cal-size must be >= 1")
    dist = _distribution(args)
    config = QuantizationConfig(bits=bits, mode=args.mode)
    # calibration workloads use seeds disjoint from the evaluated workload's
    return [
        sample_from_workload(generate(WorkloadSpec(args.heads, args.n[0], args.d, dist, args.seed + 1000 + i)), config)
        for i in range(args.cal_size)
    ]


def cmd_bench(args) -> int:
    from .bench import BenchConfig, run_bench
    from .calibration import grid_from_values

    _check_bits(args.bits, allow_fp32=True)
    if any(n < 1 for n in args.n):
        raise UsageError("--n values must be >= 1")
    cfg = BenchConfig(
        bits=args.bits, heads=args.heads, tokens=args.n, head_dim=args.d, steps=args.steps,
        seed=args.seed, distribution=_distribution(args), calibrated=args.calibrated == "on",
        mode=args.mode, workers=_workers(args),
        params=_load_params(args.params) if args.params else None,
        grid=grid_from_values(args.grid),
    )
    report = run_bench(cfg)
    json.dump(report, sys.stdout, indent=2)
    sys.stdout.write("\n")
    if args.out is not None:
        import csv

        out = _out_dir(args)
        with open(out / "bench.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(report["rows"][0]))
            writer.writeheader()
            writer.writerows(report["rows"])
        if report["throughput"]:
            with open(out / "throughput.csv", "w", newline="") as fh:
                writer = csv.DictWriter(fh, fieldnames=list(report["throughput"][0]))
                writer.writeheader()
                writer.writerows(report["throughput"])
    return EXIT_OK


def cmd_calibrate(args) -> int:
    from .calibration import grid_from_values, grid_table, select_best

    bits = _single_bits(args)
    table = grid_table(_calibration_set(args, bits), grid_from_values(args.grid))
    best = select_best(table)
    result = {
        "tau1": best.tau1,
        "tau2": best.tau2,
        "bits": bits,
        "dist": args.dist,
        "mode": args.mode,
        "table": [{"tau1": p.tau1, "tau2": p.tau2, "mse": mse} for p, mse in table],
    }
    out = _out_dir(args)
    (out / "calibration.json").write_text(json.dumps({"tau1": best.tau1, "tau2": best.tau2, "bits": bits}, indent=2))
    json.dump(result, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return EXIT_OK


def cmd_mse(args) -> int:
    from .calibration import grid_from_values, grid_search, mse_report
    from .tensor_core import WorkloadSpec, generate

    bits = _single_bits(args)
    if args.params:
        params = _load_params(args.params)
    else:
        params = grid_search(_calibration_set(args, bits), grid_from_values(args.grid))
    wl = generate(WorkloadSpec(args.heads, args.n[0], args.d, _distribution(args), args.seed))
    report = mse_report(wl, bits, params, args.mode, bins=args.bins)
    out = _out_dir(args)
    report.write_csv(out / "mse.csv", out / "histogram.csv")
    summary = {
        "bits": bits,
        "tau1": params.tau1,
        "tau2": params.tau2,
        "mean_mse": {v: report.mean_mse(v) for v in ("exact", "quant", "quant_c")},
        "outer_bin_mass": {v: report.outer_mass(v) for v in ("exact", "quant", "quant_c")},
        "files": [str(out / "mse.csv"), str(out / "histogram.csv")],
    }
    json.dump(summary, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    results = run_selftest(args.inject_fault)
    for r in results:
        line = f"{'PASS' if r.passed else 'FAIL'} {r.name}"
        print(line + (f": {r.detail}" if r.detail else ""))
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} suites passed")
    if failed:
        print("failing: " + ", ".join(failed), file=sys.stderr)
        return EXIT_PROPERTY
    return EXIT_OK


COMMANDS = {"bench": cmd_bench, "calibrate": cmd_calibrate, "mse": cmd_mse, "selftest": cmd_selftest}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigurationError) as exc:
        parser.error(str(exc))  # exits with 2
    except (OSError, FormatError) as exc:
        print(f"kvq: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
