"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 estimation failure, 3 I/O error.
The MESSY_THREADS environment variable caps replicate parallelism in the
benchmark subcommand (timing runs always stay on one worker).
"""
from __future__ import annotations

import argparse
import math
import sys

import numpy as np

from . import bench
from .errors import CsvParseError, MessyError
from .samples import SampleSet
from .search import SearchConfig, messy_fit

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_ESTIMATION = 2
EXIT_IO = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _parse_bound(text):
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected lo,hi but got {text!r}")
    try:
        lo = float(parts[0])
        hi = float(parts[1])
    except ValueError as err:
        raise argparse.ArgumentTypeError(str(err)) from None
    if math.isnan(lo) or math.isnan(hi) or lo >= hi:
        raise argparse.ArgumentTypeError(f"need lo < hi in {text!r}")
    return (lo, hi)


def _parse_nb_range(text):
    m = text.split("..")
    if len(m) != 2:
        raise argparse.ArgumentTypeError(f"expected a..b but got {text!r}")
    try:
        a, b = int(m[0]), int(m[1])
    except ValueError as err:
        raise argparse.ArgumentTypeError(str(err)) from None
    if a > b:
        raise argparse.ArgumentTypeError("need a <= b")
    return tuple(range(a, b + 1))


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError as err:
        raise argparse.ArgumentTypeError(str(err)) from None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="messy", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", help="fit a density to CSV samples")
    est.add_argument("--input", required=True)
    est.add_argument("--mode", choices=("p", "s"), default="s")
    est.add_argument("--nm", type=int, default=4, help="even max growth order")
    est.add_argument("--nb-range", type=_parse_nb_range, default=(2, 3, 4, 5, 6, 7, 8))
    est.add_argument("--iters", type=int, default=10)
    est.add_argument("--seed", type=int, default=0)
    est.add_argument("--bounded", type=_parse_bound, nargs="+", default=None,
                     metavar="LO,HI", help="per-dimension support bounds")
    est.add_argument("--levels", type=int, default=5)
    est.add_argument("--no-mxed", action="store_true",
                     help="skip the moment-matching correction")
    est.add_argument("--out", required=True)

    ben = sub.add_parser("benchmark", help="run a benchmark study")
    ben.add_argument("--case", required=True)
    ben.add_argument("--n", type=_int_list, required=True, metavar="N1,N2,...")
    ben.add_argument("--methods", required=True,
                     help="comma list from kde,hist,mxed_oracle,messy_p,messy_s,lambda_solve")
    ben.add_argument("--replicates", type=int, default=bench.DEFAULT_REPLICATES)
    ben.add_argument("--seed", type=int, default=0)
    ben.add_argument("--no-timing", action="store_true",
                     help="omit wall times for byte-identical reports")
    ben.add_argument("--nm", type=int, default=None)
    ben.add_argument("--out", required=True)

    smp = sub.add_parser("sample", help="draw from an exported density")
    smp.add_argument("--density", required=True)
    smp.add_argument("--n", type=int, required=True)
    smp.add_argument("--seed", type=int, default=0)
    smp.add_argument("--out", required=True)

    gen = sub.add_parser("gen", help="generate benchmark-case samples")
    gen.add_argument("--case", required=True)
    gen.add_argument("--n", type=int, required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    return parser


def _cmd_estimate(args) -> int:
    try:
        samples = bench.ingest_csv(args.input)
    except (OSError, CsvParseError) as err:
        print(f"messy: input error: {err}", file=sys.stderr)
        return EXIT_IO
    try:
        config = SearchConfig(
            mode=args.mode,
            max_order=args.nm,
            nb_choices=args.nb_range,
            n_iters=args.iters,
            seed=args.seed,
            bounded=args.bounded is not None,
            bounds=args.bounded,
            n_levels=args.levels,
            use_mxed=not args.no_mxed,
        )
    except ValueError as err:
        print(f"messy: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    try:
        result = messy_fit(samples, config)
    except (MessyError, ValueError) as err:
        print(f"messy: estimation failed: {err}", file=sys.stderr)
        return EXIT_ESTIMATION
    chosen = result.messy_s if args.mode == "s" else result.messy_p
    payload = {
        "input": str(args.input),
        "n": samples.n,
        "dimension": samples.dimension,
        "config": {
            "mode": args.mode, "nm": args.nm, "nb_range": list(args.nb_range),
            "iters": args.iters, "seed": args.seed, "levels": args.levels,
            "bounded": [list(b) for b in args.bounded] if args.bounded else None,
        },
        "density": bench.density_to_dict(chosen),
        "messy_p": None if result.messy_p is None else bench.density_to_dict(result.messy_p),
        "report": result.report(),
    }
    try:
        bench.export_report(payload, args.out)
    except OSError as err:
        print(f"messy: output error: {err}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def _cmd_benchmark(args) -> int:
    methods = [m for m in args.methods.split(",") if m]
    overrides = {}
    if args.nm is not None:
        overrides["max_order"] = args.nm
    try:
        report = bench.run_benchmark(
            args.case, args.n, methods, replicates=args.replicates,
            seed=args.seed, timing=not args.no_timing, **overrides,
        )
    except ValueError as err:
        print(f"messy: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except MessyError as err:
        print(f"messy: benchmark failed: {err}", file=sys.stderr)
        return EXIT_ESTIMATION
    try:
        bench.export_report(report, args.out)
    except OSError as err:
        print(f"messy: output error: {err}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def _cmd_sample(args) -> int:
    try:
        density = bench.load_density(args.density)
    except (OSError, ValueError, KeyError) as err:
        print(f"messy: cannot load density: {err}", file=sys.stderr)
        return EXIT_IO
    from .density import draw

    try:
        samples = draw(density, args.n, np.random.default_rng(args.seed))
    except MessyError as err:
        print(f"messy: sampling failed: {err}", file=sys.stderr)
        return EXIT_ESTIMATION
    try:
        bench.export_samples_csv(samples, args.out)
    except OSError as err:
        print(f"messy: output error: {err}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def _cmd_gen(args) -> int:
    try:
        samples = bench.gen_samples(args.case, args.n, args.seed)
    except ValueError as err:
        print(f"messy: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    try:
        bench.export_samples_csv(samples, args.out)
    except OSError as err:
        print(f"messy: output error: {err}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    handler = {
        "estimate": _cmd_estimate,
        "benchmark": _cmd_benchmark,
        "sample": _cmd_sample,
        "gen": _cmd_gen,
    }[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
