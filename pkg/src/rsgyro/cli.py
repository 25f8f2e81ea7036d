"""Command-line entry point: one verb per pipeline stage.

Subcommands: igf, simulate, correct, invert-field, synth, eval,
export-testvectors. Every subcommand is deterministic given its full flag
set; RSGYRO_WORKERS overrides the default worker count and nothing else.

Exit codes: 0 success, 2 usage, 3 unreadable input, 4 file-format error,
5 contract violation, 1 unexpected failure. Failures print one JSON line to
stderr: {"error": <type>, "message": <text>, "code": <exit code>}.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import fileio
from .diffusion import (
    DEFAULT_BETA_END,
    DEFAULT_BETA_START,
    DEFAULT_NORM_SCALE,
    DEFAULT_T,
    ddim_step,
    make_schedule,
)
from .errors import (
    ContractError,
    CoverageError,
    DegenerateMaskError,
    FlowFormatError,
    InvalidTraceError,
    NonContractiveFieldError,
    PointAtInfinityError,
    RangeError,
    ShapeError,
    StepOrderError,
)
from .field import RowTiming, build_igf, invert_field, remap, row_rotations, upsample_field
from .metrics import FlowDirPredictor, OraclePredictor, ZeroPredictor, evaluate
from .synth import (
    DEFAULT_MAX_ANGLE_DEG,
    DEFAULT_RATE_HZ,
    DEFAULT_READOUT_NS,
    PATTERN_KINDS,
    synth_dataset,
)

EXIT_USAGE = 2
EXIT_UNREADABLE = 3
EXIT_FORMAT = 4
EXIT_CONTRACT = 5

_CONTRACT_ERRORS = (
    RangeError,
    InvalidTraceError,
    CoverageError,
    PointAtInfinityError,
    ShapeError,
    NonContractiveFieldError,
    StepOrderError,
    ContractError,
    DegenerateMaskError,
    ValueError,
)


def _default_workers() -> int:
    return int(os.environ.get("RSGYRO_WORKERS", "1"))


def _load_timing(args, height: int) -> RowTiming:
    return RowTiming(
        readout_ns=int(round(args.readout_ms * 1e6)),
        t0_ns=args.t0_ns,
        reference_row=args.reference_row,
    )


def _cmd_igf(args) -> int:
    k = fileio.read_intrinsics(args.intrinsics)
    trace = fileio.read_trace(args.trace)
    timing = _load_timing(args, k.height)
    rows = row_rotations(trace, timing, k.height)
    g, _ = build_igf(k, rows, k.width, k.height)
    fileio.write_flow(args.out, g)
    return 0


def _cmd_simulate(args) -> int:
    src = fileio.load_image(args.src)
    k = fileio.read_intrinsics(args.intrinsics)
    if (src.width, src.height) != (k.width, k.height):
        raise ShapeError(
            f"source {src.width}x{src.height} does not match intrinsics "
            f"{k.width}x{k.height}"
        )
    trace = fileio.read_trace(args.trace)
    timing = _load_timing(args, src.height)
    rows = row_rotations(trace, timing, src.height)
    g, _ = build_igf(k, rows, src.width, src.height)
    g_inv = invert_field(g, iters=args.iters, tol=args.tol)
    rs, _ = remap(src, g_inv)
    fileio.save_image(args.out, rs)
    if args.field_out:
        fileio.write_flow(args.field_out, g)
    return 0


def _cmd_correct(args) -> int:
    img = fileio.load_image(args.rs)
    g = fileio.read_flow(args.flow)
    if (g.width, g.height) != (img.width, img.height):
        g = upsample_field(g, img.width, img.height)
    out, _ = remap(img, g)
    fileio.save_image(args.out, out)
    return 0


def _cmd_invert_field(args) -> int:
    g = fileio.read_flow(args.flow)
    fileio.write_flow(args.out, invert_field(g, iters=args.iters, tol=args.tol))
    return 0


def _cmd_synth(args) -> int:
    fixed = None
    if args.single_pattern:
        # draw one pattern up front and reuse it for every distorted sample;
        # --pattern-seed lets train/test splits share the pattern
        from .synth import _draw_pattern

        pattern_seed = args.seed if args.pattern_seed is None else args.pattern_seed
        rng = np.random.default_rng(pattern_seed)
        fixed = _draw_pattern(
            rng, list(args.patterns), args.max_angle_deg, args.readout_ms * 1e-3
        )
    rows = synth_dataset(
        src_dir=args.src,
        out_dir=args.out,
        count=args.count,
        identity_fraction=args.identity_fraction,
        seed=args.seed,
        width=args.width,
        height=args.height,
        pattern_kinds=list(args.patterns),
        fixed_pattern=fixed,
        max_angle_deg=args.max_angle_deg,
        readout_ns=int(round(args.readout_ms * 1e6)),
        rate_hz=args.rate_hz,
        model_resolution=args.model_res,
        norm_scale=args.norm_scale,
        workers=args.workers,
    )
    print(f"wrote {len(rows)} samples to {args.out}")
    return 0


def _make_predictor(name: str, manifest_path: str):
    rows = fileio.read_manifest(manifest_path)
    norm_scale = float(rows[0]["norm_scale"]) if rows else DEFAULT_NORM_SCALE
    if name == "oracle":
        return OraclePredictor(manifest_path, norm_scale)
    if name == "zero":
        return ZeroPredictor()
    if name.startswith("flow:"):
        return FlowDirPredictor(name[len("flow:"):], norm_scale)
    raise ValueError(f"unknown predictor {name!r} (use oracle, zero, or flow:<dir>)")


def _cmd_eval(args) -> int:
    predictor = _make_predictor(args.predictor, args.manifest)
    report = evaluate(
        args.manifest,
        predictor,
        runs=args.runs,
        base_seed=args.seed,
        workers=args.workers,
    )
    with open(args.out, "w") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    if args.csv:
        with open(args.csv, "w") as f:
            f.write(report.to_csv(method=args.predictor))
    agg = report.aggregate
    if agg:
        print(
            f"psnr {agg['psnr_db']['mean']:.3f}({agg['psnr_db']['std']:.3f}) dB  "
            f"ssim {agg['ssim']['mean']:.4f}({agg['ssim']['std']:.4f})  "
            f"epe {agg['epe_px']['mean']:.4f}({agg['epe_px']['std']:.4f}) px  "
            f"[{len(report.samples)} samples, {len(report.failed)} failed]"
        )
    return 0


def _cmd_export_testvectors(args) -> int:
    s = make_schedule(args.T, args.beta_start, args.beta_end)
    probes = sorted(set(np.round(np.linspace(0, args.T - 1, 32)).astype(int).tolist()))
    rng = np.random.default_rng(2024)
    cases = []
    pairs = [(args.T - 1, args.T // 2), (args.T // 2, args.T // 8), (args.T // 8, 0), (0, -1)]
    pairs += [(int(t), int(tp)) for t, tp in rng.integers(0, args.T, size=(8, 2)) if t > tp]
    for t, t_prev in pairs:
        x_t = float(rng.standard_normal())
        x0_hat = float(rng.standard_normal())
        expected = float(
            ddim_step(np.array([[[x_t]]]), np.array([[[x0_hat]]]), t, t_prev, 0.0, s)[0, 0, 0]
        )
        cases.append(
            {"t": t, "t_prev": t_prev, "x_t": x_t, "x0_hat": x0_hat, "expected": expected}
        )
    payload = {
        "T": args.T,
        "beta_start": args.beta_start,
        "beta_end": args.beta_end,
        "alpha_bar": [[int(t), float(s.alpha_bar[t])] for t in probes],
        "ddim_cases": cases,
    }
    with open(args.out, "w") as f:
        json.dump(payload, f, indent=2)
        f.write("\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rsgyro", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_timing(p):
        p.add_argument("--readout-ms", type=float, default=DEFAULT_READOUT_NS / 1e6)
        p.add_argument("--t0-ns", type=int, default=0)
        p.add_argument("--reference-row", type=int, default=0)

    p = sub.add_parser("igf", help="build a gyro motion field from a trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--intrinsics", required=True)
    p.add_argument("--out", required=True)
    add_timing(p)
    p.set_defaults(func=_cmd_igf)

    p = sub.add_parser("simulate", help="render a rolling-shutter image from a source")
    p.add_argument("--src", required=True)
    p.add_argument("--trace", required=True)
    p.add_argument("--intrinsics", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--field-out", default=None)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--tol", type=float, default=1e-3)
    add_timing(p)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("correct", help="correct an RS image with a flow file")
    p.add_argument("--rs", required=True)
    p.add_argument("--flow", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_correct)

    p = sub.add_parser("invert-field", help="numerically invert a flow file")
    p.add_argument("--flow", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--tol", type=float, default=1e-3)
    p.set_defaults(func=_cmd_invert_field)

    p = sub.add_parser("synth", help="synthesize an (RS, GS, field) dataset")
    p.add_argument("--src", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--identity-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--width", type=int, default=600)
    p.add_argument("--height", type=int, default=800)
    p.add_argument("--patterns", nargs="+", default=list(PATTERN_KINDS), choices=PATTERN_KINDS)
    p.add_argument("--single-pattern", action="store_true",
                   help="draw one motion pattern and reuse it for all distorted samples")
    p.add_argument("--pattern-seed", type=int, default=None,
                   help="seed for the --single-pattern draw (defaults to --seed)")
    p.add_argument("--max-angle-deg", type=float, default=DEFAULT_MAX_ANGLE_DEG)
    p.add_argument("--readout-ms", type=float, default=DEFAULT_READOUT_NS / 1e6)
    p.add_argument("--rate-hz", type=float, default=DEFAULT_RATE_HZ)
    p.add_argument("--model-res", type=int, default=64)
    p.add_argument("--norm-scale", type=float, default=DEFAULT_NORM_SCALE)
    p.add_argument("--workers", type=int, default=_default_workers())
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("eval", help="evaluate a predictor over a dataset manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--predictor", required=True,
                   help="oracle | zero | flow:<dir with per-run .flo files>")
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--csv", default=None)
    p.add_argument("--workers", type=int, default=_default_workers())
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("export-testvectors",
                       help="export scheduler/DDIM agreement vectors as JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--T", type=int, default=DEFAULT_T)
    p.add_argument("--beta-start", type=float, default=DEFAULT_BETA_START)
    p.add_argument("--beta-end", type=float, default=DEFAULT_BETA_END)
    p.set_defaults(func=_cmd_export_testvectors)

    return parser


def _fail(code: int, err: BaseException) -> int:
    line = {"error": type(err).__name__, "message": str(err), "code": code}
    print(json.dumps(line), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FlowFormatError as err:
        return _fail(EXIT_FORMAT, err)
    except (FileNotFoundError, PermissionError, IsADirectoryError) as err:
        return _fail(EXIT_UNREADABLE, err)
    except (json.JSONDecodeError, KeyError) as err:
        return _fail(EXIT_FORMAT, err)
    except _CONTRACT_ERRORS as err:
        return _fail(EXIT_CONTRACT, err)
    except Exception as err:  # anything else is a bug, not a user error
        return _fail(1, err)


if __name__ == "__main__":
    sys.exit(main())
