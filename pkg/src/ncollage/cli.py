"""Command-line front end.

Diagnostics go to stdout as a single JSON line; human-readable messages go to
stderr. Exit codes: 0 ok, 2 usage error, 3 I/O or format error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import codec, collage, metrics, raster
from .collage import SolveConfig
from .encoders import (
    EncoderConfig,
    decode_blockwise,
    encode_blockwise,
    encode_collage,
    fractalize_encode,
    split_blocks,
    surrogate_loss,
)
from .errors import (
    ArgumentError,
    CollageError,
    ContractivityError,
    FormatError,
    NumericalError,
    ParseError,
    PartitionError,
)
from .pifs import PifsCode, encode_pifs, pifs_residual

EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 2, 3, 4
IMAGE_SUFFIXES = (".pgm", ".ppm")

log = logging.getLogger("ncollage")


class UsageError(Exception):
    pass


def _emit(payload: dict) -> None:
    sys.stdout.write(json.dumps(payload, sort_keys=True, default=_jsonable) + "\n")
    sys.stdout.flush()


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def _finite(v: float):
    return v if math.isfinite(v) else None


def _threads(args) -> int:
    env = os.environ.get("NCOLLAGE_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"NCOLLAGE_THREADS must be an integer, got {env!r}") from None
    else:
        n = args.threads if args.threads is not None else (os.cpu_count() or 1)
    if n < 1:
        raise UsageError("thread count must be >= 1")
    return n


def _scheme(args) -> raster.PartitionScheme:
    try:
        return raster.PartitionScheme(args.range, args.domain, args.stride)
    except PartitionError as exc:
        raise UsageError(str(exc)) from None


def _scales(text: str) -> list[int]:
    try:
        scales = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"bad scale list {text!r}") from None
    if not scales or any(s < 1 for s in scales):
        raise UsageError("scales must be integers >= 1")
    return scales


def _solve_cfg(args) -> SolveConfig:
    if args.tolerance <= 0 or args.max_iters < 1:
        raise UsageError("tolerance must be > 0 and max-iters >= 1")
    return SolveConfig(tolerance=args.tolerance, max_iters=args.max_iters, force=getattr(args, "force", False))


# --------------------------------------------------------------------------- subcommands


def _ct_report(x, codes, block_size):
    blocks = split_blocks(x, block_size) if block_size else [x]
    worst, loss = 0.0, 0.0
    for blk, code in zip(blocks, codes):
        if isinstance(code, PifsCode):
            loss += pifs_residual(blk, code)
            code = code.to_collage()
        else:
            loss += surrogate_loss(blk, code)
        try:
            bound, _ = collage.ct_bound(blk, code)
        except ContractivityError:
            bound = math.inf
        worst = max(worst, bound)
    psnr_lower = -20.0 * math.log10(worst) if 0 < worst < math.inf else (metrics.PSNR_CAP if worst == 0 else None)
    return loss, worst, psnr_lower


def cmd_encode(args) -> int:
    scheme = _scheme(args)
    threads = _threads(args)
    if args.epsilon not in (2, 3, 4, 5):
        raise UsageError("--epsilon must be 2, 3, 4 or 5")
    aux = args.aux if args.aux is not None else (0 if args.method == "pifs" else 3)
    if args.method == "pifs" and aux:
        raise UsageError("--aux applies to the collage method only")
    if args.gd_steps < 0:
        raise UsageError("--gd-steps must be >= 0")
    x = raster.load_image(args.input)
    try:
        scheme.validate(x.width, x.height)
        if args.block:
            scheme.validate(args.block, args.block)
            if x.width % args.block or x.height % args.block:
                raise PartitionError(f"block {args.block} does not divide {x.width}x{x.height}")
    except PartitionError as exc:
        raise UsageError(str(exc)) from None
    cfg = EncoderConfig(
        use_augmentations=args.augment, aux_count=aux, seed=args.seed,
        gd_steps=args.gd_steps, threads=threads,
    )
    spec = codec.QuantizationSpec(args.epsilon)
    if args.block:
        codes = encode_blockwise(x, args.block, scheme, cfg, args.method, threads=threads)
    elif args.method == "pifs":
        codes = [encode_pifs(x, scheme, cfg)]
    else:
        codes = [encode_collage(x, scheme, cfg)]
    container = codec.serialize(codes, spec, args.output, width=x.width, height=x.height)
    stored = container.dequantize()
    loss, bound, psnr_lower = _ct_report(x, stored, args.block)
    _emit({
        "command": "encode", "kind": container.kind, "output": str(args.output),
        "bpp": container.bpp(), "breakdown": container.breakdown().as_dict(),
        "surrogate_loss": loss, "ct_bound": _finite(bound), "ct_psnr_lower": psnr_lower,
        "K": container.K, "N": container.N, "V": container.V, "epsilon": container.epsilon,
    })
    return 0


def _decode_container(container: codec.CodeContainer, cfg: SolveConfig, scale: int, method: str):
    codes = container.dequantize()
    by, bx = container.grid
    bw, bh = container.width // bx, container.height // by
    outs, iters, step, ok = [], 0, 0.0, True
    for code in codes:
        if isinstance(code, PifsCode):
            code = code.to_collage() if scale != 1 else code
        if isinstance(code, PifsCode):
            from .pifs import decode_pifs_with_info
            res = decode_pifs_with_info(code, cfg)
        else:
            res = collage.decode_magnified_with_info(code, scale, cfg, method)
        outs.append(res.image)
        iters = max(iters, res.iterations)
        step = max(step, res.step)
        ok = ok and res.converged
    from .encoders import merge_blocks

    return merge_blocks(outs, container.width * scale, container.height * scale), iters, step, ok


def cmd_decode(args) -> int:
    if args.scale < 1:
        raise UsageError("--scale must be >= 1")
    cfg = _solve_cfg(args)
    container = codec.deserialize(args.input)
    img, iters, step, ok = _decode_container(container, cfg, args.scale, args.magnify)
    raster.save_image(img, args.output)
    _emit({
        "command": "decode", "output": str(args.output), "width": img.width, "height": img.height,
        "iterations": iters, "step": step, "converged": ok,
    })
    return 0


def _scaled_path(template: str, s: int) -> Path:
    if "{scale}" in template:
        return Path(template.format(scale=s))
    p = Path(template)
    return p.with_name(f"{p.stem}_x{s}{p.suffix or '.pgm'}")


def cmd_fractalize(args) -> int:
    scales = _scales(args.scales)
    x = raster.load_image(args.input)
    if x.width != x.height:
        raise UsageError(f"fractalize needs a square image, got {x.width}x{x.height}")
    r = args.range or max(1, x.width // 4)
    if x.width % r:
        raise UsageError(f"range size {r} does not divide {x.width}")
    if args.gd_steps < 0:
        raise UsageError("--gd-steps must be >= 0")
    cfg = EncoderConfig(gd_steps=args.gd_steps, seed=args.seed)
    code = fractalize_encode(x, cfg, r)
    solve = _solve_cfg(args)
    outputs = []
    for s in scales:
        res = collage.decode_magnified_with_info(code, s, solve, args.magnify)
        path = _scaled_path(args.output, s)
        raster.save_image(res.image, path)
        outputs.append({"scale": s, "path": str(path), "width": res.image.width,
                        "height": res.image.height, "iterations": res.iterations})
    _emit({"command": "fractalize", "surrogate_loss": surrogate_loss(x, code),
           "lipschitz": collage.lipschitz_bound(code).L, "outputs": outputs})
    return 0


def cmd_dct(args) -> int:
    if args.patch < 1:
        raise UsageError("--patch must be >= 1")
    x = raster.load_image(args.input)
    if x.width % args.patch or x.height % args.patch:
        raise UsageError(f"patch {args.patch} does not divide {x.width}x{x.height}")
    coeffs = metrics.block_dct_encode(x, args.patch).astype(np.float32)
    y = metrics.block_dct_decode(coeffs, x.shape, args.patch)
    raster.save_image(y, args.output)
    _emit({"command": "dct", "output": str(args.output), "bpp": metrics.block_dct_bpp(x.shape, args.patch),
           "psnr_db": metrics.psnr(x, y)})
    return 0


def cmd_psnr(args) -> int:
    a, b = raster.load_image(args.first), raster.load_image(args.second)
    if a.shape != b.shape:
        raise UsageError(f"shape mismatch {a.shape} vs {b.shape}")
    _emit({"command": "psnr", "psnr_db": metrics.psnr(a, b, args.peak), "mse": metrics.mse(a, b)})
    return 0


def cmd_bench(args) -> int:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    unknown = [m for m in methods if m not in metrics.METHODS]
    if unknown or not methods:
        raise UsageError(f"unknown methods {unknown}; choose from {', '.join(metrics.METHODS)}")
    src = Path(args.directory)
    if not src.is_dir():
        raise OSError(f"not a directory: {src}")
    files = sorted(p for p in src.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise UsageError(f"no .pgm/.ppm images in {src}")
    cfg = metrics.BenchConfig(
        range_size=args.range, domain_size=args.domain, domain_stride=args.stride,
        block_size=args.block or None, aux_count=args.aux, epsilon=args.epsilon,
        gd_steps=args.gd_steps, dct_patch=args.patch, repeats=args.repeats,
        threads=_threads(args), seed=args.seed,
    )
    report = metrics.bench([(p.name, raster.load_image(p)) for p in files], methods, cfg)
    prefix = Path(args.output)
    csv_path, json_path = prefix.with_suffix(".csv"), prefix.with_suffix(".json")
    report.write_csv(csv_path)
    report.write_json(json_path)
    _emit({"command": "bench", "csv": str(csv_path), "json": str(json_path), "rows": len(report.rows),
           "errors": sum(1 for r in report.rows if r.error), "config_hash": report.metadata["config_hash"]})
    return 0


def cmd_inspect(args) -> int:
    container = codec.deserialize(args.input)
    _emit({"command": "inspect", **container.header(), "breakdown": container.breakdown().as_dict()})
    return 0


# --------------------------------------------------------------------------- parser


def _add_scheme(p, block=True):
    p.add_argument("--range", type=int, default=8, help="range cell size (pixels)")
    p.add_argument("--domain", type=int, default=16, help="domain cell size (pixels)")
    p.add_argument("--stride", type=int, default=16, help="domain stride (pixels)")
    if block:
        p.add_argument("--block", type=int, default=0, help="encode independent tiles of this size")


def _add_solve(p):
    p.add_argument("--tolerance", type=float, default=1e-8)
    p.add_argument("--max-iters", type=int, default=200)
    p.add_argument("--magnify", choices=("polyphase", "cells"), default="polyphase",
                   help="magnification: polyphase sub-images or rescaled cells")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ncollage", description="Collage-operator fractal image codec")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", help="encode an image into a code container")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--method", choices=("pifs", "collage"), default="collage")
    _add_scheme(p)
    p.add_argument("--aux", type=int, default=None, help="auxiliary cells (default 0 pifs, 3 collage)")
    p.add_argument("--augment", action="store_true", help="add rotated and negated domains")
    p.add_argument("--epsilon", type=int, default=3, help="decimal digits kept by quantization")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gd-steps", type=int, default=200)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="decode a container to an image")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--scale", type=int, default=1)
    p.add_argument("--force", action="store_true", help="decode codes that are not certified contractive")
    _add_solve(p)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("fractalize", help="fit a whole-image collage and decode it at several scales")
    p.add_argument("input")
    p.add_argument("output", help="output path; '{scale}' is substituted, else _x<scale> is appended")
    p.add_argument("--scales", default="1,2,4,8")
    p.add_argument("--range", type=int, default=0, help="range cell size (default side/4)")
    p.add_argument("--gd-steps", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    _add_solve(p)
    p.set_defaults(func=cmd_fractalize, magnify="cells")

    p = sub.add_parser("dct", help="DC-only block DCT baseline")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--patch", type=int, default=16)
    p.set_defaults(func=cmd_dct)

    p = sub.add_parser("psnr", help="PSNR between two images")
    p.add_argument("first")
    p.add_argument("second")
    p.add_argument("--peak", type=float, default=1.0)
    p.set_defaults(func=cmd_psnr)

    p = sub.add_parser("bench", help="rate-distortion benchmark over a directory of images")
    p.add_argument("directory")
    p.add_argument("--output", default="bench_report", help="report path prefix (.csv and .json)")
    p.add_argument("--methods", default="pifs,pifs_aug,collage,dct")
    _add_scheme(p)
    p.add_argument("--aux", type=int, default=3)
    p.add_argument("--epsilon", type=int, default=3)
    p.add_argument("--gd-steps", type=int, default=200)
    p.add_argument("--patch", type=int, default=16)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("inspect", help="print a container header")
    p.add_argument("input")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ArgumentError) as exc:
        print(f"ncollage {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ParseError, FormatError) as exc:
        print(f"ncollage {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericalError, ContractivityError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"ncollage {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CollageError as exc:
        print(f"ncollage {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
