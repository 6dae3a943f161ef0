"""``cwic`` command line: train, encode, decode, eval, inspect, make-toy-corpus.

Exit codes: 0 success, 3 I/O error, 4 configuration error, 5 corrupt data,
2 usage error (argparse).
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import __version__, codec, container
from .autoenc import STRIDE
from .data import make_toy_corpus, write_corpus
from .errors import CwicError, InputError
from .metrics import max_scales, ms_ssim, psnr
from .pipeline import load_config, run_training
from .ppm import from_planes, read_ppm, to_planes, write_ppm

ASCII_RAMP = " .:-=+*#%@"


def _read_bytes(path: str) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc


def _write_bytes(path: str, data: bytes) -> None:
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise InputError(f"cannot write {path}: {exc}") from exc


def _load_model(path: str):
    return container.load_model(_read_bytes(path))


def _degree(flag: str) -> int | None:
    return None if flag == "on" else 1


def cmd_train(args) -> int:
    cfg = load_config(args.config, seed=args.seed, loss=args.loss)
    report = run_training(cfg)
    last = report.metrics[-1] if report.metrics else {}
    print(f"model written to {cfg.model_out} ({report.seconds:.1f} s)")
    if last:
        print(f"final L_D={last['L_D']:.6f} sum_m={last['sum_m']:.2f}")
    if np.isfinite(report.heldout_bits):
        saving = 1.0 - report.heldout_bits / report.heldout_uniform_bits
        print(f"held-out entropy coding: {saving:.1%} below uniform PMFs")
    return 0


def cmd_encode(args) -> int:
    bundle, mid = _load_model(args.model)
    x = to_planes(read_ppm(args.input))
    enc = codec.encode_image(bundle, x, auto_pad=args.auto_pad, mid=mid)
    _write_bytes(args.output, enc.data)
    print(f"bpp={enc.bpp:.6f} bytes={len(enc.data)} sum_m={enc.sum_m}")
    return 0


def cmd_decode(args) -> int:
    bundle, mid = _load_model(args.model)
    dec = codec.decode_image(bundle, _read_bytes(args.input), _degree(args.parallel_planes), mid)
    write_ppm(args.output, from_planes(dec.image))
    return 0


def evaluate_image(bundle, mid, x: np.ndarray, auto_pad: bool = True) -> dict:
    enc = codec.encode_image(bundle, x, auto_pad=auto_pad, mid=mid)
    dec = codec.decode_image(bundle, enc.data, None, mid)
    xhat = to_planes(from_planes(dec.image))  # what a decoded PPM holds
    h, w = x.shape[1:]
    scales = min(3, max_scales(h, w))
    row = {"bpp": enc.bpp, "psnr": psnr(xhat, x), "msssim": ms_ssim(xhat, x, scales) if scales else float("nan")}
    row["bytes"] = len(enc.data)
    return row


def cmd_eval(args) -> int:
    bundle, mid = _load_model(args.model)
    paths = sorted(Path(args.images).glob("*.ppm"))
    if not paths:
        raise InputError(f"no .ppm images in {args.images}")
    out = open(args.output, "w", newline="") if args.output else sys.stdout
    try:
        w = csv.writer(out)
        w.writerow(["image", "bytes", "bpp", "psnr", "msssim"])
        rows = []
        for p in paths:
            r = evaluate_image(bundle, mid, to_planes(read_ppm(p)), auto_pad=args.auto_pad)
            rows.append(r)
            w.writerow([p.name, r["bytes"], f"{r['bpp']:.6f}", f"{r['psnr']:.4f}", f"{r['msssim']:.6f}"])
        mean = {k: float(np.mean([r[k] for r in rows])) for k in ("bytes", "bpp", "psnr", "msssim")}
        w.writerow(["mean", f"{mean['bytes']:.2f}", f"{mean['bpp']:.6f}", f"{mean['psnr']:.4f}", f"{mean['msssim']:.6f}"])
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def render_importance(qi: np.ndarray, L: int) -> str:
    idx = np.round(qi / max(L - 1, 1) * (len(ASCII_RAMP) - 1)).astype(int)
    return "\n".join("".join(ASCII_RAMP[v] for v in row) for row in idx)


def cmd_inspect(args) -> int:
    stream = container.read_bitstream(_read_bytes(args.input))
    h = stream.header
    print(f"magic            CWIC v{h.version}")
    print(f"coded size       {h.height}x{h.width}")
    print(f"original size    {h.orig_height}x{h.orig_width}")
    print(f"n, L, T          {h.n}, {h.L}, {h.T}")
    print(f"model id         {h.model_id.hex()}")
    print(f"importance bytes {h.imp_len}")
    print(f"code bytes       {h.code_len}")
    total = container.HEADER_SIZE + h.imp_len + h.code_len
    print(f"total bytes      {total} ({8 * total / (h.orig_height * h.orig_width):.6f} bpp)")
    if not args.model:
        print("(pass --model to decode the importance map)")
        return 0
    bundle, mid = _load_model(args.model)
    codec.check_model(h, bundle, mid)
    hh, ww = h.height // STRIDE, h.width // STRIDE
    qi, _, mask = codec.decode_codes(bundle, stream.importance, stream.code, hh, ww)
    hist = np.bincount(qi.ravel(), minlength=h.L)
    print("importance histogram:")
    for level, count in enumerate(hist):
        print(f"  level {level:3d}: {count}")
    print(f"sum_m            {int(mask.sum())}")
    print("importance map:")
    print(render_importance(qi, h.L))
    return 0


def cmd_make_toy_corpus(args) -> int:
    x, _ = make_toy_corpus(args.count, args.size, args.seed)
    try:
        write_corpus(args.output, x)
    except OSError as exc:
        raise InputError(f"cannot write corpus to {args.output}: {exc}") from exc
    print(f"wrote {len(x)} images to {args.output}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cwic", description="Content-weighted learned image codec.")
    ap.add_argument("--version", action="version", version=f"cwic {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a directory of PPM images")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--loss", choices=("mse", "msssim"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="compress a PPM image")
    p.add_argument("--model", required=True)
    p.add_argument("--auto-pad", action="store_true", help="edge-pad to a multiple of 8 and crop on decode")
    p.add_argument("input")
    p.add_argument("output")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="decompress to a PPM image")
    p.add_argument("--model", required=True)
    p.add_argument("--parallel-planes", choices=("on", "off"), default="on")
    p.add_argument("input")
    p.add_argument("output")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="bpp / PSNR / MS-SSIM over a directory, as CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--auto-pad", action="store_true")
    p.add_argument("--output", help="CSV path (default: stdout)")
    p.add_argument("images")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="dump a compressed stream")
    p.add_argument("--model", help="decode the importance map with this model")
    p.add_argument("input")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("make-toy-corpus", help="write synthetic training images")
    p.add_argument("--count", type=int, default=500)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("output")
    p.set_defaults(func=cmd_make_toy_corpus)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CwicError as exc:
        print(f"cwic {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
