"""Command-line entry point: ``comrec {train,compress,decompress,eval,gradcheck}``.

Exit codes: 0 success, 1 usage / IO / format error, 2 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .codec import Bitstream, bits_per_pixel
from .errors import ComrecError
from .gradcheck import split_check
from .metrics import psnr, ssim
from .models import BicubicUpsample, ComCNN, RecCNN, pipeline_compress, pipeline_decompress
from .nn import BatchNorm2d, Conv2d, ReLU, Sequential
from .pgm import read_pgm, write_pgm
from .rng import Xorshift64Star
from .training import (TrainConfig, algorithm1, load_config, load_images, prepare_patches,
                       save_outputs)

EXIT_OK, EXIT_ERROR, EXIT_VERIFY = 0, 1, 2


class _ArgumentParser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; usage errors here map to 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# train / compress / decompress
# --------------------------------------------------------------------------

def cmd_train(args) -> int:
    config = load_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        config.seed = args.seed
        config.validate()
    images = load_images(args.data)
    if not images:
        raise ComrecError(f"{args.data}: no .pgm files found")
    if args.val:
        val = load_images(args.val)
    elif config.val_count:
        if config.val_count >= len(images):
            raise ComrecError("val_count leaves no training images")
        images, val = images[:-config.val_count], images[-config.val_count:]
    else:
        val = images
    patches = prepare_patches(images, config)
    if len(patches) == 0:
        raise ComrecError(f"{args.data}: no image is large enough for a "
                          f"{config.patch_size}x{config.patch_size} patch")
    comcnn, reccnn, report = algorithm1(patches, config, val, args.out)
    save_outputs(args.out, comcnn, reccnn, report)
    return EXIT_OK


def cmd_compress(args) -> int:
    img = read_pgm(args.input)
    comcnn = checkpoint.load(args.comcnn, ComCNN)
    bs = pipeline_compress(img, comcnn, args.qf)
    bs.save(args.out)
    print(f"bpp={bits_per_pixel(bs, img.shape[2], img.shape[1]):.6f}")
    return EXIT_OK


def cmd_decompress(args) -> int:
    bs = Bitstream.load(args.input)
    reccnn = checkpoint.load(args.reccnn, RecCNN)
    write_pgm(args.out, pipeline_decompress(bs, reccnn))
    return EXIT_OK


# --------------------------------------------------------------------------
# eval
# --------------------------------------------------------------------------

def _pairs_from_csv(path) -> list[tuple[str, Path, Path]]:
    base = Path(path).parent
    out = []
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.reader(f):
            if not row or row[0].startswith("#"):
                continue
            if len(row) != 2:
                raise ComrecError(f"{path}: expected 'original,reconstruction' rows, got {row}")
            a, b = (base / r.strip() for r in row)
            out.append((a.name, a, b))
    return out


def _pairs_from_dirs(orig, recon) -> list[tuple[str, Path, Path]]:
    orig, recon = Path(orig), Path(recon)
    for d in (orig, recon):
        if not d.is_dir():
            raise ComrecError(f"{d}: not a directory")
    return [(p.name, p, recon / p.name) for p in sorted(orig.glob("*.pgm"))]


def _fmt(v: float) -> str:
    return "inf" if math.isinf(v) else f"{v:.6f}"


def cmd_eval(args) -> int:
    if args.pairs:
        pairs = _pairs_from_csv(args.pairs)
    elif args.orig and args.recon:
        pairs = _pairs_from_dirs(args.orig, args.recon)
    else:
        raise ComrecError("eval needs --pairs or both --orig and --recon")
    failed = False
    rows = []
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["name", "psnr", "ssim"])
    for name, a_path, b_path in pairs:
        try:
            a, b = read_pgm(a_path), read_pgm(b_path)
            p, s = psnr(a, b), ssim(a, b)
        except ComrecError as exc:
            print(f"{name}: {exc}", file=sys.stderr)
            w.writerow([name, "error", "error"])
            failed = True
            continue
        rows.append((p, s))
        w.writerow([name, _fmt(p), _fmt(s)])
    finite_p = [p for p, _ in rows if math.isfinite(p)]
    avg_p = float(np.mean(finite_p)) if finite_p else (math.inf if rows else math.nan)
    avg_s = float(np.mean([s for _, s in rows])) if rows else math.nan
    w.writerow(["average", _fmt(avg_p), _fmt(avg_s)])
    return EXIT_ERROR if failed else EXIT_OK


# --------------------------------------------------------------------------
# gradcheck
# --------------------------------------------------------------------------

class _Identity:
    """Pass-through fragment, so a check isolates the loss gradient."""

    def parameters(self):
        return []

    def forward(self, x, cache=True):
        return x

    def backward(self, grad, param_grads=True):
        return grad


class _Chain:
    """Sequential composition of whole fragments (keeps RecCNN's skip)."""

    def __init__(self, *parts):
        self.parts = parts
        self.layers = [layer for part in parts for layer in getattr(part, "layers", [part])]

    def parameters(self):
        return [p for part in self.parts for p in part.parameters()]

    def forward(self, x, cache=True):
        for part in self.parts:
            x = part.forward(x, cache)
        return x

    def backward(self, grad, param_grads=True):
        for part in reversed(self.parts):
            grad = part.backward(grad, param_grads)
        return grad


def _gradcheck_cases(seed: int):
    """(name, fragment, input, tolerance, max_coords) for every check row."""
    rng = Xorshift64Star(seed)

    def normal(*shape):
        return rng.normal_array(int(np.prod(shape))).reshape(shape)

    def conv(i, o, s=1):
        layer = Conv2d(i, o, s, rng)
        layer.bias.data[:] = 0.1 * normal(o)
        return layer

    bn = BatchNorm2d(3)
    bn.gamma.data[:] = 1.0 + 0.5 * normal(3)
    bn.beta.data[:] = 0.2 * normal(3)

    relu_in = normal(2, 2, 5, 5)
    relu_in += np.where(relu_in >= 0, 0.1, -0.1)   # keep clear of the kink

    bn_infer = BatchNorm2d(3)
    bn_infer.running_mean[:] = 0.3 * normal(3)
    bn_infer.running_var[:] = 0.5 + rng.uniform_array(3)
    bn_infer.training = False

    composite = Sequential([conv(1, 4), BatchNorm2d(4), ReLU(), conv(4, 4, 2), conv(4, 1)])
    reccnn = RecCNN(1, 4, rng=rng)
    frozen = RecCNN(1, 4, rng=rng)
    # non-trivial running statistics for the infer-mode surrogate path
    for _ in range(2):
        frozen.forward(rng.uniform_array(128).reshape(2, 1, 8, 8), cache=False)
    frozen.eval()
    surrogate = _Chain(ComCNN(1, 4, rng), BicubicUpsample((8, 8)), frozen)

    return [
        ("conv", conv(2, 3), normal(2, 2, 5, 6), 1e-4, None),
        ("conv_stride2", conv(2, 3, 2), normal(2, 2, 5, 6), 1e-4, None),
        ("relu", ReLU(), relu_in, 1e-4, None),
        ("batchnorm_train", bn, normal(2, 3, 4, 4), 1e-4, None),
        ("batchnorm_infer", bn_infer, normal(2, 3, 4, 4), 1e-4, None),
        ("mse", _Identity(), normal(3, 1, 4, 4), 1e-4, None),
        ("bicubic", BicubicUpsample(), normal(2, 1, 4, 5), 1e-4, None),
        ("composite_5layer", composite, normal(2, 1, 6, 6), 1e-4, None),
        ("reccnn_20layer", reccnn, rng.uniform_array(128).reshape(2, 1, 8, 8), 1e-3, 8),
        ("surrogate_23layer", surrogate, rng.uniform_array(64).reshape(1, 1, 8, 8), 1e-3, 8),
    ]


INERT_ATOL = 1e-8


def cmd_gradcheck(args) -> int:
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["check", "max_rel_error", "tolerance", "status"])
    offenders = []
    for name, fragment, x, tol, max_coords in _gradcheck_cases(args.seed):
        if args.corrupt_backward == name:
            original = fragment.backward
            fragment.backward = lambda g, param_grads=True, f=original: 1.01 * f(g, param_grads)
        rel, inert = split_check(fragment, x, max_coords=max_coords, seed=args.seed)
        ok = rel < tol and inert < INERT_ATOL
        if not ok:
            offenders.append(name)
        w.writerow([name, f"{rel:.3e}", f"{tol:g}", "ok" if ok else "FAIL"])
    if offenders:
        print(f"gradient check failed: {', '.join(offenders)}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog="comrec", description=__doc__.splitlines()[0])
    parser.add_argument("--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_ArgumentParser)

    p = sub.add_parser("train", help="alternating training on a directory of PGM images")
    p.add_argument("--data", required=True, help="directory of training .pgm files")
    p.add_argument("--config", help="key = value config file (desk defaults otherwise)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--val", help="validation images (defaults to the config's split)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compress", help="image -> ComCNN -> codec bitstream")
    p.add_argument("--in", dest="input", required=True, help="input .pgm")
    p.add_argument("--comcnn", required=True, help="ComCNN checkpoint")
    p.add_argument("--qf", type=int, required=True, help="quality factor 1..100, 0 = lossless")
    p.add_argument("--out", required=True, help="output bitstream")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("decompress", help="bitstream -> decode -> upscale -> RecCNN")
    p.add_argument("--in", dest="input", required=True, help="input bitstream")
    p.add_argument("--reccnn", required=True, help="RecCNN checkpoint")
    p.add_argument("--out", required=True, help="output .pgm")
    p.set_defaults(func=cmd_decompress)

    p = sub.add_parser("eval", help="PSNR / SSIM of image pairs as CSV")
    p.add_argument("--pairs", help="CSV of 'original,reconstruction' paths")
    p.add_argument("--orig", help="directory of originals")
    p.add_argument("--recon", help="directory of reconstructions with matching names")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt-backward", metavar="CHECK", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return args.func(args)
    except (ComrecError, OSError, ValueError) as exc:
        print(f"comrec {args.command}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
