"""Patch datasets, the two inner training loops and the alternating outer loop.

The outer loop, for t = 1..T:

1. run every training patch through ComCNN, quantise to 8 bits, encode and
   decode with the real codec, and bicubic-upscale back to patch size;
2. fit RecCNN's residual on those decoded inputs against the originals;
3. fit ComCNN through the frozen RecCNN with the codec removed from the
   path (``x -> ComCNN -> bicubic x2 -> RecCNN -> compare to x``).
"""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .codec import bits_per_pixel, decode_image, encode_image
from .errors import FormatError, IngestionError, ParameterError, UsageError
from .metrics import psnr, ssim
from .models import (BicubicUpsample, ComCNN, RecCNN, bicubic_resize, pipeline_compress,
                     pipeline_decompress, quantize_compact)
from .nn import Adam, mse_loss
from .pgm import read_pgm
from .rng import Xorshift64Star

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 30                # per inner loop
    batch_size: int = 32
    outer_iterations: int = 2       # T
    qf: int = 20
    seed: int = 0
    com_lr_start: float = 1e-3
    com_lr_end: float = 1e-4
    rec_lr_start: float = 1e-2
    rec_lr_end: float = 1e-4
    checkpoint_interval: int = 1
    channels: int = 1
    com_width: int = 16
    rec_width: int = 8
    rec_depth: int = 20
    patch_size: int = 40
    patch_stride: int = 20
    augment: bool = True
    max_patches: int = 600          # 0 keeps every patch
    val_count: int = 0              # trailing images held out for validation

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        positive = ["epochs", "batch_size", "outer_iterations", "checkpoint_interval",
                    "channels", "com_width", "rec_width", "patch_size", "patch_stride"]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ParameterError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 <= self.qf <= 100:
            raise ParameterError(f"qf must be in 0..100, got {self.qf}")
        if self.rec_depth < 3:
            raise ParameterError(f"rec_depth must be at least 3, got {self.rec_depth}")
        if self.max_patches < 0 or self.val_count < 0 or self.seed < 0:
            raise ParameterError("max_patches, val_count and seed must be non-negative")
        for net in ("com", "rec"):
            start, end = getattr(self, f"{net}_lr_start"), getattr(self, f"{net}_lr_end")
            if not start >= end > 0:
                raise ParameterError(f"{net} learning rates need start >= end > 0")


def desk_config(**overrides) -> TrainConfig:
    """Small-scale defaults that finish on one CPU core."""
    return TrainConfig(**overrides)


def full_config(**overrides) -> TrainConfig:
    """Full-scale regime: 400 images, all 204800 patches, batch 128,
    50 epochs, 64-filter networks, learning rates 1e-2..1e-4 (ComCNN) and
    1e-1..1e-4 (RecCNN)."""
    values = dict(epochs=50, batch_size=128, com_width=64, rec_width=64, max_patches=0,
                  com_lr_start=1e-2, com_lr_end=1e-4, rec_lr_start=1e-1, rec_lr_end=1e-4)
    values.update(overrides)
    return TrainConfig(**values)


def _parse_value(raw: str, typ):
    if typ is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return typ(raw)


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse ``key = value`` lines (``#`` comments); unknown keys are rejected."""
    values = dataclasses.asdict(base or TrainConfig())
    types = {f.name: type(values[f.name]) for f in dataclasses.fields(TrainConfig)}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or not key:
            raise FormatError(f"config line {lineno}: expected 'key = value'")
        if key not in types:
            raise FormatError(f"config line {lineno}: unknown key {key!r}")
        try:
            values[key] = _parse_value(raw, types[key])
        except ValueError as exc:
            raise FormatError(f"config line {lineno}: bad value for {key}: {exc}") from None
    return TrainConfig(**values)


def load_config(path) -> TrainConfig:
    with open(path, encoding="utf-8") as f:
        return parse_config(f.read())


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------

def load_images(directory) -> list[np.ndarray]:
    """All ``*.pgm`` files in ``directory`` sorted by filename."""
    d = Path(directory)
    if not d.is_dir():
        raise IngestionError(f"{d}: not a readable directory")
    return [read_pgm(p) for p in sorted(d.glob("*.pgm"))]


@dataclass
class PatchSet:
    patches: np.ndarray                      # (n, c, size, size) in [0, 1]
    provenance: list[tuple[int, tuple[int, int], int]] = field(default_factory=list)

    def __len__(self) -> int:
        return self.patches.shape[0]

    def subset(self, index: np.ndarray) -> "PatchSet":
        return PatchSet(self.patches[index], [self.provenance[i] for i in index])


def augmentations(patch: np.ndarray) -> list[np.ndarray]:
    """Rotations by 0/90/180/270 degrees, each without and with a horizontal flip."""
    out = []
    for k in range(4):
        rot = np.rot90(patch, k, axes=(-2, -1))
        out += [rot, rot[..., ::-1]]
    return out


def patch_positions(h: int, w: int, size: int = 40, stride: int = 20) -> list[tuple[int, int]]:
    return [(y, x) for y in range(0, h - size + 1, stride) for x in range(0, w - size + 1, stride)]


def extract_patches(images, size: int = 40, stride: int = 20, augment: bool = True) -> PatchSet:
    """Patches at origins (i*stride, j*stride) fully inside each image; with
    ``augment`` each position yields 8 variants."""
    patches, prov = [], []
    for img_id, img in enumerate(images):
        img = np.asarray(img)
        if img.ndim == 2:
            img = img[None]
        h, w = img.shape[-2:]
        if h < size or w < size:
            warnings.warn(f"image {img_id} ({h}x{w}) is smaller than a {size}x{size} patch; skipped")
            continue
        for (y, x) in patch_positions(h, w, size, stride):
            patch = img[:, y:y + size, x:x + size]
            variants = augmentations(patch) if augment else [patch]
            for aug_id, v in enumerate(variants):
                patches.append(np.ascontiguousarray(v))
                prov.append((img_id, (y, x), aug_id))
    if not patches:
        c = np.asarray(images[0]).shape[0] if images and np.asarray(images[0]).ndim == 3 else 1
        return PatchSet(np.zeros((0, c, size, size)), [])
    return PatchSet(np.stack(patches).astype(np.float64) / 255.0, prov)


def patch_count(n_images: int, height: int, width: int, size: int = 40, stride: int = 20,
                augment: bool = True) -> int:
    """Number of patches :func:`extract_patches` yields for equal-size images."""
    per_image = len(patch_positions(height, width, size, stride))
    return n_images * per_image * (8 if augment else 1)


def prepare_patches(images, config: TrainConfig) -> PatchSet:
    """Extract patches and, if ``max_patches`` is set, keep a seeded subset."""
    ps = extract_patches(images, config.patch_size, config.patch_stride, config.augment)
    if config.max_patches and len(ps) > config.max_patches:
        rng = Xorshift64Star(config.seed + 0x5EED)
        keep = np.sort(rng.permutation(len(ps))[:config.max_patches])
        ps = ps.subset(keep)
    return ps


# --------------------------------------------------------------------------
# schedules and inner loops
# --------------------------------------------------------------------------

def lr_schedule(epoch: int, total_epochs: int, start: float, end: float) -> float:
    """Exponential decay from ``start`` (first epoch) to ``end`` (last epoch)."""
    if not 0 <= epoch < total_epochs:
        raise ParameterError(f"epoch {epoch} outside 0..{total_epochs - 1}")
    if total_epochs == 1:
        return start
    return start * (end / start) ** (epoch / (total_epochs - 1))


def _batches(n: int, batch_size: int, rng: Xorshift64Star):
    perm = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield perm[i:i + batch_size]


def reccnn_loss(reccnn: RecCNN, u: np.ndarray, x: np.ndarray, mode: str = "train"):
    """Residual objective ``(1/2N) sum ||res(u) - (x - u)||^2`` and its
    gradient with respect to the predicted residual."""
    reccnn.train(mode == "train")
    residual = reccnn.body(u)
    return mse_loss(residual, x - u)


def train_reccnn(reccnn: RecCNN, u: np.ndarray, x: np.ndarray, config: TrainConfig,
                 rng: Xorshift64Star, on_epoch=None) -> list[float]:
    """Fit RecCNN's residual branch on decoded inputs ``u``; returns per-epoch
    mean loss. Only RecCNN parameters change."""
    n = u.shape[0]
    if n == 0:
        raise ParameterError("train_reccnn needs a non-empty batch")
    if u.shape != x.shape:
        raise ParameterError(f"u {u.shape} and x {x.shape} differ")
    opt = Adam(reccnn.parameters(), lr=config.rec_lr_start)
    losses = []
    for epoch in range(config.epochs):
        lr = lr_schedule(epoch, config.epochs, config.rec_lr_start, config.rec_lr_end)
        t0 = time.perf_counter()
        total = 0.0
        for idx in _batches(n, config.batch_size, rng):
            reccnn.zero_grad()
            loss, g = reccnn_loss(reccnn, u[idx], x[idx])
            reccnn.backward_body(g)
            opt.step(lr)
            total += loss * len(idx)
        losses.append(total / n)
        if on_epoch:
            on_epoch("reccnn", epoch, lr, losses[-1], time.perf_counter() - t0)
    reccnn.eval()
    return losses


def surrogate_loss(comcnn: ComCNN, reccnn: RecCNN, x: np.ndarray):
    """Codec-free objective ``(1/2N) sum ||Re(up(Cr(x))) - x||^2`` with RecCNN
    in inference mode. Returns (loss, grad wrt ComCNN output, upsampler)."""
    reccnn.eval()
    up = BicubicUpsample(out_size=x.shape[-2:])
    recon = reccnn.forward(up.forward(comcnn.forward(x)))
    loss, g = mse_loss(recon, x)
    g = up.backward(reccnn.backward(g, param_grads=False))
    return loss, g


def train_comcnn(comcnn: ComCNN, reccnn: RecCNN | None, x: np.ndarray, config: TrainConfig,
                 rng: Xorshift64Star, on_epoch=None) -> list[float]:
    """Fit ComCNN through the frozen RecCNN; RecCNN parameters, gradient
    buffers and running statistics are left untouched."""
    if reccnn is None:
        raise UsageError("train_comcnn needs a trained RecCNN")
    n = x.shape[0]
    if n == 0:
        raise ParameterError("train_comcnn needs a non-empty batch")
    opt = Adam(comcnn.parameters(), lr=config.com_lr_start)
    losses = []
    for epoch in range(config.epochs):
        lr = lr_schedule(epoch, config.epochs, config.com_lr_start, config.com_lr_end)
        t0 = time.perf_counter()
        total = 0.0
        for idx in _batches(n, config.batch_size, rng):
            comcnn.zero_grad()
            loss, g = surrogate_loss(comcnn, reccnn, x[idx])
            comcnn.backward(g)
            opt.step(lr)
            total += loss * len(idx)
        losses.append(total / n)
        if on_epoch:
            on_epoch("comcnn", epoch, lr, losses[-1], time.perf_counter() - t0)
    return losses


def decoded_compact(comcnn: ComCNN, x: np.ndarray, qf: int, chunk: int = 64) -> np.ndarray:
    """``up(decode(encode(quantize_compact(Cr(x)))))`` for a batch of patches."""
    out = np.empty_like(x)
    h, w = x.shape[-2:]
    for i in range(0, x.shape[0], chunk):
        compact = quantize_compact(comcnn.forward(x[i:i + chunk], cache=False))
        decoded = np.stack([decode_image(encode_image(img, qf)) for img in compact])
        out[i:i + chunk] = bicubic_resize(decoded.astype(np.float64) / 255.0, 2, (h, w))
    return out


# --------------------------------------------------------------------------
# outer loop
# --------------------------------------------------------------------------

@dataclass
class EpochRecord:
    t: int
    network: str
    epoch: int
    lr: float
    mean_loss: float
    seconds: float


@dataclass
class IterationRecord:
    t: int
    psnr: float
    ssim: float
    bpp: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    iterations: list[IterationRecord] = field(default_factory=list)

    def losses(self, t: int, network: str) -> list[float]:
        return [r.mean_loss for r in self.epochs if r.t == t and r.network == network]

    def epoch_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "epoch", "network", "lr", "mean_loss"])
        for r in self.epochs:
            w.writerow([r.t, r.epoch, r.network, repr(r.lr), repr(r.mean_loss)])
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "psnr", "ssim", "bpp"])
        for r in self.iterations:
            w.writerow([r.t, repr(r.psnr), repr(r.ssim), repr(r.bpp)])
        return buf.getvalue()


def evaluate_pipeline(comcnn: ComCNN, reccnn: RecCNN, images, qf: int) -> IterationRecord:
    """Average PSNR / SSIM / bpp of the full pipeline over ``images``."""
    p, s, b = [], [], []
    for img in images:
        bs = pipeline_compress(img, comcnn, qf)
        rec = pipeline_decompress(bs, reccnn)
        p.append(psnr(img, rec))
        s.append(ssim(img, rec))
        b.append(bits_per_pixel(bs, img.shape[-1], img.shape[-2]))
    return IterationRecord(0, float(np.mean(p)), float(np.mean(s)), float(np.mean(b)))


def init_models(config: TrainConfig) -> tuple[ComCNN, RecCNN, Xorshift64Star]:
    """He-initialised networks and the generator that continues into shuffling."""
    rng = Xorshift64Star(config.seed)
    comcnn = ComCNN(config.channels, config.com_width, rng)
    reccnn = RecCNN(config.channels, config.rec_width, config.rec_depth, rng)
    return comcnn, reccnn, rng


def algorithm1(patches: PatchSet | np.ndarray, config: TrainConfig, val_images=None,
               out_dir=None, models=None) -> tuple[ComCNN, RecCNN, TrainReport]:
    """Alternating training of ComCNN and RecCNN.

    ``val_images`` (uint8 images) are scored with the real pipeline after each
    outer iteration. With ``out_dir``, checkpoints are written every
    ``checkpoint_interval`` iterations and after the last one. Both networks
    are warm-started across outer iterations.
    """
    x = patches.patches if isinstance(patches, PatchSet) else np.asarray(patches, dtype=np.float64)
    if x.shape[0] == 0:
        raise ParameterError("algorithm1 needs at least one training patch")
    if models is None:
        comcnn, reccnn, rng = init_models(config)
    else:
        comcnn, reccnn, rng = models
    report = TrainReport()

    for t in range(1, config.outer_iterations + 1):
        def record(network, epoch, lr, loss, seconds, t=t):
            report.epochs.append(EpochRecord(t, network, epoch, lr, loss, seconds))
            log.info("t=%d %s epoch %d lr=%.3g loss=%.6g (%.1fs)", t, network, epoch, lr, loss,
                     seconds)

        u = decoded_compact(comcnn, x, config.qf)
        train_reccnn(reccnn, u, x, config, rng, record)
        train_comcnn(comcnn, reccnn, x, config, rng, record)

        if val_images:
            rec = evaluate_pipeline(comcnn, reccnn, val_images, config.qf)
            report.iterations.append(IterationRecord(t, rec.psnr, rec.ssim, rec.bpp))
            log.info("t=%d validation psnr=%.3f ssim=%.4f bpp=%.4f", t, rec.psnr, rec.ssim,
                     rec.bpp)
        if out_dir is not None and (t % config.checkpoint_interval == 0
                                    or t == config.outer_iterations):
            save_outputs(out_dir, comcnn, reccnn, report)
    return comcnn, reccnn, report


def save_outputs(out_dir, comcnn: ComCNN, reccnn: RecCNN, report: TrainReport) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint.save(comcnn, out / "comcnn.bin")
    checkpoint.save(reccnn, out / "reccnn.bin")
    (out / "train_report.csv").write_text(report.epoch_csv(), encoding="utf-8", newline="\n")
    (out / "summary.csv").write_text(report.summary_csv(), encoding="utf-8", newline="\n")


def smoothed_rises(losses, window: int = 5) -> list[float]:
    """Relative rise between consecutive moving averages of ``losses``
    (positive means the smoothed loss went up)."""
    arr = np.asarray(losses, dtype=np.float64)
    if arr.size < window + 1:
        return []
    ma = np.convolve(arr, np.ones(window) / window, mode="valid")
    return list((ma[1:] - ma[:-1]) / ma[:-1])
