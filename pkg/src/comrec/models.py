"""ComCNN / RecCNN architectures, bicubic resampling and the deployment
pipelines that connect the networks to the codec."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .codec import (VERSION_COMPACT, Bitstream, as_image, decode_image, encode_image,
                    round_half_away)
from .errors import FormatError, ParameterError, ShapeError
from .nn import BatchNorm2d, Conv2d, ReLU, Sequential, conv_output_size
from .rng import Xorshift64Star, as_rng

CUBIC_A = -0.5


# --------------------------------------------------------------------------
# bicubic resampling
# --------------------------------------------------------------------------

def _cubic(t: np.ndarray) -> np.ndarray:
    t = np.abs(t)
    a = CUBIC_A
    near = ((a + 2) * t - (a + 3)) * t * t + 1
    far = ((a * t - 5 * a) * t + 8 * a) * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


@lru_cache(maxsize=64)
def resize_matrix(n_in: int, n_out: int, scale: float) -> np.ndarray:
    """Dense ``(n_out, n_in)`` Catmull-Rom interpolation matrix along one axis.

    Sample ``i`` of the output sits at source coordinate
    ``(i + 0.5) / scale - 0.5``; taps outside the input are clamped to the
    nearest edge sample.
    """
    if n_in < 1 or n_out < 1:
        raise ParameterError(f"sizes must be positive, got {n_in} -> {n_out}")
    src = (np.arange(n_out) + 0.5) / scale - 0.5
    base = np.floor(src).astype(np.int64)
    frac = src - base
    mat = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    for tap in range(-1, 3):
        idx = np.clip(base + tap, 0, n_in - 1)
        np.add.at(mat, (rows, idx), _cubic(frac - tap))
    mat.flags.writeable = False
    return mat


def _default_size(n: int, scale: float) -> int:
    return 2 * n if scale == 2 else conv_output_size(n, 2)


def _check_scale(scale: float) -> None:
    if scale not in (2, 0.5):
        raise ParameterError(f"scale must be 2 or 0.5, got {scale}")


def bicubic_resize(t: np.ndarray, scale: float = 2,
                   out_size: tuple[int, int] | None = None) -> np.ndarray:
    """Resize the last two axes by x2 or x1/2. A fixed linear map."""
    _check_scale(scale)
    h, w = t.shape[-2:]
    oh, ow = out_size if out_size is not None else (_default_size(h, scale),
                                                    _default_size(w, scale))
    ah = resize_matrix(h, oh, float(scale))
    aw = resize_matrix(w, ow, float(scale))
    return ah @ t @ aw.T


def bicubic_resize_backward(grad: np.ndarray, in_size: tuple[int, int],
                            scale: float = 2) -> np.ndarray:
    """Transpose of :func:`bicubic_resize` for an input of ``in_size``."""
    _check_scale(scale)
    oh, ow = grad.shape[-2:]
    ah = resize_matrix(in_size[0], oh, float(scale))
    aw = resize_matrix(in_size[1], ow, float(scale))
    return ah.T @ grad @ aw


class BicubicUpsample:
    """Parameter-free layer wrapper so the upscaler can sit inside a stack."""

    def __init__(self, out_size: tuple[int, int] | None = None, scale: float = 2):
        self.out_size = out_size
        self.scale = scale
        self._in_size = None

    def parameters(self):
        return []

    def forward(self, x: np.ndarray, cache: bool = True) -> np.ndarray:
        self._in_size = x.shape[-2:]
        return bicubic_resize(x, self.scale, self.out_size)

    def backward(self, grad: np.ndarray, param_grads: bool = True) -> np.ndarray:
        return bicubic_resize_backward(grad, self._in_size, self.scale)


# --------------------------------------------------------------------------
# networks
# --------------------------------------------------------------------------

class ComCNN(Sequential):
    """conv(c->w)+ReLU, conv(w->w, stride 2)+ReLU, conv(w->c)."""

    kind = 1

    def __init__(self, channels: int = 1, width: int = 64,
                 rng: int | Xorshift64Star | None = 0):
        r = as_rng(rng) if rng is not None else None
        super().__init__([
            Conv2d(channels, width, 1, r), ReLU(),
            Conv2d(width, width, 2, r), ReLU(),
            Conv2d(width, channels, 1, r),
        ])
        self.channels = channels
        self.width = width


class RecCNN(Sequential):
    """20 weight layers: conv+ReLU, 18 x (conv+BN+ReLU), conv; output is
    input + predicted residual."""

    kind = 2

    def __init__(self, channels: int = 1, width: int = 64, depth: int = 20,
                 rng: int | Xorshift64Star | None = 0):
        if depth < 3:
            raise ParameterError(f"depth must be at least 3, got {depth}")
        r = as_rng(rng) if rng is not None else None
        layers = [Conv2d(channels, width, 1, r), ReLU()]
        for _ in range(depth - 2):
            layers += [Conv2d(width, width, 1, r), BatchNorm2d(width), ReLU()]
        layers.append(Conv2d(width, channels, 1, r))
        super().__init__(layers, residual=True)
        self.channels = channels
        self.width = width
        self.depth = depth


def conv_layers(model: Sequential) -> list[Conv2d]:
    return [layer for layer in model.layers if isinstance(layer, Conv2d)]


def comcnn_forward(x: np.ndarray, model: ComCNN, cache: bool = False) -> np.ndarray:
    """Half-resolution compact representation; values are not clamped."""
    return model.forward(x, cache)


def reccnn_forward(u: np.ndarray, model: RecCNN, mode: str = "infer",
                   cache: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Returns ``(residual, reconstruction)`` with ``reconstruction = u + residual``."""
    if mode not in ("train", "infer"):
        raise ParameterError(f"mode must be 'train' or 'infer', got {mode!r}")
    model.train(mode == "train")
    residual = model.body(u, cache)
    return residual, u + residual


# --------------------------------------------------------------------------
# codec bridges
# --------------------------------------------------------------------------

def to_tensor(img) -> np.ndarray:
    """uint8 image ``(c, h, w)`` -> float tensor ``(1, c, h, w)`` in [0, 1]."""
    return as_image(img)[None].astype(np.float64) / 255.0


def quantize_compact(compact: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1], scale by 255 and round half away from zero to uint8."""
    return round_half_away(np.clip(compact, 0.0, 1.0) * 255.0).astype(np.uint8)


def to_image(t: np.ndarray) -> np.ndarray:
    """Single-sample tensor ``(1, c, h, w)`` -> uint8 image ``(c, h, w)``."""
    if t.ndim != 4 or t.shape[0] != 1:
        raise ShapeError(f"expected a (1, c, h, w) tensor, got {t.shape}")
    return quantize_compact(t[0])


def compact_image(img, comcnn: ComCNN) -> np.ndarray:
    """ComCNN output for ``img`` quantised to the codec's 8-bit input."""
    return to_image(comcnn_forward(to_tensor(img), comcnn))


def pipeline_compress(img, comcnn: ComCNN, qf: int) -> Bitstream:
    """x -> ComCNN -> 8-bit compact image -> codec. The header keeps the
    original dims so the decoder knows the upscale target."""
    img = as_image(img)
    _, h, w = img.shape
    if comcnn.channels != img.shape[0]:
        raise ShapeError(f"ComCNN has {comcnn.channels} channels, image has {img.shape[0]}")
    return encode_image(compact_image(img, comcnn), qf, VERSION_COMPACT, dims=(h, w))


def upscaled_decoded(bs: Bitstream) -> np.ndarray:
    """Decoded compact image, normalised and bicubic-upscaled to header dims:
    the RecCNN input ``u``."""
    if bs.version != VERSION_COMPACT:
        raise FormatError("stream does not carry a compact representation")
    return bicubic_resize(to_tensor(decode_image(bs)), 2, (bs.height, bs.width))


def pipeline_decompress(bs: Bitstream, reccnn: RecCNN) -> np.ndarray:
    """decode -> normalise -> bicubic x2 -> RecCNN (inference) -> uint8."""
    u = upscaled_decoded(bs)
    if reccnn.channels != bs.channels:
        raise ShapeError(f"RecCNN has {reccnn.channels} channels, stream has {bs.channels}")
    _, recon = reccnn_forward(u, reccnn, "infer")
    return to_image(recon)


def enhance(img, reccnn: RecCNN) -> np.ndarray:
    """Apply RecCNN directly to an 8-bit image (post-processing use)."""
    _, recon = reccnn_forward(to_tensor(img), reccnn, "infer")
    return to_image(recon)
