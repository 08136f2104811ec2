"""Minimal float64 network toolkit: 3x3 convolutions, ReLU, batch norm,
MSE loss, Adam and He initialisation, each with a hand-written backward pass.

Tensors are plain ``numpy.ndarray`` objects of shape ``(n, c, h, w)`` and
dtype float64. Convolution is cross-correlation (no kernel flip) with a
zero padding of one pixel on every border.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateBatchError, ParameterError, ShapeError, UsageError
from .rng import Xorshift64Star, as_rng

KERNEL = 3
PAD = 1
BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def _check_rank4(x: np.ndarray, name: str = "input") -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name} must have shape (n, c, h, w), got {x.shape}")


def conv_output_size(size: int, stride: int) -> int:
    return -(-size // stride)


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

def _im2col(x: np.ndarray, stride: int) -> tuple[np.ndarray, int, int]:
    """Columns of shape (c*9, n*oh*ow) for a padded 3x3 correlation.

    Row order is (channel, ky, kx), matching ``weight.reshape(out_ch, -1)``.
    """
    n, c, h, w = x.shape
    oh, ow = conv_output_size(h, stride), conv_output_size(w, stride)
    xp = np.pad(x, ((0, 0), (0, 0), (PAD, PAD), (PAD, PAD)))
    cols = np.empty((c, KERNEL, KERNEL, n, oh, ow))
    for i in range(KERNEL):
        for j in range(KERNEL):
            cols[:, i, j] = xp[:, :, i:i + stride * oh:stride,
                               j:j + stride * ow:stride].transpose(1, 0, 2, 3)
    return cols.reshape(c * KERNEL * KERNEL, n * oh * ow), oh, ow


def _matmul_to_nchw(wmat: np.ndarray, cols: np.ndarray, bias: np.ndarray | None,
                    n: int, oh: int, ow: int) -> np.ndarray:
    out = wmat @ cols
    if bias is not None:
        out += bias[:, None]
    return np.ascontiguousarray(out.reshape(-1, n, oh, ow).transpose(1, 0, 2, 3))


def conv2d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray,
                   stride: int = 1, return_cols: bool = False):
    """3x3 cross-correlation, pad 1. Output is (n, out_ch, ceil(h/s), ceil(w/s)).

    With ``return_cols`` the im2col matrix is returned as well so a layer
    can hand it back to :func:`conv2d_backward`.
    """
    _check_rank4(x)
    if stride not in (1, 2):
        raise ParameterError(f"stride must be 1 or 2, got {stride}")
    out_ch, in_ch = weight.shape[:2]
    if weight.shape[2:] != (KERNEL, KERNEL):
        raise ShapeError(f"kernel must be 3x3, got {weight.shape[2:]}")
    if x.shape[1] != in_ch:
        raise ShapeError(f"input has {x.shape[1]} channels, layer expects {in_ch}")
    cols, oh, ow = _im2col(x, stride)
    out = _matmul_to_nchw(weight.reshape(out_ch, -1), cols, bias, x.shape[0], oh, ow)
    return (out, cols) if return_cols else out


def conv2d_backward(grad_out: np.ndarray, x: np.ndarray, weight: np.ndarray,
                    stride: int = 1, param_grads: bool = True,
                    cols: np.ndarray | None = None):
    """Gradients of :func:`conv2d_forward`.

    Returns ``(grad_input, grad_weight, grad_bias)``; the last two are None
    when ``param_grads`` is False.
    """
    _check_rank4(grad_out, "grad_out")
    n, c, h, w = x.shape
    out_ch = weight.shape[0]
    oh, ow = conv_output_size(h, stride), conv_output_size(w, stride)
    if grad_out.shape != (n, out_ch, oh, ow):
        raise ShapeError(f"grad_out shape {grad_out.shape} != {(n, out_ch, oh, ow)}")

    g = grad_out.transpose(1, 0, 2, 3).reshape(out_ch, n * oh * ow)
    grad_w = grad_b = None
    if param_grads:
        if cols is None:
            cols, _, _ = _im2col(x, stride)
        grad_w = (g @ cols.T).reshape(weight.shape)
        grad_b = g.sum(axis=1)

    if stride == 1:
        # correlation with the flipped, channel-transposed kernel
        flipped = weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
        gcols, _, _ = _im2col(grad_out, 1)
        return _matmul_to_nchw(flipped, gcols, None, n, h, w), grad_w, grad_b

    gcols = (weight.reshape(out_ch, -1).T @ g).reshape(c, KERNEL, KERNEL, n, oh, ow)
    gxp = np.zeros((n, c, h + 2 * PAD + 1, w + 2 * PAD + 1))
    for i in range(KERNEL):
        for j in range(KERNEL):
            gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                gcols[:, i, j].transpose(1, 0, 2, 3)
    grad_x = np.ascontiguousarray(gxp[:, :, PAD:PAD + h, PAD:PAD + w])
    return grad_x, grad_w, grad_b


# --------------------------------------------------------------------------
# ReLU
# --------------------------------------------------------------------------

def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(grad: np.ndarray, cached: np.ndarray | None) -> np.ndarray:
    # gradient at exactly 0 is taken as 0
    if cached is None:
        raise UsageError("relu backward needs the cached forward input")
    if grad.shape != cached.shape:
        raise ShapeError(f"grad shape {grad.shape} != cached shape {cached.shape}")
    return np.where(cached > 0, grad, 0.0)


# --------------------------------------------------------------------------
# batch normalisation
# --------------------------------------------------------------------------

@dataclass
class BatchNormCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    training: bool


def batchnorm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                      running_mean: np.ndarray, running_var: np.ndarray,
                      training: bool, momentum: float = BN_MOMENTUM,
                      eps: float = BN_EPS) -> tuple[np.ndarray, BatchNormCache]:
    """Per-channel batch norm. In training mode the running buffers are
    updated in place as ``running = momentum*running + (1-momentum)*batch``
    (biased batch variance)."""
    _check_rank4(x)
    if x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"input has {x.shape[1]} channels, layer expects {gamma.shape[0]}")
    shape = (1, -1, 1, 1)
    if training:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        if m < 2:
            raise DegenerateBatchError(
                f"training-mode batch norm needs n*h*w >= 2 per channel, got {m}")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    out = xhat * gamma.reshape(shape) + beta.reshape(shape)
    return out, BatchNormCache(xhat, inv_std, gamma.copy(), training)


def batchnorm_backward(grad: np.ndarray, cache: BatchNormCache,
                       param_grads: bool = True):
    """Returns ``(grad_input, grad_gamma, grad_beta)``."""
    if grad.shape != cache.xhat.shape:
        raise ShapeError(f"grad shape {grad.shape} != {cache.xhat.shape}")
    shape = (1, -1, 1, 1)
    xhat = cache.xhat
    grad_gamma = grad_beta = None
    if param_grads or cache.training:
        sum_g = grad.sum(axis=(0, 2, 3))
        sum_gx = (grad * xhat).sum(axis=(0, 2, 3))
    if param_grads:
        grad_gamma, grad_beta = sum_gx, sum_g
    scale = (cache.gamma * cache.inv_std).reshape(shape)
    if cache.training:
        m = grad.shape[0] * grad.shape[2] * grad.shape[3]
        grad_x = scale * (grad - (sum_g.reshape(shape) + xhat * sum_gx.reshape(shape)) / m)
    else:
        grad_x = scale * grad
    return grad_x, grad_gamma, grad_beta


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------

def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """``(1/2N) * sum_k ||pred_k - target_k||^2`` with N the batch size."""
    if pred.shape != target.shape:
        raise ShapeError(f"pred shape {pred.shape} != target shape {target.shape}")
    n = pred.shape[0]
    diff = pred - target
    loss = float(np.sum(diff * diff)) / (2.0 * n)
    return loss, diff / n


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    alpha: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros_like(cls, param: np.ndarray, **hyper) -> "AdamState":
        return cls(np.zeros_like(param), np.zeros_like(param), **hyper)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState,
              lr: float | None = None) -> None:
    """Bias-corrected Adam update, applied to ``param`` and ``state`` in place."""
    if not (param.shape == grad.shape == state.m.shape == state.v.shape):
        raise ShapeError(
            f"adam shapes disagree: param {param.shape}, grad {grad.shape}, "
            f"m {state.m.shape}, v {state.v.shape}")
    alpha = state.alpha if lr is None else lr
    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grad
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    param -= alpha * m_hat / (np.sqrt(v_hat) + state.epsilon)


# --------------------------------------------------------------------------
# initialisation
# --------------------------------------------------------------------------

def he_init(shape: tuple[int, ...], rng: int | Xorshift64Star) -> np.ndarray:
    """Zero-mean normal weights with variance ``2 / fan_in``."""
    fan_in = int(np.prod(shape[1:]))
    if fan_in <= 0:
        raise ParameterError(f"fan_in must be positive, got shape {shape}")
    rng = as_rng(rng)
    std = np.sqrt(2.0 / fan_in)
    return rng.normal_array(int(np.prod(shape))).reshape(shape) * std


# --------------------------------------------------------------------------
# layers
# --------------------------------------------------------------------------

@dataclass
class Parameter:
    data: np.ndarray
    grad: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


class Conv2d:
    kind = 1

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1,
                 rng: int | Xorshift64Star | None = None):
        if stride not in (1, 2):
            raise ParameterError(f"stride must be 1 or 2, got {stride}")
        self.stride = stride
        shape = (out_ch, in_ch, KERNEL, KERNEL)
        w = he_init(shape, rng) if rng is not None else np.zeros(shape)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_ch))
        self._x = None

    @property
    def in_ch(self) -> int:
        return self.weight.data.shape[1]

    @property
    def out_ch(self) -> int:
        return self.weight.data.shape[0]

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray, cache: bool = True) -> np.ndarray:
        if not cache:
            self._x = self._cols = None
            return conv2d_forward(x, self.weight.data, self.bias.data, self.stride)
        out, self._cols = conv2d_forward(x, self.weight.data, self.bias.data,
                                         self.stride, return_cols=True)
        self._x = x
        return out

    def backward(self, grad: np.ndarray, param_grads: bool = True) -> np.ndarray:
        if self._x is None:
            raise UsageError("backward called before a caching forward")
        gx, gw, gb = conv2d_backward(grad, self._x, self.weight.data, self.stride,
                                     param_grads=param_grads, cols=self._cols)
        if param_grads:
            self.weight.grad += gw
            self.bias.grad += gb
        return gx


class ReLU:
    kind = 2

    def __init__(self):
        self._x = None

    def parameters(self) -> list[Parameter]:
        return []

    def forward(self, x: np.ndarray, cache: bool = True) -> np.ndarray:
        self._x = x if cache else None
        return relu_forward(x)

    def backward(self, grad: np.ndarray, param_grads: bool = True) -> np.ndarray:
        return relu_backward(grad, self._x)


class BatchNorm2d:
    kind = 3

    def __init__(self, channels: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps
        self.training = True
        self._cache = None

    def parameters(self) -> list[Parameter]:
        return [self.gamma, self.beta]

    def forward(self, x: np.ndarray, cache: bool = True) -> np.ndarray:
        out, bn_cache = batchnorm_forward(
            x, self.gamma.data, self.beta.data, self.running_mean, self.running_var,
            self.training, self.momentum, self.eps)
        self._cache = bn_cache if cache else None
        return out

    def backward(self, grad: np.ndarray, param_grads: bool = True) -> np.ndarray:
        if self._cache is None:
            raise UsageError("backward called before forward")
        gx, gg, gb = batchnorm_backward(grad, self._cache, param_grads)
        if param_grads:
            self.gamma.grad += gg
            self.beta.grad += gb
        return gx


class Sequential:
    """Layers applied in order, with an optional identity skip around the
    whole stack (``out = x + body(x)``)."""

    def __init__(self, layers: list, residual: bool = False):
        self.layers = list(layers)
        self.residual = residual

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True) -> "Sequential":
        for layer in self.layers:
            if isinstance(layer, BatchNorm2d):
                layer.training = mode
        return self

    def eval(self) -> "Sequential":
        return self.train(False)

    def body(self, x: np.ndarray, cache: bool = True) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x, cache)
        return x

    def forward(self, x: np.ndarray, cache: bool = True) -> np.ndarray:
        """Run the stack. ``cache=False`` keeps no activations (inference)."""
        out = self.body(x, cache)
        return x + out if self.residual else out

    def backward_body(self, grad: np.ndarray, param_grads: bool = True) -> np.ndarray:
        for layer in reversed(self.layers):
            grad = layer.backward(grad, param_grads=param_grads)
        return grad

    def backward(self, grad: np.ndarray, param_grads: bool = True) -> np.ndarray:
        g = self.backward_body(grad, param_grads)
        return g + grad if self.residual else g


class Adam:
    """Adam over a fixed list of parameters."""

    def __init__(self, params: list[Parameter], lr: float = 0.001, beta1: float = 0.9,
                 beta2: float = 0.999, epsilon: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.states = [AdamState.zeros_like(p.data, alpha=lr, beta1=beta1, beta2=beta2,
                                            epsilon=epsilon) for p in self.params]

    def step(self, lr: float | None = None) -> None:
        for p, s in zip(self.params, self.states):
            adam_step(p.data, p.grad, s, lr)
