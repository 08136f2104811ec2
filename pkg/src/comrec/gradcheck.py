"""Central finite-difference oracle for the hand-written backward passes."""

from __future__ import annotations

import numpy as np

from .nn import BatchNorm2d, Conv2d, mse_loss
from .rng import Xorshift64Star, as_rng


def _bn_layers(fragment):
    layers = getattr(fragment, "layers", [fragment])
    return [layer for layer in layers if isinstance(layer, BatchNorm2d)]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def _sample_coords(size: int, max_coords: int | None, rng: Xorshift64Star) -> np.ndarray:
    if max_coords is None or size <= max_coords:
        return np.arange(size)
    return np.sort(rng.permutation(size)[:max_coords])


def inert_params(fragment) -> list[str]:
    """Keys of conv biases that feed a training-mode batch norm directly.

    The batch mean cancels such a bias, so its true gradient is identically
    zero and a relative error on it only measures finite-difference noise.
    """
    layers = getattr(fragment, "layers", [fragment])
    keys, index = [], 0
    for pos, layer in enumerate(layers):
        n = len(layer.parameters())
        nxt = layers[pos + 1] if pos + 1 < len(layers) else None
        if isinstance(layer, Conv2d) and isinstance(nxt, BatchNorm2d) and nxt.training:
            keys.append(f"param{index + 1}")
        index += n
    return keys


def gradient_pairs(fragment, x: np.ndarray, target: np.ndarray | None = None,
                   eps: float = 1e-5, max_coords: int | None = None,
                   seed: int | Xorshift64Star = 0) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Analytic and central-difference gradients at the probed coordinates.

    The scalar being differentiated is ``mse_loss(fragment.forward(x), target)``.
    Keys are ``"input"`` and ``"param<i>"`` in ``fragment.parameters()`` order.
    When ``max_coords`` is given, at most that many coordinates of each array
    are probed, chosen by the seeded generator.
    """
    rng = as_rng(seed)
    x = np.array(x, dtype=np.float64)
    bns = _bn_layers(fragment)
    saved = [(bn.running_mean.copy(), bn.running_var.copy()) for bn in bns]

    out = fragment.forward(x)
    if target is None:
        target = rng.normal_array(out.size).reshape(out.shape)

    def loss_at() -> float:
        return mse_loss(fragment.forward(x, cache=False), target)[0]

    params = fragment.parameters()
    for p in params:
        p.zero_grad()
    _, g = mse_loss(out, target)
    analytic = {"input": fragment.backward(g)}
    for i, p in enumerate(params):
        analytic[f"param{i}"] = p.grad.copy()

    arrays = {"input": x}
    arrays.update({f"param{i}": p.data for i, p in enumerate(params)})

    pairs = {}
    for name, arr in arrays.items():
        flat = arr.reshape(-1)
        coords = _sample_coords(flat.size, max_coords, rng)
        numeric = np.empty(coords.size)
        for k, idx in enumerate(coords):
            orig = flat[idx]
            flat[idx] = orig + eps
            f_plus = loss_at()
            flat[idx] = orig - eps
            f_minus = loss_at()
            flat[idx] = orig
            numeric[k] = (f_plus - f_minus) / (2.0 * eps)
        pairs[name] = (analytic[name].reshape(-1)[coords], numeric)

    for bn, (mean, var) in zip(bns, saved):
        bn.running_mean[...] = mean
        bn.running_var[...] = var
    return pairs


def gradient_errors(fragment, x: np.ndarray, target: np.ndarray | None = None,
                    eps: float = 1e-5, max_coords: int | None = None,
                    seed: int | Xorshift64Star = 0) -> dict[str, float]:
    """Per-array max relative error between analytic and numeric gradients."""
    pairs = gradient_pairs(fragment, x, target, eps, max_coords, seed)
    return {name: relative_error(a, n) for name, (a, n) in pairs.items()}


def finite_diff_grad_check(fragment, x: np.ndarray, target: np.ndarray | None = None,
                           eps: float = 1e-5, max_coords: int | None = None,
                           seed: int | Xorshift64Star = 0) -> float:
    """Max relative error over the input and every parameter of ``fragment``.

    Relative error uses the denominator ``max(|a|, |b|, 1e-8)``.
    """
    errors = gradient_errors(fragment, x, target, eps, max_coords, seed)
    return max(errors.values())


def split_check(fragment, x: np.ndarray, target: np.ndarray | None = None,
                eps: float = 1e-5, max_coords: int | None = None,
                seed: int | Xorshift64Star = 0) -> tuple[float, float]:
    """``(max relative error over measurable arrays, max |gradient| over inert ones)``.

    See :func:`inert_params`. Both the analytic and numeric gradient of an
    inert bias should sit at round-off level.
    """
    inert = set(inert_params(fragment))
    pairs = gradient_pairs(fragment, x, target, eps, max_coords, seed)
    rel = max((relative_error(a, n) for k, (a, n) in pairs.items() if k not in inert), default=0.0)
    absmax = max((float(max(np.abs(a).max(), np.abs(n).max()))
                  for k, (a, n) in pairs.items() if k in inert), default=0.0)
    return rel, absmax
