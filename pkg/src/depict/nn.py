"""Numpy kernels for the convolutional autoencoder.

Every layer is a pair of pure functions: a forward map and a hand-written
backward map returning exact gradients. Arrays are float64, batch-first
``(B, C, H, W)`` and row-major.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

DTYPE = np.float64
LEAKY_SLOPE = 0.01


class ShapeError(ValueError):
    """Raised when array shapes are inconsistent with a layer."""


@dataclass(frozen=True)
class ConvSpec:
    out_maps: int
    kernel: tuple[int, int]
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        kernel = tuple(int(k) for k in np.broadcast_to(self.kernel, (2,)))
        object.__setattr__(self, "kernel", kernel)
        if self.out_maps < 1:
            raise ValueError(f"out_maps must be >= 1, got {self.out_maps}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if min(kernel) < 1:
            raise ValueError(f"kernel extents must be >= 1, got {kernel}")
        if self.padding < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding}")

    def output_size(self, height: int, width: int) -> tuple[int, int]:
        """Spatial extent produced by a strided convolution."""
        out = tuple(
            (n + 2 * self.padding - k) // self.stride + 1
            for n, k in zip((height, width), self.kernel)
        )
        if min(out) < 1:
            raise ShapeError(
                f"input {height}x{width} too small for kernel {self.kernel} "
                f"with padding {self.padding}"
            )
        return out

    def transpose_output_size(self, height: int, width: int) -> tuple[int, int]:
        """Spatial extent produced by the transposed convolution (padding acts as crop)."""
        out = tuple(
            (n - 1) * self.stride - 2 * self.padding + k
            for n, k in zip((height, width), self.kernel)
        )
        if min(out) < 1:
            raise ShapeError(
                f"transposed convolution of {height}x{width} with kernel {self.kernel}, "
                f"stride {self.stride}, crop {self.padding} has non-positive extent {out}"
            )
        return out


def _check_ndim(name, arr, ndim):
    if arr.ndim != ndim:
        raise ShapeError(f"{name} must have {ndim} dimensions, got shape {arr.shape}")


def _im2col(x, kh, kw, stride, padding):
    # (B, C, H, W) -> (C*kh*kw, H'*W'*B) with the batch innermost, plus (H', W')
    b, c, h, w = x.shape
    xt = np.zeros((c, h + 2 * padding, w + 2 * padding, b), dtype=x.dtype)
    xt[:, padding:padding + h, padding:padding + w] = x.transpose(1, 2, 3, 0)
    windows = np.lib.stride_tricks.sliding_window_view(xt, (kh, kw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride]
    oh, ow = windows.shape[1:3]
    cols_t = windows.transpose(0, 4, 5, 1, 2, 3).reshape(c * kh * kw, oh * ow * b)
    return cols_t, oh, ow


def _col2im(cols_t, channels, oh, ow, kh, kw, stride, height, width, padding):
    # scatter-add adjoint of _im2col. cols_t is (C*kh*kw, oh*ow*B) with the
    # batch innermost, which keeps every strided add on contiguous runs.
    batch = cols_t.shape[1] // (oh * ow)
    d = cols_t.reshape(channels, kh, kw, oh, ow, batch)
    hp = max(height + 2 * padding, (oh - 1) * stride + kh)
    wp = max(width + 2 * padding, (ow - 1) * stride + kw)
    out = np.zeros((channels, hp, wp, batch), dtype=cols_t.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + stride * oh:stride, j:j + stride * ow:stride] += d[:, i, j]
    out = out[:, padding:padding + height, padding:padding + width]
    return np.ascontiguousarray(out.transpose(3, 0, 1, 2))


def _batch_last(x):
    # (B, M, h, w) -> (M, h*w*B)
    return x.transpose(1, 2, 3, 0).reshape(x.shape[1], -1)


def _check_conv(x, kernel, spec, in_axis):
    _check_ndim("input", x, 4)
    _check_ndim("kernel", kernel, 4)
    if kernel.shape[2:] != spec.kernel:
        raise ShapeError(f"kernel spatial shape {kernel.shape[2:]} != spec kernel {spec.kernel}")
    if x.shape[1] != kernel.shape[in_axis]:
        raise ShapeError(
            f"input channels {x.shape[1]} != kernel input channels {kernel.shape[in_axis]}"
        )


def conv2d_forward(x, kernel, bias, spec: ConvSpec):
    """Strided 2-D cross-correlation.

    ``x`` is ``(B, C, H, W)``, ``kernel`` is ``(M, C, kh, kw)`` and ``bias`` is
    ``(M,)``. Returns ``(B, M, H', W')``.
    """
    _check_conv(x, kernel, spec, in_axis=1)
    m = kernel.shape[0]
    if bias.shape != (m,):
        raise ShapeError(f"bias shape {bias.shape} != ({m},)")
    spec.output_size(*x.shape[2:])
    kh, kw = spec.kernel
    cols_t, oh, ow = _im2col(x, kh, kw, spec.stride, spec.padding)
    out = kernel.reshape(m, -1) @ cols_t + bias[:, None]
    return np.ascontiguousarray(out.reshape(m, oh, ow, x.shape[0]).transpose(3, 0, 1, 2))


def conv2d_backward(grad_out, x, kernel, spec: ConvSpec, input_grad=True):
    """Gradients of :func:`conv2d_forward` w.r.t. input, kernel and bias.

    With ``input_grad=False`` the (unused) input gradient is skipped and
    returned as ``None``.
    """
    _check_conv(x, kernel, spec, in_axis=1)
    b, c, h, w = x.shape
    m = kernel.shape[0]
    oh, ow = spec.output_size(h, w)
    if grad_out.shape != (b, m, oh, ow):
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output {(b, m, oh, ow)}")
    kh, kw = spec.kernel
    cols_t, _, _ = _im2col(x, kh, kw, spec.stride, spec.padding)
    g = _batch_last(grad_out)
    grad_kernel = (g @ cols_t.T).reshape(kernel.shape)
    grad_bias = grad_out.sum(axis=(0, 2, 3))
    if not input_grad:
        return None, grad_kernel, grad_bias
    cols_t = kernel.reshape(m, -1).T @ g
    grad_input = _col2im(cols_t, c, oh, ow, kh, kw, spec.stride, h, w, spec.padding)
    return grad_input, grad_kernel, grad_bias


def conv2d_transpose_forward(x, kernel, bias, spec: ConvSpec):
    """Learnable strided upsampling, the adjoint of :func:`conv2d_forward`.

    ``x`` is ``(B, M, h, w)``, ``kernel`` is ``(M, C, kh, kw)`` (same layout as
    the convolution it mirrors) and ``bias`` is ``(C,)``. ``spec.padding`` is
    the crop removed from each border.
    """
    _check_conv(x, kernel, spec, in_axis=0)
    b, m, h, w = x.shape
    c = kernel.shape[1]
    if bias.shape != (c,):
        raise ShapeError(f"bias shape {bias.shape} != ({c},)")
    oh, ow = spec.transpose_output_size(h, w)
    kh, kw = spec.kernel
    cols_t = kernel.reshape(m, -1).T @ _batch_last(x)
    out = _col2im(cols_t, c, h, w, kh, kw, spec.stride, oh, ow, spec.padding)
    return out + bias[None, :, None, None]


def conv2d_transpose_backward(grad_out, x, kernel, spec: ConvSpec):
    """Gradients of :func:`conv2d_transpose_forward` w.r.t. input, kernel and bias."""
    _check_conv(x, kernel, spec, in_axis=0)
    b, m, h, w = x.shape
    c = kernel.shape[1]
    oh, ow = spec.transpose_output_size(h, w)
    if grad_out.shape != (b, c, oh, ow):
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output {(b, c, oh, ow)}")
    kh, kw = spec.kernel
    cols_t, ch, cw = _im2col(grad_out, kh, kw, spec.stride, spec.padding)
    assert (ch, cw) == (h, w)
    grad_kernel = (_batch_last(x) @ cols_t.T).reshape(kernel.shape)
    grad_input = (kernel.reshape(m, -1) @ cols_t).reshape(m, h, w, b)
    grad_input = np.ascontiguousarray(grad_input.transpose(3, 0, 1, 2))
    grad_bias = grad_out.sum(axis=(0, 2, 3))
    return grad_input, grad_kernel, grad_bias


def dense_forward(x, weight, bias):
    """Affine map ``x @ weight + bias`` with ``weight`` shaped ``(D, E)``."""
    _check_ndim("input", x, 2)
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"input features {x.shape[1]} != weight rows {weight.shape[0]}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"bias shape {bias.shape} != ({weight.shape[1]},)")
    return x @ weight + bias


def dense_backward(grad_out, x, weight):
    if grad_out.shape != (x.shape[0], weight.shape[1]):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} != forward output {(x.shape[0], weight.shape[1])}"
        )
    return grad_out @ weight.T, x.T @ grad_out, grad_out.sum(axis=0)


def leaky_relu(x, slope=LEAKY_SLOPE):
    return np.where(x >= 0, x, slope * x)


def leaky_relu_backward(grad_out, x, slope=LEAKY_SLOPE):
    return np.where(x >= 0, grad_out, slope * grad_out)


def tanh_activation(x):
    return np.tanh(x)


def tanh_backward(grad_out, y):
    # takes the forward *output*
    return grad_out * (1.0 - y * y)


def dropout(x, rate, rng: np.random.Generator):
    """Inverted dropout.

    Returns ``(y, mask)`` where ``mask`` holds ``0`` for dropped units and
    ``1 / (1 - rate)`` for survivors, so ``y = x * mask`` and the backward pass
    is ``grad * mask``.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x, np.ones_like(x)
    keep = rng.random(x.shape) >= rate
    mask = keep * (1.0 / (1.0 - rate))
    return x * mask, mask


def xavier_init(shape, fan_in, fan_out, rng: np.random.Generator):
    """Glorot-uniform samples in ``[-sqrt(6/(fan_in+fan_out)), +sqrt(...)]``."""
    if fan_in < 1 or fan_out < 1:
        raise ValueError("fans must be >= 1")
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0

    @classmethod
    def like(cls, param, **hyper) -> "AdamState":
        return cls(np.zeros_like(param), np.zeros_like(param), **hyper)


def adam_step(param, grad, state: AdamState):
    """Bias-corrected Adam update, applied to ``param`` in place.

    Returns ``(param, state)`` for convenience.
    """
    if grad.shape != param.shape or state.first_moment.shape != param.shape:
        raise ShapeError(f"gradient shape {grad.shape} != parameter shape {param.shape}")
    state.step += 1
    state.first_moment *= state.beta1
    state.first_moment += (1.0 - state.beta1) * grad
    state.second_moment *= state.beta2
    state.second_moment += (1.0 - state.beta2) * (grad * grad)
    m_hat = state.first_moment / (1.0 - state.beta1 ** state.step)
    v_hat = state.second_moment / (1.0 - state.beta2 ** state.step)
    param -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return param, state


def numerical_gradient(fun: Callable[[np.ndarray], float], x, eps=1e-6):
    """Central finite differences of a scalar function, one coordinate at a time.

    ``x`` is perturbed in place and restored.
    """
    grad = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + eps
        hi = fun(x)
        flat_x[i] = orig - eps
        lo = fun(x)
        flat_x[i] = orig
        flat_g[i] = (hi - lo) / (2 * eps)
    return grad


def relative_error(analytic, numeric, floor=1e-8):
    """Worst per-coordinate ``|a - n| / max(|a| + |n|, floor)``."""
    analytic = np.asarray(analytic, dtype=DTYPE)
    numeric = np.asarray(numeric, dtype=DTYPE)
    scale = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    return float(np.max(np.abs(analytic - numeric) / scale)) if analytic.size else 0.0


def tensor_relative_error(analytic, numeric, floor=1e-8):
    """``||a - n|| / max(||a|| + ||n||, floor)`` over the whole tensor.

    Unlike the per-coordinate form this is not dominated by near-zero entries,
    whose finite-difference estimates are mostly roundoff.
    """
    analytic = np.asarray(analytic, dtype=DTYPE)
    numeric = np.asarray(numeric, dtype=DTYPE)
    scale = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / scale)


def gradient_check(fun, grad, x, eps=1e-6, floor=1e-8, per_coordinate=True):
    """Compare an analytic gradient against central finite differences.

    ``fun(x)`` returns a scalar and ``grad(x)`` its gradient with the shape of
    ``x``. Returns the worst relative discrepancy over all coordinates, or the
    tensor-wise relative error when ``per_coordinate`` is false.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=DTYPE, copy=True)
    analytic = np.array(grad(x), dtype=DTYPE, copy=True)
    numeric = numerical_gradient(fun, x, eps)
    if not per_coordinate:
        return tensor_relative_error(analytic, numeric, floor)
    return relative_error(analytic, numeric, floor)


# name -> (forward, backward(grad, pre_activation, output))
ACTIVATIONS = {
    "leaky_relu": (leaky_relu, lambda g, pre, post: leaky_relu_backward(g, pre)),
    "tanh": (tanh_activation, lambda g, pre, post: tanh_backward(g, post)),
}
