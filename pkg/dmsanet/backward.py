"""Analytic backward kernels for the tensor-core primitives.

Each ``<op>_backward`` takes the upstream gradient plus the forward inputs
(and output where cheaper) and returns gradients in the order of the forward
arguments.
"""
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .tensor import (
    Tensor,
    _windows,
    check_conv_args,
    normalize_groups,
    parallel_map,
)


def unbroadcast(grad: Tensor, shape: Tuple[int, ...]) -> Tensor:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def matmul_backward(dy: Tensor, a: Tensor, b: Tensor) -> Tuple[Tensor, Tensor]:
    return dy @ b.T, a.T @ dy


def fully_connected_backward(dy: Tensor, x: Tensor, w: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
    return dy @ w.T, x.T @ dy, dy.sum(axis=0)


def conv2d_backward(dy: Tensor, x: Tensor, w: Tensor, stride: int = 1, padding: int = 0,
                    groups: int = 1) -> Tuple[Tensor, Tensor, Tensor]:
    """Gradients of ``conv2d`` with respect to input, weight and bias."""
    ho, wo = check_conv_args(x, w, stride, padding, groups)
    n, c, h, wd = x.shape
    cout, cg, kh, kw = w.shape
    og = cout // groups

    win = _windows(x, kh, kw, stride, padding)
    dxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=np.result_type(dy, x))
    dw = np.empty_like(w, dtype=np.result_type(dy, w))

    def _group(g: int) -> None:
        cols = win[:, g * cg:(g + 1) * cg].transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cg * kh * kw)
        dyg = dy[:, g * og:(g + 1) * og].transpose(0, 2, 3, 1).reshape(n * ho * wo, og)
        dw[g * og:(g + 1) * og] = (dyg.T @ cols).reshape(og, cg, kh, kw)
        dcols = (dyg @ w[g * og:(g + 1) * og].reshape(og, cg * kh * kw)).reshape(n, ho, wo, cg, kh, kw)
        target = dxp[:, g * cg:(g + 1) * cg]
        # col2im: scatter every kernel tap back onto the padded input
        for i in range(kh):
            for j in range(kw):
                target[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)

    parallel_map(_group, range(groups))
    dx = dxp[:, :, padding:padding + h, padding:padding + wd]
    return np.ascontiguousarray(dx), dw, dy.sum(axis=(0, 2, 3))


def softmax_backward(dy: Tensor, y: Tensor, axis: int = -1) -> Tensor:
    return y * (dy - np.sum(dy * y, axis=axis, keepdims=True))


def global_avg_pool_backward(dy: Tensor, x_shape: Tuple[int, ...]) -> Tensor:
    h, w = x_shape[2], x_shape[3]
    return np.broadcast_to(dy / (h * w), x_shape).copy()


def max_pool2d_backward(dy: Tensor, x: Tensor, k: int, stride: int, padding: int = 0) -> Tensor:
    """Route each output gradient to the first maximal element of its window."""
    n, c, h, w = x.shape
    win = _windows(x, k, k, stride, padding, fill=-np.inf)
    ho, wo = win.shape[2], win.shape[3]
    flat_idx = win.reshape(n, c, ho, wo, k * k).argmax(axis=-1)
    di, dj = np.divmod(flat_idx, k)
    rows = np.arange(ho).reshape(1, 1, ho, 1) * stride + di
    cols = np.arange(wo).reshape(1, 1, 1, wo) * stride + dj
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=dy.dtype)
    nn_idx = np.arange(n).reshape(n, 1, 1, 1)
    cc_idx = np.arange(c).reshape(1, c, 1, 1)
    np.add.at(dxp, (nn_idx, cc_idx, rows, cols), dy)
    return dxp[:, :, padding:padding + h, padding:padding + w].copy()


def _normalize_backward(dxhat: Tensor, xhat: Tensor, inv_std: Tensor, num_groups: int) -> Tensor:
    n, c, h, w = dxhat.shape
    shape = (n, num_groups, c // num_groups, h, w)
    g = dxhat.reshape(shape)
    xh = xhat.reshape(shape)
    axes = (2, 3, 4)
    dx = inv_std * (g - g.mean(axis=axes, keepdims=True) - xh * (g * xh).mean(axis=axes, keepdims=True))
    return dx.reshape(n, c, h, w)


def group_norm_backward(dy: Tensor, x: Tensor, num_groups: int, gamma: Tensor,
                        eps: float = 1e-5) -> Tuple[Tensor, Tensor, Tensor]:
    c = x.shape[1]
    xhat, inv_std = normalize_groups(x, num_groups, eps)
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    dxhat = dy * gamma.reshape(1, c, 1, 1)
    return _normalize_backward(dxhat, xhat, inv_std, num_groups), dgamma, dbeta


def instance_norm_backward(dy: Tensor, x: Tensor, gamma: Tensor,
                           eps: float = 1e-5) -> Tuple[Tensor, Tensor, Tensor]:
    return group_norm_backward(dy, x, x.shape[1], gamma, eps)


def batch_norm_inference_backward(dy: Tensor, x: Tensor, gamma: Tensor, running_mean: Tensor,
                                  running_var: Tensor, eps: float = 1e-5) -> Tuple[Tensor, Tensor, Tensor]:
    c = x.shape[1]
    scale = (1.0 / np.sqrt(running_var + eps)).reshape(1, c, 1, 1)
    xhat = (x - running_mean.reshape(1, c, 1, 1)) * scale
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    return dy * gamma.reshape(1, c, 1, 1) * scale, dgamma, dbeta


def relu_backward(dy: Tensor, x: Tensor) -> Tensor:
    # subgradient at 0 is 0
    return np.where(x > 0, dy, np.zeros_like(dy))


def sigmoid_backward(dy: Tensor, y: Tensor) -> Tensor:
    return dy * y * (1.0 - y)


def add_backward(dy: Tensor, a_shape: Tuple[int, ...], b_shape: Tuple[int, ...]) -> Tuple[Tensor, Tensor]:
    return unbroadcast(dy, a_shape), unbroadcast(dy, b_shape)


def mul_backward(dy: Tensor, a: Tensor, b: Tensor) -> Tuple[Tensor, Tensor]:
    return unbroadcast(dy * b, np.shape(a)), unbroadcast(dy * a, np.shape(b))


def scale_backward(dy: Tensor, s: float) -> Tensor:
    return dy * s


def reshape_backward(dy: Tensor, x_shape: Tuple[int, ...]) -> Tensor:
    return dy.reshape(x_shape)


def transpose_backward(dy: Tensor, axes: Sequence[int]) -> Tensor:
    return np.ascontiguousarray(dy.transpose(np.argsort(axes)))


def concat_backward(dy: Tensor, sizes: Sequence[int], axis: int = 1) -> List[Tensor]:
    bounds = np.cumsum(sizes)[:-1]
    return [np.ascontiguousarray(p) for p in np.split(dy, bounds, axis=axis)]


def split_backward(dparts: Sequence[Optional[Tensor]], part_shape: Tuple[int, ...], axis: int = 1) -> Tensor:
    filled = [np.zeros(part_shape) if d is None else d for d in dparts]
    return np.concatenate(filled, axis=axis)
