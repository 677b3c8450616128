"""Channel and spatial attention branches, the SE descriptor, feature grouping
and channel shuffle, with their analytic backward passes."""
import logging
from dataclasses import dataclass
from math import gcd
from typing import List, Optional, Tuple

import numpy as np

from .backward import (
    batch_norm_inference_backward,
    conv2d_backward,
    fully_connected_backward,
    global_avg_pool_backward,
    group_norm_backward,
    instance_norm_backward,
    relu_backward,
    sigmoid_backward,
    softmax_backward,
)
from .errors import InvalidGroups, ShapeMismatch, UnknownVariant
from .params import constant, kaiming_normal, lecun_normal
from .tensor import (
    Tensor,
    batch_norm_inference,
    concat,
    conv2d,
    fully_connected,
    global_avg_pool,
    group_norm,
    instance_norm,
    normalize_groups,
    relu,
    sigmoid,
    softmax,
    split,
)

logger = logging.getLogger(__name__)

NORM_VARIANTS = ("instance", "batch", "group", "shuffle-norm")

NamedTensors = List[Tuple[str, Tensor]]


# ---------------------------------------------------------------------------
# parameter types
# ---------------------------------------------------------------------------

@dataclass
class SeDescriptorParams:
    """Squeeze-and-excitation pair: w0 [C/r, C], w1 [C, C/r]."""

    w0: Tensor
    w1: Tensor
    reduction: int

    def __post_init__(self):
        hidden, channels = self.w0.shape
        if self.reduction < 1 or channels % self.reduction or channels // self.reduction != hidden:
            raise ShapeMismatch(f"w0 {self.w0.shape} is not a C/r x C pair for r={self.reduction}")
        if self.w1.shape != (channels, hidden):
            raise ShapeMismatch(f"w1 {self.w1.shape} does not mirror w0 {self.w0.shape}")

    @property
    def channels(self) -> int:
        return self.w0.shape[1]

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int, reduction: int, dtype="float32"):
        hidden = channels // reduction
        return cls(
            w0=kaiming_normal(rng, (hidden, channels), channels, dtype),
            w1=lecun_normal(rng, (channels, hidden), hidden, dtype),
            reduction=reduction,
        )

    def named(self) -> NamedTensors:
        return [("w0", self.w0), ("w1", self.w1)]


@dataclass
class SpatialBranchParams:
    """1x1 kernels producing B, C, D from A, plus the scalar scale alpha."""

    wb: Tensor
    wc: Tensor
    wd: Tensor
    alpha: Tensor

    def __post_init__(self):
        c = self.wb.shape[0]
        for name in ("wb", "wc", "wd"):
            if getattr(self, name).shape != (c, c, 1, 1):
                raise ShapeMismatch(f"{name} must be a {c}x{c} 1x1 kernel, got {getattr(self, name).shape}")
        if self.alpha.shape != (1,):
            raise ShapeMismatch(f"alpha must have shape (1,), got {self.alpha.shape}")

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int, dtype="float32"):
        shape = (channels, channels, 1, 1)
        return cls(
            wb=lecun_normal(rng, shape, channels, dtype),
            wc=lecun_normal(rng, shape, channels, dtype),
            wd=lecun_normal(rng, shape, channels, dtype),
            alpha=constant((1,), 0.0, dtype),
        )

    def named(self) -> NamedTensors:
        return [("wb", self.wb), ("wc", self.wc), ("wd", self.wd), ("alpha", self.alpha)]


@dataclass
class ChannelBranchParams:
    beta: Tensor

    def __post_init__(self):
        if self.beta.shape != (1,):
            raise ShapeMismatch(f"beta must have shape (1,), got {self.beta.shape}")

    @classmethod
    def init(cls, dtype="float32"):
        return cls(beta=constant((1,), 0.0, dtype))

    def named(self) -> NamedTensors:
        return [("beta", self.beta)]


@dataclass
class SaUnitParams:
    """Parameters of the gate applied to the X_k2 half of every group.

    Exactly one of ``w2`` (per-channel scale, [C/2G, 1, 1]) or ``fc`` (full
    1x1 kernel, [C/2G, C/2G, 1, 1]) is set. Running statistics are buffers
    used only by the batch-norm variant and are never trained.
    """

    b2: Tensor
    in_gamma: Tensor
    in_beta: Tensor
    w2: Optional[Tensor] = None
    fc: Optional[Tensor] = None
    running_mean: Optional[Tensor] = None
    running_var: Optional[Tensor] = None

    def __post_init__(self):
        if (self.w2 is None) == (self.fc is None):
            raise ShapeMismatch("exactly one of w2 and fc must be given")
        c2 = self.b2.shape[0]
        if self.b2.shape != (c2, 1, 1):
            raise ShapeMismatch(f"b2 must be [C/2G, 1, 1], got {self.b2.shape}")
        if self.w2 is not None and self.w2.shape != (c2, 1, 1):
            raise ShapeMismatch(f"w2 must be [C/2G, 1, 1], got {self.w2.shape}")
        if self.fc is not None and self.fc.shape != (c2, c2, 1, 1):
            raise ShapeMismatch(f"fc must be [C/2G, C/2G, 1, 1], got {self.fc.shape}")
        if self.in_gamma.shape != (c2,) or self.in_beta.shape != (c2,):
            raise ShapeMismatch("normalisation affine parameters must have C/2G entries")

    @property
    def channels(self) -> int:
        return self.b2.shape[0]

    @classmethod
    def init(cls, channels: int, full_conv: bool = False, with_running_stats: bool = False, dtype="float32"):
        kernel = constant((channels, channels, 1, 1), 0.0, dtype) if full_conv else None
        return cls(
            b2=constant((channels, 1, 1), 1.0, dtype),
            in_gamma=constant((channels,), 1.0, dtype),
            in_beta=constant((channels,), 0.0, dtype),
            w2=None if full_conv else constant((channels, 1, 1), 0.0, dtype),
            fc=kernel,
            running_mean=constant((channels,), 0.0, dtype) if with_running_stats else None,
            running_var=constant((channels,), 1.0, dtype) if with_running_stats else None,
        )

    def named(self) -> NamedTensors:
        first = ("fc", self.fc) if self.fc is not None else ("w2", self.w2)
        return [first, ("b2", self.b2), ("in_gamma", self.in_gamma), ("in_beta", self.in_beta)]


# ---------------------------------------------------------------------------
# grouping and shuffle
# ---------------------------------------------------------------------------

def group_features(x: Tensor, groups: int) -> List[Tensor]:
    """Split channels into ``groups`` contiguous slices."""
    c = x.shape[1]
    if groups < 1 or c % groups:
        raise InvalidGroups(f"{c} channels cannot form {groups} groups")
    return split(x, groups, axis=1)


def split_subfeature(xk: Tensor) -> Tuple[Tensor, Tensor]:
    """Halve a group into (X_k1, X_k2) along channels."""
    c = xk.shape[1]
    if c % 2:
        raise InvalidGroups(f"sub-feature with {c} channels cannot be halved")
    first, second = split(xk, 2, axis=1)
    return first, second


def channel_shuffle(x: Tensor, groups: int) -> Tensor:
    n, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise InvalidGroups(f"{c} channels cannot be shuffled in {groups} groups")
    return np.ascontiguousarray(
        x.reshape(n, groups, c // groups, h, w).transpose(0, 2, 1, 3, 4).reshape(n, c, h, w))


def channel_shuffle_backward(dy: Tensor, groups: int) -> Tensor:
    return channel_shuffle(dy, dy.shape[1] // groups)


# ---------------------------------------------------------------------------
# SE descriptor
# ---------------------------------------------------------------------------

def se_weight(x: Tensor, p: SeDescriptorParams) -> Tensor:
    """sigmoid(W1 relu(W0 GAP(x))) per sample and channel, [N, C, 1, 1]."""
    n, c = x.shape[:2]
    if c != p.channels:
        raise ShapeMismatch(f"SE descriptor built for {p.channels} channels, input has {c}")
    pooled = global_avg_pool(x).reshape(n, c)
    hidden = relu(fully_connected(pooled, p.w0.T))
    return sigmoid(fully_connected(hidden, p.w1.T)).reshape(n, c, 1, 1)


def se_weight_backward(dw: Tensor, x: Tensor, p: SeDescriptorParams) -> Tuple[Tensor, SeDescriptorParams]:
    n, c = x.shape[:2]
    pooled = global_avg_pool(x).reshape(n, c)
    pre = fully_connected(pooled, p.w0.T)
    hidden = relu(pre)
    weight = sigmoid(fully_connected(hidden, p.w1.T))

    dz = sigmoid_backward(dw.reshape(n, c), weight)
    dhidden, dw1t, _ = fully_connected_backward(dz, hidden, p.w1.T)
    dpre = relu_backward(dhidden, pre)
    dpooled, dw0t, _ = fully_connected_backward(dpre, pooled, p.w0.T)
    dx = global_avg_pool_backward(dpooled.reshape(n, c, 1, 1), x.shape)
    return dx, SeDescriptorParams(w0=dw0t.T.copy(), w1=dw1t.T.copy(), reduction=p.reduction)


# ---------------------------------------------------------------------------
# channel branch
# ---------------------------------------------------------------------------

def channel_attention_map(a: Tensor) -> Tensor:
    """x_ji = softmax over i of A_i . A_j, returned as [N, C, C] with rows j."""
    n, c, h, w = a.shape
    flat = a.reshape(n, c, h * w)
    return softmax(flat @ flat.transpose(0, 2, 1), axis=-1)


def channel_branch(a: Tensor, p: ChannelBranchParams) -> Tensor:
    """E1_j = beta * sum_i x_ji A_i + A_j."""
    n, c, h, w = a.shape
    flat = a.reshape(n, c, h * w)
    mixed = channel_attention_map(a) @ flat
    return (p.beta[0] * mixed + flat).reshape(n, c, h, w)


def channel_branch_backward(dout: Tensor, a: Tensor, p: ChannelBranchParams) -> Tuple[Tensor, ChannelBranchParams]:
    n, c, h, w = a.shape
    flat = a.reshape(n, c, h * w)
    attn = channel_attention_map(a)
    mixed = attn @ flat
    g = dout.reshape(n, c, h * w)

    dbeta = np.array([np.sum(g * mixed)], dtype=p.beta.dtype)
    dmixed = p.beta[0] * g
    dattn = dmixed @ flat.transpose(0, 2, 1)
    dflat = attn.transpose(0, 2, 1) @ dmixed + g
    denergy = softmax_backward(dattn, attn)
    dflat += (denergy + denergy.transpose(0, 2, 1)) @ flat
    return dflat.reshape(n, c, h, w), ChannelBranchParams(beta=dbeta)


# ---------------------------------------------------------------------------
# spatial branch
# ---------------------------------------------------------------------------

def _spatial_projections(a: Tensor, p: SpatialBranchParams) -> Tuple[Tensor, Tensor, Tensor]:
    n, c, h, w = a.shape
    if p.wb.shape[1] != c:
        raise ShapeMismatch(f"spatial branch built for {p.wb.shape[1]} channels, input has {c}")
    return tuple(conv2d(a, k).reshape(n, c, h * w) for k in (p.wb, p.wc, p.wd))


def spatial_attention_map(a: Tensor, p: SpatialBranchParams) -> Tensor:
    """s_ji = softmax over i of B_i . C_j, returned as [N, HW, HW] with rows j."""
    b, cm, _ = _spatial_projections(a, p)
    return softmax(cm.transpose(0, 2, 1) @ b, axis=-1)


def spatial_branch(a: Tensor, p: SpatialBranchParams, residual: Optional[Tensor] = None) -> Tensor:
    """E2_j = alpha * sum_i s_ji D_i + A_j.

    ``residual`` replaces A in the skip term when the attention input has
    been enhanced but the skip should carry the raw feature.
    """
    n, c, h, w = a.shape
    b, cm, d = _spatial_projections(a, p)
    attn = softmax(cm.transpose(0, 2, 1) @ b, axis=-1)
    skip = a if residual is None else residual
    if skip.shape != a.shape:
        raise ShapeMismatch(f"residual {skip.shape} does not match input {a.shape}")
    return (p.alpha[0] * (d @ attn.transpose(0, 2, 1))).reshape(n, c, h, w) + skip


def spatial_branch_backward(dout: Tensor, a: Tensor, p: SpatialBranchParams,
                            residual_given: bool = False) -> Tuple[Tensor, Optional[Tensor], SpatialBranchParams]:
    """Returns (d input, d residual or None, parameter gradients).

    Without a separate residual the skip gradient is folded into d input.
    """
    n, c, h, w = a.shape
    b, cm, d = _spatial_projections(a, p)
    attn = softmax(cm.transpose(0, 2, 1) @ b, axis=-1)
    mixed = d @ attn.transpose(0, 2, 1)
    g = dout.reshape(n, c, h * w)

    dalpha = np.array([np.sum(g * mixed)], dtype=p.alpha.dtype)
    dmixed = p.alpha[0] * g
    dd = dmixed @ attn
    dattn = dmixed.transpose(0, 2, 1) @ d
    denergy = softmax_backward(dattn, attn)
    dcm = b @ denergy.transpose(0, 2, 1)
    db = cm @ denergy

    da = np.zeros_like(a, dtype=np.result_type(a, dout))
    grads = {}
    for name, kernel, dproj in (("wb", p.wb, db), ("wc", p.wc, dcm), ("wd", p.wd, dd)):
        dpart, dkernel, _ = conv2d_backward(dproj.reshape(n, c, h, w), a, kernel)
        da += dpart
        grads[name] = dkernel
    param_grads = SpatialBranchParams(alpha=dalpha, **grads)
    if residual_given:
        return da, dout, param_grads
    return da + dout, None, param_grads


# ---------------------------------------------------------------------------
# X_k2 gate (F_c) and its normalisation variants
# ---------------------------------------------------------------------------

def _norm_groups(channels: int, requested: int) -> int:
    return gcd(max(requested, 1), channels)


def sa_normalize(x: Tensor, p: SaUnitParams, norm: str = "instance", norm_groups: int = 2,
                 eps: float = 1e-5) -> Tensor:
    if norm == "instance":
        return instance_norm(x, p.in_gamma, p.in_beta, eps)
    if norm == "batch":
        return batch_norm_inference(x, p.in_gamma, p.in_beta, p.running_mean, p.running_var, eps)
    g = _norm_groups(x.shape[1], norm_groups)
    if norm == "group":
        return group_norm(x, g, p.in_gamma, p.in_beta, eps)
    if norm == "shuffle-norm":
        # statistics over interleaved channels: shuffle, standardise, unshuffle
        xhat_shuffled, _ = normalize_groups(channel_shuffle(x, g), g, eps)
        xhat = channel_shuffle_backward(xhat_shuffled, g)
        c = x.shape[1]
        return xhat * p.in_gamma.reshape(1, c, 1, 1) + p.in_beta.reshape(1, c, 1, 1)
    raise UnknownVariant(f"unknown normalisation variant '{norm}', expected one of {NORM_VARIANTS}")


def sa_normalize_backward(dy: Tensor, x: Tensor, p: SaUnitParams, norm: str = "instance",
                          norm_groups: int = 2, eps: float = 1e-5) -> Tuple[Tensor, Tensor, Tensor]:
    if norm == "instance":
        return instance_norm_backward(dy, x, p.in_gamma, eps)
    if norm == "batch":
        return batch_norm_inference_backward(dy, x, p.in_gamma, p.running_mean, p.running_var, eps)
    g = _norm_groups(x.shape[1], norm_groups)
    if norm == "group":
        return group_norm_backward(dy, x, g, p.in_gamma, eps)
    if norm == "shuffle-norm":
        c = x.shape[1]
        shuffled = channel_shuffle(x, g)
        xhat_shuffled, _ = normalize_groups(shuffled, g, eps)
        xhat = channel_shuffle_backward(xhat_shuffled, g)
        dgamma = (dy * xhat).sum(axis=(0, 2, 3))
        dbeta = dy.sum(axis=(0, 2, 3))
        dxhat_shuffled = channel_shuffle(dy * p.in_gamma.reshape(1, c, 1, 1), g)
        ones = np.ones(c, dtype=x.dtype)
        dshuffled, _, _ = group_norm_backward(dxhat_shuffled, shuffled, g, ones, eps)
        return channel_shuffle_backward(dshuffled, g), dgamma, dbeta
    raise UnknownVariant(f"unknown normalisation variant '{norm}', expected one of {NORM_VARIANTS}")


def _gate_logits(normed: Tensor, p: SaUnitParams) -> Tensor:
    if p.fc is not None:
        return conv2d(normed, p.fc) + p.b2
    return p.w2 * normed + p.b2


def sa_spatial_unit(xk2: Tensor, p: SaUnitParams, norm: str = "instance", norm_groups: int = 2,
                    eps: float = 1e-5) -> Tensor:
    """sigmoid(w2 * N(xk2) + b2) * xk2, with N the selected normalisation."""
    if xk2.shape[1] != p.channels:
        raise ShapeMismatch(f"gate built for {p.channels} channels, X_k2 has {xk2.shape[1]}")
    normed = sa_normalize(xk2, p, norm, norm_groups, eps)
    return sigmoid(_gate_logits(normed, p)) * xk2


def sa_spatial_unit_backward(dout: Tensor, xk2: Tensor, p: SaUnitParams, norm: str = "instance",
                             norm_groups: int = 2, eps: float = 1e-5) -> Tuple[Tensor, SaUnitParams]:
    c2 = p.channels
    normed = sa_normalize(xk2, p, norm, norm_groups, eps)
    gate = sigmoid(_gate_logits(normed, p))

    dx = dout * gate
    dlogits = sigmoid_backward(dout * xk2, gate)
    db2 = dlogits.sum(axis=(0, 2, 3)).reshape(c2, 1, 1)
    dw2 = dfc = None
    if p.fc is not None:
        dnormed, dfc, _ = conv2d_backward(dlogits, normed, p.fc)
    else:
        dw2 = (dlogits * normed).sum(axis=(0, 2, 3)).reshape(c2, 1, 1)
        dnormed = dlogits * p.w2
    dxn, dgamma, dbeta = sa_normalize_backward(dnormed, xk2, p, norm, norm_groups, eps)
    return dx + dxn, SaUnitParams(b2=db2, in_gamma=dgamma, in_beta=dbeta, w2=dw2, fc=dfc)


def concat_groups(parts: List[Tensor]) -> Tensor:
    return concat(parts, axis=1)
