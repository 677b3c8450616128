"""The DMSA block: multi-scale split, fusion, the two attention branches,
branch aggregation and channel shuffle, plus the ablation variants."""
import logging
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .attention import (
    NORM_VARIANTS,
    ChannelBranchParams,
    SaUnitParams,
    SeDescriptorParams,
    SpatialBranchParams,
    channel_branch,
    channel_branch_backward,
    channel_shuffle,
    channel_shuffle_backward,
    group_features,
    sa_spatial_unit,
    sa_spatial_unit_backward,
    se_weight,
    se_weight_backward,
    spatial_branch,
    spatial_branch_backward,
    split_subfeature,
)
from .backward import conv2d_backward, softmax_backward
from .errors import InvalidConfig, ShapeMismatch, UnknownVariant
from .params import ParamSet, kaiming_normal
from .tensor import DTYPES, Shape, Tensor, concat, conv2d, parallel_map, resolve_dtype, softmax, split

logger = logging.getLogger(__name__)

FC_VARIANTS = ("affine_gate", "none", "conv1x1")
BRANCH_AGGREGATIONS = ("softmax_eq8", "concat_halve")

DEFAULT_KERNELS = (3, 5, 7, 9)
DEFAULT_CONV_GROUPS = (1, 4, 8, 16)

# variant name -> (norm_variant, fc_variant)
ABLATIONS: Dict[str, Tuple[str, str]] = {
    "origin": ("instance", "affine_gate"),
    "w_bn": ("batch", "affine_gate"),
    "w_gn": ("group", "affine_gate"),
    "w_sn": ("shuffle-norm", "affine_gate"),
    "wo_fc": ("instance", "none"),
    "conv1x1_fc": ("instance", "conv1x1"),
}


def _largest_divisor_at_most(n: int, limit: int) -> int:
    for d in range(min(n, max(limit, 1)), 0, -1):
        if n % d == 0:
            return d
    return 1


@dataclass
class DmsaConfig:
    """Hyperparameters of one DMSA block.

    ``kernel_schedule`` and ``conv_groups_schedule`` are filled from the
    defaults when left as None: kernels continue 3, 5, 7, 9, 11, ... and
    groups continue 1, 4, 8, 16, 32, ..., each clipped to the largest divisor
    of the split width. Explicit schedules are validated as given.
    """

    channels: int
    splits: int = 4
    kernel_schedule: Optional[List[int]] = None
    conv_groups_schedule: Optional[List[int]] = None
    sa_groups: int = 8
    reduction: int = 16
    norm_variant: str = "instance"
    fc_variant: str = "affine_gate"
    branch_agg: str = "softmax_eq8"
    stride: int = 1
    norm_groups: int = 2
    eps: float = 1e-5
    dtype: str = "float32"

    def __post_init__(self):
        if self.channels < 1 or self.splits < 1:
            raise InvalidConfig(f"channels and splits must be positive, got {self.channels}/{self.splits}")
        if self.channels % self.splits:
            raise InvalidConfig(f"channels {self.channels} not divisible by splits {self.splits}")
        if self.kernel_schedule is None:
            kernels = list(DEFAULT_KERNELS)
            while len(kernels) < self.splits:
                kernels.append(kernels[-1] + 2)
            self.kernel_schedule = kernels[:self.splits]
        if self.conv_groups_schedule is None:
            groups = list(DEFAULT_CONV_GROUPS)
            while len(groups) < self.splits:
                groups.append(groups[-1] * 2)
            width = self.split_width
            self.conv_groups_schedule = [_largest_divisor_at_most(width, g) for g in groups[:self.splits]]
        self.kernel_schedule = [int(k) for k in self.kernel_schedule]
        self.conv_groups_schedule = [int(g) for g in self.conv_groups_schedule]
        self.validate()

    @property
    def split_width(self) -> int:
        return self.channels // self.splits

    @property
    def gate_channels(self) -> int:
        """Channels of one X_k2 half, C / 2G."""
        return self.channels // (2 * self.sa_groups)

    def validate(self) -> None:
        c, s = self.channels, self.splits
        if len(self.kernel_schedule) != s:
            raise InvalidConfig(f"kernel_schedule has {len(self.kernel_schedule)} entries, expected {s}")
        if any(k < 1 or k % 2 == 0 for k in self.kernel_schedule):
            raise InvalidConfig(f"kernel sizes must be odd and positive: {self.kernel_schedule}")
        if len(self.conv_groups_schedule) != s:
            raise InvalidConfig(f"conv_groups_schedule has {len(self.conv_groups_schedule)} entries, expected {s}")
        for g in self.conv_groups_schedule:
            if g < 1 or self.split_width % g:
                raise InvalidConfig(f"split width {self.split_width} not divisible by conv group {g}")
        if self.sa_groups < 1 or c % (2 * self.sa_groups):
            raise InvalidConfig(f"channels {c} not divisible by 2G = {2 * self.sa_groups}")
        if self.reduction < 1 or c % self.reduction:
            raise InvalidConfig(f"channels {c} not divisible by reduction {self.reduction}")
        if self.norm_variant not in NORM_VARIANTS:
            raise InvalidConfig(f"norm_variant '{self.norm_variant}' not in {NORM_VARIANTS}")
        if self.fc_variant not in FC_VARIANTS:
            raise InvalidConfig(f"fc_variant '{self.fc_variant}' not in {FC_VARIANTS}")
        if self.branch_agg not in BRANCH_AGGREGATIONS:
            raise InvalidConfig(f"branch_agg '{self.branch_agg}' not in {BRANCH_AGGREGATIONS}")
        if self.stride < 1:
            raise InvalidConfig(f"stride must be >= 1, got {self.stride}")
        if self.norm_groups < 1:
            raise InvalidConfig(f"norm_groups must be >= 1, got {self.norm_groups}")
        if not self.eps > 0:
            raise InvalidConfig(f"eps must be positive, got {self.eps}")
        if self.dtype not in DTYPES:
            raise InvalidConfig(f"dtype '{self.dtype}' not in {list(DTYPES)}")

    def with_channels(self, channels: int, stride: int = 1) -> "DmsaConfig":
        """Same hyperparameters at a different width; conv groups are clipped to the new split width."""
        width = max(channels // self.splits, 1)
        groups = [_largest_divisor_at_most(width, g) for g in self.conv_groups_schedule]
        return replace(self, channels=channels, stride=stride, kernel_schedule=list(self.kernel_schedule),
                       conv_groups_schedule=groups)


def make_ablation(cfg: DmsaConfig, variant: str) -> DmsaConfig:
    if variant not in ABLATIONS:
        raise UnknownVariant(f"unknown ablation '{variant}', expected one of {list(ABLATIONS)}")
    norm, fc = ABLATIONS[variant]
    return replace(cfg, norm_variant=norm, fc_variant=fc)


@dataclass
class DmsaParams:
    extract: List[Tensor]
    channel: ChannelBranchParams
    spatial: SpatialBranchParams
    se: List[SeDescriptorParams] = field(default_factory=list)
    sa: Optional[SaUnitParams] = None
    agg: Optional[Tensor] = None

    @classmethod
    def init(cls, cfg: DmsaConfig, rng: np.random.Generator) -> "DmsaParams":
        cs, dt = cfg.split_width, cfg.dtype
        extract = []
        for k, g in zip(cfg.kernel_schedule, cfg.conv_groups_schedule):
            extract.append(kaiming_normal(rng, (cs, cs // g, k, k), (cs // g) * k * k, dt))
        se = []
        if cfg.branch_agg == "softmax_eq8":
            se = [SeDescriptorParams.init(rng, cfg.channels, cfg.reduction, dt) for _ in range(2)]
        agg = None
        if cfg.branch_agg == "concat_halve":
            agg = kaiming_normal(rng, (cfg.channels, 2 * cfg.channels, 1, 1), 2 * cfg.channels, dt)
        sa = None
        if cfg.fc_variant != "none":
            sa = SaUnitParams.init(cfg.gate_channels, full_conv=cfg.fc_variant == "conv1x1",
                                   with_running_stats=cfg.norm_variant == "batch", dtype=dt)
        return cls(
            extract=extract,
            channel=ChannelBranchParams.init(dt),
            spatial=SpatialBranchParams.init(rng, cfg.channels, dt),
            se=se,
            sa=sa,
            agg=agg,
        )

    def named_tensors(self) -> List[Tuple[str, Tensor]]:
        named = [(f"extract.{i}", w) for i, w in enumerate(self.extract)]
        named += [(f"channel.{n}", t) for n, t in self.channel.named()]
        named += [(f"spatial.{n}", t) for n, t in self.spatial.named()]
        for i, se in enumerate(self.se):
            named += [(f"se.{i}.{n}", t) for n, t in se.named()]
        if self.sa is not None:
            named += [(f"sa.{n}", t) for n, t in self.sa.named()]
        if self.agg is not None:
            named.append(("agg", self.agg))
        return named

    def to_param_set(self) -> ParamSet:
        """ParamSet view sharing this block's arrays."""
        return ParamSet(self.named_tensors())

    def rebind(self, ps: ParamSet, prefix: str = "") -> "DmsaParams":
        """Copy of this structure whose learnables are taken from ``ps``.

        Buffers (batch-norm running statistics) are kept from ``self``.
        """
        def get(name: str) -> Tensor:
            return ps[f"{prefix}{name}"]

        sa = None
        if self.sa is not None:
            sa = replace(
                self.sa,
                b2=get("sa.b2"), in_gamma=get("sa.in_gamma"), in_beta=get("sa.in_beta"),
                w2=get("sa.w2") if self.sa.w2 is not None else None,
                fc=get("sa.fc") if self.sa.fc is not None else None,
            )
        return DmsaParams(
            extract=[get(f"extract.{i}") for i in range(len(self.extract))],
            channel=ChannelBranchParams(beta=get("channel.beta")),
            spatial=SpatialBranchParams(wb=get("spatial.wb"), wc=get("spatial.wc"), wd=get("spatial.wd"),
                                        alpha=get("spatial.alpha")),
            se=[SeDescriptorParams(w0=get(f"se.{i}.w0"), w1=get(f"se.{i}.w1"), reduction=s.reduction)
                for i, s in enumerate(self.se)],
            sa=sa,
            agg=get("agg") if self.agg is not None else None,
        )


def identity_extraction_kernels(cfg: DmsaConfig) -> List[Tensor]:
    """Extraction kernels that copy each split through unchanged."""
    cs = cfg.split_width
    kernels = []
    for k, g in zip(cfg.kernel_schedule, cfg.conv_groups_schedule):
        per_group = cs // g
        w = np.zeros((cs, per_group, k, k), dtype=resolve_dtype(cfg.dtype))
        centre = (k - 1) // 2
        for o in range(cs):
            w[o, o % per_group, centre, centre] = 1.0
        kernels.append(w)
    return kernels


# ---------------------------------------------------------------------------
# forward stages
# ---------------------------------------------------------------------------

def multi_scale_extract(x: Tensor, cfg: DmsaConfig, params: DmsaParams) -> List[Tensor]:
    Shape.of(x).require_channels(cfg.channels, "DMSA input")
    if len(params.extract) != cfg.splits:
        raise InvalidConfig(f"{len(params.extract)} extraction kernels for {cfg.splits} splits")
    parts = split(x, cfg.splits, axis=1)

    def _extract(i: int) -> Tensor:
        k = cfg.kernel_schedule[i]
        return conv2d(parts[i], params.extract[i], stride=cfg.stride, padding=(k - 1) // 2,
                      groups=cfg.conv_groups_schedule[i])

    return parallel_map(_extract, range(cfg.splits))


def fuse_splits(parts: List[Tensor]) -> Tensor:
    if not parts:
        raise ShapeMismatch("nothing to fuse")
    first = parts[0].shape
    for p in parts[1:]:
        if p.shape != first:
            raise ShapeMismatch(f"split shapes differ: {first} vs {p.shape}")
    return concat(parts, axis=1)


def _gate_inputs(a: Tensor, cfg: DmsaConfig) -> Tuple[List[Tensor], Tensor]:
    """X_k1 halves per group and all X_k2 halves stacked along the batch axis."""
    halves = [split_subfeature(xk) for xk in group_features(a, cfg.sa_groups)]
    return [h[0] for h in halves], np.concatenate([h[1] for h in halves], axis=0)


def _reassemble(firsts: List[Tensor], stacked_seconds: Tensor, groups: int) -> Tensor:
    seconds = np.split(stacked_seconds, groups, axis=0)
    return concat([concat([k1, k2], axis=1) for k1, k2 in zip(firsts, seconds)], axis=1)


def enhance(a: Tensor, cfg: DmsaConfig, params: DmsaParams) -> Tensor:
    """Apply F_c to the X_k2 half of every group; X_k1 passes through."""
    if cfg.fc_variant == "none":
        return a
    firsts, stacked = _gate_inputs(a, cfg)
    gated = sa_spatial_unit(stacked, params.sa, cfg.norm_variant, cfg.norm_groups, cfg.eps)
    return _reassemble(firsts, gated, cfg.sa_groups)


def branch_weights(e1: Tensor, e2: Tensor, params: DmsaParams) -> Tensor:
    """Softmax over the branch axis of the SE descriptors, [2, N, C, 1, 1]."""
    if len(params.se) != 2:
        raise InvalidConfig("softmax aggregation needs one SE descriptor per branch")
    z = np.stack([se_weight(e1, params.se[0]), se_weight(e2, params.se[1])])
    return softmax(z, axis=0)


def aggregate_branches(e1: Tensor, e2: Tensor, params: DmsaParams, cfg: DmsaConfig) -> Tensor:
    if e1.shape != e2.shape:
        raise ShapeMismatch(f"branch outputs differ: {e1.shape} vs {e2.shape}")
    if cfg.branch_agg == "concat_halve":
        return conv2d(concat([e1, e2], axis=1), params.agg)
    att = branch_weights(e1, e2, params)
    # att_1 e1 + att_2 e2 with att_1 = 1 - att_2; equal branches pass through exactly
    return e1 + att[1] * (e2 - e1)


def _forward(x: Tensor, cfg: DmsaConfig, params: DmsaParams) -> Tuple[Tensor, Dict[str, Any]]:
    # Step 1: multi-scale extraction and fusion
    feats = multi_scale_extract(x, cfg, params)
    a = fuse_splits(feats)

    # Step 2: both branches read A; the spatial one attends over the enhanced map
    a_hat = enhance(a, cfg, params)
    e1, e2 = parallel_map(lambda f: f(), [
        lambda: channel_branch(a, params.channel),
        lambda: spatial_branch(a_hat, params.spatial, residual=a),
    ])

    # Step 3: aggregate and shuffle
    y = aggregate_branches(e1, e2, params, cfg)
    out = channel_shuffle(y, cfg.sa_groups)
    cache = {"x": x, "a": a, "a_hat": a_hat, "e1": e1, "e2": e2}
    return out, cache


def dmsa_forward(x: Tensor, cfg: DmsaConfig, params: DmsaParams) -> Tensor:
    return _forward(x, cfg, params)[0]


def dmsa_forward_cached(x: Tensor, cfg: DmsaConfig, params: DmsaParams) -> Tuple[Tensor, Dict[str, Any]]:
    return _forward(x, cfg, params)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def _aggregate_backward(dy: Tensor, e1: Tensor, e2: Tensor, cfg: DmsaConfig, params: DmsaParams):
    if cfg.branch_agg == "concat_halve":
        dcat, dagg, _ = conv2d_backward(dy, concat([e1, e2], axis=1), params.agg)
        de1, de2 = split(dcat, 2, axis=1)
        return de1, de2, [], dagg
    att = branch_weights(e1, e2, params)
    datt = np.stack([
        (dy * e1).sum(axis=(2, 3), keepdims=True),
        (dy * e2).sum(axis=(2, 3), keepdims=True),
    ])
    dz = softmax_backward(datt, att, axis=0)
    dx1, se1 = se_weight_backward(dz[0], e1, params.se[0])
    dx2, se2 = se_weight_backward(dz[1], e2, params.se[1])
    return att[0] * dy + dx1, att[1] * dy + dx2, [se1, se2], None


def dmsa_backward(dout: Tensor, cache: Dict[str, Any], cfg: DmsaConfig,
                  params: DmsaParams) -> Tuple[Tensor, DmsaParams]:
    """Gradients of ``dmsa_forward`` with respect to its input and parameters."""
    x, a, a_hat, e1, e2 = cache["x"], cache["a"], cache["a_hat"], cache["e1"], cache["e2"]

    dy = channel_shuffle_backward(dout, cfg.sa_groups)
    de1, de2, se_grads, dagg = _aggregate_backward(dy, e1, e2, cfg, params)

    da_hat, da, spatial_grads = spatial_branch_backward(de2, a_hat, params.spatial, residual_given=True)
    da_channel, channel_grads = channel_branch_backward(de1, a, params.channel)
    da = da + da_channel

    sa_grads = None
    if cfg.fc_variant == "none":
        da = da + da_hat
    else:
        dfirsts, dstacked = _gate_inputs(da_hat, cfg)
        _, stacked = _gate_inputs(a, cfg)
        dstacked_in, sa_grads = sa_spatial_unit_backward(dstacked, stacked, params.sa, cfg.norm_variant,
                                                         cfg.norm_groups, cfg.eps)
        da = da + _reassemble(dfirsts, dstacked_in, cfg.sa_groups)

    parts = split(x, cfg.splits, axis=1)
    dparts = split(da, cfg.splits, axis=1)

    def _extract_backward(i: int):
        k = cfg.kernel_schedule[i]
        dx_i, dw_i, _ = conv2d_backward(dparts[i], parts[i], params.extract[i], stride=cfg.stride,
                                        padding=(k - 1) // 2, groups=cfg.conv_groups_schedule[i])
        return dx_i, dw_i

    results = parallel_map(_extract_backward, range(cfg.splits))
    dx = concat([r[0] for r in results], axis=1)
    grads = DmsaParams(
        extract=[r[1] for r in results],
        channel=channel_grads,
        spatial=spatial_grads,
        se=se_grads,
        sa=sa_grads,
        agg=dagg,
    )
    return dx, grads
