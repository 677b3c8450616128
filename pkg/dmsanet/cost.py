"""Parameter and FLOP accounting for built networks.

The default convention counts what layer hooks see: convolutions and fully
connected layers as multiply-accumulates, normalisation at 2 ops per element
when affine, ReLU per output element, pooling per input element. Attention
matrix products, softmax, sigmoid gates and elementwise mixing only appear
with ``functional=True``.
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import pandas as pd

from .block import DmsaConfig
from .network import (
    Bottleneck,
    Conv,
    DmsaLayer,
    GlobalAvgPool,
    Layer,
    Linear,
    MaxPool,
    Network,
    Norm,
    ReLU,
    Shape3,
)

logger = logging.getLogger(__name__)

# published (params, FLOPs) per network
PUBLISHED: Dict[str, Tuple[float, float]] = {
    "resnet50": (25.56e6, 4.12e9),
    "dmsanet50": (26.25e6, 3.44e9),
    "resnet101": (44.55e6, 7.85e9),
    "dmsanet101": (42.29e6, 7.11e9),
}


@dataclass(frozen=True)
class CostConvention:
    mac: bool = True
    functional: bool = False

    @property
    def mac_factor(self) -> int:
        return 1 if self.mac else 2


@dataclass
class CostRecord:
    name: str
    kind: str
    params: int
    flops: int


@dataclass
class CostReport:
    name: str
    records: List[CostRecord] = field(default_factory=list)
    convention: CostConvention = field(default_factory=CostConvention)
    resolution: Optional[int] = None

    @property
    def total_params(self) -> int:
        return int(sum(r.params for r in self.records))

    @property
    def total_flops(self) -> int:
        return int(sum(r.flops for r in self.records))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(r.name, r.kind, r.params, r.flops) for r in self.records],
            columns=["name", "kind", "params", "flops"],
        )

    def by_kind(self) -> pd.DataFrame:
        return self.to_frame().groupby("kind", sort=False)[["params", "flops"]].sum()


def _numel(shape: Shape3) -> int:
    c, h, w = shape
    return c * h * w


def _conv_flops(layer: Conv, out_shape: Shape3, convention: CostConvention) -> int:
    c, h, w = out_shape
    macs = c * (layer.in_channels // layer.groups) * layer.kernel * layer.kernel * h * w
    bias = c * h * w if layer.bias is not None else 0
    return macs * convention.mac_factor + bias


def _dmsa_records(prefix: str, layer: DmsaLayer, out_shape: Shape3,
                  convention: CostConvention) -> List[CostRecord]:
    cfg: DmsaConfig = layer.cfg
    p = layer.params
    f = convention.mac_factor
    c, h, w = out_shape
    hw = h * w
    cs = cfg.split_width
    half = c // 2
    records = []

    extract_macs = sum(cs * (cs // g) * k * k * hw for k, g in zip(cfg.kernel_schedule, cfg.conv_groups_schedule))
    records.append(CostRecord(f"{prefix}.extract", "dmsa.extract", sum(w_.size for w_ in p.extract),
                              extract_macs * f))

    channel_flops = 0
    if convention.functional:
        # energy and mixing products, softmax, scale and residual
        channel_flops = 2 * c * c * hw * f + 3 * c * c + 2 * c * hw
    records.append(CostRecord(f"{prefix}.channel", "dmsa.channel", p.channel.beta.size, channel_flops))

    spatial_flops = 3 * c * c * hw * f
    if convention.functional:
        spatial_flops += 2 * c * hw * hw * f + 3 * hw * hw + 2 * c * hw
    spatial_params = sum(t.size for _, t in p.spatial.named())
    records.append(CostRecord(f"{prefix}.spatial", "dmsa.spatial", spatial_params, spatial_flops))

    if p.sa is not None:
        gate_flops = 2 * half * hw
        if p.sa.fc is not None:
            gate_flops += cfg.sa_groups * cfg.gate_channels * cfg.gate_channels * hw * f
        if convention.functional:
            # affine (diagonal variant), sigmoid, product with X_k2
            gate_flops += (2 * half * hw if p.sa.w2 is not None else half * hw) + 2 * half * hw
        records.append(CostRecord(f"{prefix}.gate", "dmsa.gate", sum(t.size for _, t in p.sa.named()), gate_flops))

    if p.se:
        hidden = c // cfg.reduction
        se_flops = len(p.se) * (c * hw + 2 * c * hidden * f + hidden)
        if convention.functional:
            # sigmoid per descriptor, branch softmax, weighted sum
            se_flops += len(p.se) * c + 3 * len(p.se) * c + 3 * c * hw
        records.append(CostRecord(f"{prefix}.aggregate", "dmsa.aggregate",
                                  sum(t.size for s in p.se for _, t in s.named()), se_flops))
    if p.agg is not None:
        records.append(CostRecord(f"{prefix}.aggregate", "dmsa.aggregate", p.agg.size, c * 2 * c * hw * f))
    return records


def layer_cost(layer: Layer, in_shape: Shape3, convention: CostConvention = CostConvention(),
               prefix: Optional[str] = None) -> Tuple[Shape3, List[CostRecord]]:
    """Output shape and cost records of one layer for a single input sample."""
    name = prefix or layer.name
    out_shape = layer.output_shape(in_shape)
    params = int(sum(t.size for _, t in layer.named_params()))

    if isinstance(layer, Conv):
        return out_shape, [CostRecord(name, "conv", params, _conv_flops(layer, out_shape, convention))]
    if isinstance(layer, Norm):
        return out_shape, [CostRecord(name, "norm", params, 2 * _numel(out_shape))]
    if isinstance(layer, ReLU):
        return out_shape, [CostRecord(name, "relu", 0, _numel(out_shape))]
    if isinstance(layer, (MaxPool, GlobalAvgPool)):
        return out_shape, [CostRecord(name, "pool", 0, _numel(in_shape))]
    if isinstance(layer, Linear):
        flops = layer.in_features * layer.out_features * convention.mac_factor + layer.out_features
        return out_shape, [CostRecord(name, "linear", params, flops)]
    if isinstance(layer, DmsaLayer):
        return out_shape, _dmsa_records(name, layer, out_shape, convention)
    if isinstance(layer, Bottleneck):
        records: List[CostRecord] = []
        shape = in_shape
        for sub in layer.main:
            shape, sub_records = layer_cost(sub, shape, convention, f"{name}.{sub.name}")
            records += sub_records
        short = in_shape
        for sub in layer.shortcut:
            short, sub_records = layer_cost(sub, short, convention, f"{name}.{sub.name}")
            records += sub_records
        tail = _numel(shape) + (_numel(shape) if convention.functional else 0)
        records.append(CostRecord(f"{name}.relu_out", "relu", 0, tail))
        return shape, records
    raise TypeError(f"no cost rule for layer type {type(layer).__name__}")


def count_params(net: Network) -> CostReport:
    """Exact learnable-parameter count, one record per layer."""
    records = [
        CostRecord(layer.name, type(layer).__name__.lower(), int(sum(t.size for _, t in layer.named_params())), 0)
        for layer in net.layers
    ]
    report = CostReport(net.name, records)
    logger.debug(f"{net.name}: {report.total_params:,} parameters")
    return report


def count_flops(net: Network, input_resolution: int = 224,
                convention: CostConvention = CostConvention()) -> CostReport:
    """Per-layer FLOP (or MAC) counts for one sample at ``input_resolution``."""
    shape: Shape3 = (net.in_channels, input_resolution, input_resolution)
    records: List[CostRecord] = []
    for layer in net.layers:
        shape, layer_records = layer_cost(layer, shape, convention)
        records += layer_records
    report = CostReport(net.name, records, convention, input_resolution)
    logger.info(f"{net.name} at {input_resolution}x{input_resolution}: {report.total_params:,} params, "
                f"{report.total_flops / 1e9:.3f} G{'MAC' if convention.mac else 'FLOP'}")
    return report


def compare_report(a: CostReport, b: CostReport) -> pd.DataFrame:
    """Per-layer deltas ``b - a`` aligned on layer name, followed by a TOTAL row."""
    fa, fb = a.to_frame(), b.to_frame()
    order = list(fa["name"]) + [n for n in fb["name"] if n not in set(fa["name"])]
    merged = fa.merge(fb, on="name", how="outer", suffixes=("_a", "_b"))
    merged = merged.set_index("name").reindex(order).reset_index()
    for col in ("params_a", "params_b", "flops_a", "flops_b"):
        merged[col] = merged[col].fillna(0).astype("int64")
    merged["kind"] = merged["kind_a"].fillna(merged["kind_b"])
    merged["delta_params"] = merged["params_b"] - merged["params_a"]
    merged["delta_flops"] = merged["flops_b"] - merged["flops_a"]
    merged = merged[["name", "kind", "params_a", "params_b", "delta_params", "flops_a", "flops_b", "delta_flops"]]

    total = {
        "name": "TOTAL", "kind": "",
        "params_a": a.total_params, "params_b": b.total_params,
        "delta_params": b.total_params - a.total_params,
        "flops_a": a.total_flops, "flops_b": b.total_flops,
        "delta_flops": b.total_flops - a.total_flops,
    }
    return pd.concat([merged, pd.DataFrame([total])], ignore_index=True)


def gap_against(report: CostReport, target_params: Optional[float] = None,
                target_flops: Optional[float] = None) -> Dict[str, Any]:
    """Signed percentage gaps of the report's totals against published targets."""
    if target_params is None and target_flops is None:
        target_params, target_flops = PUBLISHED.get(report.name, (None, None))
    gap: Dict[str, Any] = {"name": report.name, "params": report.total_params, "flops": report.total_flops}
    if target_params:
        gap["target_params"] = target_params
        gap["params_gap_pct"] = 100.0 * (report.total_params - target_params) / target_params
    if target_flops and report.total_flops:
        gap["target_flops"] = target_flops
        gap["flops_gap_pct"] = 100.0 * (report.total_flops - target_flops) / target_flops
    return gap
