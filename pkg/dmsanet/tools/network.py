import logging
from typing import Any, Dict, Optional

import numpy as np

from ..config import NetConfigFile, load_net_config
from ..cost import PUBLISHED, CostConvention, compare_report, count_flops, gap_against
from ..errors import ShapeMismatch
from ..executor import ForwardExecutor
from ..network import check_stage_sizes
from ..report import render_comparison, render_cost_report
from ..serialization import load_weights
from ..tensor import resolve_dtype
from .base import EXIT_SHAPE, BaseTool, error_from_exception

logger = logging.getLogger(__name__)


def build_from_config(config: str, seed: Optional[int] = None, weights: Optional[str] = None):
    """Load a config file, build its network and optionally load weights into it."""
    cfg = load_net_config(config)
    net = cfg.build(seed)
    if weights:
        net.params().assign(load_weights(weights))
        logger.info(f"loaded weights from {weights} into {net.name}")
    return cfg, net


def make_input(cfg: NetConfigFile, source: str = "random", seed: Optional[int] = None, batch: int = 1) -> np.ndarray:
    dtype = resolve_dtype(cfg.dtype)
    if source == "random":
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        return rng.standard_normal((batch, cfg.in_channels, cfg.resolution, cfg.resolution)).astype(dtype)
    x = np.load(source)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise ShapeMismatch(f"input file {source} must hold an [N, C, H, W] array, got shape {x.shape}")
    return x.astype(dtype)


class DescribeTool(BaseTool):
    """Per-layer parameter and FLOP report with the gap to published figures."""

    @property
    def name(self) -> str:
        return "describe"

    @property
    def description(self) -> str:
        return "Print the per-layer parameter/FLOP table of a configured network and its totals."

    @property
    def parameters(self) -> Dict[str, Any]:
        return {
            "type": "object",
            "properties": {
                "config": {"type": "string", "description": "Network config JSON"},
                "against": {"type": "number", "description": "Target params in millions (prints signed gap)"},
                "against_flops": {"type": "number", "description": "Target FLOPs in G (prints signed gap)"},
                "resolution": {"type": "integer", "description": "Input resolution (default: from config)"},
                "true_flops": {"type": "boolean", "description": "Count 2 FLOPs per multiply-accumulate"},
                "functional": {"type": "boolean", "description": "Also count attention products and gates"},
                "compare": {"type": "string", "description": "Second config; print per-layer deltas"},
                "summary": {"type": "boolean", "description": "Totals only"}
            },
            "required": ["config"]
        }

    def execute(self, config: str, against: float = None, against_flops: float = None, resolution: int = None,
                true_flops: bool = False, functional: bool = False, compare: str = None,
                summary: bool = False) -> Dict[str, Any]:
        try:
            cfg, net = build_from_config(config)
            convention = CostConvention(mac=not true_flops, functional=functional)
            report = count_flops(net, resolution or cfg.resolution, convention)

            if against is not None or against_flops is not None:
                gap = gap_against(report, against * 1e6 if against is not None else None,
                                  against_flops * 1e9 if against_flops is not None else None)
            elif report.name in PUBLISHED and convention == CostConvention():
                gap = gap_against(report)
            else:
                gap = None
            text = render_cost_report(report, gap, per_layer=not summary)

            if compare:
                _, other = build_from_config(compare)
                diff = compare_report(report, count_flops(other, resolution or cfg.resolution, convention))
                text += "\n\n" + render_comparison(diff)
            return self._success(text, total_params=report.total_params, total_flops=report.total_flops,
                                 gap=gap or {})
        except Exception as e:
            return error_from_exception(e)


class ForwardTool(BaseTool):
    def __init__(self, executor: Optional[ForwardExecutor] = None):
        self.executor = executor

    @property
    def name(self) -> str:
        return "forward"

    @property
    def description(self) -> str:
        return "Run one forward pass and print the logits shape, optionally per-stage activation statistics."

    @property
    def parameters(self) -> Dict[str, Any]:
        return {
            "type": "object",
            "properties": {
                "config": {"type": "string", "description": "Network config JSON"},
                "weights": {"type": "string", "description": "Weight file to load"},
                "seed": {"type": "integer", "description": "Seed for weights and random input"},
                "input": {"type": "string", "default": "random", "description": "'random' or a .npy path"},
                "stats": {"type": "boolean", "description": "Print per-stage shape, mean, std, min, max"},
                "batch": {"type": "integer", "default": 1, "description": "Batch size for random input"}
            },
            "required": ["config"]
        }

    def execute(self, config: str, weights: str = None, seed: int = None, input: str = "random",
                stats: bool = False, batch: int = 1) -> Dict[str, Any]:
        try:
            cfg, net = build_from_config(config, seed, weights)
            x = make_input(cfg, input, seed, batch)
        except Exception as e:
            return error_from_exception(e)

        if self.executor is None:
            self.executor = ForwardExecutor(net)
        else:
            self.executor.update_network(net)
        result = self.executor.execute(x, stats=True)
        if result["status"] != "success":
            return result

        lines = []
        if stats:
            lines.append(result["trace"])
        logits = result["result"]
        lines.append(f"logits: {'x'.join(str(d) for d in logits.shape)}")
        if net.spec is not None and x.shape[2] == cfg.resolution:
            try:
                check_stage_sizes(self.executor.trace, net.spec)
                lines.append("stage sizes: " + ", ".join(str(s) for _, s in net.spec.output_sizes()))
            except ShapeMismatch as e:
                return self._error(f"Shape error: {e}", EXIT_SHAPE)
        return self._success("\n".join(lines), logits=logits, records=list(self.executor.trace.records))


class BenchTool(BaseTool):
    @property
    def name(self) -> str:
        return "bench"

    @property
    def description(self) -> str:
        return "Time forward passes: median and p95 wall time after warmup runs."

    @property
    def parameters(self) -> Dict[str, Any]:
        return {
            "type": "object",
            "properties": {
                "config": {"type": "string", "description": "Network config JSON"},
                "iters": {"type": "integer", "default": 10, "description": "Timed forward passes"},
                "warmup": {"type": "integer", "default": 3, "description": "Untimed warmup passes"},
                "seed": {"type": "integer", "description": "Seed for weights and input"},
                "batch": {"type": "integer", "default": 1, "description": "Batch size"}
            },
            "required": ["config"]
        }

    def execute(self, config: str, iters: int = 10, warmup: int = 3, seed: int = None,
                batch: int = 1) -> Dict[str, Any]:
        try:
            cfg, net = build_from_config(config, seed)
            x = make_input(cfg, "random", seed, batch)
        except Exception as e:
            return error_from_exception(e)

        result = ForwardExecutor(net).bench(x, iters, warmup)
        if result["status"] != "success":
            return result
        timings = result["timings"]
        stats = result["result"]
        lines = [f"iter {i + 1}: {t * 1e3:.3f} ms" for i, t in enumerate(timings)]
        lines.append(f"median: {stats['median_s'] * 1e3:.3f} ms  p95: {stats['p95_s'] * 1e3:.3f} ms "
                     f"({iters} iters, {warmup} warmup, batch {batch})")
        return self._success("\n".join(lines), timings=timings, **stats)
