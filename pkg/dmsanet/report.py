"""Plain-text rendering of cost tables, comparisons and gradient-check results."""
import json
from typing import Any, Dict, List, Optional

import pandas as pd

from .cost import CostReport
from .gradcheck import GradCheckReport


def build_help_text(tools: List) -> str:
    """One section per command with its JSON-schema parameters."""
    descs = []
    for tool in tools:
        d = tool.to_dict()
        descs.append(f"{d['name']}\n    {d['description']}\n    parameters: "
                     f"{json.dumps(d['parameters']['properties'], sort_keys=True)}")
    return "Commands:\n\n" + "\n\n".join(descs)


def _millions(n: float) -> str:
    return f"{n / 1e6:.2f}M"


def _giga(n: float) -> str:
    return f"{n / 1e9:.2f}G"


def render_cost_report(report: CostReport, gap: Optional[Dict[str, Any]] = None, per_layer: bool = True) -> str:
    unit = "MACs" if report.convention.mac else "FLOPs"
    lines = []
    if per_layer:
        df = report.to_frame()
        with pd.option_context("display.max_rows", None, "display.width", 200):
            lines.append(df.to_string(index=False))
        lines.append("")
    lines.append(f"network: {report.name}")
    lines.append(f"resolution: {report.resolution}x{report.resolution}" if report.resolution else "resolution: n/a")
    lines.append(f"convention: {unit}{' + functional ops' if report.convention.functional else ''}")
    lines.append(f"total params: {report.total_params:,} ({_millions(report.total_params)})")
    lines.append(f"total {unit}: {report.total_flops:,} ({_giga(report.total_flops)})")
    if gap:
        if "params_gap_pct" in gap:
            lines.append(f"params gap vs {_millions(gap['target_params'])}: {gap['params_gap_pct']:+.2f}%")
        if "flops_gap_pct" in gap:
            lines.append(f"{unit} gap vs {_giga(gap['target_flops'])}: {gap['flops_gap_pct']:+.2f}%")
    return "\n".join(lines)


def render_comparison(diff: pd.DataFrame, only_changed: bool = True) -> str:
    rows = diff
    if only_changed:
        changed = (diff["delta_params"] != 0) | (diff["delta_flops"] != 0) | (diff["name"] == "TOTAL")
        rows = diff[changed]
    with pd.option_context("display.max_rows", None, "display.width", 200):
        return rows.to_string(index=False)


def render_gradcheck(report: GradCheckReport, verbose: bool = False) -> str:
    df = report.to_frame()
    lines = []
    if verbose or not report.passed:
        shown = df if verbose else df[~df["passed"]]
        with pd.option_context("display.max_rows", None, "display.width", 200,
                               "display.float_format", "{:.3e}".format):
            lines.append(shown.to_string(index=False))
    lines.append(f"checked {len(df)} tensors at tol {report.tol:g} (atol {report.atol:g}, step {report.step:g})")
    if not df.empty:
        lines.append(f"max relative error: {df['max_rel_error'].max():.3e}")
    if report.passed:
        lines.append("PASS")
    else:
        lines.append(f"FAIL: {', '.join(report.failures)}")
    return "\n".join(lines)
