import logging
import os
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List

from ..block import ABLATIONS
from ..config import load_net_config
from ..gradcheck import SCOPES, check_block, run_gradcheck
from ..report import render_gradcheck
from ..train import TrainConfig, make_synthetic_dataset, plot_loss_curve, train_toy
from .base import EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_IO, BaseTool, error_from_exception

logger = logging.getLogger(__name__)


def _unwritable(path: Path) -> str:
    """Reason ``path`` cannot be written, or an empty string; nothing is created."""
    parent = path.parent
    if path.is_dir():
        return "is a directory"
    if not parent.is_dir():
        return f"directory {parent} does not exist"
    if not os.access(parent, os.W_OK):
        return f"directory {parent} is not writable"
    return ""


class GradcheckTool(BaseTool):
    """Central-difference verification of the analytic gradients."""

    @property
    def name(self) -> str:
        return "gradcheck"

    @property
    def description(self) -> str:
        return "Compare analytic gradients to central differences at float64; fails naming each bad tensor."

    @property
    def parameters(self) -> Dict[str, Any]:
        return {
            "type": "object",
            "properties": {
                "config": {"type": "string", "description": "Toy config whose DMSA settings the block scope checks"},
                "scope": {"type": "string", "enum": list(SCOPES), "default": "op"},
                "seeds": {"type": "array", "items": {"type": "integer"}, "default": [0]},
                "variants": {"type": "array", "items": {"type": "string"}, "default": ["origin"],
                             "description": "Ablation variants for the block scope"},
                "corrupt": {"type": "string", "description": "Perturb this analytic gradient (test hook)"},
                "verbose": {"type": "boolean", "description": "Print every tensor's errors"}
            },
            "required": []
        }

    def execute(self, config: str = None, scope: str = "op", seeds: List[int] = None, variants: List[str] = None,
                corrupt: str = None, verbose: bool = False) -> Dict[str, Any]:
        seeds = seeds or [0]
        variants = variants or ["origin"]
        unknown = [v for v in variants if v not in ABLATIONS]
        if unknown:
            return self._error(f"Config error: unknown ablation variant(s) {unknown}", EXIT_CONFIG)
        if scope not in SCOPES:
            return self._error(f"Config error: unknown scope '{scope}'", EXIT_CONFIG)
        try:
            if scope == "block":
                cfg = None
                if config:
                    net_cfg = load_net_config(config)
                    if not net_cfg.is_toy:
                        return self._error("Config error: block gradcheck needs a toy config", EXIT_CONFIG)
                    cfg = replace(net_cfg.dmsa_config(), dtype="float64")
                report = None
                for seed in seeds:
                    part = check_block(seed, variants=variants, cfg=cfg, corrupt=corrupt)
                    if report is None:
                        report = part
                    else:
                        report.extend(part)
            else:
                report = run_gradcheck(scope, seeds, corrupt)
        except Exception as e:
            return error_from_exception(e)

        text = render_gradcheck(report, verbose)
        if not report.passed:
            return self._error(f"Gradient check failed for: {', '.join(report.failures)}", EXIT_CHECK_FAILED,
                               result=text, failures=report.failures)
        return self._success(text, checked=len(report.checks))


class TrainToyTool(BaseTool):
    @property
    def name(self) -> str:
        return "train-toy"

    @property
    def description(self) -> str:
        return "Train the toy DMSA network on synthetic blobs with SGD; writes the loss curve as CSV."

    @property
    def parameters(self) -> Dict[str, Any]:
        return {
            "type": "object",
            "properties": {
                "config": {"type": "string", "description": "Toy network config JSON"},
                "out": {"type": "string", "description": "CSV path for epoch, train_loss, test_loss, test_accuracy"},
                "plot": {"type": "string", "description": "PNG path for the loss-curve plot"},
                "epochs": {"type": "integer", "default": 200},
                "lr": {"type": "number", "default": 0.1},
                "batch_size": {"type": "integer", "default": 32},
                "samples": {"type": "integer", "default": 500, "description": "Dataset size"},
                "seed": {"type": "integer", "description": "Seed for weights, data and shuffling"},
                "progress": {"type": "boolean"}
            },
            "required": ["config"]
        }

    def execute(self, config: str, out: str = None, plot: str = None, epochs: int = 200, lr: float = 0.1,
                batch_size: int = 32, samples: int = 500, seed: int = None,
                progress: bool = False) -> Dict[str, Any]:
        for path in (out, plot):
            if path is not None:
                problem = _unwritable(Path(path))
                if problem:
                    return self._error(f"IO error: cannot write {path}: {problem}", EXIT_IO)
        try:
            cfg = load_net_config(config)
            if not cfg.is_toy:
                return self._error("Config error: train-toy needs a config with depth \"toy\"", EXIT_CONFIG)
            seed = cfg.seed if seed is None else seed
            net = cfg.build(seed)
            data = make_synthetic_dataset(samples, cfg.classes, cfg.resolution, seed, channels=cfg.in_channels)
            train_cfg = TrainConfig(lr=lr, batch_size=batch_size, epochs=epochs,
                                    decay_epochs=(epochs // 2, 3 * epochs // 4) if epochs >= 4 else (),
                                    seed=seed)
            curve = train_toy(net, data, train_cfg, progress=progress)
            if out:
                curve.to_csv(out)
            if plot:
                plot_loss_curve(curve, plot)
        except Exception as e:
            return error_from_exception(e)

        text = (f"epochs: {len(curve)}\nfinal train loss: {curve.train_loss[-1]:.6f}\n"
                f"final test loss: {curve.test_loss[-1]:.6f}\nfinal test accuracy: {curve.test_accuracy[-1]:.4f}")
        if out:
            text += f"\nloss curve: {Path(out)}"
        return self._success(text, curve=curve.to_frame())
