import logging
from typing import Any, Dict

import pandas as pd

from ..serialization import inspect_weights, save_weights
from .base import EXIT_IO, BaseTool, error_from_exception
from .network import build_from_config

logger = logging.getLogger(__name__)


class SaveWeightsTool(BaseTool):
    @property
    def name(self) -> str:
        return "save-weights"

    @property
    def description(self) -> str:
        return "Initialise a configured network from a seed and write its parameters to a weight file."

    @property
    def parameters(self) -> Dict[str, Any]:
        return {
            "type": "object",
            "properties": {
                "config": {"type": "string", "description": "Network config JSON"},
                "out": {"type": "string", "description": "Weight file to write"},
                "seed": {"type": "integer", "description": "Initialisation seed (default: from config)"}
            },
            "required": ["config", "out"]
        }

    def execute(self, config: str, out: str, seed: int = None) -> Dict[str, Any]:
        try:
            _, net = build_from_config(config, seed)
            params = net.params()
        except Exception as e:
            return error_from_exception(e)
        try:
            written = save_weights(out, params)
        except OSError as e:
            return self._error(f"IO error: cannot write {out}: {e}", EXIT_IO)
        except Exception as e:
            return error_from_exception(e)
        return self._success(f"wrote {len(params)} tensors, {params.numel():,} values, {written:,} bytes to {out}",
                             tensors=len(params), bytes=written)


class LoadWeightsTool(BaseTool):
    """Checks that a weight file fits a configured network and runs one forward pass with it."""

    @property
    def name(self) -> str:
        return "load-weights"

    @property
    def description(self) -> str:
        return "Load a weight file into a configured network; fails on any name or shape mismatch."

    @property
    def parameters(self) -> Dict[str, Any]:
        return {
            "type": "object",
            "properties": {
                "config": {"type": "string", "description": "Network config JSON"},
                "weights": {"type": "string", "description": "Weight file to load"}
            },
            "required": ["config", "weights"]
        }

    def execute(self, config: str, weights: str) -> Dict[str, Any]:
        try:
            _, net = build_from_config(config, weights=weights)
        except Exception as e:
            return error_from_exception(e)
        params = net.params()
        return self._success(f"loaded {len(params)} tensors ({params.numel():,} values) into {net.name}",
                             tensors=len(params), numel=params.numel())


class InspectWeightsTool(BaseTool):
    @property
    def name(self) -> str:
        return "inspect-weights"

    @property
    def description(self) -> str:
        return "List the records of a weight file: name, dtype, shape, element count."

    @property
    def parameters(self) -> Dict[str, Any]:
        return {
            "type": "object",
            "properties": {
                "weights": {"type": "string", "description": "Weight file to list"}
            },
            "required": ["weights"]
        }

    def execute(self, weights: str) -> Dict[str, Any]:
        try:
            df = inspect_weights(weights)
        except Exception as e:
            return error_from_exception(e)
        with pd.option_context("display.max_rows", None, "display.width", 200):
            text = df.to_string(index=False) if not df.empty else "(no tensors)"
        text += f"\n{len(df)} tensors, {int(df['numel'].sum()) if not df.empty else 0:,} values"
        return self._success(text, records=df)
