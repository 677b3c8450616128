import logging
from collections import deque
from typing import Any, Dict, List, Tuple

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)


class ActivationTrace:
    """Bounded record of per-stage activation statistics from forward passes."""

    def __init__(self, max_records: int = 256):
        self.max_records = max_records
        self.records: deque = deque(maxlen=max_records)

    def add_record(self, name: str, x: np.ndarray):
        values = x.astype(np.float64, copy=False)
        self.records.append({
            "name": name,
            "shape": tuple(int(d) for d in x.shape),
            "mean": float(values.mean()),
            "std": float(values.std()),
            "min": float(values.min()),
            "max": float(values.max()),
        })

    def shapes(self) -> List[Tuple[str, Tuple[int, ...]]]:
        return [(r["name"], r["shape"]) for r in self.records]

    def get(self, name: str) -> Dict[str, Any]:
        for record in reversed(self.records):
            if record["name"] == name:
                return record
        raise KeyError(f"no activation recorded for '{name}'")

    def get_summary(self, last_n: int = 0) -> str:
        if not self.records:
            return "No activations recorded."

        recent = list(self.records)[-last_n:] if last_n else list(self.records)
        parts = []
        for r in recent:
            shape = "x".join(str(d) for d in r["shape"])
            parts.append(
                f"{r['name']:<10} {shape:<16} mean={r['mean']:.6g} std={r['std']:.6g} "
                f"min={r['min']:.6g} max={r['max']:.6g}"
            )
        return "\n".join(parts)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(list(self.records), columns=["name", "shape", "mean", "std", "min", "max"])

    def clear(self):
        self.records.clear()

    def __len__(self) -> int:
        return len(self.records)
