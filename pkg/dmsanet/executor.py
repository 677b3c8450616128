import logging
import time
from typing import Any, Dict

import numpy as np

from .errors import ShapeMismatch
from .memory import ActivationTrace
from .network import Network

logger = logging.getLogger(__name__)


class ForwardExecutor:
    """Run forward passes on a network and report results as status dicts."""

    def __init__(self, network: Network, max_records: int = 256):
        self.network = network
        self.trace = ActivationTrace(max_records)

    def update_network(self, network: Network):
        self.network = network
        self.trace.clear()

    def execute(self, x: np.ndarray, stats: bool = False) -> Dict[str, Any]:
        self.trace.clear()
        if not np.all(np.isfinite(x)):
            return {
                "status": "error",
                "error_message": "Input contains non-finite values",
                "exit_code": 1,
            }
        if not self.network.params().all_finite():
            return {
                "status": "error",
                "error_message": "Network parameters contain non-finite values",
                "exit_code": 1,
            }
        try:
            logits = self.network.forward(x, trace=self.trace if stats else None)
        except ShapeMismatch as e:
            return {
                "status": "error",
                "error_message": f"Shape error: {str(e)}",
                "exit_code": 3,
            }

        if not np.all(np.isfinite(logits)):
            return {
                "status": "error",
                "error_message": "Forward pass produced non-finite logits",
                "exit_code": 1,
            }

        return {
            "status": "success",
            "result": logits,
            "shape": tuple(logits.shape),
            "trace": self.trace.get_summary() if stats else "",
        }

    def bench(self, x: np.ndarray, iters: int = 10, warmup: int = 3) -> Dict[str, Any]:
        if iters < 1:
            return {"status": "error", "error_message": f"iters must be >= 1, got {iters}", "exit_code": 2}
        try:
            for _ in range(warmup):
                self.network.forward(x)
            timings = []
            for _ in range(iters):
                start = time.perf_counter()
                self.network.forward(x)
                timings.append(time.perf_counter() - start)
        except ShapeMismatch as e:
            return {"status": "error", "error_message": f"Shape error: {str(e)}", "exit_code": 3}

        median = float(np.median(timings))
        p95 = float(np.percentile(timings, 95))
        logger.info(f"{self.network.name}: {iters} forwards, median {median * 1e3:.2f} ms, p95 {p95 * 1e3:.2f} ms")
        return {
            "status": "success",
            "result": {"median_s": median, "p95_s": p95, "iters": iters, "warmup": warmup},
            "timings": timings,
        }
