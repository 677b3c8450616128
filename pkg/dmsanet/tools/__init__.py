from typing import List

from .base import BaseTool
from .network import BenchTool, DescribeTool, ForwardTool
from .training import GradcheckTool, TrainToyTool
from .weights import InspectWeightsTool, LoadWeightsTool, SaveWeightsTool


def default_tools() -> List[BaseTool]:
    return [
        DescribeTool(),
        ForwardTool(),
        GradcheckTool(),
        TrainToyTool(),
        BenchTool(),
        SaveWeightsTool(),
        LoadWeightsTool(),
        InspectWeightsTool(),
    ]
