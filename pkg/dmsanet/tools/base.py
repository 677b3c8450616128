import logging
from abc import ABC, abstractmethod
from typing import Any, Dict

from ..errors import (
    ConfigFileError,
    DivergenceDetected,
    InvalidConfig,
    InvalidGroups,
    NonFiniteObjective,
    ShapeMismatch,
    UnknownVariant,
    WeightFormatError,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_SHAPE = 3
EXIT_IO = 4


class BaseTool(ABC):
    """Abstract base class for all commands."""

    @property
    @abstractmethod
    def name(self) -> str:
        pass

    @property
    @abstractmethod
    def description(self) -> str:
        pass

    @property
    @abstractmethod
    def parameters(self) -> Dict[str, Any]:
        pass

    @abstractmethod
    def execute(self, **kwargs) -> Dict[str, Any]:
        pass

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "description": self.description,
            "parameters": self.parameters
        }

    @staticmethod
    def _success(result: Any, **extra) -> Dict[str, Any]:
        return {"status": "success", "result": result, "exit_code": EXIT_OK, **extra}

    @staticmethod
    def _error(message: str, exit_code: int, **extra) -> Dict[str, Any]:
        return {"status": "error", "error_message": message, "exit_code": exit_code, **extra}


def error_from_exception(e: Exception) -> Dict[str, Any]:
    """Map a library exception to an error status with its exit code."""
    if isinstance(e, ConfigFileError):
        return BaseTool._error(f"Config error: {e.diagnostic()}", EXIT_CONFIG)
    if isinstance(e, (InvalidConfig, UnknownVariant)):
        return BaseTool._error(f"Config error: {e}", EXIT_CONFIG)
    if isinstance(e, (ShapeMismatch, InvalidGroups)):
        return BaseTool._error(f"Shape error: {e}", EXIT_SHAPE)
    if isinstance(e, (WeightFormatError, OSError)):
        return BaseTool._error(f"IO error: {e}", EXIT_IO)
    if isinstance(e, DivergenceDetected):
        return BaseTool._error(f"Training diverged at epoch {e.epoch}: {e}", EXIT_CHECK_FAILED)
    if isinstance(e, NonFiniteObjective):
        return BaseTool._error(f"Gradient check error: {e}", EXIT_CHECK_FAILED)
    logger.error(f"Tool execution failed: {e}")
    return BaseTool._error(f"Tool error: {e}", EXIT_CHECK_FAILED)
