"""Base class for pipeline stages: state, timing and failure logging."""

import time
from abc import ABC, abstractmethod
from enum import Enum
from typing import Any, Dict

from config.logging_config import get_stage_logger


class StageState(Enum):
    PENDING = "pending"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"


class BaseStage(ABC):
    """One step of an analysis run.

    Subclasses validate ``input_data`` against their schema in ``execute``
    and return a plain dictionary. ``state`` and ``execution_time`` describe
    the latest ``run``.
    """

    def __init__(self, name: str):
        self.name = name
        self.logger = get_stage_logger(name)
        self.state = StageState.PENDING
        self.execution_time: float | None = None

    @abstractmethod
    def execute(self, input_data: Dict[str, Any]) -> Dict[str, Any]: ...

    def run(self, input_data: Dict[str, Any]) -> Dict[str, Any]:
        """Execute the stage; failures are logged and re-raised unchanged."""
        self.state = StageState.RUNNING
        start = time.perf_counter()
        self.logger.info(f"Starting {self.name} stage")
        try:
            output = self.execute(input_data)
        except Exception as e:
            self.state = StageState.FAILED
            self.execution_time = time.perf_counter() - start
            self.logger.error(
                f"{self.name} failed after {self.execution_time:.2f}s: {e}",
                exc_info=True,
                extra={"execution_time": self.execution_time},
            )
            raise
        self.state = StageState.COMPLETED
        self.execution_time = time.perf_counter() - start
        self.logger.info(
            f"{self.name} finished in {self.execution_time:.2f}s",
            extra={"execution_time": self.execution_time},
        )
        return output
