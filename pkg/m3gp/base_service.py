"""
Base service class for pipeline components that must stay total.
Numerical failures inside a guarded call are counted and replaced by a
component-specific fallback value instead of aborting a whole run.
"""
import logging
import threading
from typing import Any, Callable, Dict

import numpy as np

from .exceptions import DataError

logger = logging.getLogger(__name__)

# Failures a guarded call absorbs; anything else propagates
RECOVERABLE_ERRORS = (DataError, FloatingPointError, np.linalg.LinAlgError)


class BaseService:
    """Base class for long-running components (evaluators, runners)."""

    def __init__(self, service_name: str):
        self.service_name = service_name
        self.logger = logging.getLogger(f"{__name__}.{service_name}")
        self.call_count = 0
        self.failure_count = 0
        self._lock = threading.Lock()

    def _guarded(self, func: Callable, *args, **kwargs) -> Any:
        """Run func, converting recoverable failures into the fallback value."""
        with self._lock:
            self.call_count += 1
        try:
            return func(*args, **kwargs)
        except RECOVERABLE_ERRORS as e:
            with self._lock:
                self.failure_count += 1
            return self._handle_fallback(e)

    def _handle_fallback(self, error: Exception) -> Any:
        """Handle a recoverable failure. Override in subclasses."""
        self.logger.warning(f"{self.service_name} falling back to default behavior due to: {error}")
        return None

    def get_status(self) -> Dict[str, Any]:
        """Get call and failure counters."""
        rate = self.failure_count / self.call_count if self.call_count else 0.0
        return {
            "service": self.service_name,
            "calls": self.call_count,
            "failures": self.failure_count,
            "failure_rate": rate,
        }
