"""
Exception hierarchy shared by every module.

Each error carries a ``category`` (config | data | numeric | io | internal) that
the command-line surface maps to an exit code.
"""

from typing import Any, Dict, Optional


class HistoSSLError(Exception):
    """Base class for all errors raised by histo_ssl"""

    category = "internal"


class ConfigError(HistoSSLError, ValueError):
    """Invalid or unknown configuration"""

    category = "config"


class ParameterError(ConfigError):
    """A scalar parameter lies outside its valid range"""


class DimensionError(ConfigError):
    """Array shapes do not agree"""


class ContractError(HistoSSLError, ValueError):
    """An input violates a documented precondition"""

    category = "config"


class DataError(HistoSSLError):
    """Input data is missing, empty or degenerate"""

    category = "data"

    def __init__(self, message: str, *, missing_path: bool = False):
        super().__init__(message)
        self.missing_path = missing_path


class NumericError(HistoSSLError, ArithmeticError):
    """Non-finite values appeared in a computation"""

    category = "numeric"

    def __init__(
        self,
        message: str,
        *,
        step: Optional[int] = None,
        block: Optional[int] = None,
        tensor: Optional[str] = None,
        components: Optional[Dict[str, Any]] = None,
    ):
        context = []
        if step is not None:
            context.append(f"step={step}")
        if block is not None:
            context.append(f"block={block}")
        if tensor is not None:
            context.append(f"tensor={tensor}")
        if components:
            context.append(
                ", ".join(f"{key}={value}" for key, value in components.items())
            )
        if context:
            message = f"{message} ({'; '.join(context)})"
        super().__init__(message)
        self.step = step
        self.block = block
        self.tensor = tensor
        self.components = components or {}
