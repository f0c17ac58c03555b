from __future__ import annotations
from typing import Any, Optional


class SalViTError(Exception):
    """Base class for every error raised by the salvit package."""


class DimensionError(SalViTError, ValueError):
    pass


class ParameterError(SalViTError, ValueError):
    pass


class ContractError(SalViTError, RuntimeError):
    pass


class NumericError(SalViTError, FloatingPointError):
    """Non-finite values in a forward pass or loss.

    `head` is set when the NaN was found in an attention head's logits,
    `diagnostics` carries whatever the trainer collected before aborting.
    """

    def __init__(self, message: str, head: Optional[int] = None, diagnostics: Optional[dict[str, Any]] = None):
        super().__init__(message)
        self.head = head
        self.diagnostics = diagnostics or {}
