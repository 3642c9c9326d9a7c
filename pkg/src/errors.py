from __future__ import annotations

from typing import Any


class BenchError(Exception):
    """Base class for every error the workbench raises on purpose."""

    def __init__(self, message: str, **context: Any) -> None:
        super().__init__(message)
        self.message = message
        self.context = context

    def to_dict(self) -> dict[str, Any]:
        payload: dict[str, Any] = {"error": type(self).__name__, "message": self.message}
        payload.update(self.context)
        return payload


class DomainError(BenchError, ValueError):
    pass


class ShapeError(BenchError, ValueError):
    pass


class NumericError(BenchError, ArithmeticError):
    def __init__(self, message: str, where: str = "", **context: Any) -> None:
        super().__init__(message, where=where, **context)
        self.where = where


class FormatError(BenchError, ValueError):
    pass


class EmptyDatasetError(FormatError):
    pass


class BalanceError(BenchError, RuntimeError):
    def __init__(self, message: str, counts: list[int]) -> None:
        super().__init__(message, counts=counts)
        self.counts = counts


class NoSurvivorError(BenchError, RuntimeError):
    pass


class ConfigError(BenchError, ValueError):
    pass
