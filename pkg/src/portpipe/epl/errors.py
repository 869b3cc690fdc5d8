from __future__ import annotations

from typing import Iterable, Optional


class EplError(Exception):
    kind = "EplError"

    def to_dict(self) -> dict:
        return {"error": self.kind, "detail": str(self)}


class ParseError(EplError):
    """Syntax error with a 1-based position and the tokens that would have fit."""

    kind = "ParseError"

    def __init__(self, message: str, line: int, column: int, expected: Iterable[str] = ()):
        self.message = message
        self.line = line
        self.column = column
        self.expected = frozenset(expected)
        text = f"{message} at line {line}, column {column}"
        if self.expected:
            text += f" (expected one of: {', '.join(sorted(self.expected))})"
        super().__init__(text)

    def to_dict(self) -> dict:
        return {
            "error": self.kind,
            "detail": str(self),
            "line": self.line,
            "column": self.column,
            "expected": sorted(self.expected),
        }


class DeployError(EplError):
    kind = "DeployError"

    def __init__(self, reason: str, message: str):
        super().__init__(message)
        self.reason = reason

    def to_dict(self) -> dict:
        return {"error": self.reason, "detail": str(self)}


def unknown_schema(name: str) -> DeployError:
    return DeployError("UnknownSchema", f"stream {name!r} is not a registered schema or derived stream")


def type_error(message: str) -> DeployError:
    return DeployError("TypeError", message)


class UnknownDeployment(EplError):
    kind = "UnknownDeployment"


class UnknownStream(EplError):
    kind = "UnknownStream"


class ClockRegression(EplError):
    kind = "ClockRegression"

    def __init__(self, now: int, last: Optional[int]):
        super().__init__(f"time {now} is earlier than engine time {last}")
        self.now = now
        self.last = last
