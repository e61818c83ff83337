"""Failure-recovery policies shared by the engine, tools, and connectors."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union


@dataclass(frozen=True)
class FailFast:
    """Abort on first failure."""


@dataclass(frozen=True)
class Retry:
    """Bounded retries with exponential backoff and no jitter by default.

    Delay before re-attempt i (0-based) is min(base_delay_ms * factor**i,
    cap_ms). Deterministic timings keep retry schedules reproducible; jitter
    is an engine-level opt-in that never reaches the trace.
    """

    max_attempts: int = 3
    base_delay_ms: int = 100
    factor: float = 2.0
    cap_ms: int = 10_000

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if self.base_delay_ms < 0 or self.cap_ms < 0:
            raise ValueError("delays must be non-negative")
        if self.factor < 1.0:
            raise ValueError("factor must be >= 1.0")


RecoveryPolicy = Union[FailFast, Retry]


def retry_delay_ms(policy: Retry, attempt: int) -> float:
    """Backoff before re-attempt number ``attempt`` (0-based)."""
    return min(policy.base_delay_ms * policy.factor**attempt, float(policy.cap_ms))


def total_attempts(policy: RecoveryPolicy) -> int:
    return policy.max_attempts if isinstance(policy, Retry) else 1
