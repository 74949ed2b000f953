"""Process sandboxing with Landlock, seccomp user notification and COW workspaces."""

from ._lockbox import (
    EVENT_SCHEMA_VERSION,
    Audit,
    Context,
    Effects,
    Error,
    Event,
    Pipeline,
    Result,
    Sandbox,
    Stage,
    StageResult,
    ValidationError,
    check_kernel,
)

__version__ = "0.1.0"

__all__ = [
    "EVENT_SCHEMA_VERSION",
    "Audit",
    "Context",
    "Effects",
    "Error",
    "Event",
    "Pipeline",
    "Result",
    "Sandbox",
    "Stage",
    "StageResult",
    "ValidationError",
    "check_kernel",
]
