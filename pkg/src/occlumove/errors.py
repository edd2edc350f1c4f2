"""Exception types shared across the package."""
from __future__ import annotations


class OcclumoveError(Exception):
    """Base class for package errors."""


class DimensionError(OcclumoveError, ValueError):
    """Input dimensions violate a divisibility or size contract."""


class ShapeError(OcclumoveError, ValueError):
    """Array shape incompatible with the operation."""


class ContractError(OcclumoveError, ValueError):
    """Caller violated a documented precondition (wrong space, empty input...)."""


class ConfigError(OcclumoveError, ValueError):
    """Invalid configuration value or reference to a nonexistent component."""


class MissingCacheEntryError(OcclumoveError, KeyError):
    """Inversion cache lacks a requested key/value entry; silent fallback is unsafe."""


class LockstepError(OcclumoveError, RuntimeError):
    """Branch handoff consumed out of order or with mismatched timesteps."""


class DivergenceError(OcclumoveError, RuntimeError):
    """Optimization loss exceeded the divergence guard."""


class StageError(OcclumoveError, RuntimeError):
    """Pipeline failure with the owning stage attached."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
