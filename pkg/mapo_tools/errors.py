"""Exception hierarchy shared by every module."""

from __future__ import annotations


class MapoError(Exception):
    """Base class for all errors raised by mapo_tools."""


class ContractViolation(MapoError, ValueError):
    """A caller broke an operation's pre-condition (shapes, ranges, states)."""


class DomainError(ContractViolation):
    """A mathematical operation left its domain (log of a non-positive value, overflow)."""


class ConfigError(MapoError):
    """The run config is invalid. The message names the offending key."""


class DatasetError(MapoError):
    """A dataset on disk is corrupt or inconsistent with its manifest."""


class CheckpointError(MapoError):
    """A checkpoint or preference cache on disk cannot be read back."""


class NonFiniteGradientError(MapoError):
    """The optimizer received a NaN or Inf gradient."""

    def __init__(self, param_name: str) -> None:
        super().__init__(f"Non-finite gradient for parameter '{param_name}'")
        self.param_name = param_name
