"""Shared utility functions."""

from .errors import ConfigError, DomainError, LabError, NumericError, ShapeError
from .storage import LocalStorageBackend

__all__ = ['LabError', 'ShapeError', 'DomainError', 'NumericError', 'ConfigError', 'LocalStorageBackend']
