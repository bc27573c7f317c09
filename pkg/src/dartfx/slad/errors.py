# SPDX-FileCopyrightText: 2024-present kulnor <pascal.heus@gmail.com>
#
# SPDX-License-Identifier: MIT
"""Exceptions raised across the distillation laboratory."""


class SladError(Exception):
    """Base exception carrying a message and optional context details."""

    def __init__(self, message, details: dict | None = None):
        super().__init__(message)
        self.message = message
        self.details = details or {}

    def __str__(self):
        base_message = f"{type(self).__name__}: {self.message}"
        if self.details:
            context = ", ".join(f"{key}={value}" for key, value in self.details.items())
            base_message += f" ({context})"
        return base_message


class DimensionError(SladError, ValueError):
    """Shapes of operands do not agree."""


class ParameterError(SladError, ValueError):
    """A hyperparameter is outside its valid range."""


class UsageError(SladError):
    """An operation was called in a way its contract does not allow."""


class BindingError(SladError):
    """Adapters do not fit the encoder they are bound to."""


class UnsupportedSiteError(SladError):
    """Adapter sharing was requested for a site other than the fused QKV projection."""


class ConfigurationError(SladError, ValueError):
    """Encoder, mapping or experiment configuration is invalid."""


class DataError(SladError, ValueError):
    """Dataset content is invalid (labels out of range, empty classes, ...)."""


class NumericalError(SladError, ArithmeticError):
    """Non-finite values were produced (NaN losses or gradients)."""


class UndefinedSimilarityError(SladError, ArithmeticError):
    """CKA is undefined because a representation has zero variance."""
