"""Exception types raised across the package."""

from __future__ import annotations

import numpy as np


class DomainError(ValueError):
    """An argument lies outside the domain where a quantity is defined."""


class RankDeficiencyError(ValueError):
    """The data do not identify all model parameters (too few distinct doses)."""


class SingularMatrixError(np.linalg.LinAlgError):
    """A matrix that must be positive definite failed the eigenvalue floor."""


class SingularRateError(RuntimeError):
    """Too many Monte Carlo draws produced a singular information matrix."""
