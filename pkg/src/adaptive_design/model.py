"""Nonlinear regression mean functions.

A model is described by a :class:`ModelSpec` bundling the mean function,
its gradient in the parameters and the matrix of second partial
derivatives.  Only the Emax dose-response model ships::

    eta(x, theta) = theta0 + theta1 * x / (x + theta2)

``theta0`` is the placebo response, ``theta1`` the maximum drug effect and
``theta2`` the dose giving half of the maximum effect (ED50).

All functions accept a scalar dose or a 1-D array of doses.  For an array
of length ``k`` the gradient has shape ``(k, 3)`` and the Hessian
``(k, 3, 3)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray

from adaptive_design.exceptions import DomainError

THETA2_MIN = 0.015
THETA2_MAX = 1500.0


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelParams:
    """Emax parameter vector ``(theta0, theta1, theta2)``."""

    theta0: float
    theta1: float
    theta2: float

    def __post_init__(self) -> None:
        for name in ("theta0", "theta1", "theta2"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise DomainError(f"{name} must be finite, got {value!r}")
            object.__setattr__(self, name, value)
        if self.theta2 <= 0:
            raise DomainError(f"theta2 must be positive, got {self.theta2!r}")

    def __iter__(self) -> Iterator[float]:
        yield self.theta0
        yield self.theta1
        yield self.theta2

    def as_array(self) -> NDArray[np.float64]:
        return np.array([self.theta0, self.theta1, self.theta2])

    @classmethod
    def from_array(cls, values: ArrayLike) -> "ModelParams":
        t0, t1, t2 = np.asarray(values, dtype=np.float64).ravel()
        return cls(float(t0), float(t1), float(t2))

    def replace(self, **changes: float) -> "ModelParams":
        fields = {"theta0": self.theta0, "theta1": self.theta1, "theta2": self.theta2}
        fields.update(changes)
        return ModelParams(**fields)


@dataclass(frozen=True)
class ParameterBox:
    """Closed interval constraining ``theta2`` during estimation."""

    lower: float = THETA2_MIN
    upper: float = THETA2_MAX

    def __post_init__(self) -> None:
        if not (0 < self.lower <= self.upper) or not math.isfinite(self.upper):
            raise DomainError(
                f"need 0 < lower <= upper < inf, got [{self.lower}, {self.upper}]"
            )

    def __contains__(self, theta2: float) -> bool:
        return self.lower <= theta2 <= self.upper

    def check(self, theta: ModelParams) -> ModelParams:
        if theta.theta2 not in self:
            raise DomainError(
                f"theta2={theta.theta2} outside [{self.lower}, {self.upper}]"
            )
        return theta


@dataclass(frozen=True)
class DoseInterval:
    """Design region ``[a, b]`` with ``0 <= a < b``."""

    a: float = 0.0
    b: float = 150.0

    def __post_init__(self) -> None:
        a, b = float(self.a), float(self.b)
        if not (math.isfinite(a) and math.isfinite(b)) or not (0 <= a < b):
            raise DomainError(f"need 0 <= a < b finite, got a={a}, b={b}")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    def __contains__(self, x: float) -> bool:
        return self.a <= x <= self.b

    @property
    def width(self) -> float:
        return self.b - self.a


ThetaLike = Union[ModelParams, Sequence[float], NDArray[np.float64]]


def _unpack(theta: ThetaLike) -> tuple[float, float, float]:
    if isinstance(theta, ModelParams):
        return theta.theta0, theta.theta1, theta.theta2
    t0, t1, t2 = np.asarray(theta, dtype=np.float64).ravel()
    return float(t0), float(t1), float(t2)


def _denominator(x: NDArray[np.float64], theta2: float) -> NDArray[np.float64]:
    if np.any(x < 0):
        raise DomainError("doses must be nonnegative")
    denom = x + theta2
    if np.any(denom == 0):
        raise DomainError("x + theta2 == 0: Emax mean undefined")
    return denom


# ---------------------------------------------------------------------------
# Emax model
# ---------------------------------------------------------------------------

def emax_mean(x: ArrayLike, theta: ThetaLike) -> float | NDArray[np.float64]:
    """Mean response ``theta0 + theta1 * x / (x + theta2)``."""
    t0, t1, t2 = _unpack(theta)
    xa = np.asarray(x, dtype=np.float64)
    out = t0 + t1 * xa / _denominator(xa, t2)
    return float(out) if out.ndim == 0 else out


def emax_gradient(x: ArrayLike, theta: ThetaLike) -> NDArray[np.float64]:
    """Gradient of the mean in ``theta``: ``(1, x/(x+t2), -t1*x/(x+t2)**2)``."""
    _, t1, t2 = _unpack(theta)
    xa = np.asarray(x, dtype=np.float64)
    denom = _denominator(xa, t2)
    ratio = xa / denom
    out = np.stack([np.ones_like(xa), ratio, -t1 * ratio / denom], axis=-1)
    return out


def emax_hessian(x: ArrayLike, theta: ThetaLike) -> NDArray[np.float64]:
    """Second derivatives of the mean in ``theta``.

    The mean is linear in ``theta0`` and ``theta1``, so the only nonzero
    entries are the ``(theta1, theta2)`` cross term and the ``theta2``
    diagonal term.
    """
    _, t1, t2 = _unpack(theta)
    xa = np.asarray(x, dtype=np.float64)
    denom = _denominator(xa, t2)
    cross = -xa / denom**2
    curv = 2.0 * t1 * xa / denom**3
    out = np.zeros(xa.shape + (3, 3))
    out[..., 1, 2] = cross
    out[..., 2, 1] = cross
    out[..., 2, 2] = curv
    return out


@dataclass(frozen=True)
class ModelSpec:
    """Mean function of a regression model together with its derivatives."""

    name: str
    mean: Callable[[ArrayLike, ThetaLike], float | NDArray[np.float64]]
    gradient: Callable[[ArrayLike, ThetaLike], NDArray[np.float64]]
    hessian: Callable[[ArrayLike, ThetaLike], NDArray[np.float64]]
    dim: int


EMAX = ModelSpec(
    name="emax",
    mean=emax_mean,
    gradient=emax_gradient,
    hessian=emax_hessian,
    dim=3,
)
