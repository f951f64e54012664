"""Approximate and exact designs and their information matrices.

An approximate design is a finite probability measure on the dose
interval; an exact design allocates integer numbers of subjects to the
support points.  The closed-form locally D-optimal design for the Emax
model puts equal mass on ``a``, an interior dose ``x*(theta2)`` and ``b``;
:func:`brute_force_d_optimal` recovers it numerically without using the
closed form and serves as an independent check.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, TextIO, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.optimize import minimize_scalar

from adaptive_design.exceptions import DomainError, SingularMatrixError
from adaptive_design.model import EMAX, DoseInterval, ModelSpec, ThetaLike

WEIGHT_TOL = 1e-12


# ---------------------------------------------------------------------------
# Design containers
# ---------------------------------------------------------------------------

def _as_points(points: ArrayLike) -> NDArray[np.float64]:
    pts = np.asarray(points, dtype=np.float64).ravel()
    if pts.size < 1:
        raise ValueError("a design needs at least one support point")
    if not np.all(np.isfinite(pts)):
        raise ValueError("support points must be finite")
    if np.any(np.diff(pts) <= 0):
        raise ValueError("support points must be strictly increasing")
    pts.setflags(write=False)
    return pts


@dataclass(frozen=True, eq=False)
class Design:
    """Approximate design: support points with probability weights."""

    points: NDArray[np.float64]
    weights: NDArray[np.float64]

    def __post_init__(self) -> None:
        pts = _as_points(self.points)
        w = np.asarray(self.weights, dtype=np.float64).ravel()
        if w.shape != pts.shape:
            raise ValueError("points and weights must have equal length")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and nonnegative")
        if abs(math.fsum(w) - 1.0) > WEIGHT_TOL:
            raise ValueError(f"weights sum to {math.fsum(w)!r}, not 1")
        w.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return self.points.size

    def check_within(self, interval: DoseInterval) -> "Design":
        if self.points[0] < interval.a or self.points[-1] > interval.b:
            raise DomainError("support points fall outside the dose interval")
        return self


@dataclass(frozen=True, eq=False)
class ExactDesign:
    """Integer allocation of ``total`` subjects to support points."""

    points: NDArray[np.float64]
    counts: NDArray[np.int64]

    def __post_init__(self) -> None:
        pts = _as_points(self.points)
        c = np.asarray(self.counts)
        if c.shape != pts.shape:
            raise ValueError("points and counts must have equal length")
        if not np.all(c == np.round(c)) or np.any(c < 0):
            raise ValueError("counts must be nonnegative integers")
        c = c.astype(np.int64)
        c.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "counts", c)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __len__(self) -> int:
        return self.points.size

    def to_design(self) -> Design:
        if self.total == 0:
            raise ValueError("an empty exact design has no normalized form")
        return Design(self.points, self.counts / self.total)


# ---------------------------------------------------------------------------
# Information matrices
# ---------------------------------------------------------------------------

def information_sum(
    points: ArrayLike,
    weights: ArrayLike,
    theta: ThetaLike,
    model: ModelSpec = EMAX,
) -> NDArray[np.float64]:
    """``sum_m w_m grad(x_m) grad(x_m)^T`` for arbitrary nonnegative weights."""
    grads = np.atleast_2d(model.gradient(np.asarray(points, dtype=np.float64), theta))
    w = np.asarray(weights, dtype=np.float64)
    mat = np.einsum("m,mi,mj->ij", w, grads, grads)
    return 0.5 * (mat + mat.T)


def fisher_matrix(
    design: Design, theta: ThetaLike, model: ModelSpec = EMAX
) -> NDArray[np.float64]:
    """Normalized information matrix ``M(xi; theta)`` of an approximate design."""
    return information_sum(design.points, design.weights, theta, model)


def log_det(matrix: NDArray[np.float64]) -> float:
    """Log-determinant, ``-inf`` for matrices that are not positive definite."""
    sign, value = np.linalg.slogdet(matrix)
    return float(value) if sign > 0 else -math.inf


# ---------------------------------------------------------------------------
# Locally D-optimal Emax design
# ---------------------------------------------------------------------------

def emax_interior_point(theta2: ArrayLike, interval: DoseInterval) -> NDArray[np.float64] | float:
    """Interior support point ``x*(theta2)`` of the D-optimal Emax design.

    Vectorized over ``theta2``.
    """
    t2 = np.asarray(theta2, dtype=np.float64)
    if np.any(t2 <= 0):
        raise DomainError("theta2 must be positive")
    a, b = interval.a, interval.b
    out = (b * (a + t2) + a * (b + t2)) / ((a + t2) + (b + t2))
    return float(out) if out.ndim == 0 else out


def d_optimal_emax(theta2: float, interval: DoseInterval) -> Design:
    """Locally D-optimal Emax design: mass 1/3 at ``a``, ``x*(theta2)``, ``b``."""
    x_mid = emax_interior_point(float(theta2), interval)
    third = 1.0 / 3.0
    return Design(
        np.array([interval.a, x_mid, interval.b]),
        np.array([third, third, 1.0 - 2.0 * third]),
    )


def _project_simplex(v: NDArray[np.float64]) -> NDArray[np.float64]:
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / idx > 0)[0][-1]
    tau = css[rho] / (rho + 1.0)
    w = np.maximum(v - tau, 0.0)
    return w / math.fsum(w)


def _ascend_weights(
    grads: NDArray[np.float64],
    start: NDArray[np.float64],
    max_iter: int = 5000,
    tol: float = 1e-13,
) -> NDArray[np.float64]:
    """Maximize ``log det sum_m w_m g_m g_m^T`` over the simplex.

    Projected gradient ascent with backtracking; the gradient component
    for point ``m`` is ``g_m^T M^{-1} g_m``.
    """
    def objective(w: NDArray[np.float64]) -> float:
        return log_det(np.einsum("m,mi,mj->ij", w, grads, grads))

    w = _project_simplex(start)
    f = objective(w)
    step = 0.05
    for _ in range(max_iter):
        mat = np.einsum("m,mi,mj->ij", w, grads, grads)
        inv = np.linalg.inv(mat)
        grad = np.einsum("mi,ij,mj->m", grads, inv, grads)
        while True:
            cand = _project_simplex(w + step * grad)
            f_cand = objective(cand)
            if f_cand >= f or step < 1e-16:
                break
            step *= 0.5
        moved = np.max(np.abs(cand - w))
        if f_cand < f:
            break
        w, f = cand, f_cand
        step = min(step * 2.0, 1.0)
        if moved < tol:
            break
    return w


def brute_force_d_optimal(
    theta: ThetaLike,
    interval: DoseInterval,
    grid_size: int = 2000,
    model: ModelSpec = EMAX,
) -> Design:
    """Numerical D-optimal three-point design on ``{a, x, b}``.

    Every interior grid point ``a + k (b - a) / grid_size`` is tried with
    equal weights; the best one (lowest index on ties) is polished by a
    bounded scalar search between its grid neighbours, then the weights
    are freed and optimized by projected gradient ascent starting away
    from the uniform allocation.
    """
    if grid_size < 50:
        raise ValueError("grid_size must be at least 50")
    a, b = interval.a, interval.b
    step = (b - a) / grid_size
    xs = a + step * np.arange(1, grid_size)

    g_a = np.atleast_2d(model.gradient(np.array([a]), theta))[0]
    g_b = np.atleast_2d(model.gradient(np.array([b]), theta))[0]
    g_x = model.gradient(xs, theta)
    ends = np.outer(g_a, g_a) + np.outer(g_b, g_b)
    mats = (ends[None, :, :] + np.einsum("ki,kj->kij", g_x, g_x)) / 3.0
    sign, vals = np.linalg.slogdet(mats)
    vals = np.where(sign > 0, vals, -np.inf)
    if not np.any(np.isfinite(vals)):
        raise SingularMatrixError("every candidate design has a singular information matrix")
    k = int(np.argmax(vals))

    def neg_logdet(x: float) -> float:
        g = np.atleast_2d(model.gradient(np.array([x]), theta))[0]
        value = log_det((ends + np.outer(g, g)) / 3.0)
        return -value if math.isfinite(value) else math.inf

    lo = xs[k - 1] if k > 0 else a
    hi = xs[k + 1] if k + 1 < xs.size else b
    res = minimize_scalar(
        neg_logdet, bounds=(lo, hi), method="bounded",
        options={"xatol": 1e-12 * (b - a)},
    )
    x_best = float(res.x) if -res.fun >= vals[k] else float(xs[k])

    support = np.array([a, x_best, b])
    grads = np.atleast_2d(model.gradient(support, theta))
    weights = _ascend_weights(grads, np.array([0.5, 0.25, 0.25]))
    return Design(support, weights)


# ---------------------------------------------------------------------------
# Apportionment
# ---------------------------------------------------------------------------

def apportion(design: Design, n: int) -> ExactDesign:
    """Largest-remainder rounding of ``n * weights`` to integer counts.

    Leftover units go to the largest fractional remainders; ties are
    broken in favour of the lowest point index.
    """
    if n < 0 or int(n) != n:
        raise ValueError("n must be a nonnegative integer")
    n = int(n)
    quotas = n * design.weights
    counts = np.floor(quotas).astype(np.int64)
    remainders = np.round(quotas - counts, 12)
    left = n - int(counts.sum())
    order = sorted(range(len(design)), key=lambda m: (-remainders[m], m))
    for m in order[:left]:
        counts[m] += 1
    return ExactDesign(design.points, counts)


# ---------------------------------------------------------------------------
# Plain-text serialization
# ---------------------------------------------------------------------------

AnyDesign = Union[Design, ExactDesign]


def format_design(
    design: AnyDesign, provenance: Mapping[str, object] | None = None
) -> str:
    """Render ``design`` in the ``#design`` text format.

    The first line is ``#design approximate`` or ``#design exact n=<n>``;
    provenance entries follow as ``# key = value`` comments, then one
    ``dose,weight`` or ``dose,count`` line per support point.
    """
    buf = io.StringIO()
    if isinstance(design, ExactDesign):
        buf.write(f"#design exact n={design.total}\n")
    else:
        buf.write("#design approximate\n")
    for key, value in (provenance or {}).items():
        buf.write(f"# {key} = {value}\n")
    if isinstance(design, ExactDesign):
        for x, c in zip(design.points, design.counts):
            buf.write(f"{x:.17g},{int(c)}\n")
    else:
        for x, w in zip(design.points, design.weights):
            buf.write(f"{x:.17g},{w:.17g}\n")
    return buf.getvalue()


def write_design(
    path: Union[str, Path],
    design: AnyDesign,
    provenance: Mapping[str, object] | None = None,
) -> None:
    Path(path).write_text(format_design(design, provenance))


def parse_design(stream: TextIO) -> AnyDesign:
    header = stream.readline().strip()
    tokens = header.split()
    if len(tokens) < 2 or tokens[0] != "#design" or tokens[1] not in ("approximate", "exact"):
        raise ValueError(f"bad design header: {header!r}")
    kind = tokens[1]
    declared_n = None
    for tok in tokens[2:]:
        if tok.startswith("n="):
            declared_n = int(tok[2:])
    xs: list[float] = []
    vals: list[float] = []
    for line in stream:
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        dose, value = line.split(",")
        xs.append(float(dose))
        vals.append(float(value))
    if kind == "exact":
        exact = ExactDesign(np.array(xs), np.array(vals))
        if declared_n is not None and declared_n != exact.total:
            raise ValueError(f"header says n={declared_n} but counts sum to {exact.total}")
        return exact
    return Design(np.array(xs), np.array(vals))


def read_design(path: Union[str, Path]) -> AnyDesign:
    with open(path) as fh:
        return parse_design(fh)

