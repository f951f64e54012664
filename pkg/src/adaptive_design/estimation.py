"""Data generation, likelihood and maximum-likelihood fitting.

Under Gaussian errors the likelihood of a (two-stage) Emax experiment
depends on the data only through the per-dose sample means, and the MLE
of ``theta`` minimizes the count-weighted squared error of those means.
Fitting is done by profiling: for fixed ``theta2`` the mean is linear in
``(theta0, theta1)`` and the weighted normal equations are solved
exactly, leaving a one-dimensional search over ``theta2``.

The profiled fit is vectorized over replicates (:func:`fit_means_batch`)
because the Monte Carlo studies call it hundreds of thousands of times.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray

from adaptive_design.design import ExactDesign
from adaptive_design.exceptions import DomainError, RankDeficiencyError
from adaptive_design.model import (
    EMAX,
    DoseInterval,
    ModelParams,
    ModelSpec,
    ParameterBox,
    ThetaLike,
    _unpack,
)

GRID_POINTS = 200
BRACKET_RTOL = 1e-8
_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0
_GRID_CHUNK = 4096
_POLISH_STEPS = 20
_POLISH_WIDEN = 50.0


# ---------------------------------------------------------------------------
# Data containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class StageData:
    """Observations of one stage, summarized by per-dose sample means."""

    design: ExactDesign
    means: NDArray[np.float64]
    raw: Optional[tuple[NDArray[np.float64], ...]] = None

    def __post_init__(self) -> None:
        means = np.asarray(self.means, dtype=np.float64).ravel()
        if means.shape != self.design.points.shape:
            raise ValueError("one sample mean per support point is required")
        object.__setattr__(self, "means", means)
        if self.raw is not None:
            raw = tuple(np.asarray(r, dtype=np.float64).ravel() for r in self.raw)
            if len(raw) != len(self.design):
                raise ValueError("raw observations must be grouped per support point")
            for r, c, m in zip(raw, self.design.counts, means):
                if r.size != c:
                    raise ValueError("raw group size disagrees with the design count")
                if c and abs(r.mean() - m) > 1e-12 * max(1.0, abs(m)):
                    raise ValueError("raw observations disagree with the stored mean")
            object.__setattr__(self, "raw", raw)

    @property
    def n(self) -> int:
        return self.design.total


@dataclass(frozen=True, eq=False)
class TwoStageData:
    """Both stages of an experiment with known error standard deviation."""

    stage1: StageData
    stage2: StageData
    sigma: float

    def __post_init__(self) -> None:
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.stage1.n == 0 or self.stage2.n == 0:
            raise ValueError("both stages need observations")

    @property
    def n(self) -> int:
        return self.stage1.n + self.stage2.n


AnyData = Union[StageData, TwoStageData]


def _stages(data: AnyData) -> tuple[StageData, ...]:
    if isinstance(data, TwoStageData):
        return (data.stage1, data.stage2)
    return (data,)


def pooled_means(data: AnyData) -> tuple[NDArray[np.float64], NDArray[np.float64], NDArray[np.float64]]:
    """Concatenate ``(dose, count, mean)`` over stages, dropping empty doses."""
    xs, ns, ys = [], [], []
    for st in _stages(data):
        keep = st.design.counts > 0
        xs.append(st.design.points[keep])
        ns.append(st.design.counts[keep].astype(np.float64))
        ys.append(st.means[keep])
    return np.concatenate(xs), np.concatenate(ns), np.concatenate(ys)


# ---------------------------------------------------------------------------
# Simulation of observations
# ---------------------------------------------------------------------------

def simulate_stage(
    design: ExactDesign,
    theta: ThetaLike,
    sigma: float,
    rng: np.random.Generator,
    raw: bool = True,
    model: ModelSpec = EMAX,
) -> StageData:
    """Draw ``N(eta(x_m), sigma^2)`` observations at each support point.

    With ``raw=False`` the sample means are drawn directly from their
    exact ``N(eta(x_m), sigma^2 / n_m)`` law and no individual
    observations are kept.  Doses with a zero count get a NaN mean.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    eta = np.asarray(model.mean(design.points, theta), dtype=np.float64)
    counts = design.counts
    if raw:
        groups = tuple(eta[m] + sigma * rng.standard_normal(int(c)) for m, c in enumerate(counts))
        means = np.array([g.mean() if g.size else np.nan for g in groups])
        return StageData(design, means, groups)
    z = rng.standard_normal(len(design))
    with np.errstate(divide="ignore", invalid="ignore"):
        means = np.where(counts > 0, eta + sigma * z / np.sqrt(counts), np.nan)
    return StageData(design, means)


# ---------------------------------------------------------------------------
# Likelihood and score
# ---------------------------------------------------------------------------

def neg_log_likelihood_kernel(data: AnyData, theta: ThetaLike, model: ModelSpec = EMAX) -> float:
    """``sum_i sum_m n_im (ybar_im - eta(x_im, theta))^2``.

    Equal to ``-2 sigma^2`` times the log-likelihood up to a constant.
    """
    x, n, y = pooled_means(data)
    resid = y - model.mean(x, theta)
    return math.fsum(n * resid * resid)


def score(
    data: AnyData,
    theta: ThetaLike,
    sigma: float | None = None,
    model: ModelSpec = EMAX,
) -> NDArray[np.float64]:
    """Total score ``(1/sigma^2) sum n_im (ybar_im - eta) grad eta``.

    ``sigma`` defaults to the one stored on :class:`TwoStageData`.
    """
    if sigma is None:
        if not isinstance(data, TwoStageData):
            raise ValueError("sigma is required for single-stage data")
        sigma = data.sigma
    x, n, y = pooled_means(data)
    resid = y - model.mean(x, theta)
    grads = np.atleast_2d(model.gradient(x, theta))
    return (n * resid) @ grads / sigma**2


# ---------------------------------------------------------------------------
# Profiled least squares
# ---------------------------------------------------------------------------

def _profile(t2, x, n, y):
    """Exact weighted LS in ``(theta0, theta1)`` at each ``theta2``.

    ``t2`` has shape ``S`` and ``x, n, y`` shape ``S + (K,)`` (or
    broadcastable).  Returns ``theta0, theta1, rss`` and the profiled
    derivative direction ``sum n r x / (x + t2)^2``.
    """
    t2e = np.asarray(t2)[..., None]
    denom = x + t2e
    z = x / denom
    w_tot = np.sum(n * np.ones_like(z), axis=-1)
    z_bar = np.sum(n * z, axis=-1) / w_tot
    y_bar = np.sum(n * y * np.ones_like(z), axis=-1) / w_tot
    dz = z - z_bar[..., None]
    s_zz = np.sum(n * dz * dz, axis=-1)
    s_zy = np.sum(n * dz * (y - y_bar[..., None]), axis=-1)
    t1 = s_zy / s_zz
    t0 = y_bar - t1 * z_bar
    resid = y - t0[..., None] - t1[..., None] * z
    rss = np.sum(n * resid * resid, axis=-1)
    slope = np.sum(n * resid * z / denom, axis=-1)
    return t0, t1, rss, slope


@dataclass(frozen=True, eq=False)
class BatchFit:
    """Vectorized fit results, one row per replicate."""

    theta: NDArray[np.float64]
    rss: NDArray[np.float64]
    converged: NDArray[np.bool_]
    at_boundary: NDArray[np.bool_]


def fit_means_batch(
    x: ArrayLike,
    n: ArrayLike,
    y: ArrayLike,
    box: ParameterBox = ParameterBox(),
) -> BatchFit:
    """Profiled MLE for ``R`` independent datasets of ``K`` dose means.

    ``x``, ``n`` and ``y`` have shape ``(R, K)`` (``x`` and ``n`` may be
    ``(K,)`` when shared).  Each replicate needs at least three distinct
    doses with positive counts; this is not rechecked here.

    The profiled RSS is evaluated on a log-uniform ``theta2`` grid, the
    best grid point is bracketed by its neighbours and refined by golden
    section until the bracket is narrower than ``1e-8 (1 + theta2)``,
    then polished by false-position steps on the profiled derivative.  A fit
    whose bracket never left an edge of ``box`` is flagged as a boundary
    fit and reported as not converged.
    """
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    r = y.shape[0]
    x = np.broadcast_to(np.asarray(x, dtype=np.float64), y.shape)
    n = np.broadcast_to(np.asarray(n, dtype=np.float64), y.shape)
    grid = np.geomspace(box.lower, box.upper, GRID_POINTS)
    grid[0], grid[-1] = box.lower, box.upper
    k = np.empty(r, dtype=np.intp)
    for start in range(0, r, _GRID_CHUNK):
        sl = slice(start, start + _GRID_CHUNK)
        rows = y[sl].shape[0]
        rss_grid = _profile(
            np.broadcast_to(grid, (rows, GRID_POINTS)),
            x[sl, None, :], n[sl, None, :], y[sl, None, :],
        )[2]
        rss_grid = np.where(np.isfinite(rss_grid), rss_grid, np.inf)
        k[sl] = np.argmin(rss_grid, axis=1)
    lo = grid[np.maximum(k - 1, 0)]
    hi = grid[np.minimum(k + 1, GRID_POINTS - 1)]
    grid_lo, grid_hi = lo, hi

    c = hi - _INV_PHI * (hi - lo)
    d = lo + _INV_PHI * (hi - lo)
    fc = _profile(c, x, n, y)[2]
    fd = _profile(d, x, n, y)[2]
    active = (hi - lo) >= BRACKET_RTOL * (1.0 + 0.5 * (lo + hi))
    for _ in range(200):
        if not active.any():
            break
        left = fc < fd
        new_lo = np.where(active & ~left, c, lo)
        new_hi = np.where(active & left, d, hi)
        lo, hi = new_lo, new_hi
        probe = np.where(left, hi - _INV_PHI * (hi - lo), lo + _INV_PHI * (hi - lo))
        fprobe = _profile(probe, x, n, y)[2]
        c_next = np.where(left, probe, d)
        d_next = np.where(left, c, probe)
        fc_next = np.where(left, fprobe, fd)
        fd_next = np.where(left, fc, fprobe)
        c = np.where(active, c_next, c)
        d = np.where(active, d_next, d)
        fc = np.where(active, fc_next, fc)
        fd = np.where(active, fd_next, fd)
        active = active & ((hi - lo) >= BRACKET_RTOL * (1.0 + 0.5 * (lo + hi)))
    converged = ~active
    at_boundary = (lo == box.lower) | (hi == box.upper)

    t = 0.5 * (lo + hi)
    # Illinois false position on the profiled derivative: near the minimum
    # the RSS itself is flat to rounding, its derivative is not.  Golden
    # section can drift off the root by rounding, so the bracket is widened.
    width = hi - lo
    a_lo = np.maximum(lo - _POLISH_WIDEN * width, grid_lo)
    a_hi = np.minimum(hi + _POLISH_WIDEN * width, grid_hi)
    g_lo = _profile(a_lo, x, n, y)[3]
    g_hi = _profile(a_hi, x, n, y)[3]
    last = np.zeros(r, dtype=np.int8)
    for _ in range(_POLISH_STEPS):
        crosses = np.sign(g_lo) * np.sign(g_hi) < 0
        with np.errstate(divide="ignore", invalid="ignore"):
            s = a_lo - g_lo * (a_hi - a_lo) / (g_hi - g_lo)
        ok = crosses & np.isfinite(s) & (s > a_lo) & (s < a_hi)
        if not ok.any():
            break
        s = np.where(ok, s, t)
        g_s = _profile(s, x, n, y)[3]
        t = np.where(ok, s, t)
        same_side = np.sign(g_s) == np.sign(g_lo)
        move_lo, move_hi = ok & same_side, ok & ~same_side
        g_hi = np.where(move_lo & (last == 1), 0.5 * g_hi, g_hi)
        g_lo = np.where(move_hi & (last == -1), 0.5 * g_lo, g_lo)
        a_lo = np.where(move_lo, s, a_lo)
        g_lo = np.where(move_lo, g_s, g_lo)
        a_hi = np.where(move_hi, s, a_hi)
        g_hi = np.where(move_hi, g_s, g_hi)
        last = np.where(move_lo, 1, np.where(move_hi, -1, last)).astype(np.int8)
    f_t = _profile(t, x, n, y)[2]

    for edge in (box.lower, box.upper):
        f_edge = _profile(np.full(r, edge), x, n, y)[2]
        take = at_boundary & (f_edge <= f_t)
        t = np.where(take, edge, t)
        f_t = np.where(take, f_edge, f_t)

    t0, t1, rss, _ = _profile(t, x, n, y)
    theta = np.stack([t0, t1, t], axis=1)
    return BatchFit(theta, rss, converged & ~at_boundary, at_boundary)


@dataclass(frozen=True, eq=False)
class MleResult:
    """Outcome of a single maximum-likelihood fit.

    ``rss`` is the count-weighted squared error of the dose means (the
    likelihood kernel).  ``sigma2_hat`` is the residual variance over all
    raw observations, available only when raw data were supplied.
    """

    theta_hat: ModelParams
    rss: float
    converged: bool
    at_boundary: bool
    profile_trace: Optional[list[tuple[float, float]]] = None
    sigma2_hat: Optional[float] = None


def _check_identifiable(x: NDArray[np.float64]) -> None:
    distinct = np.unique(x).size
    if distinct < 3:
        raise RankDeficiencyError(
            f"need at least 3 distinct doses to identify the Emax model, got {distinct}"
        )


def profile_rss(data: AnyData, theta2: ArrayLike) -> NDArray[np.float64]:
    """Profiled RSS (minimized over theta0, theta1) at the given ``theta2`` values."""
    x, n, y = pooled_means(data)
    t2 = np.asarray(theta2, dtype=np.float64)
    return _profile(t2, x, n, y)[2]


def fit_mle(
    data: AnyData,
    box: ParameterBox = ParameterBox(),
    trace: bool = False,
) -> MleResult:
    """Maximum-likelihood estimate of ``theta`` from one or two stages."""
    x, n, y = pooled_means(data)
    _check_identifiable(x)
    fit = fit_means_batch(x, n, y[None, :], box)
    theta_hat = ModelParams.from_array(fit.theta[0])
    profile_trace = None
    if trace:
        grid = np.geomspace(box.lower, box.upper, GRID_POINTS)
        grid[0], grid[-1] = box.lower, box.upper
        rss_grid = _profile(grid, x, n, y)[2]
        profile_trace = [(float(g), float(v)) for g, v in zip(grid, rss_grid)]
    sigma2_hat = None
    stages = _stages(data)
    if all(st.raw is not None for st in stages):
        within = math.fsum(
            float(np.sum((g - g.mean()) ** 2)) for st in stages for g in st.raw if g.size
        )
        dof = int(n.sum()) - 3
        if dof > 0:
            sigma2_hat = (within + float(fit.rss[0])) / dof
    return MleResult(
        theta_hat=theta_hat,
        rss=float(fit.rss[0]),
        converged=bool(fit.converged[0]),
        at_boundary=bool(fit.at_boundary[0]),
        profile_trace=profile_trace,
        sigma2_hat=sigma2_hat,
    )


# ---------------------------------------------------------------------------
# First-order bias of the interim estimate of theta2
# ---------------------------------------------------------------------------

def emax_bias_coefficient(
    theta: ThetaLike,
    theta2_guess: float,
    interval: DoseInterval,
    sigma: float,
) -> float:
    """Coefficient ``b2`` in ``E(theta2_hat - theta2) = b2 / n1 + O(n1^-2)``.

    Valid when the first stage puts equal numbers of subjects on ``a``,
    ``x*(theta2_guess)`` and ``b``.
    """
    _, t1, t2 = _unpack(theta)
    g = float(theta2_guess)
    a, b = interval.a, interval.b
    if a == b:
        raise DomainError("dose interval is degenerate (a == b)")
    if t1 == 0:
        raise DomainError("theta1 must be nonzero")
    if t2 <= 0 or g <= 0:
        raise DomainError("theta2 and its guess must be positive")
    prefactor = 1.0 / ((a - b) ** 4 * t1**2 * t2**2 * (a + g) ** 2 * (b + g) ** 2)
    mid = 2 * a * b + (a + b) * g + t2 * (a + b + 2 * g)
    tail = (
        3 * a * b * (a + b)
        + (a * a + 10 * a * b + b * b) * g
        + 3 * (a + b) * g * g
        + 2 * t2 * (a * a + a * b + b * b + 3 * (a + b) * g + 3 * g * g)
    )
    return prefactor * 3 * sigma**2 * (a + t2) ** 2 * (b + t2) ** 2 * mid**2 * tail


def stage1_bias_theta2(
    theta: ThetaLike,
    theta2_guess: float,
    interval: DoseInterval,
    sigma: float,
    n1: int,
) -> float:
    """First-order bias ``b2 / n1`` of the first-stage MLE of ``theta2``."""
    if n1 <= 0 or n1 % 3:
        raise ValueError("n1 must be a positive multiple of 3 (equal allocation)")
    return emax_bias_coefficient(theta, theta2_guess, interval, sigma) / n1


# ---------------------------------------------------------------------------
# CSV datasets: columns stage,dose,replicate,y
# ---------------------------------------------------------------------------

CSV_COLUMNS = ("stage", "dose", "replicate", "y")


def write_dataset_csv(
    path: Union[str, Path],
    stages: Sequence[StageData],
    provenance: Mapping[str, object] | None = None,
) -> None:
    with open(path, "w", newline="") as fh:
        for key, value in (provenance or {}).items():
            fh.write(f"# {key} = {value}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for i, st in enumerate(stages, start=1):
            if st.raw is None:
                raise ValueError("raw observations are required to write a dataset")
            for x, group in zip(st.design.points, st.raw):
                for j, value in enumerate(group, start=1):
                    writer.writerow([i, f"{x:.17g}", j, f"{value:.17g}"])


def read_dataset_csv(path: Union[str, Path], sigma: float) -> AnyData:
    """Load a dataset; one stage yields :class:`StageData`, two a :class:`TwoStageData`."""
    groups: dict[int, dict[float, list[float]]] = {}
    with open(path, newline="") as fh:
        rows = csv.reader(line for line in fh if not line.startswith("#"))
        header = next(rows, None)
        if header is None or tuple(h.strip() for h in header) != CSV_COLUMNS:
            raise ValueError(f"expected header {','.join(CSV_COLUMNS)}, got {header!r}")
        for lineno, row in enumerate(rows, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ValueError(f"row {lineno}: expected 4 fields, got {len(row)}")
            try:
                stage, dose, _, value = int(row[0]), float(row[1]), int(row[2]), float(row[3])
            except ValueError as exc:
                raise ValueError(f"row {lineno}: {exc}") from None
            if not (math.isfinite(dose) and math.isfinite(value)) or dose < 0:
                raise ValueError(f"row {lineno}: dose and y must be finite, dose >= 0")
            groups.setdefault(stage, {}).setdefault(dose, []).append(value)
    if not groups:
        raise ValueError("dataset has no observations")
    if not set(groups) <= {1, 2}:
        raise ValueError(f"stage must be 1 or 2, got {sorted(groups)}")
    stages = []
    for s in sorted(groups):
        doses = sorted(groups[s])
        raw = tuple(np.array(groups[s][d]) for d in doses)
        design = ExactDesign(np.array(doses), np.array([r.size for r in raw]))
        stages.append(StageData(design, np.array([r.mean() for r in raw]), raw))
    if len(stages) == 1:
        return stages[0]
    return TwoStageData(stages[0], stages[1], sigma)
