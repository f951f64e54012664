"""Limit law of the two-stage MLE.

With the first-stage size fixed and the second stage growing, the scaled
estimation error converges to ``sigma * M^{-1/2} Z``: a Gaussian mixture
whose random scaling matrix ``M`` is the information of the second-stage
design chosen from the interim estimate.  Its covariance is
``sigma^2 E[M^{-1}]``, which dominates the plug-in ``sigma^2 (E[M])^{-1}``
by convexity of the matrix inverse.

The expectation over the first stage has no closed form and is estimated
by Monte Carlo.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from adaptive_design.design import Design, ExactDesign, apportion, emax_interior_point, information_sum
from adaptive_design.estimation import fit_means_batch
from adaptive_design.exceptions import SingularMatrixError, SingularRateError
from adaptive_design.model import EMAX, DoseInterval, ModelParams, ParameterBox
from adaptive_design.streams import fsum_rows, map_chunks, replicate_rng

EIGEN_FLOOR = 1e-12
MAX_SINGULAR_RATE = 1e-3

_LIMIT_LAW_STREAM = 3
_MAX_ATTEMPTS = 100


# ---------------------------------------------------------------------------
# Symmetric matrix functions
# ---------------------------------------------------------------------------

def _checked_eigh(matrix: NDArray[np.float64]) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    m = np.asarray(matrix, dtype=np.float64)
    sym = 0.5 * (m + np.swapaxes(m, -1, -2))
    vals, vecs = np.linalg.eigh(sym)
    trace = np.trace(sym, axis1=-2, axis2=-1)
    bad = ~(vals[..., 0] > EIGEN_FLOOR * trace)
    if np.any(bad):
        raise SingularMatrixError(
            f"smallest eigenvalue below {EIGEN_FLOOR:g} * trace in {int(np.sum(bad))} matrices"
        )
    return vals, vecs


def _sym_power(matrix: NDArray[np.float64], power: float) -> NDArray[np.float64]:
    vals, vecs = _checked_eigh(matrix)
    out = np.einsum("...ik,...k,...jk->...ij", vecs, vals**power, vecs)
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def sym_inverse_sqrt(matrix: NDArray[np.float64]) -> NDArray[np.float64]:
    """``Q diag(lambda^-1/2) Q^T`` for a symmetric positive definite matrix.

    Works on stacks of matrices (leading axes).  Raises
    :class:`SingularMatrixError` when the smallest eigenvalue does not
    exceed ``1e-12`` times the trace.
    """
    return _sym_power(matrix, -0.5)


def sym_inverse(matrix: NDArray[np.float64]) -> NDArray[np.float64]:
    """Inverse of a symmetric positive definite matrix via its eigenbasis."""
    return _sym_power(matrix, -1.0)


# ---------------------------------------------------------------------------
# Per-subject information
# ---------------------------------------------------------------------------

def per_subject_information(
    stage1: ExactDesign,
    stage2: Design,
    n1: int,
    n2: int,
    theta: ModelParams,
    sigma: float,
) -> NDArray[np.float64]:
    """Information per subject for a realized second-stage design.

    ``(1 / (n sigma^2)) [sum n1m g g^T + sum n2m g g^T]`` with the
    second-stage counts obtained by apportioning ``stage2`` to ``n2``.
    """
    n = n1 + n2
    if n <= 0:
        raise ValueError("total sample size must be positive")
    if stage1.total != n1:
        raise ValueError(f"stage-1 design allocates {stage1.total} subjects, not n1={n1}")
    exact2 = apportion(stage2, n2)
    part1 = information_sum(stage1.points, stage1.counts, theta)
    part2 = information_sum(exact2.points, exact2.counts, theta)
    return (part1 + part2) / (n * sigma**2)


# ---------------------------------------------------------------------------
# Mixture limit law
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MixtureLawSampler:
    """Everything needed to draw from the two-stage limit law.

    ``stage1_sigma`` overrides the noise of the simulated first stage only
    (``None`` uses ``sigma``); a tiny value makes the mixture degenerate.
    """

    theta_true: ModelParams
    sigma: float
    stage1_design: ExactDesign
    dose_interval: DoseInterval
    n1: int
    stage1_sigma: float | None = None
    box: ParameterBox = field(default_factory=ParameterBox)

    def __post_init__(self) -> None:
        if self.n1 != self.stage1_design.total:
            raise ValueError("n1 must equal the stage-1 design total")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.stage1_sigma is not None and not self.stage1_sigma > 0:
            raise ValueError("stage1_sigma must be positive")
        self.box.check(self.theta_true)

    @property
    def first_stage_sigma(self) -> float:
        return self.sigma if self.stage1_sigma is None else self.stage1_sigma


def _second_stage_information(s: MixtureLawSampler, theta2_hat: NDArray[np.float64]) -> NDArray[np.float64]:
    """``M(xi2*(theta2_hat), theta_true)`` for each interim estimate."""
    iv = s.dose_interval
    x_mid = np.atleast_1d(emax_interior_point(theta2_hat, iv))
    pts = np.stack([np.full_like(x_mid, iv.a), x_mid, np.full_like(x_mid, iv.b)], axis=1)
    grads = EMAX.gradient(pts, s.theta_true)
    mats = np.einsum("rmi,rmj->rij", grads, grads) / 3.0
    return 0.5 * (mats + np.swapaxes(mats, 1, 2))


def _first_stage_draws(s: MixtureLawSampler, seed: int, index: NDArray[np.intp], attempt: NDArray[np.intp]):
    """Interim estimates and standard normal vectors for the given draws."""
    design = s.stage1_design
    keep = design.counts > 0
    x1 = design.points[keep]
    c1 = design.counts[keep].astype(np.float64)
    eta = np.asarray(EMAX.mean(x1, s.theta_true))
    scale = s.first_stage_sigma / np.sqrt(c1)
    ybar = np.empty((index.size, x1.size))
    z = np.empty((index.size, EMAX.dim))
    for row, (i, k) in enumerate(zip(index, attempt)):
        g = replicate_rng(seed, _LIMIT_LAW_STREAM, int(i), int(k))
        ybar[row] = eta + scale * g.standard_normal(x1.size)
        z[row] = g.standard_normal(EMAX.dim)
    theta2_hat = fit_means_batch(x1, c1, ybar, s.box).theta[:, 2]
    return theta2_hat, z


def _draw_chunk(s: MixtureLawSampler, seed: int, start: int, stop: int):
    """Valid draws for indices ``start..stop-1``, resampling singular ones."""
    index = np.arange(start, stop)
    attempt = np.zeros_like(index)
    theta2 = np.empty(index.size)
    z = np.empty((index.size, EMAX.dim))
    mats = np.empty((index.size, EMAX.dim, EMAX.dim))
    pending = np.ones(index.size, dtype=bool)
    n_singular = 0
    while pending.any():
        rows = np.nonzero(pending)[0]
        t2, zz = _first_stage_draws(s, seed, index[rows], attempt[rows])
        mm = _second_stage_information(s, t2)
        vals = np.linalg.eigvalsh(mm)
        ok = vals[:, 0] > EIGEN_FLOOR * np.trace(mm, axis1=1, axis2=2)
        good = rows[ok]
        theta2[good], z[good], mats[good] = t2[ok], zz[ok], mm[ok]
        pending[good] = False
        n_singular += int(np.sum(~ok))
        attempt[rows[~ok]] += 1
        if attempt.max(initial=0) > _MAX_ATTEMPTS:
            raise SingularRateError(f"a draw stayed singular after {_MAX_ATTEMPTS} resamples")
    return theta2, z, mats, n_singular


def _collect(s: MixtureLawSampler, n: int, seed: int, threads: int | None):
    if n < 1:
        raise ValueError("number of draws must be at least 1")
    parts = map_chunks(lambda a, b: _draw_chunk(s, seed, a, b), n, threads)
    theta2 = np.concatenate([p[0] for p in parts])
    z = np.concatenate([p[1] for p in parts])
    mats = np.concatenate([p[2] for p in parts])
    n_singular = sum(p[3] for p in parts)
    if n_singular > MAX_SINGULAR_RATE * n:
        raise SingularRateError(
            f"{n_singular} of {n} draws had a singular information matrix "
            f"(limit {MAX_SINGULAR_RATE:.1%})"
        )
    return theta2, z, mats, n_singular


@dataclass(frozen=True, eq=False)
class LimitLawDraws:
    draws: NDArray[np.float64]
    theta2_hat: NDArray[np.float64]
    n_singular: int


def sample_limit_law(
    s: MixtureLawSampler,
    n_draws: int,
    seed: int,
    threads: int | None = 1,
) -> LimitLawDraws:
    """I.i.d. draws of ``sigma M(xi2*, theta_true)^{-1/2} Z``.

    Each draw simulates a fresh first stage, fits the interim MLE, builds
    the D-optimal second-stage design at the interim ``theta2`` and
    scales an independent standard normal vector.
    """
    theta2, z, mats, n_singular = _collect(s, n_draws, seed, threads)
    root = sym_inverse_sqrt(mats)
    draws = s.sigma * np.einsum("rij,rj->ri", root, z)
    return LimitLawDraws(draws, theta2, n_singular)


@dataclass(frozen=True, eq=False)
class AsymptoticVariance:
    """Monte Carlo estimate of ``sigma^2 E[M^{-1}]`` and related matrices.

    ``plugin`` is ``sigma^2 (E[M])^{-1}``; ``jensen_gap`` is
    ``mean - plugin`` and ``min_gap_eigenvalue`` its smallest eigenvalue.
    """

    mean: NDArray[np.float64]
    stderr: NDArray[np.float64]
    plugin: NDArray[np.float64]
    jensen_gap: NDArray[np.float64]
    min_gap_eigenvalue: float
    n_rep: int
    n_singular: int


def asymptotic_variance(
    s: MixtureLawSampler,
    n_rep: int,
    seed: int,
    threads: int | None = 1,
) -> AsymptoticVariance:
    """Average ``sigma^2 M(xi2*(theta2_hat), theta_true)^{-1}`` over first stages."""
    _, _, mats, n_singular = _collect(s, n_rep, seed, threads)
    inv = s.sigma**2 * sym_inverse(mats)
    mean = fsum_rows(inv) / n_rep
    if n_rep > 1:
        sq = fsum_rows((inv - mean) ** 2) / (n_rep - 1)
        stderr = np.sqrt(sq / n_rep)
    else:
        stderr = np.full_like(mean, math.nan)
    mean_info = fsum_rows(mats) / n_rep
    plugin = s.sigma**2 * sym_inverse(mean_info)
    gap = mean - plugin
    gap = 0.5 * (gap + gap.T)
    return AsymptoticVariance(
        mean=mean,
        stderr=stderr,
        plugin=plugin,
        jensen_gap=gap,
        min_gap_eigenvalue=float(np.linalg.eigvalsh(gap)[0]),
        n_rep=n_rep,
        n_singular=n_singular,
    )
