"""Monte Carlo comparison of fixed and adaptive two-stage procedures.

Both procedures observe ``n1`` subjects on the locally D-optimal design at
the guessed ``theta2``.  The fixed procedure then repeats that design for
``n2`` more subjects; the adaptive one fits the interim MLE and uses the
D-optimal design at the interim estimate.  The final MLE uses all data.

Replicate ``r`` of a scenario draws its first stage from a stream shared by
both procedures (common random numbers); each procedure has its own
second-stage stream.  Sample means are drawn from their exact Gaussian
law rather than by averaging individual observations.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from numpy.typing import NDArray

from adaptive_design.design import apportion, d_optimal_emax, emax_interior_point
from adaptive_design.estimation import fit_means_batch
from adaptive_design.model import EMAX, DoseInterval, ModelParams, ParameterBox
from adaptive_design.streams import fsum_rows, jackknife_blocks, map_chunks, replicate_rng

STAGE1_STREAM = 0
FIXED_STREAM = 1
ADAPTIVE_STREAM = 2

JACKKNIFE_BLOCKS = 100


@dataclass(frozen=True)
class Scenario:
    """One simulation setting.

    ``stage1_sigma`` optionally overrides the first-stage noise level
    (``None`` means ``sigma``).
    """

    theta_true: ModelParams
    theta2_guess: float
    sigma: float
    n1: int = 27
    n2: int = 270
    dose_interval: DoseInterval = field(default_factory=DoseInterval)
    replications: int = 10_000
    master_seed: int = 0
    stage1_sigma: Optional[float] = None
    box: ParameterBox = field(default_factory=ParameterBox)

    def __post_init__(self) -> None:
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if self.n1 < 3 or self.n2 < 3:
            raise ValueError("n1 and n2 must be at least 3")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.stage1_sigma is not None and not self.stage1_sigma > 0:
            raise ValueError("stage1_sigma must be positive")
        self.box.check(self.theta_true)
        if self.theta2_guess not in self.box:
            raise ValueError(f"theta2_guess={self.theta2_guess} outside the theta2 box")

    @property
    def first_stage_sigma(self) -> float:
        return self.sigma if self.stage1_sigma is None else self.stage1_sigma

    @property
    def scenario_id(self) -> int:
        """Stable 32-bit identifier of the statistical setting."""
        key = "|".join(
            f"{v:.17g}" if isinstance(v, float) else str(v)
            for v in (
                *self.theta_true, float(self.theta2_guess), float(self.sigma),
                self.n1, self.n2, self.dose_interval.a, self.dose_interval.b,
                float(self.first_stage_sigma), self.box.lower, self.box.upper,
            )
        )
        return zlib.crc32(key.encode())

    def replace(self, **changes) -> "Scenario":
        fields = {f: getattr(self, f) for f in self.__dataclass_fields__}
        fields.update(changes)
        return Scenario(**fields)

    def describe(self) -> dict[str, object]:
        """Flat key/value echo of every field."""
        out: dict[str, object] = {
            "theta0": self.theta_true.theta0,
            "theta1": self.theta_true.theta1,
            "theta2": self.theta_true.theta2,
            "theta2_guess": float(self.theta2_guess),
            "sigma": float(self.sigma),
            "stage1_sigma": self.stage1_sigma,
            "n1": self.n1,
            "n2": self.n2,
            "a": self.dose_interval.a,
            "b": self.dose_interval.b,
            "replications": self.replications,
            "seed": self.master_seed,
            "theta2_min": self.box.lower,
            "theta2_max": self.box.upper,
        }
        return out


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ProcedureResult:
    """Summary of one procedure over the replicates of a scenario.

    ``errors`` holds ``theta_hat - theta_true`` per replicate and
    ``boundary`` flags final fits whose ``theta2`` sits on the box edge.
    ``mse_total`` is the sum of the three component MSEs.
    """

    mse_theta: NDArray[np.float64]
    mse_total: float
    mse_total_stderr: float
    bias_theta: NDArray[np.float64]
    boundary_rate: float
    replicates_used: int
    errors: NDArray[np.float64] = field(repr=False)
    boundary: NDArray[np.bool_] = field(repr=False)


def _jackknife_se(block_stats: NDArray[np.float64]) -> float:
    b = block_stats.size
    if b < 2:
        return math.nan
    centered = block_stats - math.fsum(block_stats) / b
    return math.sqrt((b - 1) / b * math.fsum(centered * centered))


def summarize(errors: NDArray[np.float64], boundary: NDArray[np.bool_], drop_boundary: bool = False) -> ProcedureResult:
    """Build a :class:`ProcedureResult` from per-replicate errors."""
    errors = np.asarray(errors, dtype=np.float64)
    boundary = np.asarray(boundary, dtype=bool)
    rate = float(boundary.mean()) if boundary.size else 0.0
    keep = ~boundary if drop_boundary else np.ones(boundary.size, dtype=bool)
    used = errors[keep]
    r = used.shape[0]
    if r == 0:
        raise ValueError("no replicates left to summarize")
    sq = used * used
    mse_theta = fsum_rows(sq) / r
    bias = fsum_rows(used) / r
    totals = sq.sum(axis=1)
    total_sum = math.fsum(totals)
    loo = []
    for idx in jackknife_blocks(r, JACKKNIFE_BLOCKS):
        rest = r - idx.size
        if rest > 0:
            loo.append((total_sum - math.fsum(totals[idx])) / rest)
    return ProcedureResult(
        mse_theta=mse_theta,
        mse_total=math.fsum(mse_theta),
        mse_total_stderr=_jackknife_se(np.array(loo)),
        bias_theta=bias,
        boundary_rate=rate,
        replicates_used=r,
        errors=errors,
        boundary=boundary,
    )


def relative_efficiency(fixed: ProcedureResult, adaptive: ProcedureResult) -> float:
    """``fixed.mse_total / adaptive.mse_total``; above 1 favours adaptation."""
    if adaptive.mse_total == 0:
        return 1.0 if fixed.mse_total == 0 else math.inf
    return fixed.mse_total / adaptive.mse_total


def relative_efficiency_stderr(
    fixed: ProcedureResult, adaptive: ProcedureResult, drop_boundary: bool = False
) -> float:
    """Delete-a-block jackknife standard error of the paired MSE ratio."""
    sq_f = np.sum(fixed.errors**2, axis=1)
    sq_a = np.sum(adaptive.errors**2, axis=1)
    if sq_f.shape != sq_a.shape:
        raise ValueError("relative efficiency needs paired replicates")
    keep_f = ~fixed.boundary if drop_boundary else np.ones(sq_f.size, dtype=bool)
    keep_a = ~adaptive.boundary if drop_boundary else np.ones(sq_a.size, dtype=bool)
    sum_f, sum_a = math.fsum(sq_f[keep_f]), math.fsum(sq_a[keep_a])
    n_f, n_a = int(keep_f.sum()), int(keep_a.sum())
    stats = []
    for idx in jackknife_blocks(sq_f.size, JACKKNIFE_BLOCKS):
        kf, ka = keep_f[idx], keep_a[idx]
        rest_f, rest_a = n_f - int(kf.sum()), n_a - int(ka.sum())
        if rest_f == 0 or rest_a == 0:
            continue
        num = (sum_f - math.fsum(sq_f[idx][kf])) / rest_f
        den = (sum_a - math.fsum(sq_a[idx][ka])) / rest_a
        stats.append(num / den if den > 0 else math.nan)
    return _jackknife_se(np.array(stats))


@dataclass(frozen=True, eq=False)
class PairedResult:
    scenario: Scenario
    fixed: ProcedureResult
    adaptive: ProcedureResult
    rel_eff: float
    rel_eff_stderr: float
    interim_theta2: NDArray[np.float64] = field(repr=False)


# ---------------------------------------------------------------------------
# Replicate engine
# ---------------------------------------------------------------------------

def _stage_means(master: int, sid: int, stream: int, reps: Iterable[int], eta, scale) -> NDArray[np.float64]:
    """Per-replicate draws of dose means ``eta + scale * N(0, 1)``."""
    rows = []
    for r in reps:
        g = replicate_rng(master, sid, r, stream)
        rows.append(g.standard_normal(eta.shape[-1]))
    return eta + scale * np.array(rows)


def _run_chunk(s: Scenario, start: int, stop: int, want_fixed: bool, want_adaptive: bool):
    sid = s.scenario_id
    reps = range(start, stop)
    theta = s.theta_true
    iv = s.dose_interval

    xi0 = d_optimal_emax(s.theta2_guess, iv)
    stage1 = apportion(xi0, s.n1)
    keep1 = stage1.counts > 0
    x1 = stage1.points[keep1]
    c1 = stage1.counts[keep1].astype(np.float64)
    eta1 = np.asarray(EMAX.mean(x1, theta))
    ybar1 = _stage_means(s.master_seed, sid, STAGE1_STREAM, reps, eta1, s.first_stage_sigma / np.sqrt(c1))
    out: dict[str, NDArray] = {}

    if want_fixed:
        stage2 = apportion(xi0, s.n2)
        keep2 = stage2.counts > 0
        x2 = stage2.points[keep2]
        c2 = stage2.counts[keep2].astype(np.float64)
        eta2 = np.asarray(EMAX.mean(x2, theta))
        ybar2 = _stage_means(s.master_seed, sid, FIXED_STREAM, reps, eta2, s.sigma / np.sqrt(c2))
        fit = fit_means_batch(
            np.concatenate([x1, x2]), np.concatenate([c1, c2]), np.hstack([ybar1, ybar2]), s.box
        )
        out["fixed_theta"] = fit.theta
        out["fixed_boundary"] = fit.at_boundary

    if want_adaptive:
        interim = fit_means_batch(x1, c1, ybar1, s.box).theta[:, 2]
        x_mid = np.atleast_1d(emax_interior_point(interim, iv))
        counts2 = apportion(d_optimal_emax(s.theta2_guess, iv), s.n2).counts.astype(np.float64)
        x2 = np.stack([np.full_like(x_mid, iv.a), x_mid, np.full_like(x_mid, iv.b)], axis=1)
        eta2 = theta.theta0 + theta.theta1 * x2 / (x2 + theta.theta2)
        ybar2 = _stage_means(s.master_seed, sid, ADAPTIVE_STREAM, reps, eta2, s.sigma / np.sqrt(counts2))
        xs = np.hstack([np.broadcast_to(x1, (x2.shape[0], x1.size)), x2])
        ns = np.concatenate([c1, counts2])
        fit = fit_means_batch(xs, ns, np.hstack([ybar1, ybar2]), s.box)
        out["adaptive_theta"] = fit.theta
        out["adaptive_boundary"] = fit.at_boundary
        out["interim_theta2"] = interim
    return out


def _gather(s: Scenario, want_fixed: bool, want_adaptive: bool, threads: int | None):
    parts = map_chunks(
        lambda a, b: _run_chunk(s, a, b, want_fixed, want_adaptive), s.replications, threads
    )
    return {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}


def _result(s: Scenario, raw: dict, tag: str, drop_boundary: bool) -> ProcedureResult:
    errors = raw[f"{tag}_theta"] - s.theta_true.as_array()
    return summarize(errors, raw[f"{tag}_boundary"], drop_boundary)


def run_fixed(s: Scenario, threads: int | None = 1, drop_boundary: bool = False) -> ProcedureResult:
    """Fixed procedure: both stages on the D-optimal design at the guess."""
    return _result(s, _gather(s, True, False, threads), "fixed", drop_boundary)


def run_adaptive(s: Scenario, threads: int | None = 1, drop_boundary: bool = False) -> ProcedureResult:
    """Adaptive procedure: second stage D-optimal at the interim estimate."""
    return _result(s, _gather(s, False, True, threads), "adaptive", drop_boundary)


def run_adaptive_detail(s: Scenario, threads: int | None = 1) -> tuple[ProcedureResult, NDArray[np.float64]]:
    """Adaptive result together with the interim ``theta2`` estimates."""
    raw = _gather(s, False, True, threads)
    return _result(s, raw, "adaptive", False), raw["interim_theta2"]


def run_paired(s: Scenario, threads: int | None = 1, drop_boundary: bool = False) -> PairedResult:
    """Both procedures on common first-stage data."""
    raw = _gather(s, True, True, threads)
    fixed = _result(s, raw, "fixed", drop_boundary)
    adaptive = _result(s, raw, "adaptive", drop_boundary)
    return PairedResult(
        scenario=s,
        fixed=fixed,
        adaptive=adaptive,
        rel_eff=relative_efficiency(fixed, adaptive),
        rel_eff_stderr=relative_efficiency_stderr(fixed, adaptive, drop_boundary),
        interim_theta2=raw["interim_theta2"],
    )


# ---------------------------------------------------------------------------
# Efficiency curve
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CurveRow:
    theta2_guess: float
    rel_eff: float
    mc_stderr: float
    mse_fixed: float
    mse_adaptive: float


def efficiency_curve(
    base: Scenario,
    guesses: Sequence[float],
    threads: int | None = 1,
    drop_boundary: bool = False,
) -> list[CurveRow]:
    """Relative efficiency of the paired procedures at each guessed ``theta2``."""
    rows = []
    for g in guesses:
        res = run_paired(base.replace(theta2_guess=float(g)), threads, drop_boundary)
        rows.append(CurveRow(float(g), res.rel_eff, res.rel_eff_stderr,
                             res.fixed.mse_total, res.adaptive.mse_total))
    return rows


def parse_grid(spec: str) -> list[float]:
    """Parse ``start:stop:count(log|lin)``, e.g. ``10:150:9log``."""
    try:
        start_s, stop_s, tail = spec.split(":")
        kind = "lin"
        for suffix in ("log", "lin"):
            if tail.endswith(suffix):
                kind, tail = suffix, tail[: -len(suffix)]
        start, stop, count = float(start_s), float(stop_s), int(tail)
    except ValueError:
        raise ValueError(f"bad grid spec {spec!r}; expected start:stop:count(log|lin)") from None
    if count < 1 or not (start > 0 and stop >= start):
        raise ValueError(f"bad grid spec {spec!r}")
    if count == 1:
        return [start]
    values = np.geomspace(start, stop, count) if kind == "log" else np.linspace(start, stop, count)
    values[0], values[-1] = start, stop
    return [float(v) for v in values]


def scenario_record(res: PairedResult) -> dict[str, object]:
    """Table-1 style row: settings, both MSEs, relative efficiency and MC errors."""
    s = res.scenario
    row = dict(s.describe())
    row.update(
        mse_fixed=res.fixed.mse_total,
        mse_fixed_stderr=res.fixed.mse_total_stderr,
        mse_adaptive=res.adaptive.mse_total,
        mse_adaptive_stderr=res.adaptive.mse_total_stderr,
        rel_eff=res.rel_eff,
        rel_eff_stderr=res.rel_eff_stderr,
        boundary_rate_fixed=res.fixed.boundary_rate,
        boundary_rate_adaptive=res.adaptive.boundary_rate,
        replicates_used_fixed=res.fixed.replicates_used,
        replicates_used_adaptive=res.adaptive.replicates_used,
    )
    for i in range(3):
        row[f"mse_theta{i}_fixed"] = float(res.fixed.mse_theta[i])
        row[f"mse_theta{i}_adaptive"] = float(res.adaptive.mse_theta[i])
        row[f"bias_theta{i}_fixed"] = float(res.fixed.bias_theta[i])
        row[f"bias_theta{i}_adaptive"] = float(res.adaptive.bias_theta[i])
    return row

