"""
DC asymptotics of the driven chain: average speed, equilibrium / periodic
sliding classification, modulation functions of sliding states, the
force x speed = dissipation identity, depinning sweeps and attractor
residence. AC runs get a stroboscopic recurrence check.
"""
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import optimize
from scipy.integrate import trapezoid as integrate_trapezoid
from scipy.interpolate import CubicSpline

from .errors import ChainError, NotSlidingError, PreconditionError, UnsupportedModeError
from .integrator import DEFAULT_DT, DEFAULT_DT_OUT, Trajectory, integrate, stroboscopic_map
from .measures import Ensemble
from .model import (ChainState, Forcing, Order, Potential, config_distance, partial_order_compare,
                    rhs, translate)
from .parallel import ordered_map

logger = logging.getLogger(__name__)

TOL_EQ = 1e-8
TOL_PER = 1e-6
TOL_V = 1e-6
TOL_M = 1e-4
N_BINS = 256
EPS_DISSIPATION = 1e-8


class Verdict(str, Enum):
    EQUILIBRIUM = "Equilibrium"
    PERIODIC_SLIDING = "PeriodicSliding"
    STROBOSCOPIC_LOCKED = "StroboscopicLocked"
    UNDETERMINED = "Undetermined"


# ============================================================================
# Speeds
# ============================================================================

@dataclass(frozen=True)
class SpeedEstimate:
    speed: float
    spread: float
    determined: bool


def _site_mean(traj: Trajectory) -> np.ndarray:
    return np.mean(traj.values, axis=1)


def speed_estimate(traj: Trajectory, period: Optional[float] = None, transient: float = 0.5,
                   tol_v: float = TOL_V) -> SpeedEstimate:
    """
    Average speed of the site-mean position after discarding `transient`
    (fraction of the span). With a known period the estimate uses whole
    periods ending at the last sample; otherwise a least-squares slope.
    """
    t = traj.times
    t_from = t[0] + transient * (t[-1] - t[0])
    if period is not None and period > 0:
        n_periods = int(math.floor((t[-1] - t_from) / period + 1e-9))
        if n_periods >= 1:
            span = n_periods * period
            spline = traj.interpolant()
            start = spline(t[-1] - span)
            end = traj.values[-1]
            per_site = (end - start) / span
            speed = float(np.mean(per_site))
            spread = float(np.max(per_site) - np.min(per_site))
            return SpeedEstimate(speed=speed, spread=spread, determined=spread <= tol_v)
    keep = t >= t_from - 1e-12
    tt = t[keep]
    if tt.shape[0] < 2:
        raise PreconditionError("trajectory too short to estimate a speed")
    A = np.vstack([tt - tt[0], np.ones_like(tt)]).T
    slopes = np.linalg.lstsq(A, traj.values[keep], rcond=None)[0][0]
    mean_slope = float(np.linalg.lstsq(A, _site_mean(traj)[keep], rcond=None)[0][0])
    spread = float(np.max(slopes) - np.min(slopes))
    return SpeedEstimate(speed=mean_slope, spread=spread, determined=spread <= tol_v)


def average_speed(traj: Trajectory, period: Optional[float] = None, transient: float = 0.5) -> float:
    """Average speed v = lim (u(t) - u(0))/t, estimated after the transient."""
    est = speed_estimate(traj, period=period, transient=transient)
    if not est.determined:
        logger.warning(f"Speed differs across sites by {est.spread:.3g}; estimate {est.speed:.6g} undetermined")
    return est.speed


# ============================================================================
# Classification
# ============================================================================

@dataclass(frozen=True, eq=False)
class AsymptoticsReport:
    verdict: Verdict
    speed: float
    rho: Fraction
    t0: Optional[float] = None
    shift: int = 0
    equilibrium_residual: float = float("nan")
    periodicity_residual: float = float("nan")
    horizon: float = 0.0
    final_state: Optional[ChainState] = None
    trajectory: Optional[Trajectory] = None
    diagnostics: str = ""

    def summary(self) -> dict:
        return {
            "verdict": self.verdict.value,
            "speed": self.speed,
            "rho": f"{self.rho.numerator}/{self.rho.denominator}",
            "t0": self.t0,
            "shift": self.shift,
            "equilibrium_residual": self.equilibrium_residual,
            "periodicity_residual": self.periodicity_residual,
            "horizon": self.horizon,
            "diagnostics": self.diagnostics,
        }


def _period_residual(spline, base: np.ndarray, tau: float, r: int) -> float:
    return float(np.max(np.abs(spline(base + tau) - spline(base) - r)))


def find_period(traj: Trajectory, speed: float, tol_per: float = TOL_PER,
                n_base: int = 200) -> Tuple[Optional[float], int, float]:
    """
    Smallest t0 near 1/|v| with u(t + t0) = u(t) + sign(v) on the trajectory.

    A grid of lags at the sample spacing is scanned first; the best lag is
    refined by bounded Brent minimisation of the sup-norm mismatch on the
    Hermite interpolant.

    Returns:
        (t0 or None, integer shift, residual)
    """
    if speed == 0 or not math.isfinite(speed):
        return None, 0, float("inf")
    r = 1 if speed > 0 else -1
    guess = 1.0 / abs(speed)
    t = traj.times
    span = t[-1] - t[0]
    if 1.25 * guess >= span:
        return None, r, float("inf")
    spline = traj.interpolant()
    dt_out = float(np.median(np.diff(t)))
    lags = np.arange(max(dt_out, 0.8 * guess), 1.25 * guess + dt_out, dt_out)
    base_end = t[-1] - lags[-1] - dt_out
    if base_end <= t[0]:
        return None, r, float("inf")
    base = np.linspace(t[0], base_end, n_base)
    residuals = np.array([_period_residual(spline, base, lag, r) for lag in lags])
    k = int(np.argmin(residuals))
    lo, hi = lags[k] - dt_out, lags[k] + dt_out
    base = base[base + hi <= t[-1]]
    res = optimize.minimize_scalar(lambda tau: _period_residual(spline, base, tau, r),
                                   bounds=(lo, hi), method="bounded",
                                   options={"xatol": 1e-11, "maxiter": 500})
    t0 = float(res.x)
    residual = _period_residual(spline, base, t0, r)
    logger.debug(f"Period search: t0={t0:.9g} (guess {guess:.6g}), residual {residual:.3g}")
    if residual > tol_per:
        return None, r, residual
    return t0, r, residual


def classify_asymptotics(state: ChainState, pot: Potential, force: Forcing, horizon: float = 50.0,
                         max_horizon: float = 1600.0, dt: float = DEFAULT_DT,
                         dt_out: float = DEFAULT_DT_OUT, tol_eq: float = TOL_EQ,
                         tol_per: float = TOL_PER, transient: float = 0.5) -> AsymptoticsReport:
    """
    Integrate past the transient and classify the DC asymptotics as
    Equilibrium, PeriodicSliding (with period t0 and u(t + t0) = u(t) + sign(v))
    or Undetermined. The horizon doubles until a verdict or max_horizon.

    Raises:
        UnsupportedModeError: AC forcing
    """
    if not force.is_dc:
        raise UnsupportedModeError("classify_asymptotics needs DC forcing; use stroboscopic_recurrence")
    if horizon <= 0 or max_horizon < horizon:
        raise PreconditionError(f"need 0 < horizon <= max_horizon, got {horizon}, {max_horizon}")
    rho = Fraction(state.M, state.N)
    current = state
    elapsed = 0.0
    chunk = horizon
    eq_res = per_res = float("nan")
    while True:
        piece = integrate(current, pot, force, (current.t, current.t + chunk), dt=dt, dt_out=dt_out)
        elapsed += chunk
        current = piece.final
        window = piece.window(piece.times[0] + transient * (piece.times[-1] - piece.times[0]))

        tail = piece.window(piece.times[0] + 0.75 * (piece.times[-1] - piece.times[0]))
        eq_res = float(np.max(np.abs(tail.rates)))
        if eq_res < tol_eq:
            logger.info(f"Equilibrium after t={elapsed:g} (max|u'|={eq_res:.3g})")
            return AsymptoticsReport(verdict=Verdict.EQUILIBRIUM, speed=0.0, rho=rho,
                                     equilibrium_residual=eq_res, horizon=elapsed,
                                     final_state=current, trajectory=window)

        est = speed_estimate(window, transient=0.0)
        t0, shift, per_res = find_period(window, est.speed, tol_per=tol_per)
        if t0 is not None:
            speed = speed_estimate(window, period=t0, transient=0.0).speed
            logger.info(f"Periodic sliding after t={elapsed:g}: t0={t0:.9g}, v={speed:.9g}")
            return AsymptoticsReport(verdict=Verdict.PERIODIC_SLIDING, speed=speed, rho=rho, t0=t0,
                                     shift=shift, equilibrium_residual=eq_res,
                                     periodicity_residual=per_res, horizon=elapsed,
                                     final_state=current, trajectory=window)

        if elapsed + 2 * chunk > max_horizon:
            break
        chunk *= 2

    logger.warning(f"Undetermined asymptotics at t={elapsed:g}: max|u'|={eq_res:.3g}, "
                   f"periodicity residual={per_res:.3g}")
    return AsymptoticsReport(verdict=Verdict.UNDETERMINED, speed=speed_estimate(window, transient=0.0).speed,
                             rho=rho, equilibrium_residual=eq_res, periodicity_residual=per_res,
                             horizon=elapsed, final_state=current, trajectory=window,
                             diagnostics="horizon exhausted")


def total_order_spot_check(traj: Trajectory, n_pairs: int = 20, seed: int = 0,
                           tol: float = 1e-9) -> List[Tuple[float, float]]:
    """
    Sample time pairs (t, t') and check that u(t) is comparable with every
    R-translate u(t') + r near it. Returns the violating pairs.
    """
    rng = np.random.default_rng(seed)
    n = len(traj)
    violations = []
    for _ in range(n_pairs):
        a, b = rng.integers(0, n, size=2)
        ua, ub = traj.state(int(a)), traj.state(int(b))
        mean_gap = float(np.mean(ua.u - ub.u))
        for r in (math.floor(mean_gap), math.ceil(mean_gap)):
            if partial_order_compare(ua, ub.shifted(r), tol=tol) == Order.INCOMPARABLE:
                violations.append((float(traj.times[a]), float(traj.times[b])))
                break
    return violations


# ============================================================================
# Modulation function
# ============================================================================

@dataclass(frozen=True, eq=False)
class ModulationTable:
    """Bin table of the 1-periodic modulation m with mean(m) = 0."""
    x: np.ndarray
    m: np.ndarray
    count: np.ndarray
    spread: np.ndarray
    alpha: float
    rho: float
    speed: float
    residual: float

    def __call__(self, x) -> np.ndarray:
        return _periodic_spline(self.x, self.m)(np.mod(x, 1.0))

    def reconstruction_error(self, traj: Trajectory) -> float:
        """max_{j,t} |u_j(t) - (j rho + v t + alpha + m(j rho + v t + alpha))|."""
        j = np.arange(traj.N)
        phase = j[None, :] * self.rho + self.speed * traj.times[:, None] + self.alpha
        return float(np.max(np.abs(traj.values - phase - self(phase))))


def _periodic_spline(x: np.ndarray, y: np.ndarray) -> CubicSpline:
    xx = np.append(x, x[0] + 1.0)
    yy = np.append(y, y[0])
    return CubicSpline(xx, yy, bc_type="periodic")


def _bin_values(x: np.ndarray, y: np.ndarray, n_bins: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Value at each bin centre from a local quadratic fit over the bin and its
    neighbours (widened until at least four points), and per-bin counts.
    Empty bins are dropped.
    """
    centres = (np.arange(n_bins) + 0.5) / n_bins
    idx = np.minimum((x * n_bins).astype(np.int64), n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    values = np.full(n_bins, np.nan)
    for b in np.nonzero(counts)[0]:
        for half in range(1, 9):
            d = np.mod(x - centres[b] + 0.5, 1.0) - 0.5
            near = np.abs(d) <= (half + 0.5) / n_bins
            if np.count_nonzero(near) >= 4:
                break
        dd, yy = d[near], y[near]
        if dd.shape[0] >= 3 and np.ptp(dd) > 0:
            coeffs = np.polyfit(dd, yy, 2 if dd.shape[0] >= 4 else 1)
            values[b] = coeffs[-1]
        else:
            values[b] = float(np.mean(yy))
    keep = counts > 0
    return centres[keep], values[keep], counts[keep]


def extract_modulation(traj: Trajectory, rho: float, v: float, n_bins: int = N_BINS,
                       tol_m: float = TOL_M) -> ModulationTable:
    """
    Modulation function of a uniformly sliding state from the samples
    (x, y) = ((j rho + v t + alpha) mod 1, u_j(t) - j rho - v t - alpha).

    Raises:
        PreconditionError: v = 0
        NotSlidingError: the samples are not single-valued within tol_m
    """
    if v == 0:
        raise PreconditionError("modulation needs a nonzero speed")
    rho = float(rho)
    j = np.arange(traj.N)
    raw = (j[None, :] * rho + v * traj.times[:, None]).reshape(-1)
    y = (traj.values - j[None, :] * rho - v * traj.times[:, None]).reshape(-1)

    # alpha is the circle average of y over the raw phase
    xc, yc, _ = _bin_values(np.mod(raw, 1.0), y, n_bins)
    alpha = float(np.mean(_periodic_spline(xc, yc)((np.arange(4 * n_bins) + 0.5) / (4 * n_bins))))

    x = np.mod(raw + alpha, 1.0)
    m = y - alpha
    centres, values, counts = _bin_values(x, m, n_bins)
    spline = _periodic_spline(centres, values)
    deviation = np.abs(m - spline(x))
    idx = np.minimum((x * n_bins).astype(np.int64), n_bins - 1)
    spread_all = np.zeros(n_bins)
    np.maximum.at(spread_all, idx, deviation)
    spread = spread_all[np.minimum((centres * n_bins).astype(np.int64), n_bins - 1)]
    residual = float(np.max(deviation))
    table = ModulationTable(x=centres, m=values, count=counts, spread=spread, alpha=alpha,
                            rho=rho, speed=v, residual=residual)
    if residual > tol_m:
        raise NotSlidingError(f"modulation samples are not single-valued: residual {residual:.3g} > {tol_m:g}",
                              residual=residual)
    logger.debug(f"Modulation table: {len(centres)} bins, alpha={alpha:.6g}, residual {residual:.3g}")
    return table


# ============================================================================
# Dissipation identity
# ============================================================================

def dissipation_residual(traj: Trajectory, F: float, period: Optional[float] = None,
                         pot: Optional[Potential] = None, transient: float = 0.5,
                         eps: float = EPS_DISSIPATION) -> float:
    """
    |F v - <(du_j/dt)^2>| / max(F v, eps) over the stationary segment.

    With a period the average runs over whole periods on a uniform grid,
    taking du/dt from the vector field when a potential is supplied and from
    the interpolant otherwise.
    """
    v = speed_estimate(traj, period=period, transient=transient).speed
    t = traj.times
    t_from = t[0] + transient * (t[-1] - t[0])
    mean_sq = None
    if period is not None and period > 0:
        n_periods = int(math.floor((t[-1] - t_from) / period + 1e-9))
        if n_periods >= 1:
            n_grid = max(64, int(math.ceil(n_periods * period / float(np.median(np.diff(t))))))
            grid = t[-1] - n_periods * period + np.arange(n_grid) * (n_periods * period / n_grid)
            spline = traj.interpolant()
            if pot is not None:
                states = spline(grid)
                rates = np.vstack([rhs(u, traj.M, pot, F) for u in states])
            else:
                rates = spline(grid, 1)
            mean_sq = float(np.mean(rates ** 2))
    if mean_sq is None:
        keep = t >= t_from - 1e-12
        tt = t[keep]
        per_time = np.mean(traj.rates[keep] ** 2, axis=1)
        mean_sq = float(integrate_trapezoid(per_time, tt) / (tt[-1] - tt[0])) if tt.shape[0] > 1 else float(per_time[0])
    power = F * v
    return abs(power - mean_sq) / max(abs(power), eps)


# ============================================================================
# Depinning sweep
# ============================================================================

@dataclass(frozen=True)
class SweepPoint:
    F: float
    v: float
    verdict: str
    t0: Optional[float] = None
    residual_dissipation: Optional[float] = None
    flag: str = ""


def _sweep_block(pot: Potential, start: ChainState, grid: Sequence[float], settings: dict) -> List[SweepPoint]:
    points = []
    state = start
    for F in grid:
        force = Forcing.dc(float(F))
        try:
            report = classify_asymptotics(state, pot, force, **settings)
        except ChainError as e:
            logger.error(f"Sweep point F={F:g} failed: {e}")
            points.append(SweepPoint(F=float(F), v=float("nan"), verdict="Error", flag=str(e)))
            continue
        residual = None
        if report.verdict == Verdict.PERIODIC_SLIDING:
            residual = dissipation_residual(report.trajectory, float(F), period=report.t0, pot=pot,
                                            transient=0.0)
        elif report.verdict == Verdict.EQUILIBRIUM:
            residual = 0.0
        points.append(SweepPoint(F=float(F), v=report.speed, verdict=report.verdict.value,
                                 t0=report.t0, residual_dissipation=residual))
        state = report.final_state.replace(t=0.0)
    return points


def depinning_sweep(pot: Potential, rho: Fraction, F_grid: Sequence[float], settings: Optional[dict] = None,
                    blocks: int = 1, workers: int = 1, tol_v: float = TOL_V,
                    initial: Optional[ChainState] = None) -> List[SweepPoint]:
    """
    Classify the DC asymptotics along an ascending force grid, warm-starting
    each point from the previous final state. The grid may be split into
    contiguous blocks that run in parallel.
    """
    grid = [float(F) for F in F_grid]
    if not grid:
        raise PreconditionError("empty force grid")
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise PreconditionError("force grid must be ascending")
    rho = Fraction(rho)
    start = initial or ChainState.linear(rho.denominator, rho.numerator)
    settings = dict(settings or {})
    blocks = max(1, min(blocks, len(grid)))
    size = int(math.ceil(len(grid) / blocks))
    pieces = [grid[i:i + size] for i in range(0, len(grid), size)]
    results = ordered_map(lambda piece: _sweep_block(pot, start, piece, settings), pieces, workers)
    points = [p for block in results for p in block]

    flagged = []
    best = -math.inf
    for k, p in enumerate(points):
        if math.isfinite(p.v):
            if p.v < best - tol_v:
                points[k] = SweepPoint(F=p.F, v=p.v, verdict=p.verdict, t0=p.t0,
                                       residual_dissipation=p.residual_dissipation, flag="non-monotone")
                flagged.append(p.F)
            best = max(best, p.v)
    if flagged:
        logger.warning(f"Speed decreased along the sweep at F={flagged}")
    logger.info(f"Depinning sweep over {len(grid)} forces at rho={rho}: F_c ~ {critical_force(points, tol_v)}")
    return points


def critical_force(points: Sequence[SweepPoint], tol_v: float = TOL_V) -> Optional[float]:
    """Smallest swept force with nonzero speed."""
    for p in points:
        if math.isfinite(p.v) and abs(p.v) > tol_v:
            return p.F
    return None


# ============================================================================
# Attractor residence
# ============================================================================

def translate_closure(states: Sequence[ChainState]) -> List[ChainState]:
    """All spatial translates T^p u, p = 0..N-1, of the given states."""
    out = []
    for s in states:
        out.extend(translate(s, p, 0) for p in range(s.N))
    return out


def attractor_residence(mu: Ensemble, A_hat: Sequence[ChainState], horizon: float, eps: float,
                        n_times: int = 100, dt: float = DEFAULT_DT, workers: int = 1) -> float:
    """
    Fraction of (member, time) pairs, weighted by member and uniform in time
    on [0, S), with config_distance(phi^t u, A_hat) < eps. A_hat is closed
    under T here; config_distance already quotients by R.

    Raises:
        PreconditionError: A_hat is empty or the horizon is not positive
    """
    if not A_hat:
        raise PreconditionError("attractor reference set is empty")
    if horizon <= 0 or n_times < 1:
        raise PreconditionError("horizon and n_times must be positive")
    mu._require_dynamics()
    reference = translate_closure(A_hat)
    step = horizon / n_times

    def member_fraction(state: ChainState) -> float:
        traj = integrate(state, mu.pot, mu.force, (state.t, state.t + horizon), dt=dt, dt_out=step)
        hits = 0
        for k in range(n_times):
            s = traj.state(k)
            if any(config_distance(s, a) < eps for a in reference):
                hits += 1
        return hits / n_times

    fractions = ordered_map(member_fraction, mu.members, workers)
    value = float(np.dot(mu.weights, fractions))
    logger.info(f"Attractor residence over S={horizon:g}, eps={eps:g}: {value:.4f}")
    return value


# ============================================================================
# AC recurrence
# ============================================================================

@dataclass(frozen=True)
class RecurrenceReport:
    verdict: Verdict
    period: Optional[int] = None
    shift: Optional[int] = None
    residual: float = float("nan")
    iterations: int = 0
    history: List[float] = field(default_factory=list)

    @property
    def speed(self) -> Optional[float]:
        if self.period is None:
            return None
        return self.shift / self.period


def stroboscopic_recurrence(state: ChainState, pot: Potential, force: Forcing, n_transient: int = 50,
                            n_iter: int = 32, p_max: int = 8, tol: float = TOL_PER,
                            dt: float = DEFAULT_DT) -> RecurrenceReport:
    """
    Look for u(n + p) = u(n) + q on the time-1 map after a transient, with
    1 <= p <= p_max. A hit is a StroboscopicLocked verdict with mean speed q/p.

    Raises:
        UnsupportedModeError: DC forcing
    """
    if force.is_dc:
        raise UnsupportedModeError("stroboscopic recurrence needs AC forcing")
    current = state
    for _ in range(n_transient):
        current = stroboscopic_map(current, pot, force, dt=dt)
    orbit = [current]
    for _ in range(n_iter + p_max):
        orbit.append(stroboscopic_map(orbit[-1], pot, force, dt=dt))
    best = (None, None, math.inf)
    for p in range(1, p_max + 1):
        diffs = np.array([orbit[n + p].u - orbit[n].u for n in range(n_iter)])
        q = int(round(float(np.mean(diffs))))
        residual = float(np.max(np.abs(diffs - q)))
        if residual < best[2]:
            best = (p, q, residual)
        if residual < tol:
            logger.info(f"Stroboscopic locking: u(n+{p}) = u(n) + {q} (residual {residual:.3g})")
            return RecurrenceReport(verdict=Verdict.STROBOSCOPIC_LOCKED, period=p, shift=q,
                                    residual=residual, iterations=n_transient + len(orbit) - 1)
    logger.warning(f"No stroboscopic recurrence up to p={p_max}; best residual {best[2]:.3g} at p={best[0]}")
    return RecurrenceReport(verdict=Verdict.UNDETERMINED, residual=best[2],
                            iterations=n_transient + len(orbit) - 1)
