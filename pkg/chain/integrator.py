"""
Fixed-step classical Runge-Kutta integration of the chain equation and of
the N-periodic linear cooperative system

    dw_j/dt = a_j(t) w_{j-1} + b_j(t) w_{j+1} + c_j(t) w_j.
"""
import logging
import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Protocol, Tuple

import numpy as np
from scipy.interpolate import CubicHermiteSpline

from .errors import (IntegrationBlowupError, NumericDomainError, PreconditionError,
                     UnsupportedModeError)
from .model import ChainState, Forcing, Potential, rhs, spacing_bound, spacing_class

logger = logging.getLogger(__name__)

DEFAULT_DT = 1e-3
DEFAULT_DT_OUT = 1e-2
TOL_SPACING = 1e-7


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Samples (t_k, u(t_k)) with the rates du/dt at the same instants."""
    times: np.ndarray
    values: np.ndarray
    rates: np.ndarray
    N: int
    M: int
    method: str = "rk4"
    dt: float = DEFAULT_DT
    spacing_excess: float = 0.0

    def __len__(self) -> int:
        return int(self.times.shape[0])

    def state(self, k: int) -> ChainState:
        return ChainState(N=self.N, M=self.M, u=self.values[k], t=float(self.times[k]))

    @property
    def initial(self) -> ChainState:
        return self.state(0)

    @property
    def final(self) -> ChainState:
        return self.state(len(self) - 1)

    def states(self) -> List[ChainState]:
        return [self.state(k) for k in range(len(self))]

    def interpolant(self) -> CubicHermiteSpline:
        """Piecewise cubic Hermite interpolant through values and rates."""
        return CubicHermiteSpline(self.times, self.values, self.rates, axis=0)

    def sample(self, t: float) -> ChainState:
        if not self.times[0] - 1e-12 <= t <= self.times[-1] + 1e-12:
            raise PreconditionError(f"t={t} outside trajectory span "
                                    f"[{self.times[0]}, {self.times[-1]}]")
        return ChainState(N=self.N, M=self.M, u=self.interpolant()(t), t=t)

    def window(self, t_from: float) -> "Trajectory":
        """Sub-trajectory of samples with t >= t_from."""
        keep = self.times >= t_from - 1e-12
        return Trajectory(times=self.times[keep], values=self.values[keep],
                          rates=self.rates[keep], N=self.N, M=self.M, method=self.method,
                          dt=self.dt, spacing_excess=self.spacing_excess)

    def concat(self, other: "Trajectory") -> "Trajectory":
        """Join with a trajectory that starts where this one ends."""
        if other.N != self.N or other.M != self.M:
            raise PreconditionError("trajectories must share (N, M)")
        skip = 1 if abs(other.times[0] - self.times[-1]) < 1e-12 else 0
        return Trajectory(times=np.concatenate([self.times, other.times[skip:]]),
                          values=np.vstack([self.values, other.values[skip:]]),
                          rates=np.vstack([self.rates, other.rates[skip:]]),
                          N=self.N, M=self.M, method=self.method, dt=self.dt,
                          spacing_excess=max(self.spacing_excess, other.spacing_excess))


def _rk4_step(f: Callable[[float, np.ndarray], np.ndarray], t: float, y: np.ndarray, h: float) -> np.ndarray:
    k1 = f(t, y)
    k2 = f(t + 0.5 * h, y + 0.5 * h * k1)
    k3 = f(t + 0.5 * h, y + 0.5 * h * k2)
    k4 = f(t + h, y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _output_times(t0: float, t1: float, dt_out: float) -> np.ndarray:
    n = int(math.floor((t1 - t0) / dt_out + 1e-9))
    times = t0 + dt_out * np.arange(n + 1)
    if t1 - times[-1] > 1e-9 * dt_out:
        times = np.append(times, t1)
    else:
        times[-1] = t1
    return times


def _march(f: Callable[[float, np.ndarray], np.ndarray], y0: np.ndarray, t_span: Tuple[float, float],
           dt: float, dt_out: float,
           on_emit: Optional[Callable[[float, np.ndarray], None]] = None) -> Tuple[np.ndarray, np.ndarray]:
    """March y' = f(t, y) emitting samples every dt_out; returns (times, values)."""
    t0, t1 = float(t_span[0]), float(t_span[1])
    if not dt > 0:
        raise PreconditionError(f"dt must be positive, got {dt}")
    if not t1 > t0:
        raise PreconditionError(f"empty time span ({t0}, {t1})")
    if not dt_out > 0:
        raise PreconditionError(f"dt_out must be positive, got {dt_out}")

    times = _output_times(t0, t1, dt_out)
    out = np.empty((times.shape[0],) + y0.shape)
    out[0] = y0
    y = np.array(y0, dtype=float)
    t = t0
    for k in range(1, times.shape[0]):
        target = times[k]
        n_full = int(math.floor((target - t) / dt + 1e-9))
        try:
            for _ in range(n_full):
                y = _rk4_step(f, t, y, dt)
                t += dt
            remainder = target - t
            if remainder > 1e-13:
                y = _rk4_step(f, t, y, remainder)
        except NumericDomainError as e:
            raise IntegrationBlowupError(f"integration blew up after t={times[k - 1]:.6g}: {e}",
                                         last_good_time=float(times[k - 1])) from e
        t = target
        if not np.all(np.isfinite(y)):
            raise IntegrationBlowupError(f"non-finite state after t={times[k - 1]:.6g}",
                                         last_good_time=float(times[k - 1]))
        out[k] = y
        if on_emit is not None:
            on_emit(t, y)
    return times, out


def integrate(state: ChainState, pot: Potential, force: Forcing, t_span: Tuple[float, float],
              dt: float = DEFAULT_DT, dt_out: float = DEFAULT_DT_OUT,
              tol_spacing: float = TOL_SPACING) -> Trajectory:
    """
    Integrate the chain from `state` over t_span with fixed step dt.

    Args:
        state: initial configuration (its time stamp is ignored in favour of t_span[0])
        pot: interaction potential
        force: DC or AC drive
        t_span: (t0, t1) with t1 > t0
        dt: RK4 step; the last step before each emission is shortened
        dt_out: spacing of emitted samples
        tol_spacing: allowed excursion of the spacing bound past its K_n level
            before a warning

    Returns:
        Trajectory with samples at t0, t0 + dt_out, ..., t1

    Raises:
        IntegrationBlowupError: the state became non-finite
    """
    M = state.M

    def f(t, u):
        return rhs(u, M, pot, force(t))

    initial_bound = spacing_bound(state)
    excess = [0.0]

    def check_spacing(t, u):
        bound = spacing_bound(ChainState(N=state.N, M=M, u=u, t=t))
        excess[0] = max(excess[0], bound - initial_bound)

    times, values = _march(f, state.u, t_span, dt, dt_out, on_emit=check_spacing)
    rates = np.vstack([f(t, u) for t, u in zip(times, values)])
    # only the integer level n of K_n is invariant; the real bound may grow below it
    level = spacing_class(state)
    if initial_bound + excess[0] > level + tol_spacing:
        logger.warning(f"Spacing bound left K_{level}: grew by {excess[0]:.3g} to "
                       f"{initial_bound + excess[0]:.6g} over [{t_span[0]}, {t_span[1]}]")
    elif excess[0] > tol_spacing:
        logger.debug(f"Spacing bound grew by {excess[0]:.3g} within K_{level}")
    return Trajectory(times=times, values=values, rates=rates, N=state.N, M=M,
                      method="rk4", dt=dt, spacing_excess=excess[0])


def stroboscopic_map(state: ChainState, pot: Potential, force: Forcing,
                     dt: float = DEFAULT_DT) -> ChainState:
    """Time-1 map of an AC-driven chain, started at the state's phase t mod 1."""
    if force.is_dc:
        raise UnsupportedModeError("stroboscopic_map needs AC forcing")
    phase = state.t - math.floor(state.t)
    traj = integrate(state, pot, force, (phase, phase + 1.0), dt=dt, dt_out=1.0)
    return ChainState(N=state.N, M=state.M, u=traj.values[-1], t=state.t + 1.0)


# ============================================================================
# Linear cooperative system
# ============================================================================

@dataclass(frozen=True, eq=False)
class LinearSystemCoeffs:
    """N-periodic coefficients a_i, b_i, c_i with twist floor delta."""
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    delta: float

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float).reshape(-1)
        b = np.asarray(self.b, dtype=float).reshape(-1)
        c = np.asarray(self.c, dtype=float).reshape(-1)
        if not (a.shape == b.shape == c.shape):
            raise PreconditionError("coefficient arrays must share one length")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", c)
        self.validate()

    @classmethod
    def constant(cls, N: int, a: float, b: float, c: float, delta: Optional[float] = None) -> "LinearSystemCoeffs":
        floor = min(a, b) if delta is None else delta
        return cls(a=np.full(N, a), b=np.full(N, b), c=np.full(N, c), delta=floor)

    @property
    def N(self) -> int:
        return int(self.a.shape[0])

    def validate(self):
        if not self.delta > 0:
            raise PreconditionError(f"twist floor delta must be positive, got {self.delta}")
        if np.min(self.a) < self.delta or np.min(self.b) < self.delta:
            raise PreconditionError(
                f"coefficients violate a_i, b_i >= delta={self.delta:g}: "
                f"min a={np.min(self.a):.3g}, min b={np.min(self.b):.3g}")

    # A constant coefficient set is its own source with an empty base state.
    def base0(self) -> np.ndarray:
        return np.empty(0)

    def base_rhs(self, t: float, base: np.ndarray) -> np.ndarray:
        return base

    def coeffs(self, t: float, base: np.ndarray) -> "LinearSystemCoeffs":
        return self


class CoefficientSource(Protocol):
    """Coefficients re-evaluated from base trajectories carried along in time."""

    def base0(self) -> np.ndarray: ...

    def base_rhs(self, t: float, base: np.ndarray) -> np.ndarray: ...

    def coeffs(self, t: float, base: np.ndarray) -> LinearSystemCoeffs: ...


def linear_rhs(w: np.ndarray, co: LinearSystemCoeffs) -> np.ndarray:
    return co.a * np.roll(w, 1) + co.b * np.roll(w, -1) + co.c * w


def integrate_linear(w0: np.ndarray, source: CoefficientSource, t_span: Tuple[float, float],
                     dt: float = DEFAULT_DT, dt_out: float = DEFAULT_DT_OUT) -> Trajectory:
    """
    Integrate the linear system with coefficients re-evaluated at every RK
    stage from the carried base state (no coefficient interpolation).

    Returns:
        Trajectory of w with M = 0
    """
    w0 = np.asarray(w0, dtype=float).reshape(-1)
    base0 = np.asarray(source.base0(), dtype=float).reshape(-1)
    n_w = w0.shape[0]
    first = source.coeffs(float(t_span[0]), base0)
    if first.N != n_w:
        raise PreconditionError(f"w0 has {n_w} sites but coefficients have {first.N}")

    def f(t, y):
        w, base = y[:n_w], y[n_w:]
        co = source.coeffs(t, base)
        return np.concatenate([linear_rhs(w, co), source.base_rhs(t, base)])

    times, values = _march(f, np.concatenate([w0, base0]), t_span, dt, dt_out)
    rates = np.vstack([f(t, y) for t, y in zip(times, values)])
    return Trajectory(times=times, values=values[:, :n_w], rates=rates[:, :n_w], N=n_w, M=0,
                      method="rk4-linear", dt=dt)
