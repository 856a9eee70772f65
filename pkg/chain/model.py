"""
Configurations, potentials, forcings and the gradient vector field of the
driven generalized elastic chain

    du_j/dt = -V2(u_{j-1}, u_j) - V1(u_j, u_{j+1}) + F(t).

Configurations are stored as (N, M)-periodic lifts: u_{i+kN} = u_i + kM.
"""
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate

from .errors import NumericDomainError, PreconditionError, TwistViolationError

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi

ArrayFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


# ============================================================================
# Potentials
# ============================================================================

@dataclass(frozen=True)
class Potential:
    """Interaction V(u, v) with analytic first and second partials."""
    V: ArrayFn
    V1: ArrayFn
    V2: ArrayFn
    V11: ArrayFn
    V12: ArrayFn
    V22: ArrayFn
    twist_delta: float
    name: str = "generic"
    K: Optional[float] = None

    def __post_init__(self):
        if not self.twist_delta > 0:
            raise PreconditionError(f"twist_delta must be positive, got {self.twist_delta}")


def standard_potential(K: float) -> Potential:
    """
    Standard Frenkel-Kontorova family V(u,v) = (v-u)^2/2 + W(u),
    W(u) = (K/4pi^2)(1 - cos 2pi u).
    """
    if K < 0:
        raise PreconditionError(f"stiffness K must be nonnegative, got {K}")
    amp = K / (4.0 * math.pi ** 2)

    def V(u, v):
        return 0.5 * (v - u) ** 2 + amp * (1.0 - np.cos(TWO_PI * u))

    def V1(u, v):
        return -(v - u) + (K / TWO_PI) * np.sin(TWO_PI * u)

    def V2(u, v):
        return v - u

    def V11(u, v):
        return 1.0 + K * np.cos(TWO_PI * u) + 0.0 * v

    def V12(u, v):
        return -np.ones(np.broadcast(u, v).shape)

    def V22(u, v):
        return np.ones(np.broadcast(u, v).shape)

    return Potential(V=V, V1=V1, V2=V2, V11=V11, V12=V12, V22=V22,
                     twist_delta=1.0, name="standard", K=float(K))


def harmonic_potential() -> Potential:
    """V(u,v) = (v-u)^2/2, the K=0 member of the standard family."""
    pot = standard_potential(0.0)
    return Potential(V=pot.V, V1=pot.V1, V2=pot.V2, V11=pot.V11, V12=pot.V12,
                     V22=pot.V22, twist_delta=1.0, name="harmonic", K=0.0)


def fourier_potential(site_harmonics: Sequence[Tuple[int, float, float]] = (),
                      coupling_harmonics: Sequence[Tuple[int, float]] = ()) -> Potential:
    """
    Tabulated potential

        V(u,v) = (v-u)^2/2 + sum_k [a_k cos 2pi k u + b_k sin 2pi k u]
                 + sum_k g_k (1 - cos 2pi k (v-u)) / (4 pi^2 k^2)

    The coupling terms make V12 = -1 - sum_k g_k cos 2pi k (v-u) non-constant;
    twist_delta is 1 - sum |g_k| and must stay positive.

    Args:
        site_harmonics: (k, a_k, b_k) entries of the on-site potential, k >= 1
        coupling_harmonics: (k, g_k) entries of the anharmonic coupling, k >= 1
    """
    site = [(int(k), float(a), float(b)) for k, a, b in site_harmonics]
    coupling = [(int(k), float(g)) for k, g in coupling_harmonics]
    if any(k < 1 for k, _, _ in site) or any(k < 1 for k, _ in coupling):
        raise PreconditionError("harmonic indices must be >= 1")
    delta = 1.0 - sum(abs(g) for _, g in coupling)
    if delta <= 0:
        raise TwistViolationError("coupling harmonics destroy the twist condition",
                                  worst_point=(0.0, 0.0), value=delta)

    def W(u):
        out = np.zeros_like(np.asarray(u, dtype=float))
        for k, a, b in site:
            out = out + a * np.cos(TWO_PI * k * u) + b * np.sin(TWO_PI * k * u)
        return out

    def dW(u):
        out = np.zeros_like(np.asarray(u, dtype=float))
        for k, a, b in site:
            out = out + TWO_PI * k * (-a * np.sin(TWO_PI * k * u) + b * np.cos(TWO_PI * k * u))
        return out

    def d2W(u):
        out = np.zeros_like(np.asarray(u, dtype=float))
        for k, a, b in site:
            out = out - (TWO_PI * k) ** 2 * (a * np.cos(TWO_PI * k * u) + b * np.sin(TWO_PI * k * u))
        return out

    def H(s):
        out = 0.5 * s ** 2
        for k, g in coupling:
            out = out + g * (1.0 - np.cos(TWO_PI * k * s)) / (TWO_PI * k) ** 2
        return out

    def dH(s):
        out = s
        for k, g in coupling:
            out = out + g * np.sin(TWO_PI * k * s) / (TWO_PI * k)
        return out

    def d2H(s):
        out = np.ones_like(s)
        for k, g in coupling:
            out = out + g * np.cos(TWO_PI * k * s)
        return out

    def V(u, v):
        return H(v - u) + W(u)

    def V1(u, v):
        return -dH(v - u) + dW(u)

    def V2(u, v):
        return dH(v - u)

    def V11(u, v):
        return d2H(v - u) + d2W(u)

    def V12(u, v):
        return -d2H(v - u)

    def V22(u, v):
        return d2H(v - u)

    return Potential(V=V, V1=V1, V2=V2, V11=V11, V12=V12, V22=V22,
                     twist_delta=delta, name="fourier")


# ============================================================================
# Forcing
# ============================================================================

class ForcingKind(str, Enum):
    DC = "DC"
    AC = "AC"


@dataclass(frozen=True)
class Forcing:
    """
    External drive F(t). DC: F(t) = dc_value. AC: F(t) = dc_value +
    sum_n a_n cos 2pi n t + b_n sin 2pi n t over the harmonic list.
    """
    kind: ForcingKind
    dc_value: float = 0.0
    harmonics: Tuple[Tuple[int, float, float], ...] = ()

    @classmethod
    def dc(cls, value: float) -> "Forcing":
        return cls(kind=ForcingKind.DC, dc_value=float(value))

    @classmethod
    def ac(cls, offset: float = 0.0, harmonics: Sequence[Tuple[int, float, float]] = ()) -> "Forcing":
        """Build a 1-periodic drive; a harmonic with index 0 folds into the offset."""
        folded = float(offset)
        terms = []
        for n, a, b in harmonics:
            if int(n) < 0:
                raise PreconditionError(f"harmonic index must be >= 0, got {n}")
            if int(n) == 0:
                folded += float(a)
            else:
                terms.append((int(n), float(a), float(b)))
        return cls(kind=ForcingKind.AC, dc_value=folded, harmonics=tuple(terms))

    @property
    def is_dc(self) -> bool:
        return self.kind == ForcingKind.DC

    def __call__(self, t: float) -> float:
        if self.is_dc or not self.harmonics:
            return self.dc_value
        value = self.dc_value
        for n, a, b in self.harmonics:
            value += a * math.cos(TWO_PI * n * t) + b * math.sin(TWO_PI * n * t)
        return value

    @property
    def mean(self) -> float:
        """F-bar, the time average over one period."""
        return self.dc_value

    @property
    def dispersion(self) -> float:
        """sigma(F) from Parseval: sqrt(sum (a_n^2 + b_n^2) / 2)."""
        if self.is_dc:
            return 0.0
        return math.sqrt(sum(a * a + b * b for _, a, b in self.harmonics) / 2.0)

    def dispersion_quadrature(self) -> float:
        """sigma(F) by direct quadrature of its definition."""
        if self.is_dc:
            return 0.0
        value, _ = integrate.quad(lambda t: (self(t) - self.mean) ** 2, 0.0, 1.0,
                                  limit=200, epsabs=1e-14, epsrel=1e-13)
        return math.sqrt(value)


# ============================================================================
# Configurations
# ============================================================================

@dataclass(frozen=True, eq=False)
class ChainState:
    """(N, M)-periodic lift u_0..u_{N-1} with a time stamp."""
    N: int
    M: int
    u: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        if int(self.N) < 1:
            raise PreconditionError(f"spatial period N must be >= 1, got {self.N}")
        values = np.array(self.u, dtype=float).reshape(-1)
        if values.shape[0] != int(self.N):
            raise PreconditionError(f"expected {self.N} lift values, got {values.shape[0]}")
        if not np.all(np.isfinite(values)):
            raise NumericDomainError("configuration contains non-finite values")
        values.setflags(write=False)
        object.__setattr__(self, "N", int(self.N))
        object.__setattr__(self, "M", int(self.M))
        object.__setattr__(self, "u", values)
        object.__setattr__(self, "t", float(self.t))

    @classmethod
    def linear(cls, N: int, M: int, offset: float = 0.0, t: float = 0.0) -> "ChainState":
        """u_j = j M/N + offset."""
        return cls(N=N, M=M, u=offset + np.arange(N) * (M / N), t=t)

    @property
    def rho(self) -> float:
        return self.M / self.N

    def at(self, indices) -> np.ndarray:
        """Lift values at arbitrary integer sites using the winding convention."""
        idx = np.asarray(indices, dtype=np.int64)
        q, r = np.divmod(idx, self.N)
        return self.u[r] + self.M * q

    def neighbours(self) -> Tuple[np.ndarray, np.ndarray]:
        """(u_{j-1}, u_{j+1}) for j = 0..N-1, seam included."""
        left = np.roll(self.u, 1)
        left[0] -= self.M
        right = np.roll(self.u, -1)
        right[-1] += self.M
        return left, right

    def replace(self, u: Optional[np.ndarray] = None, t: Optional[float] = None) -> "ChainState":
        return ChainState(N=self.N, M=self.M,
                          u=self.u if u is None else u,
                          t=self.t if t is None else t)

    def shifted(self, r: float) -> "ChainState":
        """u + r, the R-action for integer r."""
        return self.replace(u=self.u + r)

    def canonical(self) -> "ChainState":
        """R-quotient representative with u_0 in [0, 1)."""
        return self.shifted(-math.floor(self.u[0]))

    def extended(self, length: int, start: int = 0) -> np.ndarray:
        return self.at(np.arange(start, start + length))

    def __repr__(self):
        return f"ChainState(N={self.N}, M={self.M}, t={self.t:.6g}, u0={self.u[0]:.6g})"


@dataclass(frozen=True, eq=False)
class VelocityProfile:
    """du_j/dt for one period (winding 0)."""
    values: np.ndarray
    t: float


def _neighbour_arrays(u: np.ndarray, M: int) -> Tuple[np.ndarray, np.ndarray]:
    left = np.roll(u, 1)
    left[0] -= M
    right = np.roll(u, -1)
    right[-1] += M
    return left, right


def rhs(u: np.ndarray, M: int, pot: Potential, force_value: float) -> np.ndarray:
    """Raw right-hand side on a lift array; the integrator calls this directly."""
    left, right = _neighbour_arrays(u, M)
    out = -pot.V2(left, u) - pot.V1(u, right) + force_value
    if not np.all(np.isfinite(out)):
        raise NumericDomainError("vector field evaluation is not finite")
    return out


def vector_field(state: ChainState, pot: Potential, force: Forcing,
                 t: Optional[float] = None) -> VelocityProfile:
    """Evaluate the chain vector field at time t (defaults to the state's stamp)."""
    t = state.t if t is None else float(t)
    if not math.isfinite(t):
        raise PreconditionError("time must be finite")
    return VelocityProfile(values=rhs(state.u, state.M, pot, force(t)), t=t)


def standard_vector_field(state: ChainState, K: float, force: Forcing,
                          t: Optional[float] = None) -> VelocityProfile:
    """Closed form u_{j+1} - 2u_j + u_{j-1} - (K/2pi) sin 2pi u_j + F(t)."""
    t = state.t if t is None else float(t)
    left, right = state.neighbours()
    values = right - 2.0 * state.u + left - (K / TWO_PI) * np.sin(TWO_PI * state.u) + force(t)
    return VelocityProfile(values=values, t=t)


def energy_per_site(state: ChainState, pot: Potential) -> float:
    """(1/N) sum_{i<N} V(u_i, u_{i+1})."""
    _, right = state.neighbours()
    value = float(np.mean(pot.V(state.u, right)))
    if not math.isfinite(value):
        raise NumericDomainError("energy is not finite")
    return value


def spacing_bound(state: ChainState) -> float:
    """max_i |u_{i+1} - u_i| including the seam gap."""
    _, right = state.neighbours()
    return float(np.max(np.abs(right - state.u)))


def spacing_class(state: ChainState) -> int:
    """Smallest n with the state in K_n."""
    return max(1, int(math.ceil(spacing_bound(state) - 1e-12)))


def translate(state: ChainState, p: int, q: int) -> ChainState:
    """T_{p,q} u with (T_{p,q}u)_i = u_{i+p} + q."""
    return state.replace(u=state.at(np.arange(state.N) + int(p)) + int(q))


class Order(str, Enum):
    LE = "LE"
    GE = "GE"
    EQ = "EQ"
    INCOMPARABLE = "INCOMPARABLE"


def partial_order_compare(a: ChainState, b: ChainState, tol: float = 0.0) -> Order:
    """
    Componentwise order of two lifts, checked on one lcm period.

    Different rotation numbers make a - b unbounded in both directions, so
    such pairs are always INCOMPARABLE.
    """
    if a.M * b.N != b.M * a.N:
        return Order.INCOMPARABLE
    L = math.lcm(a.N, b.N)
    diff = a.extended(L) - b.extended(L)
    ge = bool(np.all(diff >= -tol))
    le = bool(np.all(diff <= tol))
    if ge and le:
        return Order.EQ
    if ge:
        return Order.GE
    if le:
        return Order.LE
    return Order.INCOMPARABLE


@dataclass(frozen=True)
class TwistReport:
    min_neg_v12: float
    periodicity_residual: float
    worst_point: Tuple[float, float]
    twist_delta: float

    @property
    def passed(self) -> bool:
        return self.min_neg_v12 >= self.twist_delta


def twist_audit(pot: Potential, grid_resolution: int, span: float = 1.0,
                raise_on_failure: bool = True) -> TwistReport:
    """
    Sample -V12 on a grid over [0,1] x [0,span] and the periodicity residual
    |V(u+1,v+1) - V(u,v)|.

    Raises:
        TwistViolationError: -V12 < twist_delta at some grid point
    """
    if grid_resolution < 2:
        raise PreconditionError(f"grid_resolution must be >= 2, got {grid_resolution}")
    us = np.linspace(0.0, 1.0, grid_resolution)
    vs = np.linspace(0.0, span, grid_resolution)
    U, Vv = np.meshgrid(us, vs, indexing="ij")
    neg = -np.asarray(pot.V12(U, Vv), dtype=float) * np.ones_like(U)
    periodicity = np.abs(pot.V(U + 1.0, Vv + 1.0) - pot.V(U, Vv))
    worst = np.unravel_index(int(np.argmin(neg)), neg.shape)
    report = TwistReport(
        min_neg_v12=float(neg[worst]),
        periodicity_residual=float(np.max(periodicity)),
        worst_point=(float(U[worst]), float(Vv[worst])),
        twist_delta=pot.twist_delta,
    )
    logger.debug(f"Twist audit for {pot.name}: min(-V12)={report.min_neg_v12:.6g}, "
                 f"periodicity residual={report.periodicity_residual:.3g}")
    if raise_on_failure and not report.passed:
        raise TwistViolationError(
            f"twist condition fails at {report.worst_point}: -V12={report.min_neg_v12:.6g} "
            f"< delta={pot.twist_delta}",
            worst_point=report.worst_point, value=report.min_neg_v12)
    return report


def config_distance(a: ChainState, b: ChainState, window: int = 32, decay: int = 8) -> float:
    """
    Quotient distance min_r max_{|j|<=W} exp(-|j|/n0) |a_j - b_j - r| over
    integer shifts r.
    """
    if window < 0 or decay < 1:
        raise PreconditionError("window must be >= 0 and decay >= 1")
    j = np.arange(-window, window + 1)
    weights = np.exp(-np.abs(j) / decay)
    diff = a.at(j) - b.at(j)
    d0 = diff[window]

    def cost(r: int) -> float:
        return float(np.max(weights * np.abs(diff - r)))

    r0 = int(round(d0))
    best = cost(r0)
    reach = int(math.ceil(best)) + 1
    for r in range(r0 - reach, r0 + reach + 1):
        best = min(best, cost(r))
    return best
