"""
Discrete zero-set calculus for solutions of the linear cooperative system:
zero counting, singular-zero classification, leading-order expansion at a
singular zero, and the exact integer event ledger (c_i, d_i) with the
zero-balance audit

    z_{m,n}(w(t)) - z_{m,n}(w(s)) = c_m - c_n - sum_{j=m}^{n-1} d_j.
"""
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import optimize

from .errors import AuditFailure, DegreeOverflowError, PreconditionError, TwistViolationError
from .integrator import LinearSystemCoeffs, Trajectory
from .model import ChainState, Forcing, Potential, rhs

logger = logging.getLogger(__name__)

TOL_ZERO = 1e-10
TOL_TANGENCY = 1e-8
TOL_EVENT = 1e-9
TOL_QUOTIENT = 1e-8

# (type, k parity) -> zero counts z_{0,k+1} (before, at, after) around a
# singular zero of degree k.
SINGULAR_ZERO_TABLE: Dict[Tuple[str, str], Tuple[str, str, str]] = {
    ("I", "even"): ("k+1", "k", "1"),
    ("I", "odd"): ("k", "k", "1"),
    ("II", "even"): ("k", "k", "0"),
    ("II", "odd"): ("k+1", "k", "0"),
}


def expected_counts(zero_type: str, k: int) -> Tuple[int, int, int]:
    """Numeric (before, at, after) counts for a singular zero of degree k."""
    parity = "even" if k % 2 == 0 else "odd"
    before, at, after = SINGULAR_ZERO_TABLE[(zero_type, parity)]
    return tuple(k + 1 if s == "k+1" else k if s == "k" else int(s) for s in (before, at, after))


# ============================================================================
# Profiles and counting
# ============================================================================

@dataclass(frozen=True, eq=False)
class ZeroProfile:
    """Values w_j on a window of sites 0..L-1, or one period when periodic."""
    values: np.ndarray
    periodic: bool = False
    scale: Optional[float] = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).reshape(-1)
        object.__setattr__(self, "values", values)
        if self.scale is None:
            object.__setattr__(self, "scale", max(1.0, float(np.max(np.abs(values))) if values.size else 1.0))

    @property
    def size(self) -> int:
        return int(self.values.shape[0])

    def index(self, j: int) -> int:
        if self.periodic:
            return j % self.size
        if not 0 <= j < self.size:
            raise PreconditionError(f"site {j} outside the profile window [0, {self.size})")
        return j

    def value(self, j: int) -> float:
        return float(self.values[self.index(j)])

    def signs(self, tol_zero: float = TOL_ZERO) -> np.ndarray:
        return sign_vector(self.values, self.scale, tol_zero)


def as_profile(w: Union[ZeroProfile, Sequence[float], np.ndarray], periodic: bool = False) -> ZeroProfile:
    if isinstance(w, ZeroProfile):
        return w
    return ZeroProfile(values=np.asarray(w, dtype=float), periodic=periodic)


def sign_vector(values: np.ndarray, scale: float, tol_zero: float = TOL_ZERO) -> np.ndarray:
    """Signs in {-1, 0, 1} with the |w| <= tol_zero * scale zero predicate."""
    s = np.sign(values).astype(np.int64)
    s[np.abs(values) <= tol_zero * scale] = 0
    return s


def cell_indicators(signs: np.ndarray, periodic: bool) -> np.ndarray:
    """z_j = 1 iff w_j = 0 or w_j w_{j+1} < 0; one fewer cell when not periodic."""
    nxt = np.roll(signs, -1) if periodic else signs[1:]
    cur = signs if periodic else signs[:-1]
    return ((cur == 0) | (cur * nxt == -1)).astype(np.int64)


def _count_cells(signs: np.ndarray, periodic: bool, m: int, n: int) -> int:
    z = cell_indicators(signs, periodic)
    if periodic:
        return int(sum(z[j % z.shape[0]] for j in range(m, n)))
    if m < 0 or n > z.shape[0]:
        raise PreconditionError(f"cells [{m}, {n}) need sites {m}..{n}; profile has {signs.shape[0]}")
    return int(np.sum(z[m:n]))


def count_zeros(w, m: int, n: int, periodic: bool = False, tol_zero: float = TOL_ZERO) -> int:
    """
    Zero-counting function z_{m,n}(w) = sum_{j=m}^{n-1} z_j(w).

    Args:
        w: profile values (a plain sequence is read as a window of sites 0..L-1)
        m, n: cell range with m < n
        periodic: read a plain sequence as one N-periodic period
    """
    if not m < n:
        raise PreconditionError(f"need m < n, got ({m}, {n})")
    profile = as_profile(w, periodic)
    return _count_cells(profile.signs(tol_zero), profile.periodic, m, n)


# ============================================================================
# Classification
# ============================================================================

class ZeroType(str, Enum):
    I = "I"
    II = "II"


@dataclass(frozen=True)
class RegularZero:
    site: int


@dataclass(frozen=True)
class SingularZero:
    start: int
    degree: int
    zero_type: ZeroType
    flank_left: float
    flank_right: float


def _zero_run(signs: np.ndarray, periodic: bool, j: int) -> Tuple[int, int]:
    """Maximal run [lo, hi] of zero sites containing j (indices may leave [0, L) when periodic)."""
    L = signs.shape[0]

    def sign_at(i):
        if periodic:
            return signs[i % L]
        if not 0 <= i < L:
            raise DegreeOverflowError(f"zero run around site {j} reaches the window edge")
        return signs[i]

    lo = hi = j
    while sign_at(lo - 1) == 0:
        lo -= 1
        if periodic and hi - lo + 1 >= L:
            raise DegreeOverflowError("zero run spans the whole period")
    while sign_at(hi + 1) == 0:
        hi += 1
        if periodic and hi - lo + 1 >= L:
            raise DegreeOverflowError("zero run spans the whole period")
    return lo, hi


def classify_zero(w, j: int, periodic: bool = False,
                  tol_zero: float = TOL_ZERO) -> Union[RegularZero, SingularZero]:
    """
    Classify the zero of w at site j.

    Raises:
        PreconditionError: w_j is not zero
        DegreeOverflowError: the zero run reaches the window edge or fills the period
    """
    profile = as_profile(w, periodic)
    signs = profile.signs(tol_zero)
    if signs[profile.index(j)] != 0:
        raise PreconditionError(f"w_{j} = {profile.value(j):.3g} is not a zero")
    lo, hi = _zero_run(signs, profile.periodic, j)
    left, right = profile.value(lo - 1), profile.value(hi + 1)
    k = hi - lo + 1
    opposite = left * right < 0
    if k == 1 and opposite:
        return RegularZero(site=j)
    return SingularZero(start=lo, degree=k, zero_type=ZeroType.I if opposite else ZeroType.II,
                        flank_left=left, flank_right=right)


# ============================================================================
# Linearisation
# ============================================================================

def _quotient(num: np.ndarray, den: np.ndarray, fallback: np.ndarray, scale: np.ndarray,
              tol: float) -> np.ndarray:
    close = np.abs(den) <= tol * scale
    safe = np.where(close, 1.0, den)
    return np.where(close, fallback, num / safe)


def _enforce_floor(a: np.ndarray, delta: float, label: str) -> np.ndarray:
    # rounding in a difference quotient of a linear function may land a few ulps below delta
    slack = 1e-9 * delta
    if np.min(a) < delta - slack:
        i = int(np.argmin(a))
        raise TwistViolationError(f"linearised coefficient {label}_{i}={a[i]:.6g} below twist floor {delta}",
                                  worst_point=(float(i), 0.0), value=float(a[i]))
    return np.maximum(a, delta)


def linearized_coeffs(u1: ChainState, u2: ChainState, pot: Potential,
                      tol_quotient: float = TOL_QUOTIENT) -> LinearSystemCoeffs:
    """
    Difference-quotient coefficients making w = u2 - u1 a solution of the
    linear system; coincident coordinates fall back to -V12, -V12, -V11 - V22.

    Raises:
        PreconditionError: the states have different (N, M)
        TwistViolationError: a_i or b_i fell below the twist floor
    """
    if (u1.N, u1.M) != (u2.N, u2.M):
        raise PreconditionError("linearised coefficients need states with equal (N, M)")
    return _pair_coeffs(u1.u, u2.u, u1.M, pot, tol_quotient)


def _pair_coeffs(x1: np.ndarray, x2: np.ndarray, M: int, pot: Potential,
                 tol_quotient: float = TOL_QUOTIENT) -> LinearSystemCoeffs:
    l1, r1 = np.roll(x1, 1), np.roll(x1, -1)
    l2, r2 = np.roll(x2, 1), np.roll(x2, -1)
    l1[0] -= M
    l2[0] -= M
    r1[-1] += M
    r2[-1] += M
    scale = np.maximum(1.0, np.maximum(np.abs(x1), np.abs(x2)))

    a = _quotient(pot.V2(l2, x1) - pot.V2(l1, x1), l1 - l2,
                  -pot.V12(l1, x1), np.roll(scale, 1), tol_quotient)
    b = _quotient(pot.V1(x1, r2) - pot.V1(x1, r1), r1 - r2,
                  -pot.V12(x1, r1), np.roll(scale, -1), tol_quotient)
    c = _quotient(pot.V2(l2, x2) - pot.V2(l2, x1) + pot.V1(x2, r2) - pot.V1(x1, r2), x1 - x2,
                  -pot.V11(x1, r2) - pot.V22(l2, x1), scale, tol_quotient)
    delta = pot.twist_delta
    return LinearSystemCoeffs(a=_enforce_floor(np.asarray(a, dtype=float), delta, "a"),
                              b=_enforce_floor(np.asarray(b, dtype=float), delta, "b"),
                              c=np.asarray(c, dtype=float), delta=delta)


def derivative_coeffs(state: ChainState, pot: Potential) -> LinearSystemCoeffs:
    """Coefficients of the system solved by w = du/dt in the DC case."""
    left, right = state.neighbours()
    u = state.u
    a = -pot.V12(left, u) * np.ones_like(u)
    b = -pot.V12(u, right) * np.ones_like(u)
    c = -pot.V22(left, u) - pot.V11(u, right)
    delta = pot.twist_delta
    return LinearSystemCoeffs(a=_enforce_floor(a, delta, "a"), b=_enforce_floor(b, delta, "b"),
                              c=np.asarray(c, dtype=float) * np.ones_like(u), delta=delta)


@dataclass(frozen=True, eq=False)
class PairCoefficients:
    """Carries two chain solutions along and linearises their difference."""
    u1: ChainState
    u2: ChainState
    pot: Potential
    force: Forcing
    tol_quotient: float = TOL_QUOTIENT

    def __post_init__(self):
        if (self.u1.N, self.u1.M) != (self.u2.N, self.u2.M):
            raise PreconditionError("pair coefficients need states with equal (N, M)")

    def base0(self) -> np.ndarray:
        return np.concatenate([self.u1.u, self.u2.u])

    def base_rhs(self, t: float, base: np.ndarray) -> np.ndarray:
        n = self.u1.N
        f = self.force(t)
        return np.concatenate([rhs(base[:n], self.u1.M, self.pot, f),
                               rhs(base[n:], self.u1.M, self.pot, f)])

    def coeffs(self, t: float, base: np.ndarray) -> LinearSystemCoeffs:
        n = self.u1.N
        return _pair_coeffs(base[:n], base[n:], self.u1.M, self.pot, self.tol_quotient)


@dataclass(frozen=True, eq=False)
class DerivativeCoefficients:
    """Carries one DC chain solution along and linearises along it."""
    state: ChainState
    pot: Potential
    force: Forcing

    def base0(self) -> np.ndarray:
        return np.array(self.state.u)

    def base_rhs(self, t: float, base: np.ndarray) -> np.ndarray:
        return rhs(base, self.state.M, self.pot, self.force(t))

    def coeffs(self, t: float, base: np.ndarray) -> LinearSystemCoeffs:
        return derivative_coeffs(self.state.replace(u=base), self.pot)


# ============================================================================
# Leading-order expansion at a singular zero
# ============================================================================

def _interior_coeffs(coeffs, k: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    if isinstance(coeffs, LinearSystemCoeffs):
        a, b, c = coeffs.a, coeffs.b, coeffs.c
    else:
        a, b, c = (np.asarray(x, dtype=float).reshape(-1) for x in coeffs)
    if a.shape[0] == k + 2:
        return a[1:k + 1], b[1:k + 1], c[1:k + 1]
    if a.shape[0] == k:
        return a, b, c
    raise PreconditionError(f"coefficients must cover the k={k} zero sites or the k+2 sites with flanks")


def leading_orders(k: int) -> np.ndarray:
    """j* = min(j, k+1-j) for j = 1..k."""
    j = np.arange(1, k + 1)
    return np.minimum(j, k + 1 - j)


def predict_leading_coeffs(flanks: Tuple[float, float], coeffs, k: int) -> np.ndarray:
    """
    Leading coefficients d_j of w_j(t) = d_j t^{j*} + o(t^{j*}) after a
    degree-k zero at t = 0, from the recurrence

        d_{j,l} = (a_j d_{j-1,l-1} + b_j d_{j+1,l-1} + c_j d_{j,l-1}) / l,
        d_{j,0} = w_j(0).

    Flank terms of order >= 1 cannot reach an interior site by order j*, so
    the flanks enter only through their values.

    Args:
        flanks: (w_0(0), w_{k+1}(0)), both nonzero
        coeffs: LinearSystemCoeffs or (a, b, c) arrays over sites 1..k or 0..k+1
        k: degree of the zero

    Returns:
        array d_1..d_k
    """
    if k <= 0:
        raise PreconditionError(f"degree must be positive, got {k}")
    w_left, w_right = float(flanks[0]), float(flanks[1])
    if w_left == 0.0 or w_right == 0.0:
        raise PreconditionError("flank values must be nonzero")
    a, b, c = _interior_coeffs(coeffs, k)
    orders = leading_orders(k)
    top = int(np.max(orders))
    d = np.zeros((k + 2, top + 1))
    d[0, 0] = w_left
    d[k + 1, 0] = w_right
    for l in range(1, top + 1):
        for j in range(1, k + 1):
            d[j, l] = (a[j - 1] * d[j - 1, l - 1] + b[j - 1] * d[j + 1, l - 1]
                       + c[j - 1] * d[j, l - 1]) / l
    return np.array([d[j, orders[j - 1]] for j in range(1, k + 1)])


def sign_lemma_violations(d: np.ndarray, flanks: Tuple[float, float]) -> List[int]:
    """
    Sites j (1-based) where sgn(d_j) differs from the sign of the nearer
    flank.

    Only j = (k+1)/2 of an odd-degree zero is reached by both flanks at its
    leading order, so its coefficient is the sum of the two flank terms. With
    flanks of one sign (Type II) the sum keeps that sign and the site is
    checked. With opposite flanks (Type I) the sum has no fixed sign (k=3,
    a=b=1, c=0 gives d_2 = 0) and the site is skipped. For even k every site
    has a strictly nearer flank and is always checked.
    """
    k = d.shape[0]
    out = []
    for j in range(1, k + 1):
        if 2 * j == k + 1:
            if flanks[0] * flanks[1] < 0:
                continue
            nearer = flanks[0]
        else:
            nearer = flanks[0] if j < k + 1 - j else flanks[1]
        if np.sign(d[j - 1]) != np.sign(nearer):
            out.append(j)
    return out


def leading_order_profile(flanks: Tuple[float, float], d: np.ndarray, times: np.ndarray) -> Trajectory:
    """
    Synthetic window trajectory (w_0, d_1 t^{1*}, ..., d_k t^{k*}, w_{k+1}) on
    the given times, with exact time derivatives as rates.
    """
    k = d.shape[0]
    orders = leading_orders(k)
    times = np.asarray(times, dtype=float)
    values = np.empty((times.shape[0], k + 2))
    rates = np.zeros_like(values)
    values[:, 0] = flanks[0]
    values[:, k + 1] = flanks[1]
    for j in range(1, k + 1):
        p = orders[j - 1]
        values[:, j] = d[j - 1] * times ** p
        rates[:, j] = p * d[j - 1] * times ** (p - 1)
    return Trajectory(times=times, values=values, rates=rates, N=k + 2, M=0, method="leading-order")


@dataclass(frozen=True, eq=False)
class LeadingOrderCheck:
    """Leading-order prediction at one zero run of a pair difference."""
    site: int
    degree: int
    zero_type: ZeroType
    d: np.ndarray
    sign_violations: List[int]
    counts: Tuple[int, int, int]

    @property
    def matches_table(self) -> bool:
        return self.counts == expected_counts(self.zero_type.value, self.degree)


def leading_order_check(u1: ChainState, u2: ChainState, pot: Potential, site: int, degree: int,
                        tol_quotient: float = TOL_QUOTIENT) -> LeadingOrderCheck:
    """
    Predict d_1..d_k for the zero run of w = u2 - u1 on sites site..site+k-1
    from the linearised pair coefficients, check their signs, and read
    z_{0,k+1} of the leading-order profile at t = -1, 0, 1.

    Raises:
        PreconditionError: the run does not fit in one period or a flank vanishes
    """
    k = int(degree)
    if not 1 <= k < u1.N:
        raise PreconditionError(f"degree {k} does not fit a period of {u1.N} sites")
    co = linearized_coeffs(u1, u2, pot, tol_quotient)
    idx = (int(site) - 1 + np.arange(k + 2)) % u1.N
    w = (u2.u - u1.u)[idx]
    flanks = (float(w[0]), float(w[-1]))
    d = predict_leading_coeffs(flanks, (co.a[idx], co.b[idx], co.c[idx]), k)
    profile = leading_order_profile(flanks, d, np.array([-1.0, 0.0, 1.0]))
    counts = tuple(count_zeros(row, 0, k + 1) for row in profile.values)
    zero_type = ZeroType.I if flanks[0] * flanks[1] < 0 else ZeroType.II
    return LeadingOrderCheck(site=int(site) % u1.N, degree=k, zero_type=zero_type, d=d,
                             sign_violations=sign_lemma_violations(d, flanks), counts=counts)


# ============================================================================
# Event tracking
# ============================================================================

class EventKind(str, Enum):
    CROSSING = "Crossing"
    DISAPPEARANCE = "Disappearance"
    NEAR_TANGENCY = "NearTangency"
    UNRESOLVED = "Unresolved"


@dataclass(frozen=True)
class ZeroEvent:
    """
    One change of the zero set. `count` is the number of zeros lost
    (before - after); `count_to_at` and `count_from_at` split it into the
    part lost on reaching the singular configuration and the part lost on
    leaving it.
    """
    kind: EventKind
    time: float
    site: int
    direction: int = 0
    count: int = 0
    count_to_at: int = 0
    count_from_at: int = 0
    degree: int = 1
    zero_type: Optional[ZeroType] = None

    @property
    def delta_z(self) -> int:
        return -self.count


@dataclass(eq=False)
class EventLedger:
    """Per-site crossing tallies c_i and disappearance tallies d_i."""
    n_sites: int
    periodic: bool
    c: np.ndarray = None
    d: np.ndarray = None
    t_start: float = 0.0
    t_end: float = 0.0
    scale_start: float = 1.0
    scale_end: float = 1.0
    window: Tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.c is None:
            self.c = np.zeros(self.n_sites, dtype=np.int64)
        if self.d is None:
            self.d = np.zeros(self.n_sites, dtype=np.int64)

    def c_at(self, i: int) -> int:
        if self.periodic:
            return int(self.c[i % self.n_sites])
        return int(self.c[i]) if 0 <= i < self.n_sites else 0

    def d_sum(self, m: int, n: int) -> int:
        if self.periodic:
            return int(sum(self.d[j % self.n_sites] for j in range(m, n)))
        return int(np.sum(self.d[max(m, 0):min(n, self.n_sites)]))

    @property
    def total_disappearances(self) -> int:
        return int(np.sum(self.d))

    def merge(self, later: "EventLedger") -> "EventLedger":
        """Concatenate with the ledger of the following time interval."""
        if later.n_sites != self.n_sites or later.periodic != self.periodic:
            raise PreconditionError("ledgers must cover the same sites")
        return EventLedger(n_sites=self.n_sites, periodic=self.periodic, c=self.c + later.c,
                           d=self.d + later.d, t_start=self.t_start, t_end=later.t_end,
                           scale_start=self.scale_start, scale_end=later.scale_end,
                           window=self.window)

    def shifted(self, p: int) -> "EventLedger":
        """Ledger of the profile relabelled by T^p (site i reads old site i + p)."""
        if not self.periodic:
            raise PreconditionError("only periodic ledgers can be relabelled")
        return EventLedger(n_sites=self.n_sites, periodic=True, c=np.roll(self.c, -p),
                           d=np.roll(self.d, -p), t_start=self.t_start, t_end=self.t_end,
                           scale_start=self.scale_start, scale_end=self.scale_end,
                           window=self.window)


def _cubic_coefficients(y0, y1, m0, m1, h):
    """Power-basis coefficients (A, B, C, D) in s = (t - t_a)/h of the Hermite cubic."""
    D = y0
    C = h * m0
    B = -3.0 * y0 - 2.0 * h * m0 + 3.0 * y1 - h * m1
    A = 2.0 * y0 + h * m0 - 2.0 * y1 + h * m1
    return A, B, C, D


def _critical_points(A: float, B: float, C: float) -> List[float]:
    """Roots of 3A s^2 + 2B s + C inside (0, 1)."""
    qa, qb, qc = 3.0 * A, 2.0 * B, C
    roots = []
    if abs(qa) < 1e-300:
        if abs(qb) > 1e-300:
            roots = [-qc / qb]
    else:
        disc = qb * qb - 4.0 * qa * qc
        if disc >= 0:
            sq = math.sqrt(disc)
            roots = [(-qb - sq) / (2.0 * qa), (-qb + sq) / (2.0 * qa)]
    return sorted(s for s in roots if 0.0 < s < 1.0)


def _site_transitions(ta: float, h: float, coeffs, sa: int, sb: int, scale: float,
                      tol_event: float, tol_tangency: float, site: int,
                      tangencies: List[ZeroEvent]) -> List[Tuple[float, int]]:
    """Sign transitions (time, new sign) of one site inside (ta, ta + h]."""
    A, B, C, D = coeffs

    def p(s):
        return ((A * s + B) * s + C) * s + D

    points = [0.0] + _critical_points(A, B, C) + [1.0]
    signs = [sa] + [int(np.sign(p(s))) for s in points[1:-1]] + [sb]
    out = []
    current = sa
    prev_s = 0.0
    for s, sig, idx in zip(points[1:], signs[1:], range(1, len(points))):
        interior = idx < len(points) - 1
        if interior and abs(p(s)) < tol_tangency * scale and sig == current:
            tangencies.append(ZeroEvent(kind=EventKind.NEAR_TANGENCY, time=ta + s * h, site=site,
                                        degree=1, zero_type=ZeroType.II))
        if sig == current or (interior and sig == 0):
            prev_s = s
            continue
        if current == 0:
            out.append((ta + prev_s * h, sig))
        elif sig == 0:
            out.append((ta + s * h, 0))
        else:
            root = optimize.bisect(p, prev_s, s, xtol=max(tol_event / h, 1e-15))
            out.append((ta + root * h, sig))
        current = sig
        prev_s = s
    return out


def _interior_dips(A: np.ndarray, B: np.ndarray, C: np.ndarray, D: np.ndarray,
                   tol: np.ndarray) -> np.ndarray:
    """Sites whose cubic has an interior extremum that is small or of the other sign."""
    qa, qb, qc = 3.0 * A, 2.0 * B, C
    out = np.zeros(A.shape, dtype=bool)
    with np.errstate(divide="ignore", invalid="ignore"):
        disc = qb * qb - 4.0 * qa * qc
        sq = np.sqrt(np.where(disc >= 0, disc, 0.0))
        quadratic = np.abs(qa) > 1e-300
        roots = [np.where(quadratic, (-qb - sq) / (2.0 * qa), -qc / qb),
                 np.where(quadratic, (-qb + sq) / (2.0 * qa), np.nan)]
        for s in roots:
            valid = (disc >= 0) & np.isfinite(s) & (s > 0.0) & (s < 1.0)
            p = ((A * s + B) * s + C) * s + D
            out |= valid & ((np.abs(p) < tol) | (np.sign(p) != np.sign(D)))
    return out


def _group_by_time(transitions: List[Tuple[float, int, int]], tol_event: float) -> List[List[Tuple[float, int, int]]]:
    # two bisections each accurate to tol_event may land up to twice that apart
    groups: List[List[Tuple[float, int, int]]] = []
    for item in sorted(transitions, key=lambda x: (x[0], x[1])):
        if groups and item[0] - groups[-1][-1][0] <= 4.0 * tol_event and \
                all(site != item[1] for _, site, _ in groups[-1]):
            groups[-1].append(item)
        else:
            groups.append([item])
    return groups


@dataclass
class _Tracker:
    n_sites: int
    periodic: bool
    signs: np.ndarray
    ledger: EventLedger
    events: List[ZeroEvent] = field(default_factory=list)

    def _sign(self, i: int) -> int:
        if self.periodic:
            return int(self.signs[i % self.n_sites])
        return int(self.signs[i]) if 0 <= i < self.n_sites else 0

    def _cells(self, signs: np.ndarray, lo: int, hi: int) -> np.ndarray:
        """Indicators of cells lo..hi (inclusive) for the given sign vector."""
        out = []
        for j in range(lo, hi + 1):
            if self.periodic:
                s0, s1 = signs[j % self.n_sites], signs[(j + 1) % self.n_sites]
            else:
                s0, s1 = signs[j], signs[j + 1]
            out.append(1 if s0 == 0 or s0 * s1 == -1 else 0)
        return np.array(out, dtype=np.int64)

    def _run(self, at_signs: np.ndarray, site: int) -> Tuple[int, int, bool]:
        """Zero run around `site` in the at-state and whether its flanks exist."""
        lo = hi = site
        L = self.n_sites

        def s(i):
            if self.periodic:
                return at_signs[i % L]
            return at_signs[i] if 0 <= i < L else None

        while s(lo - 1) == 0:
            lo -= 1
            if self.periodic and hi - lo + 1 >= L:
                return lo, hi, False
        while s(hi + 1) == 0:
            hi += 1
            if self.periodic and hi - lo + 1 >= L:
                return lo, hi, False
        return lo, hi, s(lo - 1) is not None and s(hi + 1) is not None

    def apply(self, time: float, group: List[Tuple[float, int, int]]):
        changes = {site: new for _, site, new in group}
        at_signs = self.signs.copy()
        after = self.signs.copy()
        for site, new in changes.items():
            at_signs[site] = 0
            after[site] = new
        handled = set()
        for site in sorted(changes):
            if site in handled:
                continue
            lo, hi, flanked = self._run(at_signs, site)
            run_sites = [i % self.n_sites if self.periodic else i for i in range(lo, hi + 1)]
            handled.update(s for s in run_sites if s in changes)
            self._apply_run(time, lo, hi, flanked, run_sites, changes, at_signs)
        self.signs = after

    def _apply_run(self, time, lo, hi, flanked, run_sites, changes, at_signs):
        k = hi - lo + 1
        before = self.signs.copy()
        after = self.signs.copy()
        for s in run_sites:
            if s in changes:
                after[s] = changes[s]
        # cells touching the run; clipped to the window when not periodic
        c_lo, c_hi = lo - 1, hi
        if not self.periodic:
            c_lo, c_hi = max(c_lo, 0), min(c_hi, self.n_sites - 2)
        z_before = self._cells(before, c_lo, c_hi)
        z_at = self._cells(at_signs, c_lo, c_hi)
        z_after = self._cells(after, c_lo, c_hi)
        lost_to_at = int(z_before.sum() - z_at.sum())
        lost_from_at = int(z_at.sum() - z_after.sum())

        left = self._sign(lo - 1) if flanked else 0
        right = self._sign(hi + 1) if flanked else 0
        zero_type = None
        if flanked:
            zero_type = ZeroType.I if left * right < 0 else ZeroType.II
        regular = flanked and k == 1 and zero_type == ZeroType.I

        d = {i: 0 for i in range(lo, hi + 1)}
        kind = EventKind.CROSSING if regular else EventKind.DISAPPEARANCE
        if not regular:
            before_run = [before[s] for s in run_sites]
            after_run = [after[s] for s in run_sites]
            resolved = flanked
            exp_before, exp_at, exp_after = expected_counts(zero_type.value, k) if flanked else (0, 0, 0)
            if resolved:
                if all(x != 0 for x in before_run):
                    resolved &= lost_to_at == exp_before - exp_at
                elif all(x == 0 for x in before_run):
                    resolved &= lost_to_at == 0
                else:
                    resolved = False
                if all(x != 0 for x in after_run):
                    resolved &= lost_from_at == exp_at - exp_after
                elif all(x == 0 for x in after_run):
                    resolved &= lost_from_at == 0
                else:
                    resolved = False
            if resolved:
                for i in _to_at_sites(zero_type, k)[:lost_to_at]:
                    d[lo + i - 1] += 1
                if lost_from_at:
                    for i in _from_at_sites(zero_type, k):
                        d[lo + i - 1] += 1
            else:
                kind = EventKind.UNRESOLVED
                d[lo + (k - 1) // 2] += lost_to_at + lost_from_at
                logger.warning(f"Unresolved zero event at t={time:.9g}, sites {lo}..{hi}: "
                               f"lost {lost_to_at}+{lost_from_at} zeros")

        # c_i from local balance on cells i..hi for each site i of the run
        right_before = np.cumsum(z_before[::-1])[::-1]
        right_after = np.cumsum(z_after[::-1])[::-1]
        d_tail = 0
        crossing_dir = 0
        for i in range(hi, lo - 1, -1):
            d_tail += d[i]
            idx = i - c_lo
            if not 0 <= idx < z_before.shape[0]:
                continue
            c_i = int(right_after[idx] - right_before[idx]) + d_tail
            if c_i:
                self._add(self.ledger.c, i, c_i)
                crossing_dir = c_i
        for i, value in d.items():
            if value:
                self._add(self.ledger.d, i, value)

        total = lost_to_at + lost_from_at
        if kind == EventKind.CROSSING:
            event = ZeroEvent(kind=kind, time=time, site=lo % self.n_sites if self.periodic else lo,
                              direction=int(np.sign(crossing_dir)), degree=1)
        else:
            event = ZeroEvent(kind=kind, time=time, site=lo % self.n_sites if self.periodic else lo,
                              count=total, count_to_at=lost_to_at, count_from_at=lost_from_at,
                              degree=k, zero_type=zero_type)
        self.events.append(event)

    def _add(self, arr: np.ndarray, i: int, value: int):
        if self.periodic:
            arr[i % self.n_sites] += value
        elif 0 <= i < self.n_sites:
            arr[i] += value


def _to_at_sites(zero_type: ZeroType, k: int) -> List[int]:
    """1-based run sites charged when zeros vanish on reaching the singular zero."""
    if zero_type == ZeroType.I and k % 2 == 0:
        return [1]
    if zero_type == ZeroType.II and k % 2 == 1:
        return [(k + 1) // 2]
    return []


def _from_at_sites(zero_type: ZeroType, k: int) -> List[int]:
    """1-based run sites charged when zeros vanish on leaving the singular zero."""
    sites = list(range(1, k + 1))
    if zero_type == ZeroType.I:
        skip = k // 2 if k % 2 == 0 else (k + 1) // 2
        sites.remove(skip)
    return sites


def track_zero_events(traj: Trajectory, window: Optional[Tuple[int, int]] = None,
                      periodic: bool = True, tol_zero: float = TOL_ZERO,
                      tol_event: float = TOL_EVENT,
                      tol_tangency: float = TOL_TANGENCY) -> Tuple[EventLedger, List[ZeroEvent]]:
    """
    Build the (c, d) ledger and the event list of a sampled profile trajectory.

    Every sign change of a site between samples is localised by bisection on
    the cubic Hermite interpolant; changes within tol_event of each other
    form one event. Crossings move a zero across a site; everything else is
    a disappearance charged site by site to the zero run.

    Args:
        traj: sampled profiles with rates (periodic with winding 0, or a window)
        window: (m, n) cell range recorded on the ledger for reporting
        periodic: treat each sample as one period of an N-periodic profile

    Returns:
        (ledger, events) with events ordered by (time, site)
    """
    values, rates, times = traj.values, traj.rates, traj.times
    n_sites = values.shape[1]
    if window is None:
        window = (0, n_sites if periodic else n_sites - 1)
    scales = np.maximum(1.0, np.max(np.abs(values), axis=1))
    ledger = EventLedger(n_sites=n_sites, periodic=periodic, t_start=float(times[0]),
                         t_end=float(times[-1]), scale_start=float(scales[0]),
                         scale_end=float(scales[-1]), window=tuple(window))
    tracker = _Tracker(n_sites=n_sites, periodic=periodic,
                       signs=sign_vector(values[0], scales[0], tol_zero), ledger=ledger)
    tangencies: List[ZeroEvent] = []

    for k in range(len(times) - 1):
        ta, tb = float(times[k]), float(times[k + 1])
        h = tb - ta
        sa = tracker.signs
        sb = sign_vector(values[k + 1], scales[k + 1], tol_zero)
        A, B, C, D = _cubic_coefficients(values[k], values[k + 1], rates[k], rates[k + 1], h)
        watch = np.nonzero((sa != sb) | _interior_dips(A, B, C, D, tol_tangency * scales[k]))[0]
        transitions = []
        for j in watch:
            for t_event, new_sign in _site_transitions(ta, h, (A[j], B[j], C[j], D[j]), int(sa[j]), int(sb[j]),
                                                       float(scales[k]), tol_event, tol_tangency, int(j),
                                                       tangencies):
                transitions.append((t_event, int(j), new_sign))
        if not transitions:
            continue
        for group in _group_by_time(transitions, tol_event):
            tracker.apply(group[0][0], group)
        if not np.array_equal(tracker.signs, sb):
            mismatch = np.nonzero(tracker.signs != sb)[0]
            logger.warning(f"Sign bookkeeping drifted at t={tb:.9g} on sites {mismatch.tolist()}; resyncing")
            tracker.apply(tb, [(tb, int(j), int(sb[j])) for j in mismatch])

    events = sorted(tracker.events + tangencies, key=lambda e: (e.time, e.site))
    n_dis = sum(1 for e in events if e.kind == EventKind.DISAPPEARANCE and e.count)
    logger.debug(f"Tracked {len(events)} zero events ({n_dis} disappearances) over "
                 f"[{times[0]:.6g}, {times[-1]:.6g}]")
    return ledger, events


def zero_balance_audit(ledger: EventLedger, w_start, w_end, m: int, n: int,
                       tol_zero: float = TOL_ZERO, raise_on_failure: bool = True) -> int:
    """
    Residual z_{m,n}(w(t)) - z_{m,n}(w(s)) - c_m + c_n + sum_{j=m}^{n-1} d_j.

    Raises:
        AuditFailure: the residual is nonzero and raise_on_failure is set
    """
    start = ZeroProfile(values=w_start, periodic=ledger.periodic, scale=ledger.scale_start)
    end = ZeroProfile(values=w_end, periodic=ledger.periodic, scale=ledger.scale_end)
    z_s = _count_cells(start.signs(tol_zero), ledger.periodic, m, n)
    z_t = _count_cells(end.signs(tol_zero), ledger.periodic, m, n)
    residual = z_t - z_s - ledger.c_at(m) + ledger.c_at(n) + ledger.d_sum(m, n)
    if residual != 0 and raise_on_failure:
        raise AuditFailure(f"zero balance fails on cells [{m}, {n}): residual {residual}", residual=residual)
    return int(residual)


def zero_count_series(traj: Trajectory, m: int, n: int, periodic: bool = True,
                      tol_zero: float = TOL_ZERO,
                      tol_tangency: float = TOL_TANGENCY) -> np.ma.MaskedArray:
    """
    z_{m,n} at every sample of a profile trajectory.

    Samples where w_m or w_n reads as zero, or where the whole window lies
    within tol_tangency, are masked: their count follows the zero predicate
    rather than the sign structure, and the count is only monotone between
    samples with nonvanishing window boundary values.
    """
    if not m < n:
        raise PreconditionError(f"need m < n, got ({m}, {n})")
    n_samples = len(traj.times)
    counts = np.zeros(n_samples, dtype=np.int64)
    masked = np.zeros(n_samples, dtype=bool)
    for k, row in enumerate(traj.values):
        profile = ZeroProfile(values=row, periodic=periodic)
        signs = profile.signs(tol_zero)
        counts[k] = _count_cells(signs, periodic, m, n)
        window = np.abs([profile.value(j) for j in range(m, n + 1)])
        masked[k] = (signs[profile.index(m)] == 0 or signs[profile.index(n)] == 0
                     or float(np.max(window)) <= tol_tangency * profile.scale)
    if np.any(masked):
        logger.debug(f"{int(np.sum(masked))} of {n_samples} samples masked on cells [{m}, {n})")
    return np.ma.MaskedArray(counts, mask=masked)
