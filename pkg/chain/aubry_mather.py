"""
Rotationally ordered configurations and ordered invariant measures for
rational rotation numbers, the cylinder projection pi(u) = (u_0, u_1 - u_0),
and the injectivity / characteristic-map diagnostics built on it.
"""
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Generator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConstructionError, PreconditionError
from .integrator import DEFAULT_DT, Trajectory, integrate, stroboscopic_map
from .measures import Ensemble, krylov_bogolyubov
from .model import ChainState, Forcing, Potential, config_distance, translate
from .parallel import ordered_map
from .sliding import Verdict, classify_asymptotics
from .zeroset import SingularZero, ZeroProfile, classify_zero, sign_vector

logger = logging.getLogger(__name__)

TOL_WIDTH = 1e-8
TOL_ORDER = 1e-9
EPS_C = 1e-4
EPS_PI = 1e-6
Q_MAX = 128


def rotation_number(state: ChainState) -> Fraction:
    """Exactly M/N."""
    return Fraction(state.M, state.N)


def empirical_rotation_number(state: ChainState, i: int, j: int) -> float:
    """(u_j - u_i)/(j - i) on the extended lattice."""
    if i == j:
        raise PreconditionError("need distinct sites")
    ui, uj = state.at([i, j])
    return float((uj - ui) / (j - i))


# ============================================================================
# Continued fractions
# ============================================================================

def continued_fraction_coeffs(x: float, eps: float = 1e-12) -> Generator[int, None, None]:
    """Euclidean algorithm on a real number."""
    while True:
        n, rem = divmod(x, 1.0)
        yield int(n)
        if rem < eps:
            break
        x = 1.0 / rem


def convergents(x: float, q_max: int = Q_MAX) -> List[Fraction]:
    """Continued-fraction convergents p/q of x with q <= q_max."""
    if q_max < 1:
        raise PreconditionError(f"q_max must be >= 1, got {q_max}")
    out = []
    p_prev, q_prev, p, q = 0, 1, 1, 0
    for a in continued_fraction_coeffs(float(x)):
        p_prev, q_prev, p, q = p, q, a * p + p_prev, a * q + q_prev
        if q > q_max:
            break
        out.append(Fraction(p, q))
        if abs(p / q - x) < 1e-15:
            break
    return out


# ============================================================================
# Orderedness
# ============================================================================

@dataclass(frozen=True)
class OrderednessReport:
    is_ordered: bool
    rho: Fraction
    width: float
    worst_pair: Optional[Tuple[int, int]] = None
    violation: float = 0.0
    n_checked: int = 0

    def summary(self) -> dict:
        return {
            "is_ordered": self.is_ordered,
            "rho": f"{self.rho.numerator}/{self.rho.denominator}",
            "width": self.width,
            "worst_pair": list(self.worst_pair) if self.worst_pair else None,
            "violation": self.violation,
            "n_checked": self.n_checked,
        }


def hull_width(state: ChainState) -> float:
    """max_j (u_j - j rho) - min_j (u_j - j rho) over one period."""
    h = state.u - np.arange(state.N) * state.rho
    return float(np.max(h) - np.min(h))


def ordered_check(state: ChainState, P: Optional[int] = None, tol: float = TOL_ORDER) -> OrderednessReport:
    """
    Check that every translate T_{p,q} u with |p| <= P is comparable with u.

    Only |q + p rho| <= width + 1 can give an incomparable pair, since
    (T_{p,q}u)_i - u_i = p rho + q + h_{i+p} - h_i with |h_{i+p} - h_i| <= width.
    """
    P = state.N if P is None else int(P)
    if P < state.N:
        raise PreconditionError(f"range P={P} must be >= N={state.N}")
    rho = state.rho
    width = hull_width(state)
    worst, worst_val, checked = None, 0.0, 0
    idx = np.arange(state.N)
    for p in range(-P, P + 1):
        shifted = state.at(idx + p)
        centre = -p * rho
        for q in range(int(math.floor(centre - width - 1)), int(math.ceil(centre + width + 1)) + 1):
            if p == 0 and q == 0:
                continue
            d = shifted + q - state.u
            checked += 1
            lo, hi = float(np.min(d)), float(np.max(d))
            if lo < -tol and hi > tol:
                val = min(-lo, hi)
                if val > worst_val:
                    worst, worst_val = (p, q), val
    report = OrderednessReport(is_ordered=worst is None, rho=rotation_number(state), width=width,
                               worst_pair=worst, violation=worst_val, n_checked=checked)
    if not report.is_ordered:
        logger.debug(f"Not ordered: T_{worst} incomparable by {worst_val:.3g}")
    return report


def ordered_along(traj: Trajectory, P: Optional[int] = None, tol: float = TOL_ORDER) -> List[float]:
    """Sample times at which the trajectory is not rotationally ordered."""
    return [float(t) for t, s in zip(traj.times, traj.states()) if not ordered_check(s, P, tol).is_ordered]


# ============================================================================
# Ordered invariant measures
# ============================================================================

@dataclass(frozen=True, eq=False)
class OrderedInvariant:
    ensemble: Ensemble
    report: OrderednessReport
    verdict: Verdict
    period: Optional[float] = None


def construct_ordered_invariant(p: int, q: int, pot: Potential, force: Forcing, n_avg: int = 64,
                                t_quad: int = 20, classify_settings: Optional[dict] = None,
                                n_transient: int = 50, dt: float = DEFAULT_DT,
                                tol_width: float = TOL_WIDTH) -> OrderedInvariant:
    """
    Ordered (phi, T)-invariant ensemble with rotation number p/q.

    Starts from u_i = (p/q) i, runs past the transient and time-averages:
    an equilibrium gives a single member, a sliding orbit is averaged over
    whole periods, AC forcing averages time-1 map iterates.

    Raises:
        PreconditionError: q <= 0
        ConstructionError: some member fails the orderedness check
    """
    if q <= 0:
        raise PreconditionError(f"denominator must be positive, got {q}")
    rho = Fraction(p, q)
    seed = ChainState.linear(rho.denominator, rho.numerator)
    period = None
    if force.is_dc:
        report = classify_asymptotics(seed, pot, force, **(classify_settings or {}))
        verdict = report.verdict
        start = report.final_state.replace(t=0.0)
        if verdict == Verdict.EQUILIBRIUM:
            ensemble = Ensemble.from_states([start], pot=pot, force=force)
        else:
            period = report.t0
            ensemble = krylov_bogolyubov(Ensemble.from_states([start], pot=pot, force=force),
                                         n_steps=n_avg, t_quad=t_quad, period=period, dt=dt)
    else:
        verdict = Verdict.UNDETERMINED
        start = seed
        for _ in range(n_transient):
            start = stroboscopic_map(start, pot, force, dt=dt)
        ensemble = krylov_bogolyubov(Ensemble.from_states([start], pot=pot, force=force),
                                     n_steps=n_avg, t_quad=t_quad, dt=dt)

    worst = None
    for member in ensemble.members:
        check = ordered_check(member)
        if not check.is_ordered or check.width > 1.0 + tol_width:
            raise ConstructionError(f"member at t={member.t:.6g} is not ordered "
                                    f"(pair {check.worst_pair}, width {check.width:.6g})",
                                    member=member, report=check)
        if worst is None or check.width > worst.width:
            worst = check
    logger.info(f"Ordered invariant ensemble at rho={rho}: {len(ensemble)} members, "
                f"{verdict.value}, width {worst.width:.3g}")
    return OrderedInvariant(ensemble=ensemble, report=worst, verdict=verdict, period=period)


def construct_ordered_sequence(target: float, pot: Potential, force: Forcing, q_max: int = Q_MAX,
                               **kwargs) -> List[Tuple[Fraction, OrderedInvariant]]:
    """Ordered invariant ensembles at each convergent of `target`."""
    out = []
    for frac in convergents(target, q_max):
        out.append((frac, construct_ordered_invariant(frac.numerator, frac.denominator, pot, force, **kwargs)))
    return out


# ============================================================================
# Cylinder projection
# ============================================================================

@dataclass(frozen=True)
class CylinderPoint:
    x: float
    p: float


def project_pi(state: ChainState) -> CylinderPoint:
    u0, u1 = state.at([0, 1])
    return CylinderPoint(x=float(u0 - math.floor(u0)), p=float(u1 - u0))


def cylinder_distance(a: CylinderPoint, b: CylinderPoint) -> float:
    """min_k |x - x' + k| + |p - p'|."""
    dx = abs(a.x - b.x) % 1.0
    return min(dx, 1.0 - dx) + abs(a.p - b.p)


@dataclass
class InjectivityReport:
    n_samples: int
    n_pairs: int
    min_pi_distance: float
    min_ratio: float
    offending_pair: Optional[Tuple[int, int]] = None
    singular_pairs: List[Tuple[int, int, SingularZero]] = field(default_factory=list)

    @property
    def violation(self) -> bool:
        return self.offending_pair is not None

    def summary(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "n_pairs": self.n_pairs,
            "min_pi_distance": self.min_pi_distance,
            "min_ratio": self.min_ratio,
            "offending_pair": list(self.offending_pair) if self.offending_pair else None,
            "singular_pairs": len(self.singular_pairs),
        }


def pair_singular_zeros(u: ChainState, v: ChainState) -> List[SingularZero]:
    """Singular zeros of u - v + r over one lcm period, for every integer r."""
    if u.M * v.N != v.M * u.N:
        return []
    L = math.lcm(u.N, v.N)
    diff = u.extended(L) - v.extended(L)
    found = []
    for r in range(int(math.floor(-np.max(diff))) - 1, int(math.ceil(-np.min(diff))) + 2):
        w = diff + r
        scale = max(1.0, float(np.max(np.abs(w))))
        signs = sign_vector(w, scale)
        if not np.any(signs):
            continue
        profile = ZeroProfile(values=w, periodic=True)
        covered = set()
        for j in np.nonzero(signs == 0)[0]:
            if int(j) in covered:
                continue
            z = classify_zero(profile, int(j), periodic=True)
            if isinstance(z, SingularZero):
                covered.update((z.start + i) % L for i in range(z.degree))
                found.append(z)
    return found


def with_translates(samples: Sequence[ChainState]) -> List[ChainState]:
    return [translate(s, p, 0) for s in samples for p in range(s.N)]


def injectivity_diagnostic(samples: Sequence[ChainState], eps_c: float = EPS_C, eps_pi: float = EPS_PI,
                           workers: int = 1) -> InjectivityReport:
    """
    Scan sample pairs that are distinct in config_distance (> eps_c) for
    pi-images closer than eps_pi, and for singular zeros of their difference.
    """
    samples = list(samples)
    images = [project_pi(s) for s in samples]
    pairs = [(i, j) for i in range(len(samples)) for j in range(i + 1, len(samples))]

    def scan(ij):
        i, j = ij
        dc = config_distance(samples[i], samples[j])
        if dc <= eps_c:
            return None
        return cylinder_distance(images[i], images[j]), dc, pair_singular_zeros(samples[i], samples[j])

    results = ordered_map(scan, pairs, workers)
    report = InjectivityReport(n_samples=len(samples), n_pairs=0, min_pi_distance=math.inf, min_ratio=math.inf)
    for (i, j), res in zip(pairs, results):
        if res is None:
            continue
        dpi, dc, singular = res
        report.n_pairs += 1
        report.min_ratio = min(report.min_ratio, dpi / dc)
        if dpi < report.min_pi_distance:
            report.min_pi_distance = dpi
            if dpi < eps_pi:
                report.offending_pair = (i, j)
        report.singular_pairs += [(i, j, z) for z in singular]
    if report.violation:
        logger.warning(f"Projection not injective on samples {report.offending_pair}: "
                       f"pi-distance {report.min_pi_distance:.3g}")
    if report.singular_pairs:
        logger.warning(f"{len(report.singular_pairs)} sample differences have singular zeros")
    return report


# ============================================================================
# Characteristic maps
# ============================================================================

@dataclass(frozen=True)
class CharacteristicRow:
    x: float
    p: float
    x_T: float
    p_T: float
    x_phi: float
    p_phi: float


def _flow(state: ChainState, pot: Potential, force: Forcing, dc_dt: float, dt: float) -> ChainState:
    if force.is_dc:
        return integrate(state, pot, force, (state.t, state.t + dc_dt), dt=dt, dt_out=dc_dt).final
    return stroboscopic_map(state, pot, force, dt=dt)


def characteristic_map_samples(samples: Sequence[ChainState], pot: Potential, force: Forcing,
                               dc_dt: float = 1.0, dt: float = DEFAULT_DT,
                               workers: int = 1) -> List[CharacteristicRow]:
    """Rows (pi(u), pi(Tu), pi(phi u)) with phi the time-dc_dt flow (DC) or the time-1 map (AC)."""
    def row(s: ChainState) -> CharacteristicRow:
        a, b, c = project_pi(s), project_pi(translate(s, 1, 0)), project_pi(_flow(s, pot, force, dc_dt, dt))
        return CharacteristicRow(x=a.x, p=a.p, x_T=b.x, p_T=b.p, x_phi=c.x, p_phi=c.p)

    return ordered_map(row, list(samples), workers)


def commutation_residual(samples: Sequence[ChainState], pot: Potential, force: Forcing,
                         dc_dt: float = 1.0, dt: float = DEFAULT_DT) -> float:
    """max over samples of the cylinder distance between pi(T phi u) and pi(phi T u)."""
    worst = 0.0
    for s in samples:
        a = project_pi(translate(_flow(s, pot, force, dc_dt, dt), 1, 0))
        b = project_pi(_flow(translate(s, 1, 0), pot, force, dc_dt, dt))
        worst = max(worst, cylinder_distance(a, b))
    return worst
