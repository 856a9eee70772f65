"""
Translation-invariant measures represented by weighted ensembles of periodic
configurations, the intersection functionals Z(mu1, mu2), Z(mu), Z~(mu), and
Krylov-Bogolyubov averaging.

An ensemble member u with weight w stands for the T-orbit measure
(w/N) sum_p delta_{T^p u} on the R-quotient; the translation average is taken
inside each functional and never stored.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import PreconditionError, UnsupportedModeError
from .integrator import DEFAULT_DT, DEFAULT_DT_OUT, Trajectory, integrate
from .model import ChainState, Forcing, Potential, energy_per_site, rhs, spacing_class
from .parallel import ordered_map
from .zeroset import (TOL_ZERO, EventKind, ZeroEvent, cell_indicators, sign_vector,
                      track_zero_events, zero_balance_audit)

logger = logging.getLogger(__name__)

TOL_Z = 1e-9
PAIRING_CUTOFF = 64
MONTE_CARLO_PAIRS = 4096


@dataclass(frozen=True, eq=False)
class Ensemble:
    """Weighted members (canonicalised, weights normalised) plus the dynamics they live in."""
    members: Tuple[ChainState, ...]
    weights: np.ndarray
    pot: Optional[Potential] = None
    force: Optional[Forcing] = None

    def __post_init__(self):
        members = tuple(m.canonical() for m in self.members)
        if not members:
            raise PreconditionError("an ensemble needs at least one member")
        weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if weights.shape[0] != len(members):
            raise PreconditionError(f"{len(members)} members but {weights.shape[0]} weights")
        if np.any(weights <= 0) or not np.all(np.isfinite(weights)):
            raise PreconditionError("ensemble weights must be positive and finite")
        object.__setattr__(self, "members", members)
        object.__setattr__(self, "weights", weights / np.sum(weights))

    @classmethod
    def from_states(cls, states: Sequence[ChainState], weights: Optional[Sequence[float]] = None,
                    pot: Optional[Potential] = None, force: Optional[Forcing] = None) -> "Ensemble":
        states = list(states)
        w = np.ones(len(states)) if weights is None else np.asarray(weights, dtype=float)
        return cls(members=tuple(states), weights=w, pot=pot, force=force)

    def __len__(self) -> int:
        return len(self.members)

    def __iter__(self) -> Iterator[Tuple[ChainState, float]]:
        return iter(zip(self.members, self.weights))

    @property
    def period(self) -> int:
        """Common lcm spatial period of all members."""
        return math.lcm(*(m.N for m in self.members))

    @property
    def rotation_numbers(self) -> List[float]:
        return sorted({m.rho for m in self.members})

    def with_dynamics(self, pot: Potential, force: Forcing) -> "Ensemble":
        return Ensemble(members=self.members, weights=self.weights, pot=pot, force=force)

    def replace_members(self, members: Sequence[ChainState]) -> "Ensemble":
        return Ensemble(members=tuple(members), weights=self.weights, pot=self.pot, force=self.force)

    def mean_energy(self) -> float:
        self._require_dynamics()
        return float(sum(w * energy_per_site(m, self.pot) for m, w in self))

    def to_dict(self) -> Dict:
        return {
            "members": [{"N": m.N, "M": m.M, "t": m.t, "u": m.u.tolist()} for m in self.members],
            "weights": self.weights.tolist(),
        }

    @classmethod
    def from_dict(cls, payload: Dict, pot: Optional[Potential] = None,
                  force: Optional[Forcing] = None) -> "Ensemble":
        states = [ChainState(N=m["N"], M=m["M"], u=np.asarray(m["u"]), t=m.get("t", 0.0))
                  for m in payload["members"]]
        return cls.from_states(states, payload.get("weights"), pot=pot, force=force)

    def _require_dynamics(self):
        if self.pot is None or self.force is None:
            raise PreconditionError("ensemble has no potential/forcing attached")


# ============================================================================
# Intersection counting
# ============================================================================

def _identical_shift(diff: np.ndarray, tol_zero: float = TOL_ZERO) -> Optional[int]:
    """Integer r with diff + r identically zero, if any."""
    r0 = -int(round(float(diff[0])))
    if np.all(np.abs(diff + r0) <= tol_zero * max(1.0, float(np.max(np.abs(diff))))):
        return r0
    return None


def _shift_range(diff: np.ndarray) -> np.ndarray:
    return np.arange(int(math.floor(-np.max(diff))) - 1, int(math.ceil(-np.min(diff))) + 2)


def _cell_counts(diff: np.ndarray, skip: Optional[int], tol_zero: float = TOL_ZERO) -> np.ndarray:
    """Per-cell counts sum_{r != skip} z_i(diff + r) for cells 0..len(diff)-2."""
    shifts = _shift_range(diff)
    if skip is not None:
        shifts = shifts[shifts != skip]
    if shifts.size == 0:
        return np.zeros(diff.shape[0] - 1, dtype=np.int64)
    W = diff[None, :] + shifts[:, None]
    scale = np.maximum(1.0, np.max(np.abs(W), axis=1, keepdims=True))
    signs = np.sign(W).astype(np.int64)
    signs[np.abs(W) <= tol_zero * scale] = 0
    cells = (signs[:, :-1] == 0) | (signs[:, :-1] * signs[:, 1:] == -1)
    return np.sum(cells, axis=0).astype(np.int64)


def _check_bound(counts: np.ndarray, u: ChainState, v: ChainState):
    n = max(spacing_class(u), spacing_class(v))
    if counts.size and int(np.max(counts)) > 2 * n + 1:
        raise PreconditionError(f"intersection count {int(np.max(counts))} exceeds 2n+1={2 * n + 1}")


def pair_intersections(u: ChainState, v: ChainState, i: int) -> int:
    """
    z_i(u, v) = sum_r z_i(u - v + r), skipping the shift that makes u - v + r
    identically zero.
    """
    sites = np.array([i, i + 1])
    diff = u.at(sites) - v.at(sites)
    counts = _cell_counts(diff, _skipped_shift(u, v))
    _check_bound(counts, u, v)
    return int(counts[0])


def _skipped_shift(u: ChainState, v: ChainState) -> Optional[int]:
    if u.M * v.N != v.M * u.N:
        return None
    L = math.lcm(u.N, v.N)
    return _identical_shift(u.extended(L) - v.extended(L))


def pair_density(u: ChainState, v: ChainState) -> float:
    """(1/L) sum_{i<L} z_i(u, v) over one lcm period."""
    L = math.lcm(u.N, v.N)
    diff = u.extended(L + 1) - v.extended(L + 1)
    counts = _cell_counts(diff, _skipped_shift(u, v))
    _check_bound(counts, u, v)
    return float(np.sum(counts)) / L


def orbit_pair_density(u: ChainState, v: ChainState) -> float:
    """Intersection density of the T-orbits of u and v: the mean of pair_density(T^s u, v)."""
    total = 0.0
    for s in range(u.N):
        shifted = ChainState(N=u.N, M=u.M, u=u.at(np.arange(u.N) + s), t=u.t)
        total += pair_density(shifted, v)
    return total / u.N


@dataclass(frozen=True)
class ZEstimate:
    value: float
    stat_err: float = 0.0
    n_pairs: int = 0
    exact: bool = True


def Z_estimate(mu1: Ensemble, mu2: Ensemble, workers: int = 1,
               pairing_cutoff: Optional[int] = PAIRING_CUTOFF,
               n_pairs: int = MONTE_CARLO_PAIRS, seed: int = 0) -> ZEstimate:
    """
    Z(mu1, mu2) with its Monte-Carlo error bar.

    Ensembles larger than pairing_cutoff are paired by a seeded weighted
    subsample of n_pairs member pairs; pairing_cutoff=None always sums exactly.
    """
    large = pairing_cutoff is not None and max(len(mu1), len(mu2)) > pairing_cutoff
    if not large:
        pairs = [(i, j) for i in range(len(mu1)) for j in range(len(mu2))]
        values = ordered_map(lambda ij: orbit_pair_density(mu1.members[ij[0]], mu2.members[ij[1]]),
                             pairs, workers)
        value = float(sum(mu1.weights[i] * mu2.weights[j] * z for (i, j), z in zip(pairs, values)))
        return ZEstimate(value=value, n_pairs=len(pairs))

    rng = np.random.default_rng(seed)
    first = rng.choice(len(mu1), size=n_pairs, p=mu1.weights)
    second = rng.choice(len(mu2), size=n_pairs, p=mu2.weights)
    values = np.array(ordered_map(lambda ij: orbit_pair_density(mu1.members[ij[0]], mu2.members[ij[1]]),
                                  list(zip(first.tolist(), second.tolist())), workers))
    err = float(np.std(values, ddof=1) / math.sqrt(n_pairs)) if n_pairs > 1 else 0.0
    logger.debug(f"Z by subsampling {n_pairs} pairs: {np.mean(values):.6g} +/- {err:.2g}")
    return ZEstimate(value=float(np.mean(values)), stat_err=err, n_pairs=n_pairs, exact=False)


def Z_functional(mu1: Ensemble, mu2: Ensemble, workers: int = 1, **kwargs) -> float:
    """Expected number of intersections per cell between independent draws from mu1 and mu2."""
    return Z_estimate(mu1, mu2, workers=workers, **kwargs).value


def velocity_zero_density(state: ChainState, pot: Potential, force_value: float,
                          tol_zero: float = TOL_ZERO) -> float:
    vel = rhs(state.u, state.M, pot, force_value)
    scale = max(1.0, float(np.max(np.abs(vel))))
    signs = sign_vector(vel, scale, tol_zero)
    if not np.any(signs):
        return 0.0
    return float(np.mean(cell_indicators(signs, periodic=True)))


def Z_derivative_functional(mu: Ensemble) -> float:
    """
    Z~(mu): translation-averaged zero indicator of the velocity profile, in [0, 1].

    Raises:
        UnsupportedModeError: the ensemble is AC-driven
    """
    mu._require_dynamics()
    if not mu.force.is_dc:
        raise UnsupportedModeError("Z~ is defined for DC forcing only")
    f = mu.force.dc_value
    return float(sum(w * velocity_zero_density(m, mu.pot, f) for m, w in mu))


# ============================================================================
# Evolution and averaging
# ============================================================================

def _member_trajectories(mu: Ensemble, horizon: float, dt: float, dt_out: float,
                         workers: int) -> List[Trajectory]:
    mu._require_dynamics()

    def run(m: ChainState) -> Trajectory:
        return integrate(m, mu.pot, mu.force, (m.t, m.t + horizon), dt=dt, dt_out=dt_out)

    return ordered_map(run, mu.members, workers)


def evolve_ensemble(mu: Ensemble, horizon: float, dt: float = DEFAULT_DT,
                    dt_out: Optional[float] = None, workers: int = 1) -> Ensemble:
    """Integrate every member for `horizon`; weights are unchanged."""
    if horizon < 0:
        raise PreconditionError(f"horizon must be >= 0, got {horizon}")
    if horizon == 0:
        return mu
    trajs = _member_trajectories(mu, horizon, dt, dt_out or horizon, workers)
    return mu.replace_members([tr.final for tr in trajs])


@dataclass(frozen=True, eq=False)
class ZSeries:
    """Z(mu1(t), mu2(t)), Z(mu(t)) and Z~(mu(t)) on the output grid."""
    t: np.ndarray
    Z: np.ndarray
    Zself: np.ndarray
    Ztilde: np.ndarray
    stat_err: np.ndarray

    def max_increase(self) -> float:
        return float(np.max(np.diff(self.Z), initial=0.0))


def intersection_series(mu: Ensemble, horizon: float, mu2: Optional[Ensemble] = None,
                        dt: float = DEFAULT_DT, dt_out: float = DEFAULT_DT_OUT,
                        workers: int = 1, pairing_cutoff: Optional[int] = PAIRING_CUTOFF,
                        n_pairs: int = MONTE_CARLO_PAIRS, seed: int = 0) -> ZSeries:
    """Evolve the ensemble(s) and evaluate the intersection functionals at each sample."""
    trajs = _member_trajectories(mu, horizon, dt, dt_out, workers)
    trajs2 = _member_trajectories(mu2, horizon, dt, dt_out, workers) if mu2 is not None else None
    times = trajs[0].times
    n = len(times)
    Z, Zself, Ztil, err = (np.zeros(n) for _ in range(4))
    for k in range(n):
        now = mu.replace_members([tr.state(k) for tr in trajs])
        est_self = Z_estimate(now, now, workers=workers, pairing_cutoff=pairing_cutoff, n_pairs=n_pairs,
                              seed=seed)
        Zself[k] = est_self.value
        if trajs2 is not None:
            other = mu2.replace_members([tr.state(k) for tr in trajs2])
            est = Z_estimate(now, other, workers=workers, pairing_cutoff=pairing_cutoff, n_pairs=n_pairs,
                             seed=seed)
        else:
            est = est_self
        Z[k], err[k] = est.value, est.stat_err
        Ztil[k] = Z_derivative_functional(now) if mu.force.is_dc else np.nan
    logger.info(f"Intersection series over {horizon:g}: Z {Z[0]:.6g} -> {Z[-1]:.6g}")
    return ZSeries(t=times - times[0], Z=Z, Zself=Zself, Ztilde=Ztil, stat_err=err)


def _trapezoid_weights(n: int) -> np.ndarray:
    w = np.ones(n)
    if n > 1:
        w[0] = w[-1] = 0.5
    return w / np.sum(w)


def _drop_repeats(states: List[ChainState], weights: List[float], tol: float = 1e-12):
    """Merge consecutive samples that did not move."""
    out_s, out_w = [], []
    for s, w in zip(states, weights):
        if out_s and out_s[-1].N == s.N and np.max(np.abs(out_s[-1].u - s.u)) <= tol:
            out_w[-1] += w
        else:
            out_s.append(s)
            out_w.append(w)
    return out_s, out_w


def krylov_bogolyubov(seed: Ensemble, n_steps: int, t_quad: int = 10,
                      period: Optional[float] = None, dt: float = DEFAULT_DT,
                      workers: int = 1) -> Ensemble:
    """
    Time-averaged ensemble approximating a (phi, T)-invariant measure.

    DC: trapezoid average of phi^t over [0, n_steps] sampled t_quad times per
    unit time; with a known period the window is snapped to whole periods
    and sampled uniformly. AC: equal-weight average of the iterates
    phi^1..phi^{n_steps} of the time-1 map.
    """
    if n_steps < 1:
        raise PreconditionError(f"n_steps must be >= 1, got {n_steps}")
    if t_quad < 1:
        raise PreconditionError(f"t_quad must be >= 1, got {t_quad}")
    seed._require_dynamics()
    states: List[ChainState] = []
    weights: List[float] = []

    if not seed.force.is_dc:
        trajs = _member_trajectories(seed, float(n_steps), dt, 1.0, workers)
        for tr, w in zip(trajs, seed.weights):
            s, ws = _drop_repeats([tr.state(k) for k in range(1, len(tr))], [w / n_steps] * n_steps)
            states += s
            weights += ws
    elif period is not None and period > 0:
        n_periods = max(1, int(round(n_steps / period)))
        per_period = max(2, int(math.ceil(period * t_quad)))
        step = period / per_period
        horizon = n_periods * period
        trajs = _member_trajectories(seed, horizon, dt, step, workers)
        for tr, w in zip(trajs, seed.weights):
            # uniform rule on the periodic orbit, right endpoint excluded
            n = len(tr) - 1
            s, ws = _drop_repeats([tr.state(k) for k in range(n)], [w / n] * n)
            states += s
            weights += ws
    else:
        trajs = _member_trajectories(seed, float(n_steps), dt, 1.0 / t_quad, workers)
        for tr, w in zip(trajs, seed.weights):
            tw = _trapezoid_weights(len(tr))
            s, ws = _drop_repeats(tr.states(), list(w * tw))
            states += s
            weights += ws

    logger.info(f"Krylov-Bogolyubov average: {len(seed)} seed members -> {len(states)} members")
    return Ensemble.from_states(states, weights, pot=seed.pot, force=seed.force)


@dataclass(frozen=True)
class DefectReport:
    tau: float
    z_defect: float
    energy_defect: float

    @property
    def value(self) -> float:
        return max(self.z_defect, self.energy_defect)


def invariance_defect(nu: Ensemble, tau: float, dt: float = DEFAULT_DT, workers: int = 1,
                      pairing_cutoff: Optional[int] = None) -> DefectReport:
    """Time-shift defects |Z(nu(tau)) - Z(nu)| and |E(nu(tau)) - E(nu)|."""
    later = evolve_ensemble(nu, tau, dt=dt, workers=workers)
    z0 = Z_functional(nu, nu, workers=workers, pairing_cutoff=pairing_cutoff)
    z1 = Z_functional(later, later, workers=workers, pairing_cutoff=pairing_cutoff)
    report = DefectReport(tau=tau, z_defect=abs(z1 - z0),
                          energy_defect=abs(later.mean_energy() - nu.mean_energy()))
    logger.debug(f"Invariance defect at tau={tau:g}: Z {report.z_defect:.3g}, "
                 f"energy {report.energy_defect:.3g}")
    return report


# ============================================================================
# Dissipation accounting
# ============================================================================

@dataclass
class DissipationReport:
    """Decrease of Z compared with the disappearance mass of all pair ledgers."""
    z_start: float
    z_end: float
    mass: float
    disappearances: List[Tuple[int, int, ZeroEvent]] = field(default_factory=list)

    @property
    def residual(self) -> float:
        return abs((self.z_start - self.z_end) - self.mass)


def _difference_profiles(tr_u: Trajectory, tr_v: Trajectory, s: int) -> Tuple[np.ndarray, np.ndarray]:
    """T^s u(t) - v(t) and its rate on one lcm period, per sample."""
    L = math.lcm(tr_u.N, tr_v.N)
    idx_u = np.arange(L) + s
    idx_v = np.arange(L)
    qu, ru = np.divmod(idx_u, tr_u.N)
    qv, rv = np.divmod(idx_v, tr_v.N)
    values = (tr_u.values[:, ru] + tr_u.M * qu) - (tr_v.values[:, rv] + tr_v.M * qv)
    rates = tr_u.rates[:, ru] - tr_v.rates[:, rv]
    return values, rates


def dissipation_mass(mu1: Ensemble, mu2: Ensemble, horizon: float, dt: float = DEFAULT_DT,
                     dt_out: float = DEFAULT_DT_OUT, workers: int = 1) -> DissipationReport:
    """
    Translation-averaged disappearance mass from the zero ledgers of every
    member pair, relative translate and integer shift over [0, horizon].

    Raises:
        PreconditionError: two members have different rotation numbers
        AuditFailure: a pair ledger does not balance
    """
    trajs1 = _member_trajectories(mu1, horizon, dt, dt_out, workers)
    trajs2 = _member_trajectories(mu2, horizon, dt, dt_out, workers)
    pairs = [(i, j) for i in range(len(mu1)) for j in range(len(mu2))]

    def pair_mass(ij):
        i, j = ij
        tu, tv = trajs1[i], trajs2[j]
        if tu.M * tv.N != tv.M * tu.N:
            raise PreconditionError("dissipation accounting needs equal rotation numbers")
        L = math.lcm(tu.N, tv.N)
        total = 0
        found = []
        for s in range(tu.N):
            values, rates = _difference_profiles(tu, tv, s)
            for r in _shift_range(values.reshape(-1)):
                w = values + r
                if np.all(np.abs(w) <= TOL_ZERO * max(1.0, float(np.max(np.abs(w))))):
                    continue
                profile = Trajectory(times=tu.times, values=w, rates=rates, N=L, M=0, method="difference")
                ledger, events = track_zero_events(profile, window=(0, L), periodic=True)
                zero_balance_audit(ledger, w[0], w[-1], 0, L)
                total += ledger.total_disappearances
                found += [e for e in events if e.kind == EventKind.DISAPPEARANCE and e.count > 0]
        return total / (L * tu.N), found

    results = ordered_map(pair_mass, pairs, workers)
    mass = 0.0
    disappearances = []
    for (i, j), (m, found) in zip(pairs, results):
        mass += mu1.weights[i] * mu2.weights[j] * m
        disappearances += [(i, j, e) for e in found]

    start1 = mu1.replace_members([tr.initial for tr in trajs1])
    start2 = mu2.replace_members([tr.initial for tr in trajs2])
    end1 = mu1.replace_members([tr.final for tr in trajs1])
    end2 = mu2.replace_members([tr.final for tr in trajs2])
    report = DissipationReport(z_start=Z_functional(start1, start2, pairing_cutoff=None),
                               z_end=Z_functional(end1, end2, pairing_cutoff=None),
                               mass=mass, disappearances=disappearances)
    logger.info(f"Dissipation: Z {report.z_start:.6g} -> {report.z_end:.6g}, "
                f"mass {report.mass:.6g}, residual {report.residual:.3g}")
    return report
