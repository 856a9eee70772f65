"""
Tests for chain.integrator: the fixed-step chain integrator, the time-1
map and the linear cooperative system with carried coefficients.
"""

import math
import sys
from pathlib import Path

import numpy as np
import pytest

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from chain.errors import PreconditionError, UnsupportedModeError
from chain.integrator import LinearSystemCoeffs, integrate, integrate_linear, stroboscopic_map
from chain.model import (
    ChainState,
    Forcing,
    energy_per_site,
    harmonic_potential,
    spacing_bound,
    spacing_class,
    standard_potential,
)
from chain.zeroset import PairCoefficients


class TestIntegrate:
    """Chain integration with emitted samples."""

    def test_harmonic_drift_is_exact(self):
        """K=0, N=1: u(t) = u(0) + F t."""
        traj = integrate(ChainState.linear(1, 0), harmonic_potential(), Forcing.dc(0.7), (0.0, 10.0),
                         dt=1e-3, dt_out=0.1)
        assert len(traj) == 101
        assert traj.times[-1] == pytest.approx(10.0)
        assert traj.final.u[0] == pytest.approx(7.0, abs=1e-10)
        assert np.allclose(traj.rates, 0.7)

    def test_emission_grid_not_multiple_of_step(self):
        """The last step before each emission is shortened."""
        traj = integrate(ChainState.linear(1, 0), harmonic_potential(), Forcing.dc(1.0), (0.0, 1.0),
                         dt=0.003, dt_out=0.01)
        assert np.allclose(np.diff(traj.times), 0.01)
        assert np.allclose(traj.values[:, 0], traj.times, atol=1e-12)

    def test_ragged_final_sample(self):
        traj = integrate(ChainState.linear(1, 0), harmonic_potential(), Forcing.dc(1.0), (0.0, 0.25),
                         dt=0.01, dt_out=0.1)
        assert traj.times.tolist() == pytest.approx([0.0, 0.1, 0.2, 0.25])

    def test_pendulum_relaxes_and_energy_decreases(self):
        """F=0 is a gradient flow: energy per site never increases."""
        state = ChainState(N=4, M=1, u=[0.1, 0.2, 0.65, 0.7])
        pot = standard_potential(1.0)
        traj = integrate(state, pot, Forcing.dc(0.0), (0.0, 5.0), dt=1e-3, dt_out=0.05)
        energies = np.array([energy_per_site(s, pot) for s in traj.states()])
        assert np.all(np.diff(energies) <= 1e-9)
        assert energies[-1] < energies[0]

    def test_harmonic_spacing_bound_never_grows(self, rng):
        """Real shifts commute with the K=0 flow, so the bound itself is invariant."""
        state = ChainState(N=6, M=2, u=np.arange(6) / 3 + 0.2 * rng.uniform(-1, 1, 6))
        traj = integrate(state, harmonic_potential(), Forcing.dc(0.3), (0.0, 3.0), dt=1e-3, dt_out=0.1)
        assert traj.spacing_excess <= 1e-7

    def test_ordered_pair_stays_ordered(self, rng):
        """Comparison principle: u <= v at t=0 stays true, and the K_n level is kept."""
        base = ChainState(N=8, M=3, u=np.arange(8) * 3 / 8 + 0.05 * rng.uniform(-1, 1, 8))
        above = base.replace(u=base.u + 0.1 * rng.uniform(0, 1, 8))
        pot, force = standard_potential(1.0), Forcing.ac(0.05, [(1, 0.0, 0.05)])
        lo = integrate(base, pot, force, (0.0, 3.0), dt=1e-3, dt_out=0.05)
        hi = integrate(above, pot, force, (0.0, 3.0), dt=1e-3, dt_out=0.05)
        assert np.all(hi.values - lo.values >= -1e-9)
        assert max(spacing_bound(s) for s in lo.states()) <= spacing_class(base) + 1e-7

    def test_bad_spans_rejected(self):
        with pytest.raises(PreconditionError):
            integrate(ChainState.linear(1, 0), harmonic_potential(), Forcing.dc(0.0), (1.0, 1.0))
        with pytest.raises(PreconditionError):
            integrate(ChainState.linear(1, 0), harmonic_potential(), Forcing.dc(0.0), (0.0, 1.0), dt=0.0)


class TestTrajectory:
    """Sampling and slicing of stored trajectories."""

    def test_interpolated_sample(self):
        traj = integrate(ChainState.linear(2, 0), harmonic_potential(), Forcing.dc(0.5), (0.0, 1.0),
                         dt=1e-2, dt_out=0.1)
        assert traj.sample(0.55).u.tolist() == pytest.approx([0.275, 0.275])
        with pytest.raises(PreconditionError):
            traj.sample(2.0)

    def test_window_and_concat(self):
        pot, force = harmonic_potential(), Forcing.dc(0.5)
        first = integrate(ChainState.linear(1, 0), pot, force, (0.0, 1.0), dt=1e-2, dt_out=0.1)
        second = integrate(first.final, pot, force, (1.0, 2.0), dt=1e-2, dt_out=0.1)
        joined = first.concat(second)
        assert len(joined) == 21
        assert len(joined.window(1.5)) == 6
        assert joined.final.u[0] == pytest.approx(1.0)


class TestStroboscopicMap:
    """Time-1 map of AC-driven chains."""

    def test_harmonic_time_one_map(self):
        """The oscillating part integrates to zero over one period."""
        force = Forcing.ac(0.25, [(1, 0.3, 0.2)])
        image = stroboscopic_map(ChainState.linear(1, 0), harmonic_potential(), force, dt=1e-3)
        assert image.u[0] == pytest.approx(0.25, abs=1e-10)
        assert image.t == pytest.approx(1.0)

    def test_dc_forcing_rejected(self):
        with pytest.raises(UnsupportedModeError):
            stroboscopic_map(ChainState.linear(1, 0), harmonic_potential(), Forcing.dc(0.1))


class TestLinearSystem:
    """Linear cooperative system w' = a w_{i-1} + b w_{i+1} + c w_i."""

    def test_discrete_heat_conserves_sum(self):
        co = LinearSystemCoeffs.constant(6, 1.0, 1.0, -2.0)
        w0 = np.array([1.0, -2.0, 0.5, 0.0, 3.0, -1.0])
        traj = integrate_linear(w0, co, (0.0, 2.0), dt=1e-3, dt_out=0.1)
        assert np.allclose(traj.values.sum(axis=1), w0.sum(), atol=1e-10)
        assert traj.M == 0

    def test_floor_violation_rejected(self):
        with pytest.raises(PreconditionError):
            LinearSystemCoeffs(a=np.array([1.0, 0.2]), b=np.ones(2), c=np.zeros(2), delta=0.5)

    def test_site_count_mismatch(self):
        with pytest.raises(PreconditionError):
            integrate_linear(np.zeros(3), LinearSystemCoeffs.constant(4, 1.0, 1.0, 0.0), (0.0, 1.0))

    def test_pair_coefficients_reproduce_difference(self, rng):
        """With secant coefficients the linear system is solved exactly by u2 - u1."""
        pot, force = standard_potential(1.0), Forcing.dc(0.05)
        u1 = ChainState(N=6, M=1, u=np.arange(6) / 6 + 0.1 * rng.uniform(-1, 1, 6))
        u2 = u1.replace(u=u1.u + 0.3 * rng.uniform(-1, 1, 6))
        lin = integrate_linear(u2.u - u1.u, PairCoefficients(u1, u2, pot, force), (0.0, 2.0),
                               dt=1e-3, dt_out=0.1)
        t1 = integrate(u1, pot, force, (0.0, 2.0), dt=1e-3, dt_out=0.1)
        t2 = integrate(u2, pot, force, (0.0, 2.0), dt=1e-3, dt_out=0.1)
        assert np.max(np.abs(lin.values - (t2.values - t1.values))) < 1e-8
        assert math.isclose(lin.times[-1], 2.0)
