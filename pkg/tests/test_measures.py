"""
Tests for chain.measures: ensembles, the intersection functionals, time
averaging and the dissipation accounting of Z.
"""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from chain.errors import PreconditionError, UnsupportedModeError
from chain.measures import (
    Ensemble,
    Z_derivative_functional,
    Z_estimate,
    Z_functional,
    dissipation_mass,
    intersection_series,
    invariance_defect,
    krylov_bogolyubov,
    orbit_pair_density,
    pair_density,
    pair_intersections,
)
from chain.model import ChainState, Forcing, harmonic_potential, standard_potential


def random_ensemble(rng, size, N=4, M=1, amplitude=0.2, pot=None, force=None) -> Ensemble:
    states = [ChainState(N=N, M=M, u=np.arange(N) * M / N + amplitude * rng.uniform(-1, 1, N) + rng.uniform())
              for _ in range(size)]
    return Ensemble.from_states(states, pot=pot, force=force)


class TestEnsemble:
    """Weighted ensembles on the R-quotient."""

    def test_members_are_canonical_and_weights_normalised(self):
        ens = Ensemble.from_states([ChainState(N=2, M=1, u=[2.25, 2.75]), ChainState.linear(3, 1)],
                                   weights=[3.0, 1.0])
        assert ens.members[0].u[0] == pytest.approx(0.25)
        assert ens.weights.tolist() == pytest.approx([0.75, 0.25])
        assert ens.period == 6

    def test_non_positive_weight_rejected(self):
        with pytest.raises(PreconditionError):
            Ensemble.from_states([ChainState.linear(2, 1), ChainState.linear(2, 1)], weights=[1.0, -1.0])

    def test_weight_count_mismatch_rejected(self):
        with pytest.raises(PreconditionError):
            Ensemble.from_states([ChainState.linear(2, 1)], weights=[0.5, 0.5])

    def test_empty_ensemble_rejected(self):
        with pytest.raises(PreconditionError):
            Ensemble.from_states([])

    def test_energy_needs_dynamics(self):
        with pytest.raises(PreconditionError):
            Ensemble.from_states([ChainState.linear(2, 1)]).mean_energy()


class TestIntersections:
    """Pair intersection counts and the functional Z."""

    def test_state_does_not_intersect_itself(self, rng):
        u = ChainState(N=4, M=1, u=np.arange(4) / 4 + 0.1 * rng.uniform(-1, 1, 4))
        assert pair_density(u, u) == 0.0
        assert pair_density(u, u.shifted(2)) == 0.0

    def test_slope_against_constant(self):
        """A unit slope meets every integer translate of a constant once per cell."""
        u = ChainState.linear(1, 1)
        v = ChainState(N=1, M=0, u=[0.5])
        assert pair_intersections(u, v, 0) == 1
        assert pair_density(u, v) == 1.0
        assert orbit_pair_density(u, v) == 1.0

    def test_exact_sum(self):
        mu1 = Ensemble.from_states([ChainState.linear(1, 1), ChainState.linear(1, 1, offset=0.3)])
        mu2 = Ensemble.from_states([ChainState(N=1, M=0, u=[0.5]), ChainState(N=1, M=0, u=[0.2])])
        est = Z_estimate(mu1, mu2)
        assert est.exact
        assert est.value == pytest.approx(1.0)
        assert est.n_pairs == 4

    def test_subsampled_sum(self):
        mu1 = Ensemble.from_states([ChainState.linear(1, 1), ChainState.linear(1, 1, offset=0.3)])
        mu2 = Ensemble.from_states([ChainState(N=1, M=0, u=[0.5]), ChainState(N=1, M=0, u=[0.2])])
        est = Z_estimate(mu1, mu2, pairing_cutoff=1, n_pairs=64, seed=7)
        assert not est.exact
        assert est.value == pytest.approx(1.0)
        assert est.stat_err == pytest.approx(0.0)

    def test_symmetric(self, rng):
        mu1 = random_ensemble(rng, 3)
        mu2 = random_ensemble(rng, 2)
        assert Z_functional(mu1, mu2) == pytest.approx(Z_functional(mu2, mu1), abs=1e-12)

    def test_parallel_matches_inline(self, rng):
        mu = random_ensemble(rng, 4)
        assert Z_functional(mu, mu, workers=3) == Z_functional(mu, mu, workers=1)


class TestVelocityZeros:
    """Z~ on DC-driven ensembles."""

    def test_equilibrium_has_no_velocity_zeros(self):
        mu = Ensemble.from_states([ChainState.linear(4, 1)], pot=harmonic_potential(), force=Forcing.dc(0.0))
        assert Z_derivative_functional(mu) == 0.0

    def test_sign_alternating_velocity(self):
        """Alternating displacements of a harmonic chain give a velocity zero in every cell."""
        state = ChainState(N=4, M=0, u=[0.1, -0.1, 0.1, -0.1])
        mu = Ensemble.from_states([state], pot=harmonic_potential(), force=Forcing.dc(0.0))
        assert Z_derivative_functional(mu) == pytest.approx(1.0)

    def test_ac_forcing_rejected(self):
        mu = Ensemble.from_states([ChainState.linear(2, 1)], pot=harmonic_potential(),
                                  force=Forcing.ac(0.0, [(1, 0.1, 0.0)]))
        with pytest.raises(UnsupportedModeError):
            Z_derivative_functional(mu)


class TestEvolution:
    """Monotonicity of Z along the flow and time averaging."""

    def test_self_intersections_never_increase(self, rng):
        mu = random_ensemble(rng, 3, pot=standard_potential(1.0), force=Forcing.dc(0.05))
        series = intersection_series(mu, 2.0, dt=1e-3, dt_out=0.25, pairing_cutoff=None)
        assert len(series.t) == 9
        assert series.max_increase() <= 1e-12
        assert np.all((series.Ztilde >= 0) & (series.Ztilde <= 1))

    def test_self_intersections_never_increase_under_ac_drive(self, rng):
        force = Forcing.ac(0.05, [(1, 0.0, 0.05)])
        mu = random_ensemble(rng, 8, N=16, pot=standard_potential(1.0), force=force)
        series = intersection_series(mu, 4.0, dt=1e-3, dt_out=0.25, pairing_cutoff=None)
        assert series.max_increase() <= 1e-9
        assert np.all(np.diff(series.Z[::4]) <= 1e-9)
        assert np.all(np.isnan(series.Ztilde))

    @pytest.mark.slow
    @pytest.mark.parametrize("force", [Forcing.dc(0.05), Forcing.ac(0.05, [(1, 0.0, 0.05)])],
                             ids=["dc", "ac"])
    def test_self_intersections_never_increase_on_long_runs(self, rng, force):
        mu = random_ensemble(rng, 16, N=32, amplitude=0.3, pot=standard_potential(1.0), force=force)
        series = intersection_series(mu, 30.0, dt=1e-3, dt_out=0.5, pairing_cutoff=None)
        assert series.max_increase() <= 1e-9

    def test_longer_averages_are_closer_to_invariant(self):
        seed = Ensemble.from_states([ChainState(N=1, M=0, u=[0.3]), ChainState(N=1, M=0, u=[0.7])],
                                    pot=standard_potential(1.0), force=Forcing.dc(0.0))
        short = invariance_defect(krylov_bogolyubov(seed, n_steps=8, t_quad=4, dt=1e-2), tau=1.0, dt=1e-2,
                                  pairing_cutoff=16)
        long = invariance_defect(krylov_bogolyubov(seed, n_steps=64, t_quad=4, dt=1e-2), tau=1.0, dt=1e-2,
                                 pairing_cutoff=16)
        assert short.value > 0
        assert long.value < 0.5 * short.value

    def test_averaging_an_equilibrium_collapses(self):
        seed = Ensemble.from_states([ChainState.linear(4, 1)], pot=harmonic_potential(), force=Forcing.dc(0.0))
        nu = krylov_bogolyubov(seed, n_steps=3, t_quad=4)
        assert len(nu) == 1
        assert nu.weights.tolist() == pytest.approx([1.0])

    def test_averaging_keeps_weights_normalised(self, rng):
        seed = random_ensemble(rng, 2, pot=standard_potential(1.0), force=Forcing.dc(0.05))
        nu = krylov_bogolyubov(seed, n_steps=2, t_quad=4)
        assert np.sum(nu.weights) == pytest.approx(1.0)
        assert len(nu) > len(seed)

    def test_averaging_rejects_bad_arguments(self):
        seed = Ensemble.from_states([ChainState.linear(2, 1)], pot=harmonic_potential(), force=Forcing.dc(0.0))
        with pytest.raises(PreconditionError):
            krylov_bogolyubov(seed, n_steps=0)
        with pytest.raises(PreconditionError):
            krylov_bogolyubov(seed, n_steps=1, t_quad=0)

    def test_equilibrium_has_no_invariance_defect(self):
        nu = Ensemble.from_states([ChainState.linear(4, 1)], pot=harmonic_potential(), force=Forcing.dc(0.0))
        report = invariance_defect(nu, tau=1.0)
        assert report.value < 1e-12


class TestDissipation:
    """Decrease of Z equals the translation-averaged disappearance mass."""

    def test_mass_balances_decrease(self, rng):
        pot, force = standard_potential(1.0), Forcing.dc(0.05)
        mu1 = random_ensemble(rng, 2, amplitude=0.3, pot=pot, force=force)
        mu2 = random_ensemble(rng, 2, amplitude=0.3, pot=pot, force=force)
        report = dissipation_mass(mu1, mu2, horizon=2.0, dt=1e-3, dt_out=0.02)
        assert report.z_end <= report.z_start + 1e-12
        assert report.residual < 1e-9
        assert all(e.count > 0 for _, _, e in report.disappearances)

    def test_rotation_numbers_must_agree(self):
        pot, force = harmonic_potential(), Forcing.dc(0.0)
        mu1 = Ensemble.from_states([ChainState.linear(4, 1)], pot=pot, force=force)
        mu2 = Ensemble.from_states([ChainState.linear(4, 0)], pot=pot, force=force)
        with pytest.raises(PreconditionError):
            dissipation_mass(mu1, mu2, horizon=0.5, dt=1e-2, dt_out=0.1)
