"""
Tests for chain.model: lifts, potentials, forcings, the vector field and
the order / distance helpers.
"""

import math
import sys
from pathlib import Path

import numpy as np
import pytest

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from chain.errors import NumericDomainError, PreconditionError, TwistViolationError
from chain.model import (
    ChainState,
    Forcing,
    Order,
    config_distance,
    energy_per_site,
    fourier_potential,
    harmonic_potential,
    partial_order_compare,
    spacing_bound,
    spacing_class,
    standard_potential,
    standard_vector_field,
    translate,
    twist_audit,
    vector_field,
)


class TestChainState:
    """Periodic lifts and their winding convention."""

    def test_lift_extends_with_winding(self):
        """u_{i+kN} = u_i + kM on both sides of the period."""
        state = ChainState(N=3, M=2, u=[0.1, 0.5, 1.2])
        assert state.at([3])[0] == pytest.approx(2.1)
        assert state.at([-1])[0] == pytest.approx(1.2 - 2)
        assert state.rho == pytest.approx(2 / 3)

    def test_rejects_wrong_length(self):
        """The lift must have exactly N values."""
        with pytest.raises(PreconditionError):
            ChainState(N=3, M=1, u=[0.0, 0.5])

    def test_rejects_non_finite(self):
        """NaN or inf values are refused."""
        with pytest.raises(NumericDomainError):
            ChainState(N=2, M=0, u=[0.0, np.nan])

    def test_canonical_representative(self):
        """The R-quotient representative has u_0 in [0, 1)."""
        state = ChainState(N=2, M=1, u=[3.25, 3.75]).canonical()
        assert state.u[0] == pytest.approx(0.25)
        assert state.u[1] == pytest.approx(0.75)

    def test_translate_by_period_adds_winding(self):
        """T_{N,0} u = u + M."""
        state = ChainState(N=4, M=1, u=[0.0, 0.3, 0.45, 0.8])
        assert np.allclose(translate(state, 4, 0).u, state.u + 1)
        assert np.allclose(translate(state, 1, -1).u, state.at(np.arange(1, 5)) - 1)


class TestPotentials:
    """Twist audit and periodicity of the supplied potential families."""

    def test_standard_family_passes_audit(self):
        report = twist_audit(standard_potential(1.0), grid_resolution=41, span=2.0)
        assert report.passed
        assert report.min_neg_v12 == pytest.approx(1.0)
        assert report.periodicity_residual < 1e-12

    def test_negative_stiffness_rejected(self):
        with pytest.raises(PreconditionError):
            standard_potential(-0.1)

    def test_fourier_coupling_lowers_twist_floor(self):
        """-V12 = 1 + g cos 2pi(v-u) never drops below 1 - |g|."""
        pot = fourier_potential(site_harmonics=[(1, 0.02, 0.01)], coupling_harmonics=[(1, 0.3)])
        report = twist_audit(pot, grid_resolution=101, raise_on_failure=False)
        assert pot.twist_delta == pytest.approx(0.7)
        assert report.min_neg_v12 >= pot.twist_delta - 1e-12
        assert report.periodicity_residual < 1e-12

    def test_fourier_coupling_too_strong(self):
        """|g| >= 1 destroys the twist condition."""
        with pytest.raises(TwistViolationError):
            fourier_potential(coupling_harmonics=[(1, 1.2)])

    def test_harmonic_energy_of_linear_state(self):
        """V = (v-u)^2/2 gives energy rho^2/2 on u_j = j rho."""
        state = ChainState.linear(5, 2)
        assert energy_per_site(state, harmonic_potential()) == pytest.approx(0.5 * 0.4 ** 2)


class TestForcing:
    """DC and AC drives and their statistics."""

    def test_dispersion_closed_form_matches_quadrature(self):
        force = Forcing.ac(0.05, [(1, 0.05, 0.0), (2, 0.0, 0.03)])
        expected = math.sqrt((0.05 ** 2 + 0.03 ** 2) / 2)
        assert force.dispersion == pytest.approx(expected, rel=1e-12)
        assert force.dispersion_quadrature() == pytest.approx(expected, rel=1e-9)

    def test_zero_harmonic_folds_into_mean(self):
        force = Forcing.ac(0.1, [(0, 0.2, 0.0), (1, 0.0, 0.5)])
        assert force.mean == pytest.approx(0.3)
        assert force(0.25) == pytest.approx(0.8)

    def test_dc_has_no_dispersion(self):
        force = Forcing.dc(0.4)
        assert force.is_dc
        assert force(123.0) == 0.4
        assert force.dispersion == 0.0

    def test_negative_harmonic_rejected(self):
        with pytest.raises(PreconditionError):
            Forcing.ac(0.0, [(-1, 0.1, 0.0)])


class TestVectorField:
    """The generic field reduces to the standard closed form."""

    def test_standard_field_matches_generic(self, rng):
        state = ChainState(N=6, M=2, u=np.arange(6) / 3 + 0.2 * rng.uniform(-1, 1, 6))
        force = Forcing.ac(0.1, [(1, 0.05, 0.0)])
        generic = vector_field(state, standard_potential(1.3), force, t=0.3)
        closed = standard_vector_field(state, 1.3, force, t=0.3)
        assert np.allclose(generic.values, closed.values, atol=1e-12)

    def test_linear_state_is_harmonic_equilibrium(self):
        field = vector_field(ChainState.linear(4, 1), harmonic_potential(), Forcing.dc(0.0))
        assert np.max(np.abs(field.values)) < 1e-12

    def test_non_finite_time_rejected(self):
        with pytest.raises(PreconditionError):
            vector_field(ChainState.linear(2, 0), harmonic_potential(), Forcing.dc(0.0), t=math.inf)


class TestOrderAndDistance:
    """Partial order, spacing classes and the quotient distance."""

    def test_shifted_state_is_above(self):
        a = ChainState.linear(3, 1)
        b = a.replace(u=a.u + np.array([0.1, 0.0, 0.2]))
        assert partial_order_compare(b, a) == Order.GE
        assert partial_order_compare(a, b) == Order.LE
        assert partial_order_compare(a, a) == Order.EQ

    def test_crossing_states_are_incomparable(self):
        a = ChainState.linear(2, 0)
        b = ChainState(N=2, M=0, u=[0.1, -0.1])
        assert partial_order_compare(a, b) == Order.INCOMPARABLE

    def test_different_rotation_numbers_incomparable(self):
        assert partial_order_compare(ChainState.linear(2, 0), ChainState.linear(2, 1)) == Order.INCOMPARABLE

    def test_spacing_bound_includes_seam(self):
        state = ChainState(N=3, M=1, u=[0.0, 0.1, 0.2])
        assert spacing_bound(state) == pytest.approx(0.8)
        assert spacing_class(state) == 1

    def test_distance_quotients_integer_shifts(self):
        a = ChainState(N=3, M=1, u=[0.1, 0.4, 0.7])
        assert config_distance(a, a.shifted(1)) == pytest.approx(0.0)
        assert config_distance(a, a.shifted(-2)) == pytest.approx(0.0)
        assert config_distance(a, a.shifted(0.25)) == pytest.approx(0.25)
