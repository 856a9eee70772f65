"""
Tests for chain.zeroset: counting, singular-zero classification, the
leading-order expansion and the (c, d) event ledger with its balance audit.
"""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from chain.errors import AuditFailure, DegreeOverflowError, PreconditionError
from chain.integrator import LinearSystemCoeffs, Trajectory, integrate, integrate_linear
from chain.model import ChainState, Forcing, rhs, standard_potential
from chain.zeroset import (
    DerivativeCoefficients,
    EventKind,
    EventLedger,
    PairCoefficients,
    RegularZero,
    SingularZero,
    ZeroType,
    classify_zero,
    count_zeros,
    derivative_coeffs,
    expected_counts,
    leading_order_check,
    leading_order_profile,
    leading_orders,
    linearized_coeffs,
    predict_leading_coeffs,
    sign_lemma_violations,
    track_zero_events,
    zero_balance_audit,
    zero_count_series,
)


def window_trajectory(times, profile, rates) -> Trajectory:
    """Window trajectory built from closed-form site values and rates."""
    times = np.asarray(times, dtype=float)
    values = np.array([profile(t) for t in times])
    derivs = np.array([rates(t) for t in times])
    return Trajectory(times=times, values=values, rates=derivs, N=values.shape[1], M=0, method="exact")


def audit_all(ledger, w_start, w_end, windows):
    return [zero_balance_audit(ledger, w_start, w_end, m, n, raise_on_failure=False) for m, n in windows]


class TestCounting:
    """Zero-counting function z_{m,n}."""

    def test_alternating_period(self):
        """Every cell of an alternating period holds a sign change."""
        assert count_zeros([1, -1, 1, -1], 0, 4, periodic=True) == 4

    def test_window_has_one_fewer_cell(self):
        assert count_zeros([1, -1, 1, -1], 0, 3) == 3

    def test_exact_zero_counts_once(self):
        """A zero site counts in its own cell, not in the cell before it."""
        assert count_zeros([1, 0, -1], 0, 2) == 1

    def test_tolerance_reads_tiny_values_as_zero(self):
        assert count_zeros([1, 1e-12, 1], 0, 2) == 1

    def test_empty_range_rejected(self):
        with pytest.raises(PreconditionError):
            count_zeros([1, -1], 1, 1)

    def test_window_overrun_rejected(self):
        with pytest.raises(PreconditionError):
            count_zeros([1, -1, 1], 0, 3)


class TestClassification:
    """Regular zeros and singular zeros of Types I and II."""

    def test_regular_zero(self):
        assert classify_zero([1, 0, -1], 1) == RegularZero(site=1)

    def test_type_one_degree_two(self):
        zero = classify_zero([1, 0, 0, -1], 1)
        assert isinstance(zero, SingularZero)
        assert (zero.start, zero.degree, zero.zero_type) == (1, 2, ZeroType.I)

    def test_type_two_degree_one(self):
        zero = classify_zero([1, 0, 2], 1)
        assert (zero.degree, zero.zero_type) == (1, ZeroType.II)
        assert (zero.flank_left, zero.flank_right) == (1.0, 2.0)

    def test_periodic_run_wraps_the_seam(self):
        zero = classify_zero([0, 1, 1, 0], 0, periodic=True)
        assert (zero.degree, zero.zero_type) == (2, ZeroType.II)

    def test_non_zero_site_rejected(self):
        with pytest.raises(PreconditionError):
            classify_zero([1, 1, -1], 0)

    def test_run_reaching_window_edge(self):
        with pytest.raises(DegreeOverflowError):
            classify_zero([0, 0, 1], 0)

    def test_run_filling_period(self):
        with pytest.raises(DegreeOverflowError):
            classify_zero([0, 0, 0], 1, periodic=True)

    def test_count_table(self):
        """(before, at, after) counts on z_{0,k+1} around a degree-k zero."""
        assert expected_counts("I", 2) == (3, 2, 1)
        assert expected_counts("I", 3) == (3, 3, 1)
        assert expected_counts("II", 2) == (2, 2, 0)
        assert expected_counts("II", 1) == (2, 1, 0)


class TestLeadingOrder:
    """Leading coefficients d_j of w_j(t) ~ d_j t^{j*} after a singular zero."""

    A, B, C = 1.5, 1.0, -0.5

    def _relative_errors(self, flanks, k):
        co = LinearSystemCoeffs.constant(k + 2, self.A, self.B, self.C)
        w0 = np.array([flanks[0]] + [0.0] * k + [flanks[1]])
        traj = integrate_linear(w0, co, (0.0, 1e-3), dt=1e-5, dt_out=1e-4)
        d = predict_leading_coeffs(flanks, co, k)
        orders = leading_orders(k)
        errors = []
        for idx in (1, -1):
            t = traj.times[idx]
            measured = traj.values[idx, 1:k + 1] / t ** orders
            errors.append(float(np.max(np.abs(measured - d) / np.abs(d))))
        return d, errors

    def test_orders(self):
        assert leading_orders(4).tolist() == [1, 2, 2, 1]
        assert leading_orders(3).tolist() == [1, 2, 1]

    @pytest.mark.parametrize("flanks, k, expected", [
        ((1.0, -1.0), 1, [0.5]),
        ((1.0, 2.0), 1, [3.5]),
        ((1.0, -1.0), 2, [1.5, -1.0]),
        ((1.0, 2.0), 2, [1.5, 2.0]),
        ((1.0, -1.0), 3, [1.5, 0.625, -1.0]),
        ((1.0, 2.0), 3, [1.5, 2.125, 2.0]),
    ])
    def test_prediction_matches_integration(self, flanks, k, expected):
        """Type I (opposite flanks) and Type II (equal signs) for k = 1, 2, 3."""
        d, (err_small, err_large) = self._relative_errors(flanks, k)
        assert d.tolist() == pytest.approx(expected)
        assert err_large < 0.05
        assert err_small < err_large
        assert sign_lemma_violations(d, flanks) == []

    @pytest.mark.parametrize("flanks, k, expected", [
        ((1.0, -1.0), 2, [1.0, -1.0]),
        ((1.0, 1.0), 1, [2.0]),
        ((1.0, 1.0), 2, [1.0, 1.0]),
    ])
    def test_unit_coupling(self, flanks, k, expected):
        co = LinearSystemCoeffs.constant(k + 2, 1.0, 1.0, 0.0)
        assert predict_leading_coeffs(flanks, co, k).tolist() == pytest.approx(expected)

    def test_sign_lemma_flags_wrong_sign(self):
        assert sign_lemma_violations(np.array([1.0, 1.0]), (1.0, -1.0)) == [2]

    def test_opposite_flanks_leave_middle_site_free(self):
        co = LinearSystemCoeffs.constant(5, 1.0, 1.0, 0.0)
        d = predict_leading_coeffs((1.0, -1.0), co, 3)
        assert d.tolist() == pytest.approx([1.0, 0.0, -1.0])
        assert sign_lemma_violations(d, (1.0, -1.0)) == []

    def test_equal_flanks_fix_middle_site(self):
        assert sign_lemma_violations(np.array([1.0, -0.5, 1.0]), (1.0, 1.0)) == [2]
        assert sign_lemma_violations(np.array([1.0, 1.0, 1.0, 1.0]), (1.0, 2.0)) == []

    @pytest.mark.parametrize("zero_type, k, flanks", [
        ("I", 2, (1.0, -1.0)),
        ("I", 3, (1.0, -1.0)),
        ("II", 2, (1.0, 2.0)),
        ("II", 3, (1.0, 2.0)),
    ])
    def test_profile_reproduces_count_table(self, zero_type, k, flanks):
        """z_{0,k+1} before, at and after the zero for every (type, parity) row."""
        co = LinearSystemCoeffs.constant(k + 2, self.A, self.B, self.C)
        d = predict_leading_coeffs(flanks, co, k)
        profile = leading_order_profile(flanks, d, np.array([-1e-3, 0.0, 1e-3]))
        counts = tuple(count_zeros(row, 0, k + 1) for row in profile.values)
        assert counts == expected_counts(zero_type, k)
        zero = classify_zero(profile.values[1], 1)
        assert (zero.degree, zero.zero_type.value) == (k, zero_type)
        assert profile.rates[2, 1] == pytest.approx(d[0])

    @pytest.mark.parametrize("offsets, degree, zero_type, counts", [
        ([0.1, 0.0, 0.2, -0.1], 1, ZeroType.II, (2, 1, 0)),
        ([0.1, 0.0, 0.0, -0.2], 2, ZeroType.I, (3, 2, 1)),
    ])
    def test_check_on_chain_pair(self, offsets, degree, zero_type, counts):
        pot = standard_potential(1.0)
        u1 = ChainState.linear(4, 1)
        u2 = u1.replace(u=u1.u + np.array(offsets))
        check = leading_order_check(u1, u2, pot, site=1, degree=degree)
        assert (check.degree, check.zero_type) == (degree, zero_type)
        assert check.sign_violations == []
        assert check.counts == counts
        assert check.matches_table

    def test_check_needs_room_for_flanks(self):
        u1 = ChainState.linear(3, 1)
        with pytest.raises(PreconditionError):
            leading_order_check(u1, u1.replace(u=u1.u + 0.1), standard_potential(1.0), site=0, degree=3)

    def test_degenerate_inputs_rejected(self):
        co = LinearSystemCoeffs.constant(3, 1.0, 1.0, 0.0)
        with pytest.raises(PreconditionError):
            predict_leading_coeffs((1.0, 1.0), co, 0)
        with pytest.raises(PreconditionError):
            predict_leading_coeffs((0.0, 1.0), co, 1)


class TestDerivativeCoefficients:
    """The linear system solved by the velocity of a DC chain."""

    def test_coincident_pair_limit(self, rng):
        pot = standard_potential(1.0)
        state = ChainState(N=6, M=1, u=np.arange(6) / 6 + 0.2 * rng.uniform(-1, 1, 6))
        co = derivative_coeffs(state, pot)
        assert co.a.tolist() == pytest.approx([1.0] * 6)
        assert co.b.tolist() == pytest.approx([1.0] * 6)
        assert co.c == pytest.approx(-2.0 - np.cos(2 * np.pi * state.u))
        limit = linearized_coeffs(state, state, pot)
        assert limit.c == pytest.approx(co.c)

    def test_velocity_solves_the_system(self, rng):
        pot, force = standard_potential(1.0), Forcing.dc(0.05)
        state = ChainState(N=6, M=1, u=np.arange(6) / 6 + 0.2 * rng.uniform(-1, 1, 6))
        traj = integrate(state, pot, force, (0.0, 2.0), dt=1e-3, dt_out=0.1)
        lin = integrate_linear(rhs(state.u, state.M, pot, 0.05), DerivativeCoefficients(state, pot, force),
                               (0.0, 2.0), dt=1e-3, dt_out=0.1)
        assert np.max(np.abs(lin.values - traj.rates)) < 1e-8


class TestEventTracking:
    """Event detection and the zero-balance audit."""

    WINDOWS = [(0, 1), (1, 2), (0, 2)]

    def test_regular_crossing(self):
        traj = window_trajectory(np.linspace(0.0, 1.0, 8),
                                 lambda t: [1.0, 1.0 - 2.0 * t, -1.0],
                                 lambda t: [0.0, -2.0, 0.0])
        ledger, events = track_zero_events(traj, periodic=False)
        assert len(events) == 1
        event = events[0]
        assert event.kind == EventKind.CROSSING
        assert event.time == pytest.approx(0.5, abs=1e-8)
        assert event.site == 1
        assert ledger.total_disappearances == 0
        assert audit_all(ledger, traj.values[0], traj.values[-1], self.WINDOWS) == [0, 0, 0]

    def test_type_two_disappearance(self):
        """A local minimum rising through zero removes two zeros at once."""
        traj = window_trajectory(np.linspace(0.0, 1.0, 8),
                                 lambda t: [1.0, 2.0 * t - 1.0, 1.0],
                                 lambda t: [0.0, 2.0, 0.0])
        ledger, events = track_zero_events(traj, periodic=False)
        assert len(events) == 1
        event = events[0]
        assert event.kind == EventKind.DISAPPEARANCE
        assert (event.count, event.count_to_at, event.count_from_at) == (2, 1, 1)
        assert (event.degree, event.zero_type) == (1, ZeroType.II)
        assert event.delta_z == -2
        assert ledger.d.tolist() == [0, 2, 0]
        assert audit_all(ledger, traj.values[0], traj.values[-1], self.WINDOWS) == [0, 0, 0]

    def test_start_at_type_one_singular_zero(self):
        co = LinearSystemCoeffs.constant(8, 1.5, 1.0, -2.5)
        w0 = np.array([1.0, 0.0, 0.0, -1.0, -1.0, -1.0, 1.0, 1.0])
        traj = integrate_linear(w0, co, (0.0, 0.05), dt=1e-3, dt_out=0.01)
        ledger, events = track_zero_events(traj)
        assert len(events) == 1
        event = events[0]
        assert event.kind == EventKind.DISAPPEARANCE
        assert event.time == pytest.approx(0.0)
        assert (event.degree, event.zero_type) == (2, ZeroType.I)
        assert (event.count_to_at, event.count_from_at) == (0, 1)
        series = zero_count_series(traj, 0, 8)
        assert series[0] == 3
        assert np.all(series[1:] == 2)
        assert zero_balance_audit(ledger, traj.values[0], traj.values[-1], 0, 8) == 0
        assert zero_balance_audit(ledger, traj.values[0], traj.values[-1], 2, 5) == 0

    def test_start_at_type_two_singular_zero(self):
        co = LinearSystemCoeffs.constant(8, 1.5, 1.0, -2.5)
        w0 = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0])
        traj = integrate_linear(w0, co, (0.0, 0.05), dt=1e-3, dt_out=0.01)
        ledger, events = track_zero_events(traj)
        assert len(events) == 1
        event = events[0]
        assert (event.degree, event.zero_type) == (3, ZeroType.II)
        assert event.count_from_at == 3
        assert ledger.total_disappearances == 3
        assert zero_balance_audit(ledger, traj.values[0], traj.values[-1], 0, 8) == 0

    def test_start_at_odd_type_one_singular_zero(self):
        co = LinearSystemCoeffs.constant(8, 1.5, 1.0, -2.5)
        w0 = np.array([1.0, 0.0, 0.0, 0.0, -1.0, -1.0, 1.0, 1.0])
        traj = integrate_linear(w0, co, (0.0, 0.05), dt=1e-3, dt_out=0.01)
        ledger, events = track_zero_events(traj)
        assert len(events) == 1
        event = events[0]
        assert event.kind == EventKind.DISAPPEARANCE
        assert (event.degree, event.zero_type) == (3, ZeroType.I)
        assert (event.count_to_at, event.count_from_at) == (0, 2)
        assert ledger.total_disappearances == 2
        series = zero_count_series(traj, 0, 8)
        assert series[0] == 4
        assert np.all(series[1:] == 2)
        assert zero_balance_audit(ledger, traj.values[0], traj.values[-1], 0, 8) == 0
        assert zero_balance_audit(ledger, traj.values[0], traj.values[-1], 2, 5) == 0

    def test_start_at_even_type_two_singular_zero(self):
        co = LinearSystemCoeffs.constant(8, 1.5, 1.0, -2.5)
        w0 = np.array([1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0])
        traj = integrate_linear(w0, co, (0.0, 0.05), dt=1e-3, dt_out=0.01)
        ledger, events = track_zero_events(traj)
        assert len(events) == 1
        event = events[0]
        assert (event.degree, event.zero_type) == (2, ZeroType.II)
        assert (event.count_to_at, event.count_from_at) == (0, 2)
        assert ledger.total_disappearances == 2
        series = zero_count_series(traj, 0, 8)
        assert series[0] == 2
        assert np.all(series[1:] == 0)
        assert zero_balance_audit(ledger, traj.values[0], traj.values[-1], 0, 8) == 0

    def test_chain_pair_balance_closes(self, rng):
        """Every window closes on the difference of two K=1 chain solutions."""
        pot, force = standard_potential(1.0), Forcing.dc(0.05)
        u1 = ChainState(N=8, M=1, u=np.arange(8) / 8 + 0.3 * rng.uniform(-1, 1, 8))
        u2 = u1.replace(u=u1.u + 0.3 * rng.uniform(-1, 1, 8))
        lin = integrate_linear(u2.u - u1.u, PairCoefficients(u1, u2, pot, force), (0.0, 5.0),
                               dt=1e-3, dt_out=0.05)
        ledger, _ = track_zero_events(lin)
        windows = [(m, n) for m in range(8) for n in range(m + 1, m + 9)]
        residuals = audit_all(ledger, lin.values[0], lin.values[-1], windows)
        assert all(r == 0 for r in residuals)
        t1 = integrate(u1, pot, force, (0.0, 5.0), dt=1e-3, dt_out=0.05)
        t2 = integrate(u2, pot, force, (0.0, 5.0), dt=1e-3, dt_out=0.05)
        assert np.max(np.abs(lin.values - (t2.values - t1.values))) < 1e-8

    def test_relabelled_profile_shifts_ledger(self, rng):
        """Reading site i as old site i + p shifts c and d by p."""
        pot, force = standard_potential(1.0), Forcing.dc(0.05)
        u1 = ChainState(N=8, M=1, u=np.arange(8) / 8 + 0.3 * rng.uniform(-1, 1, 8))
        u2 = u1.replace(u=u1.u + 0.3 * rng.uniform(-1, 1, 8))
        lin = integrate_linear(u2.u - u1.u, PairCoefficients(u1, u2, pot, force), (0.0, 5.0),
                               dt=1e-3, dt_out=0.05)
        ledger, events = track_zero_events(lin)
        for p in (1, 3):
            moved = Trajectory(times=lin.times, values=np.roll(lin.values, -p, axis=1),
                               rates=np.roll(lin.rates, -p, axis=1), N=8, M=0, method="relabelled")
            relabelled, moved_events = track_zero_events(moved)
            expected = ledger.shifted(p)
            assert relabelled.c.tolist() == expected.c.tolist()
            assert relabelled.d.tolist() == expected.d.tolist()
            assert [e.kind for e in moved_events] == [e.kind for e in events]

    def test_collapsed_samples_are_masked(self):
        """Counts are masked where the boundary reads as zero or the window has collapsed."""
        values = np.array([[0.5, 0.2, -0.3, 0.4],
                           [0.0, 0.2, -0.3, 0.4],
                           [3e-10, -2e-10, 5e-10, 4e-10]])
        traj = Trajectory(times=np.array([0.0, 1.0, 2.0]), values=values, rates=np.zeros_like(values),
                          N=4, M=0, method="exact")
        series = zero_count_series(traj, 0, 4)
        assert np.ma.getmaskarray(series).tolist() == [False, True, True]
        assert series.data.tolist() == [2, 3, 2]
        assert series.compressed().tolist() == [2]

    def test_audit_raises_on_open_balance(self):
        ledger = EventLedger(n_sites=3, periodic=False)
        with pytest.raises(AuditFailure) as info:
            zero_balance_audit(ledger, np.array([1.0, 1.0, -1.0]), np.array([1.0, -1.0, 1.0]), 0, 2)
        assert info.value.residual == 1


class TestLedger:
    """Merging and relabelling of ledgers."""

    def test_merge_adds_tallies(self):
        first = EventLedger(n_sites=3, periodic=True, c=np.array([1, 0, 0]), d=np.array([0, 2, 0]),
                            t_start=0.0, t_end=1.0)
        second = EventLedger(n_sites=3, periodic=True, c=np.array([0, -1, 0]), d=np.array([0, 0, 1]),
                             t_start=1.0, t_end=2.0)
        merged = first.merge(second)
        assert merged.c.tolist() == [1, -1, 0]
        assert merged.d.tolist() == [0, 2, 1]
        assert (merged.t_start, merged.t_end) == (0.0, 2.0)

    def test_periodic_d_sum_wraps(self):
        ledger = EventLedger(n_sites=3, periodic=True, d=np.array([1, 2, 3]))
        assert ledger.d_sum(2, 5) == 3 + 1 + 2
        assert ledger.c_at(-1) == 0

    def test_shift_relabels_sites(self):
        ledger = EventLedger(n_sites=3, periodic=True, d=np.array([1, 2, 3]))
        assert ledger.shifted(1).d.tolist() == [2, 3, 1]

    def test_window_ledger_cannot_shift(self):
        with pytest.raises(PreconditionError):
            EventLedger(n_sites=3, periodic=False).shifted(1)
