"""
One function per CLI command. Each takes the validated RunConfig and an
ArtifactWriter, writes its tables plus a <command>_summary.json, and
returns the summary dict. `execute` wraps them with run-history records
and the exit-code mapping.
"""
import logging
from fractions import Fraction
from typing import Callable, Dict, List, Tuple

import numpy as np
import pandas as pd

from chain.aubry_mather import (
    characteristic_map_samples,
    commutation_residual,
    construct_ordered_invariant,
    construct_ordered_sequence,
    injectivity_diagnostic,
)
from chain.errors import AuditFailure, ChainError, ConfigError, NotSlidingError, PreconditionError
from chain.integrator import Trajectory, integrate
from chain.measures import Ensemble, intersection_series, invariance_defect
from chain.model import ChainState, config_distance, energy_per_site
from chain.parallel import ordered_map
from chain.sliding import (
    Verdict,
    attractor_residence,
    average_speed,
    classify_asymptotics,
    critical_force,
    depinning_sweep,
    dissipation_residual,
    extract_modulation,
    stroboscopic_recurrence,
    total_order_spot_check,
)
from chain.zeroset import (
    EventKind,
    expected_counts,
    leading_order_check,
    track_zero_events,
    zero_balance_audit,
    zero_count_series,
)
from runs.artifacts import (
    MANIFEST_FILE,
    ArtifactWriter,
    build_manifest,
    characteristic_frame,
    events_frame,
    ledger_frame,
    modulation_frame,
    sweep_frame,
    trajectory_frame,
    z_series_frame,
)
from runs.config import RunConfig, config_hash, seed_stream, stream_seed
from runs.models import artifact_hashes, finish_run, init_db, run_history, start_run

logger = logging.getLogger(__name__)

# Exit codes
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_AUDIT = 4

# Cap on pooled samples for the pairwise projection diagnostics
MAX_DIAGNOSTIC_SAMPLES = 64


def random_state(rng: np.random.Generator, N: int, M: int, amplitude: float,
                 random_offset: bool = True) -> ChainState:
    """u_j = j M/N + offset + amplitude * U(-1, 1)."""
    offset = float(rng.uniform(0.0, 1.0)) if random_offset else 0.0
    noise = amplitude * rng.uniform(-1.0, 1.0, size=N) if amplitude > 0 else np.zeros(N)
    return ChainState(N=N, M=M, u=np.arange(N) * (M / N) + offset + noise)


def _summary_name(command: str) -> str:
    return f"{command.replace('-', '_')}_summary.json"


# ============================================================================
# simulate
# ============================================================================

def run_simulate(config: RunConfig, writer: ArtifactWriter) -> dict:
    pot, force = config.potential.build(), config.forcing.build()
    integ, tol = config.integrator, config.tolerances
    state = random_state(seed_stream(config.seed, "lattice"), config.lattice.N, config.lattice.M,
                         config.lattice.amplitude, random_offset=False)

    if not force.is_dc:
        traj = integrate(state, pot, force, (0.0, integ.horizon), dt=integ.dt, dt_out=integ.dt_out,
                         tol_spacing=tol.tol_spacing)
        writer.write_table("trajectory.csv", trajectory_frame(traj))
        rec = stroboscopic_recurrence(traj.final, pot, force, tol=tol.tol_per, dt=integ.dt)
        summary = {
            "verdict": rec.verdict.value,
            "period": rec.period,
            "shift": rec.shift,
            "speed": rec.speed,
            "recurrence_residual": rec.residual,
            "mean_speed": average_speed(traj, transient=integ.transient),
            "forcing_mean": force.mean,
            "forcing_dispersion": force.dispersion,
        }
        writer.write_json(_summary_name("simulate"), summary)
        return summary

    report = classify_asymptotics(state, pot, force, **config.classify_settings())
    writer.write_table("trajectory.csv", trajectory_frame(report.trajectory))
    summary = report.summary()
    summary["energy_per_site"] = energy_per_site(report.final_state, pot)
    summary["spacing_excess"] = report.trajectory.spacing_excess

    if report.verdict == Verdict.PERIODIC_SLIDING:
        summary["dissipation_residual"] = dissipation_residual(report.trajectory, force.dc_value,
                                                               period=report.t0, pot=pot, transient=0.0)
        violations = total_order_spot_check(report.trajectory, seed=stream_seed(config.seed, "spot_check"))
        summary["total_order_violations"] = len(violations)
        try:
            table = extract_modulation(report.trajectory, state.rho, report.speed, tol_m=tol.tol_m)
            writer.write_table("modulation.csv", modulation_frame(table))
            summary["modulation"] = {"alpha": table.alpha, "residual": table.residual,
                                     "reconstruction_error": table.reconstruction_error(report.trajectory)}
        except NotSlidingError as e:
            logger.warning(f"No modulation table: {e}")
            summary["modulation"] = {"error": str(e), "residual": e.residual}

    writer.write_json(_summary_name("simulate"), summary)
    return summary


# ============================================================================
# zero-audit
# ============================================================================

def audit_windows(N: int) -> List[Tuple[int, int]]:
    """Cell windows checked on every pair: the full period, halves and one across the seam."""
    windows = [(0, N)]
    if N >= 2:
        half = N // 2
        windows += [(0, half), (half, N), (N - half, N + half)]
    if N >= 4:
        windows.append((N // 4, N // 4 + half + 1))
    return list(dict.fromkeys(windows))


def _table_mismatch(event) -> bool:
    """A resolved disappearance must lose exactly the tabulated counts in each phase it spans."""
    if event.kind != EventKind.DISAPPEARANCE or event.zero_type is None:
        return False
    before, at, after = expected_counts(event.zero_type.value, event.degree)
    return event.count_to_at not in (0, before - at) or event.count_from_at not in (0, at - after)


def leading_order_rows(events, tr1: Trajectory, tr2: Trajectory, pot, tol_quotient: float) -> List[dict]:
    """Leading-order prediction at every resolved disappearance of one pair."""
    rows = []
    for e in events:
        if e.kind != EventKind.DISAPPEARANCE or e.zero_type is None or e.degree >= tr1.N:
            continue
        try:
            check = leading_order_check(tr1.sample(e.time), tr2.sample(e.time), pot, e.site, e.degree,
                                        tol_quotient=tol_quotient)
        except PreconditionError as exc:
            logger.debug(f"No leading-order check at t={e.time:.9g}: {exc}")
            continue
        rows.append({"time": e.time, "site": check.site, "degree": check.degree,
                     "type": check.zero_type.value, "sign_violations": len(check.sign_violations),
                     "matches_table": check.matches_table})
    return rows


def run_zero_audit(config: RunConfig, writer: ArtifactWriter) -> dict:
    pot, force = config.potential.build(), config.forcing.build()
    integ, tol = config.integrator, config.tolerances
    N, M = config.lattice.N, config.lattice.M
    rng = seed_stream(config.seed, "pairs")
    pairs = [(random_state(rng, N, M, config.lattice.amplitude),
              random_state(rng, N, M, config.lattice.amplitude)) for _ in range(config.ensemble.pairs)]

    def run_pair(pair: Tuple[ChainState, ChainState]) -> Tuple[Trajectory, Trajectory]:
        return tuple(integrate(s, pot, force, (0.0, integ.horizon), dt=integ.dt, dt_out=integ.dt_out,
                               tol_spacing=tol.tol_spacing) for s in pair)

    trajectories = ordered_map(run_pair, pairs, config.ensemble.workers)
    windows = audit_windows(N)
    audit_rows, event_frames, ledger_frames = [], [], []
    failed, mismatches, monotone_violations, unresolved, masked = [], 0, 0, 0, 0
    predictions: List[dict] = []

    for k, (tr1, tr2) in enumerate(trajectories):
        w = tr2.values - tr1.values
        profile = Trajectory(times=tr1.times, values=w, rates=tr2.rates - tr1.rates, N=N, M=0,
                             method="difference", dt=integ.dt)
        ledger, events = track_zero_events(profile, window=(0, N), periodic=True, tol_zero=tol.tol_zero,
                                           tol_event=tol.tol_event, tol_tangency=tol.tol_tangency)
        event_frames.append(events_frame(events, pair=k))
        ledger_frames.append(ledger_frame(ledger, pair=k))
        mismatches += sum(1 for e in events if _table_mismatch(e))
        unresolved += sum(1 for e in events if e.kind == EventKind.UNRESOLVED)
        predictions += leading_order_rows(events, tr1, tr2, pot, tol.tol_quotient)
        counts = zero_count_series(profile, 0, N, periodic=True, tol_zero=tol.tol_zero,
                                   tol_tangency=tol.tol_tangency)
        masked += int(np.ma.count_masked(counts))
        monotone_violations += int(np.sum(np.diff(counts.compressed()) > 0))
        for m, n in windows:
            residual = zero_balance_audit(ledger, w[0], w[-1], m, n, tol_zero=tol.tol_zero,
                                          raise_on_failure=False)
            audit_rows.append({"pair": k, "m": m, "n": n, "c_m": ledger.c_at(m), "c_n": ledger.c_at(n),
                               "d_sum": ledger.d_sum(m, n), "residual": residual})
            if residual:
                failed.append((k, m, n, residual))

    writer.write_table("audit.csv", pd.DataFrame(audit_rows, columns=["pair", "m", "n", "c_m", "c_n",
                                                                       "d_sum", "residual"]))
    writer.write_table("events.csv", pd.concat(event_frames, ignore_index=True))
    writer.write_table("ledger.csv", pd.concat(ledger_frames, ignore_index=True))
    summary = {
        "pairs": len(pairs),
        "windows": [list(w) for w in windows],
        "failed_windows": len(failed),
        "table_mismatches": mismatches,
        "unresolved_events": unresolved,
        "monotone_violations": monotone_violations,
        "masked_samples": masked,
        "leading_order_checks": len(predictions),
        "sign_violations": sum(1 for p in predictions if p["sign_violations"]),
        "leading_order_mismatches": sum(1 for p in predictions if not p["matches_table"]),
    }
    if summary["sign_violations"] or summary["leading_order_mismatches"]:
        logger.warning(f"Leading-order predictions disagree at {summary['sign_violations']} sign checks and "
                       f"{summary['leading_order_mismatches']} count checks")
    writer.write_json(_summary_name("zero-audit"), summary)
    if failed:
        k, m, n, residual = failed[0]
        raise AuditFailure(f"zero balance fails on {len(failed)} windows, first pair {k} cells [{m}, {n}): "
                           f"residual {residual}", residual=residual)
    if mismatches:
        raise AuditFailure(f"{mismatches} disappearance events disagree with the singular-zero table",
                           residual=mismatches)
    return summary


# ============================================================================
# measure
# ============================================================================

def run_measure(config: RunConfig, writer: ArtifactWriter) -> dict:
    pot, force = config.potential.build(), config.forcing.build()
    integ, ens = config.integrator, config.ensemble
    rng = seed_stream(config.seed, "ensemble")
    members = [random_state(rng, config.lattice.N, config.lattice.M, config.lattice.amplitude)
               for _ in range(ens.size)]
    mu = Ensemble.from_states(members, pot=pot, force=force)
    writer.write_json("ensemble.json", mu.to_dict())

    series = intersection_series(mu, integ.horizon, dt=integ.dt, dt_out=integ.dt_out, workers=ens.workers,
                                 pairing_cutoff=ens.pairing_cutoff, n_pairs=ens.mc_pairs,
                                 seed=stream_seed(config.seed, "subsample"))
    writer.write_table("z_series.csv", z_series_frame(series))
    tol_Z = config.tolerances.tol_Z
    summary = {
        "members": len(mu),
        "Z_start": float(series.Z[0]),
        "Z_end": float(series.Z[-1]),
        "max_increase": series.max_increase(),
        "non_increasing": series.max_increase() <= tol_Z,
    }
    if not force.is_dc:
        integer = np.abs(series.t - np.round(series.t)) < 1e-9
        z_int = series.Z[integer]
        summary["max_increase_integer_times"] = float(np.max(np.diff(z_int), initial=0.0))
    else:
        summary["Ztilde_start"] = float(series.Ztilde[0])
        summary["Ztilde_end"] = float(series.Ztilde[-1])
    if not summary["non_increasing"]:
        logger.warning(f"Z increased by {summary['max_increase']:.3g} (> tol_Z={tol_Z:g})")
    writer.write_json(_summary_name("measure"), summary)
    return summary


# ============================================================================
# am
# ============================================================================

def _spread_pick(states: List[ChainState], limit: int) -> List[ChainState]:
    if len(states) <= limit:
        return states
    idx = np.linspace(0, len(states) - 1, limit).round().astype(int)
    return [states[i] for i in idx]


def run_am(config: RunConfig, writer: ArtifactWriter) -> dict:
    pot, force = config.potential.build(), config.forcing.build()
    integ, ens, am, tol = config.integrator, config.ensemble, config.aubry_mather, config.tolerances
    kwargs = dict(n_avg=ens.n_avg, t_quad=ens.t_quad, classify_settings=config.classify_settings(),
                  dt=integ.dt, tol_width=tol.tol_width)
    if am.target is not None:
        built = construct_ordered_sequence(am.target, pot, force, q_max=am.q_max, **kwargs)
    else:
        rho = Fraction(am.p, am.q)
        built = [(rho, construct_ordered_invariant(am.p, am.q, pot, force, **kwargs))]

    rows = []
    for rho, inv in built:
        rows.append({"rho": f"{rho.numerator}/{rho.denominator}", "members": len(inv.ensemble),
                     "verdict": inv.verdict.value, "period": inv.period, "width": inv.report.width,
                     "is_ordered": inv.report.is_ordered})
    writer.write_table("ordered_invariants.csv", pd.DataFrame(rows, columns=["rho", "members", "verdict",
                                                                             "period", "width", "is_ordered"]))
    last_rho, last = built[-1]
    writer.write_json("am_ensemble.json", {"rho": last_rho, **last.ensemble.to_dict()})

    pooled = [m for _, inv in built for m in inv.ensemble.members]
    samples = _spread_pick(pooled, MAX_DIAGNOSTIC_SAMPLES)
    injectivity = injectivity_diagnostic(samples, eps_c=tol.eps_c, eps_pi=tol.eps_pi, workers=ens.workers)
    rows = characteristic_map_samples(samples, pot, force, dc_dt=am.dc_dt, dt=integ.dt, workers=ens.workers)
    writer.write_table("characteristic.csv", characteristic_frame(rows))
    defect = invariance_defect(last.ensemble, tau=1.0, dt=integ.dt, workers=ens.workers)

    summary = {
        "invariants": len(built),
        "rho": last_rho,
        "orderedness": last.report.summary(),
        "injectivity": injectivity.summary(),
        "invariance_defect": {"z": defect.z_defect, "energy": defect.energy_defect, "value": defect.value},
        "commutation_residual": commutation_residual(samples[:8], pot, force, dc_dt=am.dc_dt, dt=integ.dt),
    }
    writer.write_json(_summary_name("am"), summary)
    return summary


# ============================================================================
# depin
# ============================================================================

def run_depin(config: RunConfig, writer: ArtifactWriter) -> dict:
    pot, sweep = config.potential.build(), config.sweep
    if config.forcing.kind != "DC":
        logger.warning("depin sweeps DC forces; the configured AC forcing is ignored")
    points = depinning_sweep(pot, sweep.rho, sweep.F_grid, settings=config.classify_settings(),
                             blocks=sweep.blocks, workers=config.ensemble.workers,
                             tol_v=config.tolerances.tol_v)
    writer.write_table("sweep.csv", sweep_frame(points))
    grid = sweep.F_grid
    summary = {
        "rho": sweep.rho,
        "points": len(points),
        "critical_force": critical_force(points, config.tolerances.tol_v),
        "grid_resolution": max((b - a for a, b in zip(grid, grid[1:])), default=0.0),
        "non_monotone": [p.F for p in points if p.flag == "non-monotone"],
        "undetermined": [p.F for p in points if p.verdict == Verdict.UNDETERMINED.value],
    }
    writer.write_json(_summary_name("depin"), summary)
    return summary


# ============================================================================
# residence
# ============================================================================

def reference_set(mu: Ensemble, config: RunConfig, per_orbit: int = 32) -> List[ChainState]:
    """Equilibria and sampled sliding orbits reached by the members, deduplicated."""
    settings = config.classify_settings()
    eps = config.residence.eps

    def classify(state: ChainState):
        return classify_asymptotics(state, mu.pot, mu.force, **settings)

    found: List[ChainState] = []
    for report in ordered_map(classify, mu.members, config.ensemble.workers):
        if report.verdict == Verdict.EQUILIBRIUM:
            candidates = [report.final_state]
        elif report.verdict == Verdict.PERIODIC_SLIDING:
            orbit = report.trajectory.window(report.trajectory.times[-1] - report.t0).states()
            candidates = _spread_pick(orbit, per_orbit)
        else:
            continue
        for c in candidates:
            c = c.replace(t=0.0)
            if not any(config_distance(c, a) < 0.1 * eps for a in found):
                found.append(c)
    return found


def run_residence(config: RunConfig, writer: ArtifactWriter) -> dict:
    pot, force = config.potential.build(), config.forcing.build()
    res, integ = config.residence, config.integrator
    rng = seed_stream(config.seed, "residence")
    members = [random_state(rng, config.lattice.N, config.lattice.M, config.lattice.amplitude)
               for _ in range(config.ensemble.size)]
    mu = Ensemble.from_states(members, pot=pot, force=force)
    A_hat = reference_set(mu, config)
    if not A_hat:
        raise PreconditionError("no member settled on an equilibrium or sliding orbit; reference set is empty")

    rows = []
    for S in res.horizons:
        fraction = attractor_residence(mu, A_hat, S, res.eps, n_times=res.n_times, dt=integ.dt,
                                       workers=config.ensemble.workers)
        rows.append({"S": S, "eps": res.eps, "fraction": fraction})
    writer.write_table("residence.csv", pd.DataFrame(rows, columns=["S", "eps", "fraction"]))
    fractions = [r["fraction"] for r in rows]
    summary = {
        "members": len(mu),
        "reference_states": len(A_hat),
        "fractions": fractions,
        "non_decreasing": all(b >= a for a, b in zip(fractions, fractions[1:])),
    }
    writer.write_json(_summary_name("residence"), summary)
    return summary


# ============================================================================
# report
# ============================================================================

def run_report(config: RunConfig, writer: ArtifactWriter) -> dict:
    known = artifact_hashes()
    history = run_history()
    summary = {"runs": len(history), "commands": sorted({h["command"] for h in history})}
    writer.write_json(_summary_name("report"), summary)
    known[_summary_name("report")] = {"config_hash": writer.config_hash}
    manifest = build_manifest(writer.output_dir, writer.config_hash, history, known)
    writer.write_json(MANIFEST_FILE, manifest)
    summary["artifacts"] = len(manifest["artifacts"])
    return summary


COMMANDS: Dict[str, Callable[[RunConfig, ArtifactWriter], dict]] = {
    "simulate": run_simulate,
    "zero-audit": run_zero_audit,
    "measure": run_measure,
    "am": run_am,
    "depin": run_depin,
    "residence": run_residence,
    "report": run_report,
}


def execute(command: str, config: RunConfig) -> int:
    """
    Run one command against a validated configuration.

    Returns:
        0 on success, 2 for configuration errors, 3 for numerical or other
        runtime failures, 4 when a zero-balance audit fails
    """
    if command not in COMMANDS:
        logger.error(f"Unknown command '{command}'; choose from {sorted(COMMANDS)}")
        return EXIT_CONFIG
    init_db(config.output_dir)
    chash = config_hash(config)
    run_id = start_run(command, chash, config.seed)
    writer = ArtifactWriter(config.output_dir, chash)
    logger.info(f"Run {run_id}: {command} (config {chash[:12]}, seed {config.seed})")

    message = None
    try:
        COMMANDS[command](config, writer)
        code = EXIT_OK
    except AuditFailure as e:
        logger.error(f"{command} audit failed: {e}")
        code, message = EXIT_AUDIT, str(e)
    except ConfigError as e:
        logger.error(f"{command} configuration error at '{e.key}': {e}")
        code, message = EXIT_CONFIG, str(e)
    except ChainError as e:
        logger.error(f"{command} failed: {type(e).__name__}: {e}")
        code, message = EXIT_RUNTIME, f"{type(e).__name__}: {e}"
    except Exception as e:
        logger.error(f"{command} crashed: {e}", exc_info=True)
        code, message = EXIT_RUNTIME, f"{type(e).__name__}: {e}"

    finish_run(run_id, code, message, writer.entries)
    logger.info(f"Run {run_id} finished with exit code {code}")
    return code
