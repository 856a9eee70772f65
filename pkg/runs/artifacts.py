"""
CSV / JSON artifact writers and the manifest builder.

Tables go through pandas with a fixed float format and JSON through
json.dump with sorted keys, so identical runs produce identical bytes.
"""
import hashlib
import json
import logging
import math
from dataclasses import asdict
from fractions import Fraction
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from chain.aubry_mather import CharacteristicRow
from chain.integrator import Trajectory
from chain.measures import ZSeries
from chain.sliding import ModulationTable, SweepPoint
from chain.zeroset import EventLedger, ZeroEvent

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.12g"
MANIFEST_FILE = "manifest.json"


def file_sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for block in iter(lambda: f.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


def clean_json(value: Any) -> Any:
    """Recursively turn numpy scalars, fractions and non-finite floats into plain JSON values."""
    if isinstance(value, dict):
        return {str(k): clean_json(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [clean_json(v) for v in value]
    if isinstance(value, np.ndarray):
        return clean_json(value.tolist())
    if isinstance(value, Fraction):
        return f"{value.numerator}/{value.denominator}"
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


class ArtifactWriter:
    """Writes the artifacts of one command and remembers their manifest entries."""

    def __init__(self, output_dir, config_hash: str):
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.config_hash = config_hash
        self.entries: List[Dict[str, Any]] = []

    def _register(self, path: Path, rows: Optional[int]) -> Dict[str, Any]:
        entry = {"file": path.name, "rows": rows, "sha256": file_sha256(path),
                 "config_hash": self.config_hash}
        self.entries = [e for e in self.entries if e["file"] != path.name] + [entry]
        logger.info(f"Wrote {path} ({'json' if rows is None else f'{rows} rows'})")
        return entry

    def write_table(self, name: str, frame: pd.DataFrame) -> Path:
        path = self.output_dir / name
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        self._register(path, int(len(frame)))
        return path

    def write_json(self, name: str, payload: Any) -> Path:
        path = self.output_dir / name
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(clean_json(payload), f, indent=2, sort_keys=True)
            f.write("\n")
        self._register(path, None)
        return path


# ============================================================================
# Frame builders
# ============================================================================

def trajectory_frame(traj: Trajectory) -> pd.DataFrame:
    frame = pd.DataFrame(traj.values, columns=[f"u_{j}" for j in range(traj.N)])
    frame.insert(0, "t", traj.times)
    return frame


def events_frame(events: Sequence[ZeroEvent], **labels) -> pd.DataFrame:
    columns = list(labels) + ["t", "site", "kind", "direction", "degree", "type",
                              "count_to_at", "count_from_at", "delta_z"]
    rows = []
    for e in events:
        rows.append({**labels, "t": e.time, "site": e.site, "kind": e.kind.value, "direction": e.direction,
                     "degree": e.degree, "type": e.zero_type.value if e.zero_type else "",
                     "count_to_at": e.count_to_at, "count_from_at": e.count_from_at, "delta_z": e.delta_z})
    return pd.DataFrame(rows, columns=columns)


def ledger_frame(ledger: EventLedger, **labels) -> pd.DataFrame:
    frame = pd.DataFrame({"site": np.arange(ledger.n_sites), "c": ledger.c, "d": ledger.d})
    for k, (key, value) in enumerate(labels.items()):
        frame.insert(k, key, value)
    return frame


def z_series_frame(series: ZSeries) -> pd.DataFrame:
    return pd.DataFrame({"t": series.t, "Z": series.Z, "Zself": series.Zself,
                         "Ztilde": series.Ztilde, "stat_err": series.stat_err})


def sweep_frame(points: Sequence[SweepPoint]) -> pd.DataFrame:
    return pd.DataFrame([asdict(p) for p in points],
                        columns=["F", "v", "verdict", "t0", "residual_dissipation", "flag"])


def modulation_frame(table: ModulationTable) -> pd.DataFrame:
    return pd.DataFrame({"x": table.x, "m": table.m, "count": table.count, "spread": table.spread})


def characteristic_frame(rows: Sequence[CharacteristicRow]) -> pd.DataFrame:
    return pd.DataFrame([asdict(r) for r in rows], columns=["x", "p", "x_T", "p_T", "x_phi", "p_phi"])


# ============================================================================
# Manifest
# ============================================================================

def _csv_rows(path: Path) -> int:
    return int(len(pd.read_csv(path)))


def build_manifest(output_dir, config_hash: str, history: Sequence[Dict[str, Any]],
                   known: Optional[Dict[str, Dict[str, Any]]] = None) -> Dict[str, Any]:
    """
    Manifest of every CSV / JSON artifact on disk, sorted by file name.

    Entries recorded by earlier runs keep their config hash; files nobody
    recorded are stamped with `config_hash`.
    """
    output_dir = Path(output_dir)
    known = known or {}
    entries = []
    for path in sorted(output_dir.iterdir()):
        if path.suffix not in (".csv", ".json") or path.name == MANIFEST_FILE:
            continue
        rows = _csv_rows(path) if path.suffix == ".csv" else None
        stamp = known.get(path.name, {}).get("config_hash", config_hash)
        entries.append({"file": path.name, "rows": rows, "sha256": file_sha256(path), "config_hash": stamp})
    return {"artifacts": entries, "history": list(history)}
