"""Versioned JSON reports and tensor diffs."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .core import MambaConfig
from .memory import CLASSES, EnergyModel, TrafficStats

SCHEMA_VERSION = 1
REPORT_FIELDS = frozenset({"schema_version", "label", "config", "flags", "stats", "time_shares",
                           "diff", "instructions", "hbm_bytes_by_tensor", "exp_faults"})
DIFF_FIELDS = frozenset({"max_abs", "max_rel", "mismatches", "tol", "passed", "reference"})


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class Diff:
    max_abs: float
    max_rel: float
    mismatches: int
    tol: float
    reference: str = "golden"

    @property
    def passed(self) -> bool:
        return self.max_rel <= self.tol

    def to_dict(self) -> dict:
        return {"max_abs": self.max_abs, "max_rel": self.max_rel, "mismatches": self.mismatches,
                "tol": self.tol, "passed": self.passed, "reference": self.reference}


def compare(actual, expected, tol: float = 1e-4, *, reference: str = "golden") -> Diff:
    """Max-abs and max-rel error, plus the count of lanes that differ bitwise."""
    a = np.asarray(actual, dtype=np.float32)
    e = np.asarray(expected, dtype=np.float32)
    if a.shape != e.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {e.shape}")
    if a.size == 0:
        return Diff(0.0, 0.0, 0, tol, reference)
    a64, e64 = a.astype(np.float64), e.astype(np.float64)
    abs_err = np.abs(a64 - e64)
    same = (a == e) | (np.isnan(a) & np.isnan(e))
    abs_err = np.where(same, 0.0, abs_err)
    rel = np.where(same, 0.0, abs_err / np.maximum(np.abs(e64), np.finfo(np.float32).tiny))
    return Diff(float(abs_err.max()), float(rel.max()), int((~same).sum()), tol, reference)


def time_shares(stats: TrafficStats) -> dict[str, float]:
    return stats.class_shares()


def build_report(stats: TrafficStats, *, config: MambaConfig | None = None, flags: dict | None = None,
                 diff: Diff | None = None, energy: EnergyModel | None = None) -> dict:
    label = "desk-scale proxy" if config is not None and config.is_proxy else "full-size"
    rep = {
        "schema_version": SCHEMA_VERSION,
        "label": label if config is not None else "microprogram",
        "config": config.to_dict() if config is not None else None,
        "flags": dict(sorted((flags or {}).items())),
        "stats": stats.to_dict(energy),
        "time_shares": time_shares(stats),
        "diff": diff.to_dict() if diff is not None else None,
        "instructions": stats.instructions,
        "hbm_bytes_by_tensor": dict(sorted(stats.hbm_bytes_by_tensor.items())),
        "exp_faults": stats.exp_faults,
    }
    validate_report(rep)
    return rep


def validate_report(rep: dict) -> None:
    unknown = set(rep) - REPORT_FIELDS
    if unknown:
        raise SchemaError(f"unknown report fields: {sorted(unknown)}")
    missing = REPORT_FIELDS - set(rep)
    if missing:
        raise SchemaError(f"missing report fields: {sorted(missing)}")
    if rep["schema_version"] != SCHEMA_VERSION:
        raise SchemaError(f"unsupported schema version {rep['schema_version']}")
    if rep["diff"] is not None and set(rep["diff"]) != DIFF_FIELDS:
        raise SchemaError("malformed diff block")
    shares = rep["time_shares"]
    if set(shares) != set(CLASSES):
        raise SchemaError("time shares must cover every op class")
    total = sum(shares.values())
    if total and abs(total - 1.0) > 1e-9:
        raise SchemaError(f"time shares sum to {total}")


def dumps(rep: dict) -> str:
    validate_report(rep)
    return json.dumps(rep, indent=1, sort_keys=True) + "\n"


def loads(text: str) -> dict:
    rep = json.loads(text)
    validate_report(rep)
    return rep
