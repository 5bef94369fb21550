"""Estimators of the ideal (full-population) loss from partially observed errors.

Every estimator takes per-pair arrays of equal shape.  ``e`` only has to be
meaningful where ``o == 1``; entries at unexposed pairs are ignored (they may
be NaN), except by :func:`ideal_loss`, which needs all of them.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from typing import Iterable, Optional

import numpy as np

from .core import DomainError, PropensityField

__all__ = [
    "EstimateReport",
    "ideal_loss",
    "naive_loss",
    "ips_loss",
    "snips_loss",
    "eib_loss",
    "dr_loss",
    "correction_term",
    "tdr_loss",
    "relative_error",
    "ESTIMATORS",
    "write_reports",
]


def _p(p_hat) -> np.ndarray:
    if isinstance(p_hat, PropensityField):
        return p_hat.p_hat
    return np.asarray(p_hat, dtype=np.float64)


def _observed(e, o):
    """Return the exposure mask and ``e`` with unexposed entries zeroed."""
    o = np.asarray(o)
    mask = o.astype(bool)
    e = np.where(mask, np.asarray(e, dtype=np.float64), 0.0)
    return mask, e


def _safe_inverse(p, mask) -> np.ndarray:
    if np.any(p[mask] <= 0):
        raise DomainError("propensity must be positive on exposed pairs")
    return np.where(mask, 1.0 / np.where(mask, p, 1.0), 0.0)


def ideal_loss(e) -> float:
    e = np.asarray(e, dtype=np.float64)
    return float(np.mean(e))


def naive_loss(e, o) -> float:
    """Average error over the exposed pairs only."""
    mask, e = _observed(e, o)
    n = int(mask.sum())
    if n == 0:
        raise DomainError("naive loss needs at least one exposed pair")
    return float(e.sum() / n)


def ips_loss(e, o, p_hat) -> float:
    mask, e = _observed(e, o)
    inv = _safe_inverse(_p(p_hat), mask)
    return float(np.sum(e * inv) / e.size)


def snips_loss(e, o, p_hat) -> float:
    mask, e = _observed(e, o)
    inv = _safe_inverse(_p(p_hat), mask)
    norm = inv.sum()
    if norm <= 0:
        raise DomainError("SNIPS normalizer is zero (no exposed pairs)")
    return float(np.sum(e * inv) / norm)


def eib_loss(e, o, e_hat) -> float:
    mask, e = _observed(e, o)
    e_hat = np.asarray(e_hat, dtype=np.float64)
    return float(np.mean(np.where(mask, e, e_hat)))


def dr_loss(e, o, e_hat, p_hat) -> float:
    mask, e = _observed(e, o)
    e_hat = np.asarray(e_hat, dtype=np.float64)
    inv = _safe_inverse(_p(p_hat), mask)
    resid = np.where(mask, e - e_hat, 0.0)
    return float(np.mean(e_hat + resid * inv))


def correction_term(e, o, e_hat, p_hat) -> float:
    """The amount DR adds on top of EIB: mean of ``o (e - e_hat) (1 - p)/p``."""
    mask, e = _observed(e, o)
    e_hat = np.asarray(e_hat, dtype=np.float64)
    inv = _safe_inverse(_p(p_hat), mask)
    resid = np.where(mask, e - e_hat, 0.0)
    return float(np.mean(resid * (inv - 1.0) * mask))


def tdr_loss(e, o, e_tilde, p_hat) -> float:
    """DR with the targeted imputation ``e_tilde`` in place of the raw one."""
    return dr_loss(e, o, e_tilde, p_hat)


def relative_error(est: float, ideal: float) -> float:
    if not ideal > 0:
        raise DomainError(f"relative error needs a positive ideal loss, got {ideal}")
    return abs(ideal - est) / ideal


@dataclass
class EstimateReport:
    estimator_name: str
    loss_value: float
    ideal_loss: Optional[float] = None
    relative_error: Optional[float] = None
    replicate: Optional[int] = None
    scenario: Optional[str] = None

    @classmethod
    def build(cls, name, value, ideal=None, replicate=None, scenario=None):
        re = None
        if ideal is not None and ideal > 0:
            re = relative_error(value, ideal)
        return cls(name, float(value), None if ideal is None else float(ideal),
                   re, replicate, scenario)


# Name -> callable taking (e, o, e_hat, p_hat); TDR expects a targeted e_hat.
ESTIMATORS = {
    "Naive": lambda e, o, e_hat, p_hat: naive_loss(e, o),
    "EIB": lambda e, o, e_hat, p_hat: eib_loss(e, o, e_hat),
    "IPS": lambda e, o, e_hat, p_hat: ips_loss(e, o, p_hat),
    "SNIPS": lambda e, o, e_hat, p_hat: snips_loss(e, o, p_hat),
    "DR": lambda e, o, e_hat, p_hat: dr_loss(e, o, e_hat, p_hat),
}

REPORT_FIELDS = ["replicate", "scenario", "estimator_name", "loss_value",
                 "ideal_loss", "relative_error"]


def write_reports(reports: Iterable[EstimateReport], path, fmt: str = "csv") -> None:
    rows = [asdict(r) for r in reports]
    with open(path, "w", newline="") as fh:
        if fmt == "json":
            json.dump(rows, fh, indent=2, sort_keys=True)
            fh.write("\n")
        else:
            writer = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
            writer.writeheader()
            for row in rows:
                writer.writerow({k: _fmt(row[k]) for k in REPORT_FIELDS})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else v
