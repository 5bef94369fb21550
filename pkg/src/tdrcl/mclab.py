"""Monte-Carlo checks of estimator bias and variance on fully known worlds.

A world fixes, for every pair, the exposure probability ``p``, the conditional
mean error ``g`` and the conditional error variance ``sigma2``.  Each replicate
draws exposures and errors (and, in the default random design, also which
pairs make up the population) and evaluates every estimator.  Empirical
moments are compared with closed forms.

Two designs are supported:

``random``
    each replicate draws |D| pairs uniformly with replacement from the world,
    so covariates are random, as in the textbook variance expressions
    ``|D|^-1 [E(.) - (E e)^2]``.
``fixed``
    the pair set is held fixed; the closed forms become sums of per-pair
    conditional variances divided by ``|D|^2``.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import estimators as est
from .core import ConfigError, PairSpace, SeededRng, as_generator
from .targeting import target

ESTIMATOR_NAMES = ("IPS", "EIB", "DR", "TDR")
DESIGNS = ("random", "fixed")


@dataclass
class MCWorld:
    space: PairSpace
    p_true: np.ndarray
    g_true: np.ndarray
    sigma2: np.ndarray

    def __post_init__(self):
        for name in ("p_true", "g_true", "sigma2"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != self.space.shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {self.space.shape}")
            setattr(self, name, arr)
        if np.any(self.sigma2 < 0):
            raise ValueError("sigma2 must be non-negative")
        if np.any(self.p_true <= 0) or np.any(self.p_true > 1):
            raise ValueError("p_true must lie in (0, 1]")
        if np.any(self.g_true <= 0) and np.any(self.sigma2 > 0):
            raise ValueError("gamma errors need g_true > 0 wherever sigma2 > 0")

    @classmethod
    def random(cls, n_users: int, n_items: int, rng=None, p_min: float = 0.05, p_max: float = 1.0,
               g_range=(0.2, 1.5), cv: float = 0.8) -> "MCWorld":
        """Random world with ``p ~ U[p_min, p_max]``, ``g ~ U[g_range]`` and ``sd = cv * g``."""
        gen = as_generator(rng, "mc-world")
        shape = (n_users, n_items)
        p = gen.uniform(p_min, p_max, shape)
        p.flat[0] = p_min  # pin the minimum so it is exact
        g = gen.uniform(*g_range, shape)
        return cls(PairSpace(n_users, n_items), p, g, (cv * g) ** 2)

    def sample_errors(self, gen: np.random.Generator, g=None, sigma2=None) -> np.ndarray:
        """Gamma errors with mean ``g`` and variance ``sigma2`` (point mass where ``sigma2 == 0``)."""
        g = self.g_true if g is None else g
        sigma2 = self.sigma2 if sigma2 is None else sigma2
        out = np.array(g, dtype=np.float64, copy=True)
        m = sigma2 > 0
        if m.any():
            shape = g[m] ** 2 / sigma2[m]
            scale = sigma2[m] / g[m]
            out[m] = gen.gamma(shape, scale)
        return out


def sweep_world(n_users: int, n_items: int, p_min: float, rng=None, block_share: float = 0.1,
                g_range=(0.2, 1.5), cv: float = 0.8) -> MCWorld:
    """World where a fixed block of pairs sits at ``p_min`` and the rest has ``p ~ U[0.6, 1]``.

    ``rng`` fixes everything except ``p_min``, so a grid of worlds differs only
    in that block.
    """
    gen = as_generator(rng, "sweep-world")
    shape = (n_users, n_items)
    n = n_users * n_items
    block = np.zeros(n, dtype=bool)
    block[gen.permutation(n)[: max(1, int(round(block_share * n)))]] = True
    p = gen.uniform(0.6, 1.0, n)
    g = gen.uniform(*g_range, n)
    p[block] = p_min
    return MCWorld(PairSpace(n_users, n_items), p.reshape(shape), g.reshape(shape),
                   ((cv * g) ** 2).reshape(shape))


@dataclass
class MCScenario:
    """Which nuisances are accurate.

    A corrupted imputation is ``g + imputation_shift``.  Corrupted propensities
    use the harmonic beta mixture toward the average exposure rate, with one
    beta per pair drawn once per experiment (so ``p_hat`` is a fixed function
    of the pair, like a misspecified model).
    """

    accurate_propensity: bool = True
    accurate_imputation: bool = True
    imputation_shift: float = 0.3
    beta_low: float = 0.0
    beta_high: float = 1.0

    def propensities(self, world: MCWorld, gen: np.random.Generator) -> np.ndarray:
        if self.accurate_propensity:
            return world.p_true
        p_e = float(world.p_true.mean())
        beta = gen.uniform(self.beta_low, self.beta_high, world.space.shape)
        return np.minimum(1.0 / ((1.0 - beta) / world.p_true + beta / p_e), 1.0)

    def imputation(self, world: MCWorld) -> np.ndarray:
        if self.accurate_imputation:
            return world.g_true
        return world.g_true + self.imputation_shift


@dataclass
class EstimatorStats:
    mean: float
    var: float
    se_mean: float
    se_var: float
    bias: float
    se_bias: float
    closed_var: Optional[float] = None
    closed_bias: Optional[float] = None


@dataclass
class MCReport:
    replicates: int
    design: str
    ideal_mean: float
    stats: Dict[str, EstimatorStats]
    max_identity_gap: float
    samples: Dict[str, np.ndarray] = field(repr=False, default_factory=dict)

    def variance_gap(self, a: str, b: str):
        """``Var(a) - Var(b)`` and its standard error from the paired replicates."""
        return paired_variance_gap(self.samples[a], self.samples[b])

    def rows(self) -> List[dict]:
        out = []
        for name, s in self.stats.items():
            row = {"estimator": name, "replicates": self.replicates, "design": self.design}
            row.update(s.__dict__)
            out.append(row)
        return out


def paired_variance_gap(x: np.ndarray, y: np.ndarray):
    """``Var(x) - Var(y)`` and its SE, for replicate draws paired by index."""
    cx = x - x.mean()
    cy = y - y.mean()
    d = cx * cx - cy * cy
    n = d.size
    return float(d.mean() * n / (n - 1)), float(d.std(ddof=1) / np.sqrt(n))


def _var_se(x: np.ndarray) -> float:
    c = x - x.mean()
    m2 = np.mean(c ** 2)
    m4 = np.mean(c ** 4)
    return float(np.sqrt(max(m4 - m2 * m2, 0.0) / x.size))


def closed_form_variance(world: MCWorld, design: str = "random") -> Dict[str, float]:
    """Exact variances with accurate propensities and imputation ``g``."""
    p, g, s2 = world.p_true, world.g_true, world.sigma2
    n = p.size
    if design == "random":
        mean_e2 = float(np.mean(g)) ** 2
        return {
            "IPS": float(np.mean((s2 + g * g) / p) - mean_e2) / n,
            "DR": float(np.mean(s2 / p + g * g) - mean_e2) / n,
            "EIB": float(np.mean(p * s2 + g * g) - mean_e2) / n,
        }
    if design == "fixed":
        return {
            "IPS": float(np.sum((s2 + g * g) / p - g * g)) / n ** 2,
            "DR": float(np.sum(s2 / p)) / n ** 2,
            "EIB": float(np.sum(p * s2)) / n ** 2,
        }
    raise ConfigError(f"unknown design {design!r}")


def closed_form_bias(world: MCWorld, e_hat, p_hat) -> Dict[str, float]:
    """Biases of EIB and DR given fixed ``e_hat`` and ``p_hat``."""
    p, g = world.p_true, world.g_true
    e_hat = np.asarray(e_hat, dtype=np.float64)
    p_hat = np.asarray(p_hat, dtype=np.float64)
    return {
        "EIB": float(np.mean((1.0 - p) * (e_hat - g))),
        "DR": float(np.mean((p - p_hat) / p_hat * (g - e_hat))),
        "IPS": float(np.mean(g * (p / p_hat - 1.0))),
    }


def run_bias_variance(world: MCWorld, scenario: Optional[MCScenario] = None, replicates: int = 2000,
                      seed: int = 0, design: str = "random") -> MCReport:
    if replicates < 100:
        raise ConfigError("run at least 100 replicates")
    if design not in DESIGNS:
        raise ConfigError(f"unknown design {design!r}")
    scenario = scenario or MCScenario()
    root = SeededRng(seed).child("mc")
    p_hat_all = scenario.propensities(world, root.generator("p_hat"))
    e_hat_all = scenario.imputation(world)
    p_all, g_all, s2_all = world.p_true.ravel(), world.g_true.ravel(), world.sigma2.ravel()
    ph_all, eh_all = p_hat_all.ravel(), e_hat_all.ravel()
    n = p_all.size

    draws = {name: np.empty(replicates) for name in ESTIMATOR_NAMES}
    ideal = np.empty(replicates)
    gap = 0.0
    for rep in range(replicates):
        gen = root.child("rep").child(rep).generator("draw")
        if design == "random":
            idx = gen.integers(0, n, n)
            p, g, s2, ph, eh = p_all[idx], g_all[idx], s2_all[idx], ph_all[idx], eh_all[idx]
        else:
            p, g, s2, ph, eh = p_all, g_all, s2_all, ph_all, eh_all
        o = (gen.random(n) < p).astype(np.int8)
        e = world.sample_errors(gen, g, s2)
        ideal[rep] = e.mean()
        draws["IPS"][rep] = est.ips_loss(e, o, ph)
        draws["EIB"][rep] = est.eib_loss(e, o, eh)
        draws["DR"][rep] = est.dr_loss(e, o, eh, ph)
        e_tilde, _ = target(e, o, eh, ph)
        draws["TDR"][rep] = est.tdr_loss(e, o, e_tilde, ph)
        ident = draws["EIB"][rep] + est.correction_term(e, o, eh, ph) - draws["DR"][rep]
        gap = max(gap, abs(ident))

    accurate = scenario.accurate_propensity and scenario.accurate_imputation
    closed_var = closed_form_variance(world, design) if accurate else {}
    closed_bias = closed_form_bias(world, e_hat_all, p_hat_all)
    stats = {}
    sq = np.sqrt(replicates)
    for name, x in draws.items():
        diff = x - ideal
        cb = closed_bias.get(name)
        if name == "TDR":
            cb = None  # data-dependent imputation: no closed form in general
        stats[name] = EstimatorStats(
            mean=float(x.mean()), var=float(x.var(ddof=1)),
            se_mean=float(x.std(ddof=1) / sq), se_var=_var_se(x),
            bias=float(diff.mean()), se_bias=float(diff.std(ddof=1) / sq),
            closed_var=closed_var.get(name), closed_bias=cb)
    return MCReport(replicates, design, float(ideal.mean()), stats, gap, draws)


def small_propensity_sweep(p_grid: Sequence[float], replicates: int = 1000, n_users: int = 50,
                           n_items: int = 50, seed: int = 0, design: str = "random") -> List[dict]:
    """Variances of IPS/DR/EIB on worlds that differ only in their low-propensity block."""
    rows = []
    for p_min in p_grid:
        world = sweep_world(n_users, n_items, p_min, SeededRng(seed).child("sweep"))
        rep = run_bias_variance(world, MCScenario(), replicates, seed, design)
        closed = closed_form_variance(world, design)
        for name in ("IPS", "DR", "EIB"):
            s = rep.stats[name]
            rows.append({"p_min": float(p_min), "estimator": name, "var": s.var, "se_var": s.se_var,
                         "closed_var": closed[name], "_samples": rep.samples[name]})
    return rows


def check_sweep(rows: Sequence[dict], z: float = 3.0, eib_tolerance: float = 0.05) -> List[str]:
    """Failures of the sweep expectations (empty list means all hold).

    Grid points are taken in decreasing ``p_min`` order.  IPS and DR variance
    must grow by more than ``z`` SE at each step (SE from draws paired by
    replicate, since every grid point reuses the same streams); EIB's
    closed-form variance may
    move by less than ``eib_tolerance`` relative, and every empirical variance
    must sit within ``z`` SE of its closed form.
    """
    failures = []
    by_name: Dict[str, List[dict]] = {}
    for r in rows:
        by_name.setdefault(r["estimator"], []).append(r)
    for name, rs in by_name.items():
        rs = sorted(rs, key=lambda r: -r["p_min"])
        for r in rs:
            if abs(r["var"] - r["closed_var"]) > z * r["se_var"]:
                failures.append(f"{name} at p_min={r['p_min']}: empirical variance {r['var']:.3e} "
                                f"is not within {z} SE of closed form {r['closed_var']:.3e}")
        for a, b in zip(rs[:-1], rs[1:]):
            if name in ("IPS", "DR"):
                if "_samples" in a and "_samples" in b:
                    diff, se = paired_variance_gap(b["_samples"], a["_samples"])
                else:
                    diff, se = b["var"] - a["var"], float(np.hypot(a["se_var"], b["se_var"]))
                if not diff > z * se:
                    failures.append(f"{name}: variance did not grow by > {z} SE from "
                                    f"p_min={a['p_min']} to {b['p_min']}")
            elif name == "EIB":
                rel = abs(b["closed_var"] - a["closed_var"]) / a["closed_var"]
                if rel >= eib_tolerance:
                    failures.append(f"EIB: variance moved {rel:.1%} from p_min={a['p_min']} to {b['p_min']}")
    return failures


def write_rows(rows: Sequence[dict], path, fmt: str = "csv") -> None:
    clean = [{k: v for k, v in r.items() if not k.startswith("_")} for r in rows]
    with open(path, "w", newline="") as fh:
        if fmt == "json":
            json.dump(clean, fh, indent=2, sort_keys=True)
            fh.write("\n")
            return
        fields = list(clean[0]) if clean else []
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for r in clean:
            writer.writerow({k: repr(v) if isinstance(v, float) else ("" if v is None else v)
                             for k, v in r.items()})
