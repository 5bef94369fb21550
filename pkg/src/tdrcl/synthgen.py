"""Semi-synthetic MNAR worlds built from a completed five-point rating matrix.

Pipeline: rating triples -> MF completion -> integer ratings R -> exposure
propensities and true click probabilities -> per-replicate Bernoulli draws of
exposures and labels, noisy propensity estimates and shared imputed errors.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import estimators as est
from .archive import read_archive, write_archive
from .core import (
    LOG_EPS,
    ConfigError,
    DomainError,
    PairSpace,
    PropensityField,
    SeededRng,
    as_generator,
    bernoulli_sample,
    binary_cross_entropy,
)
from .models import AdamState, MFParams, adam_step
from .targeting import target

log = logging.getLogger(__name__)

RTRUE_LEVELS = (0.1, 0.3, 0.5, 0.7, 0.9)
WORLD_MAGIC = b"TDRWRLD\x01"


class Scenario(str, Enum):
    ONE = "ONE"
    THREE = "THREE"
    FIVE = "FIVE"
    ROTATE = "ROTATE"
    SKEW = "SKEW"
    CRS = "CRS"


ALL_SCENARIOS = tuple(Scenario)


@dataclass
class MFCompletionConfig:
    dim: int = 32
    lr: float = 0.02
    weight_decay: float = 1e-4
    max_epochs: int = 2000
    patience: int = 50
    holdout_fraction: float = 0.1
    init_scale: float = 0.1


@dataclass
class SynthConfig:
    alpha: float = 0.5
    p_base: float = 1.0
    target_obs_rate: Optional[float] = 0.05
    n_replicates: int = 20
    seed: int = 0
    beta_per_pair: bool = True
    # Marginal imposed on the completed matrix; None keeps plain rounding.
    rating_proportions: Optional[Sequence[float]] = (0.52, 0.24, 0.14, 0.07, 0.03)
    mf: MFCompletionConfig = field(default_factory=MFCompletionConfig)

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must be in (0, 1), got {self.alpha}")
        if self.p_base <= 0:
            raise ConfigError(f"p_base must be positive, got {self.p_base}")
        if self.target_obs_rate is not None and not 0.0 < self.target_obs_rate <= 1.0:
            raise ConfigError(f"target_obs_rate must be in (0, 1], got {self.target_obs_rate}")
        if self.n_replicates < 1:
            raise ConfigError("n_replicates must be positive")
        if self.rating_proportions is not None:
            props = tuple(float(x) for x in self.rating_proportions)
            if len(props) != 5 or min(props) < 0 or abs(sum(props) - 1.0) > 1e-9:
                raise ConfigError("rating_proportions must be five non-negative shares summing to 1")
            self.rating_proportions = props
        if isinstance(self.mf, dict):
            self.mf = MFCompletionConfig(**self.mf)


@dataclass(frozen=True)
class PredictionMatrix:
    scenario: Scenario
    r_hat: np.ndarray


# --------------------------------------------------------------------------
# Rating completion


def complete_scores(users, items, ratings, space: PairSpace,
                    mf_config: Optional[MFCompletionConfig] = None,
                    rng=None) -> np.ndarray:
    """Continuous squared-loss MF predictions for every pair.

    Users or items without any rating fall back to the global mean plus the
    other side's bias.
    """
    cfg = mf_config or MFCompletionConfig()
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    ratings = np.asarray(ratings, dtype=np.float64)
    if ratings.size == 0:
        raise DomainError("rating completion needs at least one observed rating")
    space.check(users, items)
    rng = rng if isinstance(rng, SeededRng) else SeededRng(0 if rng is None else int(rng))

    mu = float(ratings.mean())
    n = ratings.size
    perm = rng.generator("mf-holdout").permutation(n)
    n_hold = int(round(cfg.holdout_fraction * n)) if n >= 20 else 0
    hold, fit = perm[:n_hold], perm[n_hold:]

    params = MFParams.init(space.n_users, space.n_items, cfg.dim, rng.child("mf-init"), cfg.init_scale)
    params.global_bias[0] = mu
    arrays = params.arrays()
    state = AdamState(lr=cfg.lr, weight_decay=0.0)
    fu, fi, fr = users[fit], items[fit], ratings[fit]

    def holdout_rmse():
        if n_hold == 0:
            return float("nan")
        pred = params.logits(users[hold], items[hold])
        return float(np.sqrt(np.mean((pred - ratings[hold]) ** 2)))

    best, best_params, bad = np.inf, params.copy(), 0
    for epoch in range(cfg.max_epochs):
        pred = params.logits(fu, fi)
        dlogit = 2.0 * (pred - fr) / fr.size
        grads = params.backward(fu, fi, dlogit)
        for k in ("user", "item", "user_bias", "item_bias"):
            grads[k] = grads[k] + cfg.weight_decay * arrays[k]
        adam_step(arrays, grads, state)
        if n_hold == 0:
            continue
        score = holdout_rmse()
        if score < best - 1e-6:
            best, best_params, bad = score, params.copy(), 0
        else:
            bad += 1
            if bad >= cfg.patience:
                break
    if n_hold:
        params = best_params
    seen_u = np.bincount(users, minlength=space.n_users) > 0
    seen_i = np.bincount(items, minlength=space.n_items) > 0
    params.user[~seen_u] = 0.0
    params.user_bias[~seen_u] = 0.0
    params.item[~seen_i] = 0.0
    params.item_bias[~seen_i] = 0.0
    return params.full_logits()


def complete_ratings(users, items, ratings, space: PairSpace,
                     mf_config: Optional[MFCompletionConfig] = None,
                     rng=None) -> np.ndarray:
    """MF completion rounded to the nearest integer in {1..5}."""
    full = complete_scores(users, items, ratings, space, mf_config, rng)
    return np.clip(np.rint(full), 1, 5).astype(np.int64)


def match_rating_distribution(scores, proportions: Sequence[float]) -> np.ndarray:
    """Relabel a completed matrix so its five levels have the given shares.

    Pairs are ranked by score (ties by flat index) and the lowest share gets
    rating 1, the next share rating 2, and so on.  The ordering of the MF fit
    is kept; only the marginal changes.
    """
    scores = np.asarray(scores, dtype=np.float64)
    props = np.asarray(proportions, dtype=np.float64)
    if props.shape != (5,) or np.any(props < 0) or not np.isclose(props.sum(), 1.0):
        raise ConfigError("rating proportions must be five non-negative shares summing to 1")
    order = np.argsort(scores, axis=None, kind="stable")
    cuts = np.rint(np.cumsum(props) * scores.size).astype(np.int64)
    cuts[-1] = scores.size
    levels = np.empty(scores.size, dtype=np.int64)
    start = 0
    for level, stop in enumerate(cuts, start=1):
        levels[order[start:stop]] = level
        start = stop
    return levels.reshape(scores.shape)


def lowrank_rating_source(n_users: int, n_items: int, rank: int = 4, density: float = 0.15,
                          proportions: Sequence[float] = (0.06, 0.11, 0.27, 0.34, 0.22),
                          rng=None):
    """Built-in offline rating source.

    Draws a low-rank score matrix, cuts it into five levels with the given
    marginal proportions, then reveals a uniformly random ``density`` share of
    entries.  Returns ``(users, items, ratings, full_matrix)``.
    """
    rng = rng if isinstance(rng, SeededRng) else SeededRng(0 if rng is None else int(rng))
    gen = rng.generator("lowrank")
    a = gen.normal(size=(n_users, rank))
    b = gen.normal(size=(n_items, rank))
    scores = a @ b.T / np.sqrt(rank) + 0.5 * gen.normal(size=(n_users, 1)) + 0.5 * gen.normal(size=(1, n_items))
    cuts = np.quantile(scores, np.cumsum(proportions)[:-1])
    full = (np.searchsorted(cuts, scores.ravel(), side="right") + 1).reshape(n_users, n_items)
    mask = rng.generator("lowrank-reveal").random((n_users, n_items)) < density
    users, items = np.nonzero(mask)
    return users, items, full[users, items].astype(np.float64), full


# --------------------------------------------------------------------------
# World construction


def assign_propensities(R, cfg: SynthConfig) -> np.ndarray:
    R = np.asarray(R)
    if np.any((R < 1) | (R > 5)):
        raise DomainError("ratings must lie in {1..5}")
    decay = cfg.alpha ** np.maximum(1, 5 - R)
    p_base = cfg.p_base
    if cfg.target_obs_rate is not None:
        p_base = min(cfg.target_obs_rate / float(decay.mean()), 1.0 / cfg.alpha)
    p = p_base * decay
    if np.any(p <= 0) or np.any(p > 1.0 + 1e-12):
        raise ConfigError("assigned propensities fall outside (0, 1]; lower p_base")
    return np.minimum(p, 1.0)


def map_to_rtrue(R) -> np.ndarray:
    return 0.1 + 0.2 * (np.asarray(R, dtype=np.float64) - 1.0)


def _truncated_normal(mu, sigma, lo, hi, gen) -> np.ndarray:
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), mu.shape)
    out = np.empty(mu.shape)
    todo = np.arange(mu.size)
    flat_mu, flat_sigma = mu.ravel(), sigma.ravel()
    flat = out.ravel()
    while todo.size:
        draw = gen.normal(flat_mu[todo], flat_sigma[todo])
        ok = (draw >= lo) & (draw <= hi)
        flat[todo[ok]] = draw[ok]
        todo = todo[~ok]
    return flat.reshape(mu.shape)


def make_prediction_matrix(scenario, r_true, rng=None) -> PredictionMatrix:
    """Build one of the six mis-specified prediction matrices from ``r_true``."""
    try:
        scenario = Scenario(scenario)
    except ValueError:
        raise ConfigError(f"unknown scenario {scenario!r}") from None
    r_true = np.asarray(r_true, dtype=np.float64)
    levels = np.rint(r_true * 10).astype(int)
    if not np.isin(levels, (1, 3, 5, 7, 9)).all() or not np.allclose(levels / 10, r_true):
        raise DomainError("r_true must take values in {0.1, 0.3, 0.5, 0.7, 0.9}")
    gen = as_generator(rng, f"pred-{scenario.value}")

    if scenario in (Scenario.ONE, Scenario.THREE, Scenario.FIVE):
        src = {Scenario.ONE: 1, Scenario.THREE: 3, Scenario.FIVE: 5}[scenario]
        r_hat = r_true.copy()
        n_flip = int(np.sum(levels == 9))
        candidates = np.flatnonzero(levels.ravel() == src)
        n_flip = min(n_flip, candidates.size)
        chosen = gen.choice(candidates, size=n_flip, replace=False)
        r_hat.ravel()[chosen] = 0.9
    elif scenario is Scenario.ROTATE:
        r_hat = np.where(levels >= 3, r_true - 0.2, 0.9)
    elif scenario is Scenario.SKEW:
        r_hat = _truncated_normal(r_true, (1.0 - r_true) / 2.0, 0.1, 0.9, gen)
    else:
        r_hat = np.where(levels <= 6, 0.2, 0.6)
    return PredictionMatrix(scenario, r_hat)


def noisy_propensities(p_true, o, rng=None, beta=None, per_pair: bool = True) -> PropensityField:
    """Harmonic mix of the true propensity and the global exposure rate.

    ``1/p_hat = (1 - beta)/p + beta/p_e`` with ``beta ~ U[0, 1]``, drawn
    independently for every pair (``per_pair=True``) or once per call.  An
    explicit ``beta`` (scalar or per-pair array) skips the draw.
    """
    p_true = np.asarray(p_true, dtype=np.float64)
    p_e = float(np.mean(o))
    if p_e == 0.0:
        raise DomainError("no exposed pairs: global exposure rate is zero")
    if beta is None:
        gen = as_generator(rng, "beta")
        beta = gen.random(p_true.shape) if per_pair else float(gen.random())
    beta = np.asarray(beta, dtype=np.float64)
    if np.any(beta < 0) or np.any(beta > 1):
        raise DomainError("beta must lie in [0, 1]")
    if not np.any(beta):
        return PropensityField(p_true.copy())
    inv = (1.0 - beta) / p_true + beta / p_e
    return PropensityField(np.minimum(1.0 / inv, 1.0))


def shared_imputed_errors(r, o, p_hat, r_hat) -> np.ndarray:
    """Cross entropy between the IPS-weighted exposed label mean and every ``r_hat``."""
    mask = np.asarray(o).astype(bool)
    if not mask.any():
        raise DomainError("no exposed pairs to average")
    r_hat = r_hat.r_hat if isinstance(r_hat, PredictionMatrix) else np.asarray(r_hat, dtype=np.float64)
    if np.any(r_hat <= 0) or np.any(r_hat >= 1):
        raise DomainError("predicted probabilities must lie strictly inside (0, 1)")
    p = p_hat.p_hat if isinstance(p_hat, PropensityField) else np.asarray(p_hat, dtype=np.float64)
    inv = 1.0 / p[mask]
    r_bar = float(np.sum(np.asarray(r, dtype=np.float64)[mask] * inv) / np.sum(inv))
    return binary_cross_entropy(r_bar, r_hat, LOG_EPS)


# --------------------------------------------------------------------------
# Experiment driver


@dataclass
class SemiSyntheticWorld:
    space: PairSpace
    R: np.ndarray
    r_true: np.ndarray
    p_true: np.ndarray
    predictions: Dict[Scenario, PredictionMatrix]

    def save(self, path) -> None:
        arrays = {"R": self.R, "r_true": self.r_true, "p_true": self.p_true}
        for s, pm in self.predictions.items():
            arrays[f"r_hat.{s.value}"] = pm.r_hat
        write_archive(path, WORLD_MAGIC, {"n_users": self.space.n_users,
                                          "n_items": self.space.n_items}, arrays)

    @classmethod
    def load(cls, path) -> "SemiSyntheticWorld":
        meta, arrays = read_archive(path, WORLD_MAGIC)
        preds = {Scenario(k.split(".", 1)[1]): PredictionMatrix(Scenario(k.split(".", 1)[1]), v)
                 for k, v in arrays.items() if k.startswith("r_hat.")}
        preds = {s: preds[s] for s in ALL_SCENARIOS if s in preds}
        return cls(PairSpace(meta["n_users"], meta["n_items"]), arrays["R"], arrays["r_true"],
                   arrays["p_true"], preds)


def build_world(R, cfg: SynthConfig, scenarios: Sequence = ALL_SCENARIOS) -> SemiSyntheticWorld:
    R = np.asarray(R, dtype=np.int64)
    space = PairSpace(*R.shape)
    r_true = map_to_rtrue(R)
    p_true = assign_propensities(R, cfg)
    rng = SeededRng(cfg.seed).child("predictions")
    preds = {Scenario(s): make_prediction_matrix(s, r_true, rng) for s in scenarios}
    return SemiSyntheticWorld(space, R, r_true, p_true, preds)


def completed_matrix(users, items, ratings, space: PairSpace, cfg: SynthConfig) -> np.ndarray:
    """Integer R from rating triples: MF completion, then the configured marginal."""
    rng = SeededRng(cfg.seed).child("complete")
    if cfg.rating_proportions is None:
        return complete_ratings(users, items, ratings, space, cfg.mf, rng)
    scores = complete_scores(users, items, ratings, space, cfg.mf, rng)
    return match_rating_distribution(scores, cfg.rating_proportions)


def world_from_triples(users, items, ratings, space: PairSpace, cfg: SynthConfig) -> SemiSyntheticWorld:
    return build_world(completed_matrix(users, items, ratings, space, cfg), cfg)


def world_from_lowrank(n_users: int, n_items: int, cfg: SynthConfig, **source_kwargs) -> SemiSyntheticWorld:
    root = SeededRng(cfg.seed)
    users, items, ratings, _ = lowrank_rating_source(n_users, n_items, rng=root.child("source"), **source_kwargs)
    return world_from_triples(users, items, ratings, PairSpace(n_users, n_items), cfg)


ESTIMATOR_ORDER = ("Naive", "EIB", "IPS", "DR", "TDR")


def evaluate_replicate(world: SemiSyntheticWorld, replicate: int, seed: int,
                       beta=None, oracle_imputation: bool = False,
                       beta_per_pair: bool = True) -> List[est.EstimateReport]:
    """Draw one replicate (shared across scenarios) and score every estimator."""
    rng = SeededRng(seed).child("replicate").child(replicate)
    o = bernoulli_sample(world.p_true, rng.generator("exposure"))
    r = bernoulli_sample(world.r_true, rng.generator("label"))
    p_hat = noisy_propensities(world.p_true, o, rng.generator("beta"), beta=beta,
                               per_pair=beta_per_pair)
    rows = []
    for scenario, pm in world.predictions.items():
        e = binary_cross_entropy(r, pm.r_hat)
        ideal = est.ideal_loss(e)
        if oracle_imputation:
            e_hat = binary_cross_entropy(world.r_true, pm.r_hat)
        else:
            e_hat = shared_imputed_errors(r, o, p_hat, pm)
        e_tilde, _ = target(e, o, e_hat, p_hat)
        values = {
            "Naive": est.naive_loss(e, o),
            "EIB": est.eib_loss(e, o, e_hat),
            "IPS": est.ips_loss(e, o, p_hat),
            "DR": est.dr_loss(e, o, e_hat, p_hat),
            "TDR": est.tdr_loss(e, o, e_tilde, p_hat),
        }
        for name in ESTIMATOR_ORDER:
            rows.append(est.EstimateReport.build(name, values[name], ideal, replicate, scenario.value))
    return rows


def run_semi_synthetic(world: SemiSyntheticWorld, cfg: SynthConfig, beta=None,
                       oracle_imputation: bool = False) -> List[est.EstimateReport]:
    rows = []
    for rep in range(cfg.n_replicates):
        rows.extend(evaluate_replicate(world, rep, cfg.seed, beta, oracle_imputation,
                                       cfg.beta_per_pair))
    return rows


def summarize_re(rows: Sequence[est.EstimateReport]) -> Dict[str, Dict[str, dict]]:
    """``{scenario: {estimator: {"mean", "sd", "n"}}}`` of the relative errors (sample SD)."""
    out: Dict[str, Dict[str, dict]] = {}
    groups: Dict[tuple, list] = {}
    for r in rows:
        groups.setdefault((r.scenario, r.estimator_name), []).append(r.relative_error)
    for (scen, name), vals in groups.items():
        v = np.asarray(vals, dtype=np.float64)
        sd = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
        out.setdefault(scen, {})[name] = {"mean": float(v.mean()), "sd": sd, "n": int(v.size)}
    return out
