"""Trainers: base MF, IPS/SNIPS, static DR, and the JL / CL / targeted variants.

Every trainer shares one pipeline per seed:

1. fit a base MF model with cross entropy on the exposed training labels;
2. fit the logistic propensity head on the exposure indicator over all pairs,
   using that model's embeddings as features;
3. warm-start the chosen variant from both and train it with early stopping
   on validation AUC.

For the doubly robust family an epoch is phase (i), a pass of D-batches
updating the prediction model (and, for CL, the propensity head) on the
joint loss; phase (ii), a pass of O-batches updating the imputation model;
and for TDR-CL phase (iii), one full-batch targeting step that moves the
correction table ``omega``.

The imputation model predicts a signed residual ``h = g + omega`` of the label
around the current prediction, so ``f + h`` acts as a pseudo label.  In the
joint loss the imputed squared error is ``(f - h - stop(f))^2``: its value is
``h^2`` and its derivative in ``f`` is ``-2 h``.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.optimize import minimize

from .core import ConfigError, PairSpace, PropensityField, SeededRng, sigmoid
from .datasets import SplitDataset
from .metrics import auc, evaluate
from .models import (
    AdamState,
    LogisticParams,
    MFParams,
    ModelBundle,
    adam_step,
    propensity_backward,
    propensity_logits,
    stop_gradient,
)
from .targeting import ImputationState, check_validity, solve_eta

log = logging.getLogger(__name__)


class Variant(str, Enum):
    BASE = "BASE"
    IPS = "IPS"
    SNIPS = "SNIPS"
    DR = "DR"
    DR_JL = "DR_JL"
    MRDR_JL = "MRDR_JL"
    DR_CL = "DR_CL"
    MRDR_CL = "MRDR_CL"
    TDR = "TDR"
    TDR_JL = "TDR_JL"
    TMRDR_JL = "TMRDR_JL"
    TDR_CL = "TDR_CL"
    TMRDR_CL = "TMRDR_CL"


@dataclass(frozen=True)
class Traits:
    family: str          # "ce" (BASE/IPS/SNIPS), "static", "jl" or "cl"
    weighting: str = ""  # ce family: "none" | "ips" | "snips"
    mrdr: bool = False
    targeting: str = "none"  # "none" | "once" | "epoch"


TRAITS: Dict[Variant, Traits] = {
    Variant.BASE: Traits("ce", "none"),
    Variant.IPS: Traits("ce", "ips"),
    Variant.SNIPS: Traits("ce", "snips"),
    Variant.DR: Traits("static"),
    Variant.TDR: Traits("static", targeting="once"),
    Variant.DR_JL: Traits("jl"),
    Variant.MRDR_JL: Traits("jl", mrdr=True),
    Variant.TDR_JL: Traits("jl", targeting="once"),
    Variant.TMRDR_JL: Traits("jl", mrdr=True, targeting="once"),
    Variant.DR_CL: Traits("cl"),
    Variant.MRDR_CL: Traits("cl", mrdr=True),
    Variant.TDR_CL: Traits("cl", targeting="epoch"),
    Variant.TMRDR_CL: Traits("cl", mrdr=True, targeting="epoch"),
}


@dataclass
class TrainerConfig:
    variant: Variant = Variant.TDR_CL
    dim: int = 32
    lr: float = 0.01
    weight_decay: float = 1e-4
    init_scale: float = 0.1
    batch_size_d: int = 2048
    batch_size_o: int = 512
    steps_d: Optional[int] = None  # None: one pass over D per epoch
    steps_o: Optional[int] = None  # None: one pass over O per epoch
    max_epochs: int = 60
    patience: int = 5
    base_max_epochs: int = 100
    clip_threshold: float = 0.05
    include_omega: bool = True
    targeting_enabled: bool = True  # False turns every targeted variant into its plain twin
    xi_through_weights: bool = True  # xi gradient through 1/p_hat in L_TDR as well as the CE term
    xi_into_embeddings: bool = False
    seed: int = 0

    def __post_init__(self):
        self.variant = Variant(self.variant)
        if not 0.0 < self.clip_threshold < 1.0:
            raise ConfigError(f"clip threshold must lie in (0, 1), got {self.clip_threshold}")
        for name in ("dim", "batch_size_d", "batch_size_o", "max_epochs", "patience"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def traits(self) -> Traits:
        return TRAITS[self.variant]


@dataclass
class TrainSnapshot:
    epoch: int
    val_auc: float
    joint_loss: float
    imputation_loss: float
    eta: float
    omega_abs_mean: float
    omega_abs_max: float
    validity: float


@dataclass
class TrainResult:
    variant: str
    seed: int
    bundle: ModelBundle
    omega: np.ndarray
    history: List[TrainSnapshot]
    best_epoch: int
    val_auc: float
    test: Dict[str, float] = field(default_factory=dict)


# --------------------------------------------------------------------------
# Data view


@dataclass
class TrainData:
    """Arrays the trainers need, derived once from a :class:`SplitDataset`."""

    space: PairSpace
    o: np.ndarray            # flat 0/1 exposure over D
    label: np.ndarray        # flat labels, meaningful where o == 1
    obs: np.ndarray          # flat indices of exposed pairs
    split: SplitDataset

    @classmethod
    def from_split(cls, split: SplitDataset) -> "TrainData":
        space = split.space
        o = split.exposure().ravel().astype(np.float64)
        label = np.zeros(space.total)
        keys = space.flat(split.train.users, split.train.items)
        label[keys] = split.train_labels()
        return cls(space, o, label, np.flatnonzero(o), split)


def _ui(space: PairSpace, flat_idx):
    return np.divmod(flat_idx, space.n_items)


# --------------------------------------------------------------------------
# Losses


def joint_loss(bundle: ModelBundle, omega, users, items, o, r, clip: float,
               learn_propensity: bool = True, xi_through_weights: bool = True,
               h_override=None, p_fixed=None, xi_into_embeddings: bool = False):
    """``L_TDR`` over a D-batch (plus the exposure CE when ``learn_propensity``).

    ``e = (f - r)^2`` on exposed pairs, imputed error ``(f - h - stop(f))^2``
    with ``h = g + omega``.  Returns ``(value, grads)`` where ``grads`` maps
    ``"theta"`` and ``"xi"`` to gradient dicts (``"xi"`` is None when the
    propensity head is frozen).  ``h_override`` replaces ``g + omega`` (static
    DR); ``p_fixed`` replaces the learned propensities.
    """
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    o = np.asarray(o, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    n = users.size
    theta = bundle.theta
    f = sigmoid(theta.logits(users, items))
    f_stop = stop_gradient(f)
    if h_override is not None:
        h = np.asarray(h_override, dtype=np.float64)
    else:
        h = bundle.phi.logits(users, items) + np.asarray(omega, dtype=np.float64)
    h = stop_gradient(h)  # phi and omega are frozen in this phase

    if p_fixed is not None:
        p_hat = np.asarray(p_fixed, dtype=np.float64)
        s = None
        live = np.zeros(n, dtype=bool)
    else:
        s = propensity_logits(bundle.xi, theta, users, items)
        sig = sigmoid(s)
        live = sig > clip
        p_hat = np.where(live, sig, clip)

    e_imp = (f - h - f_stop) ** 2             # forward value h^2
    e_obs = np.where(o > 0, (f - r) ** 2, 0.0)
    wo = o / p_hat
    per_pair = e_imp + wo * (e_obs - e_imp)
    value = float(per_pair.mean())
    if learn_propensity:
        ce = -(o * np.log(p_hat) + (1.0 - o) * np.log1p(-p_hat))
        value += float(ce.mean())
    if not np.isfinite(value):
        raise FloatingPointError("joint loss is not finite")

    # d/df: imputed part through the live path only, d e_imp/df = 2(f - h - stop f) = -2h
    dfe_imp = 2.0 * (f - h - f_stop)
    dfe_obs = np.where(o > 0, 2.0 * (f - r), 0.0)
    df = ((1.0 - wo) * dfe_imp + wo * dfe_obs) / n
    dz = df * f * (1.0 - f)
    grads = {"theta": theta.backward(users, items, dz), "xi": None}

    if learn_propensity and s is not None:
        dp = (-o / p_hat + (1.0 - o) / (1.0 - p_hat)) / n
        if xi_through_weights:
            dp = dp - o * (e_obs - e_imp) / (p_hat ** 2) / n
        ds = np.where(live, dp * sig * (1.0 - sig), 0.0)
        gxi, gemb = propensity_backward(bundle.xi, theta, users, items, ds, xi_into_embeddings)
        grads["xi"] = gxi
        if gemb is not None:
            grads["theta"]["user"] = grads["theta"]["user"] + gemb["user"]
            grads["theta"]["item"] = grads["theta"]["item"] + gemb["item"]
    return value, grads


def imputation_weight(p_hat, mrdr: bool) -> np.ndarray:
    p_hat = np.asarray(p_hat, dtype=np.float64)
    return (1.0 - p_hat) / p_hat ** 2 if mrdr else 1.0 / p_hat


def imputation_loss(bundle: ModelBundle, omega, users, items, r, p_hat, mrdr: bool = False):
    """Weighted regression of ``g + omega`` on the signed residual ``r - stop(f)``.

    Only ``phi`` receives gradient.  Returns ``(value, phi_grads)``.
    """
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    r = np.asarray(r, dtype=np.float64)
    target = r - stop_gradient(sigmoid(bundle.theta.logits(users, items)))
    h = bundle.phi.logits(users, items) + np.asarray(omega, dtype=np.float64)
    w = imputation_weight(p_hat, mrdr)
    resid = h - target
    value = float(np.mean(w * resid ** 2))
    if not np.isfinite(value):
        raise FloatingPointError("imputation loss is not finite")
    dg = 2.0 * w * resid / users.size
    return value, bundle.phi.backward(users, items, dg)


def ce_loss(bundle: ModelBundle, users, items, r, weights=None, self_normalize: bool = False):
    """(Weighted) cross entropy of the prediction model on exposed pairs."""
    z = bundle.theta.logits(users, items)
    f = sigmoid(z)
    eps = 1e-12
    ce = -(r * np.log(f + eps) + (1.0 - r) * np.log(1.0 - f + eps))
    w = np.ones_like(f) if weights is None else np.asarray(weights, dtype=np.float64)
    norm = w.sum() if self_normalize else users.size
    value = float(np.sum(w * ce) / norm)
    dz = w * (f - r) / norm
    return value, bundle.theta.backward(users, items, dz)


# --------------------------------------------------------------------------
# Pipeline pieces


def _adam(cfg: TrainerConfig, wd: Optional[float] = None) -> AdamState:
    return AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay if wd is None else wd)


def _val_auc(bundle: ModelBundle, split: SplitDataset) -> float:
    ev = split.eval_set("val")
    return auc(sigmoid(bundle.theta.logits(ev.users, ev.items)), ev.labels)


def _batches(gen: np.random.Generator, pool: np.ndarray, size: int, steps: Optional[int]):
    if steps is None:
        perm = gen.permutation(pool)
        for a in range(0, perm.size, size):
            yield perm[a:a + size]
    else:
        for _ in range(steps):
            yield gen.choice(pool, size=min(size, pool.size), replace=False)


def train_base(data: TrainData, cfg: TrainerConfig, rng: SeededRng) -> Tuple[MFParams, float]:
    """Plain MF with cross entropy on the exposed labels, early-stopped on validation AUC."""
    bundle = ModelBundle.init(data.space, cfg.dim, rng.child("base-init"), cfg.init_scale)
    arrays = bundle.theta.arrays()
    state = _adam(cfg)
    best, best_theta, bad = -np.inf, bundle.theta.copy(), 0
    for epoch in range(1, cfg.base_max_epochs + 1):
        gen = rng.child("base").child(epoch).generator("batches")
        for b in _batches(gen, data.obs, cfg.batch_size_o, cfg.steps_o):
            u, i = _ui(data.space, b)
            _, g = ce_loss(bundle, u, i, data.label[b])
            adam_step(arrays, g, state)
        score = _val_auc(bundle, data.split)
        if score > best:
            best, best_theta, bad = score, bundle.theta.copy(), 0
        else:
            bad += 1
            if bad >= cfg.patience:
                break
    return best_theta, best


def pretrain_propensity(theta: MFParams, o, l2: float = 1e-4) -> LogisticParams:
    """Logistic regression of the exposure indicator on concatenated embeddings, over all pairs."""
    o = np.asarray(o, dtype=np.float64).ravel()
    if o.min() == o.max():
        raise ConfigError("exposure is constant; propensity regression is undefined")
    n_users, n_items = theta.user.shape[0], theta.item.shape[0]
    d = theta.dim
    O = o.reshape(n_users, n_items)
    n = o.size

    def fun(x):
        w_u, w_i, b = x[:d], x[d:2 * d], x[2 * d]
        s = (theta.user @ w_u)[:, None] + (theta.item @ w_i)[None, :] + b
        # log(1 + e^s) - o s, computed stably
        val = np.sum(np.logaddexp(0.0, s) - O * s) / n + 0.5 * l2 * float(x[:2 * d] @ x[:2 * d])
        res = (sigmoid(s) - O) / n
        grad = np.concatenate([theta.user.T @ res.sum(axis=1), theta.item.T @ res.sum(axis=0),
                               [res.sum()]])
        grad[:2 * d] += l2 * x[:2 * d]
        return val, grad

    x0 = np.zeros(2 * d + 1)
    rate = o.mean()
    x0[-1] = np.log(rate / (1 - rate))
    sol = minimize(fun, x0, jac=True, method="L-BFGS-B", options={"maxiter": 500})
    return LogisticParams(sol.x[:2 * d].copy(), sol.x[2 * d:].copy())


def full_propensity(bundle: ModelBundle, clip: float) -> np.ndarray:
    """Clipped propensities for every pair, flat."""
    d = bundle.dim
    s = (bundle.theta.user @ bundle.xi.weight[:d])[:, None] + (bundle.theta.item @ bundle.xi.weight[d:])[None, :] \
        + bundle.xi.bias[0]
    return np.maximum(sigmoid(s), clip).ravel()


def targeting_step(bundle: ModelBundle, omega: np.ndarray, data: TrainData, clip: float,
                   include_omega: bool = True, h_base: Optional[np.ndarray] = None):
    """Full-batch targeting over the exposed pairs; returns ``(new_omega, eta, validity)``.

    The residual is the signed one, ``r - f``, against ``g`` (or ``h_base``).
    """
    p_hat = PropensityField(full_propensity(bundle, clip), clip)
    f = sigmoid(bundle.theta.full_logits()).ravel()
    e = np.where(data.o > 0, data.label - f, 0.0)
    g = bundle.phi.full_logits().ravel() if h_base is None else h_base
    state = ImputationState(g, omega, p_hat)
    res = solve_eta(e, state, data.o, include_omega=include_omega)
    new_omega = omega + res.eta_star * p_hat.targeting_weight if res.eta_star else omega
    validity = check_validity(e, data.o, replace(state, omega=new_omega))
    return new_omega, res.eta_star, validity


# --------------------------------------------------------------------------
# Variant trainer


class Trainer:
    def __init__(self, data: TrainData, cfg: TrainerConfig, theta0: MFParams, xi0: LogisticParams,
                 rng: SeededRng):
        self.data = data
        self.cfg = cfg
        self.traits = cfg.traits
        self.rng = rng
        init = ModelBundle.init(data.space, cfg.dim, rng.child("variant-init"), cfg.init_scale)
        self.bundle = ModelBundle(theta0.copy(), init.phi, xi0.copy(), cfg.dim,
                                  {"variant": cfg.variant.value, "seed": cfg.seed})
        self.omega = np.zeros(data.space.total)
        self.opt_theta = _adam(cfg)
        self.opt_phi = _adam(cfg)
        self.opt_xi = _adam(cfg, wd=0.0)
        self.history: List[TrainSnapshot] = []
        t = self.traits
        self.learn_propensity = t.family == "cl"
        self.uses_imputation_model = t.family in ("jl", "cl")
        self.target_each_epoch = cfg.targeting_enabled and t.targeting == "epoch"
        self.target_once = cfg.targeting_enabled and t.targeting == "once"
        if t.family != "ce" or t.weighting != "none":
            self.p_static = full_propensity(self.bundle, cfg.clip_threshold)
        if t.family == "static":
            obs = data.obs
            self.c_static = float(data.label[obs].mean())

    # h used by the static DR family: pseudo label c, i.e. g = c - stop(f)
    def _static_h(self, users, items, flat):
        f = sigmoid(self.bundle.theta.logits(users, items))
        return self.c_static - f + self.omega[flat]

    def _static_h_full(self):
        return self.c_static - sigmoid(self.bundle.theta.full_logits()).ravel()

    def phase_d(self, epoch: int) -> float:
        cfg, data = self.cfg, self.data
        gen = self.rng.child("epoch").child(epoch).generator("d-batches")
        pool = np.arange(data.space.total)
        total, count = 0.0, 0
        theta_arrays = self.bundle.theta.arrays()
        xi_arrays = self.bundle.xi.arrays()
        for b in _batches(gen, pool, cfg.batch_size_d, cfg.steps_d):
            u, i = _ui(data.space, b)
            kw = {}
            if self.traits.family == "static":
                kw["h_override"] = self._static_h(u, i, b)
            if not self.learn_propensity:
                kw["p_fixed"] = self.p_static[b]
            val, g = joint_loss(self.bundle, self.omega[b], u, i, data.o[b], data.label[b],
                                cfg.clip_threshold, learn_propensity=self.learn_propensity,
                                xi_through_weights=cfg.xi_through_weights,
                                xi_into_embeddings=cfg.xi_into_embeddings, **kw)
            adam_step(theta_arrays, g["theta"], self.opt_theta)
            if g["xi"] is not None:
                adam_step(xi_arrays, g["xi"], self.opt_xi)
            total += val
            count += 1
        return total / max(count, 1)

    def phase_o(self, epoch: int) -> float:
        cfg, data = self.cfg, self.data
        gen = self.rng.child("epoch").child(epoch).generator("o-batches")
        p_now = full_propensity(self.bundle, cfg.clip_threshold)
        phi_arrays = self.bundle.phi.arrays()
        total, count = 0.0, 0
        for b in _batches(gen, data.obs, cfg.batch_size_o, cfg.steps_o):
            u, i = _ui(data.space, b)
            val, g = imputation_loss(self.bundle, self.omega[b], u, i, data.label[b], p_now[b],
                                     self.traits.mrdr)
            adam_step(phi_arrays, g, self.opt_phi)
            total += val
            count += 1
        return total / max(count, 1)

    def phase_ce(self, epoch: int) -> float:
        cfg, data = self.cfg, self.data
        gen = self.rng.child("epoch").child(epoch).generator("o-batches")
        theta_arrays = self.bundle.theta.arrays()
        total, count = 0.0, 0
        for b in _batches(gen, data.obs, cfg.batch_size_o, cfg.steps_o):
            u, i = _ui(data.space, b)
            w = None if self.traits.weighting == "none" else 1.0 / self.p_static[b]
            val, g = ce_loss(self.bundle, u, i, data.label[b], w, self.traits.weighting == "snips")
            adam_step(theta_arrays, g, self.opt_theta)
            total += val
            count += 1
        return total / max(count, 1)

    def target(self):
        h_base = self._static_h_full() if self.traits.family == "static" else None
        self.omega, eta, validity = targeting_step(self.bundle, self.omega, self.data,
                                                   self.cfg.clip_threshold, self.cfg.include_omega, h_base)
        return eta, validity

    def epoch(self, epoch: int, allow_targeting: bool) -> TrainSnapshot:
        eta, validity = 0.0, float("nan")
        li = float("nan")
        if self.traits.family == "ce":
            lj = self.phase_ce(epoch)
        else:
            lj = self.phase_d(epoch)
            if self.uses_imputation_model:
                li = self.phase_o(epoch)
            if allow_targeting:
                eta, validity = self.target()
        if not self.bundle.all_finite():
            raise FloatingPointError(f"parameters diverged at epoch {epoch}")
        om = np.abs(self.omega)
        return TrainSnapshot(epoch, _val_auc(self.bundle, self.data.split), lj, li, eta,
                             float(om.mean()), float(om.max()), validity)

    def run(self) -> TrainResult:
        cfg = self.cfg
        best = (-np.inf, 0, self.bundle.copy(), self.omega.copy())
        bad = 0
        for ep in range(1, cfg.max_epochs + 1):
            snap = self.epoch(ep, self.target_each_epoch)
            self.history.append(snap)
            if snap.val_auc > best[0]:
                best = (snap.val_auc, ep, self.bundle.copy(), self.omega.copy())
                bad = 0
            else:
                bad += 1
                if bad >= cfg.patience:
                    break
        score, best_ep, self.bundle, self.omega = best
        if self.traits.targeting == "once" and self.traits.family != "ce":
            # one targeting step (if enabled), then a refinement epoch; plain twins
            # run the same epoch without targeting
            ep = len(self.history) + 1
            eta, validity = self.target() if self.target_once else (0.0, float("nan"))
            snap = self.epoch(ep, False)
            snap.eta, snap.validity = eta, validity
            self.history.append(snap)
            score, best_ep = snap.val_auc, ep
        elif self.traits.family in ("static", "jl") and self.traits.targeting == "none":
            ep = len(self.history) + 1
            snap = self.epoch(ep, False)
            self.history.append(snap)
            score, best_ep = snap.val_auc, ep
        return TrainResult(cfg.variant.value, cfg.seed, self.bundle, self.omega, self.history, best_ep, score)


@dataclass
class Pretrained:
    theta0: MFParams
    xi0: LogisticParams
    base_val_auc: float


def prepare(data: TrainData, cfg: TrainerConfig) -> Pretrained:
    rng = SeededRng(cfg.seed).child("pretrain")
    theta0, score = train_base(data, cfg, rng)
    xi0 = pretrain_propensity(theta0, data.o)
    return Pretrained(theta0, xi0, score)


def train_variant(data: TrainData, cfg: TrainerConfig, pre: Optional[Pretrained] = None) -> TrainResult:
    """Train one variant from the shared pretraining (computed if not given) and score it on test."""
    pre = pre or prepare(data, cfg)
    if cfg.variant == Variant.BASE:
        theta = pre.theta0
        bundle = ModelBundle(theta.copy(), MFParams.zeros(data.space.n_users, data.space.n_items, cfg.dim),
                             pre.xi0.copy(), cfg.dim, {"variant": "BASE", "seed": cfg.seed})
        res = TrainResult("BASE", cfg.seed, bundle, np.zeros(data.space.total), [], 0, pre.base_val_auc)
    else:
        # keyed by the plain twin so targeted and untargeted runs share draws
        t = cfg.traits
        twin = f"{t.family}-{t.weighting}-{'mrdr' if t.mrdr else 'dr'}"
        rng = SeededRng(cfg.seed).child("variant").child(twin)
        res = Trainer(data, cfg, pre.theta0, pre.xi0, rng).run()
    res.test = evaluate_bundle(res.bundle, data.split)
    return res


def evaluate_bundle(bundle: ModelBundle, split: SplitDataset, part: str = "test") -> Dict[str, float]:
    ev = split.eval_set(part)
    return evaluate(sigmoid(bundle.theta.logits(ev.users, ev.items)), ev)


def run_tdr_cl(split: SplitDataset, cfg: TrainerConfig) -> TrainResult:
    return train_variant(TrainData.from_split(split), cfg)


def run_baseline(split: SplitDataset, cfg: TrainerConfig) -> TrainResult:
    if cfg.traits.family not in ("ce", "static"):
        raise ConfigError(f"{cfg.variant.value} is not a baseline variant")
    return train_variant(TrainData.from_split(split), cfg)


def write_history(history: List[TrainSnapshot], path, fmt: str = "csv") -> None:
    rows = [asdict(h) for h in history]
    with open(path, "w", newline="") as fh:
        if fmt == "json":
            json.dump(rows, fh, indent=2, sort_keys=True)
            fh.write("\n")
            return
        fields = [f for f in TrainSnapshot.__dataclass_fields__]
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
