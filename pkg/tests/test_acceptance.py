"""Acceptance checks, one test per criterion, in criterion order.

Each test prints a PASS/FAIL line in the ``acceptance`` section of the
pytest summary and asserts at the stated tolerance.  Runtime budgets are
asserted alongside the numerical conditions.
"""
import time

import numpy as np
import pytest
import yaml

from tdrcl import estimators as est
from tdrcl.cli import DEFAULTS, load_config, main, run_sweep, run_synth
from tdrcl.mclab import MCScenario, MCWorld, run_bias_variance
from tdrcl.targeting import ImputationState, apply_targeting, check_validity, solve_eta, targeted_imputation
from tdrcl.training import imputation_loss, joint_loss

from conftest import random_world
from gradcheck import central_diff, imputation_forward, joint_forward, max_rel_error, mf_logits, small_world

Z = 3.0
SEEDS = [0, 1, 2, 3, 4]
THRESHOLDS = [0.05, 0.10, 0.15, 0.20]


def _worlds(n, seed):
    g = np.random.default_rng(seed)
    return [random_world(g) for _ in range(n)]


def test_targeting_validity(verdict):
    t0 = time.perf_counter()
    worst_valid, worst_eq = 0.0, 0.0
    for e, o, e_hat, p in _worlds(100, 101):
        state = ImputationState.fresh(e_hat, p)
        res = solve_eta(e, state, o)
        state = apply_targeting(state, res.eta_star)
        e_tilde = targeted_imputation(state)
        scale = np.mean(np.abs(e))
        worst_valid = max(worst_valid, abs(est.correction_term(e, o, e_tilde, p)) / scale,
                          abs(check_validity(e, o, state)) / scale)
        tdr, eib = est.tdr_loss(e, o, e_tilde, p), est.eib_loss(e, o, e_tilde)
        worst_eq = max(worst_eq, abs(tdr - eib) / abs(eib))
    elapsed = time.perf_counter() - t0
    ok = worst_valid <= 1e-8 and worst_eq <= 1e-12 and elapsed < 5
    verdict("targeting validity", ok,
            f"max correction/mean|e| {worst_valid:.1e}, max |TDR-EIB|/EIB {worst_eq:.1e}, {elapsed:.2f}s")
    assert ok


def test_preservation(verdict):
    t0 = time.perf_counter()
    worst_eta, bitwise = 0.0, True
    for k, (e, o, e_hat, p) in enumerate(_worlds(50, 202)):
        if k % 2 == 0:
            valid = np.where(o > 0, e, e_hat)  # residuals vanish on the exposed set
            state = ImputationState.fresh(valid, p)
        else:
            state = ImputationState.fresh(e_hat, p)  # valid because already targeted once
            state = apply_targeting(state, solve_eta(e, state, o).eta_star)
        before = targeted_imputation(state).copy()
        res = solve_eta(e, state, o)
        after = targeted_imputation(apply_targeting(state, res.eta_star))
        worst_eta = max(worst_eta, abs(res.eta_star))
        bitwise &= np.array_equal(before.view(np.uint64), after.view(np.uint64))
    elapsed = time.perf_counter() - t0
    ok = worst_eta <= 1e-10 and bitwise and elapsed < 1
    verdict("preservation", ok, f"max |eta*| {worst_eta:.1e}, bitwise {bitwise}, {elapsed:.2f}s")
    assert ok


def _golden_longdouble(f, lo, hi, iters=200):
    lo, hi = np.longdouble(lo), np.longdouble(hi)
    inv = (np.sqrt(np.longdouble(5)) - 1) / 2
    c, d = hi - inv * (hi - lo), lo + inv * (hi - lo)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        if fc < fd:
            hi, d, fd = d, c, fc
            c = hi - inv * (hi - lo)
            fc = f(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + inv * (hi - lo)
            fd = f(d)
    return float((lo + hi) / 2)


def test_eta_oracle_equivalence(verdict):
    # double precision cannot resolve the minimiser of a flat quadratic below
    # ~sqrt(eps), so the search runs in extended precision
    t0 = time.perf_counter()
    worst = 0.0
    for e, o, e_hat, p in _worlds(100, 303):
        m = o.astype(bool)
        w = (1 / p[m] - 1).astype(np.longdouble)
        d = (e[m] - e_hat[m]).astype(np.longdouble)
        eta = solve_eta(e, ImputationState.fresh(e_hat, p), o).eta_star
        lim = float(10 * (1 + abs(eta)))
        g = _golden_longdouble(lambda x: np.sum((d - x * w) ** 2), -lim, lim)
        worst = max(worst, abs(g - eta) / max(abs(eta), 1e-12))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-8 and elapsed < 5
    verdict("closed-form eta vs golden-section search", ok, f"max rel diff {worst:.1e}, {elapsed:.2f}s")
    assert ok


MC = DEFAULTS["mc"]  # the configuration ``tdrcl mc`` runs by default, seed 0


@pytest.fixture(scope="module")
def mc_world():
    return MCWorld.random(MC["n_users"], MC["n_items"], rng=0, p_min=MC["p_min"])


def test_variance_ordering(verdict, mc_world):
    t0 = time.perf_counter()
    rep = run_bias_variance(mc_world, MCScenario(), MC["replicates"], seed=0)
    s = rep.stats
    notes, ok = [], True
    for a, b in (("DR", "EIB"), ("IPS", "DR")):
        gap, se = rep.variance_gap(a, b)
        ok &= gap > Z * se
        notes.append(f"Var({a})-Var({b}) {gap / se:.1f} SE")
    for name in ("IPS", "EIB", "DR"):
        z_mean = abs(s[name].bias) / s[name].se_bias
        z_var = abs(s[name].var - s[name].closed_var) / s[name].se_var
        ok &= z_mean < Z and z_var < Z
        notes.append(f"{name} mean {z_mean:.1f} SE, var vs closed {z_var:.1f} SE")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 120
    verdict("variance ordering EIB <= DR <= IPS", ok, "; ".join(notes) + f"; {elapsed:.1f}s")
    assert ok


def test_unbiased_under_accurate_propensities(verdict, mc_world):
    t0 = time.perf_counter()
    rep = run_bias_variance(mc_world, MCScenario(accurate_imputation=False, imputation_shift=MC["imputation_shift"]),
                            MC["replicates"], seed=0)
    tdr, eib = rep.stats["TDR"], rep.stats["EIB"]
    z_tdr = abs(tdr.bias) / tdr.se_bias
    z_eib = abs(eib.bias) / eib.se_bias
    z_closed = abs(eib.bias - eib.closed_bias) / eib.se_bias
    elapsed = time.perf_counter() - t0
    ok = z_tdr < Z and z_eib > 5 and z_closed < Z and elapsed < 120
    verdict("TDR unbiased with shifted imputation", ok,
            f"TDR bias {z_tdr:.1f} SE, EIB bias {z_eib:.0f} SE, EIB vs closed form {z_closed:.1f} SE; {elapsed:.1f}s")
    assert ok


def test_double_robustness(verdict, mc_world):
    t0 = time.perf_counter()
    rep = run_bias_variance(mc_world, MCScenario(accurate_propensity=False), MC["replicates"], seed=0)
    z = {n: abs(rep.stats[n].bias) / rep.stats[n].se_bias for n in ("DR", "TDR")}
    elapsed = time.perf_counter() - t0
    ok = all(v < Z for v in z.values()) and elapsed < 120
    verdict("double robustness with corrupted propensities", ok,
            f"DR {z['DR']:.1f} SE, TDR {z['TDR']:.1f} SE; {elapsed:.1f}s")
    assert ok


def test_semi_synthetic_table(verdict):
    t0 = time.perf_counter()
    cfg = load_config("synth", None)
    _, table = run_synth(cfg, seed=0)
    order = sum(r["order_TDR_DR_IPS_Naive"] for r in table)
    sd = sum(r["sd_TDR_le_DR"] for r in table)
    elapsed = time.perf_counter() - t0
    ok = order >= 5 and sd >= 5 and elapsed < 600
    missed = [r["scenario"] for r in table if not r["order_TDR_DR_IPS_Naive"]]
    verdict("semi-synthetic RE table (300x400, 20 replicates)", ok,
            f"ordering {order}/6, SD {sd}/6, ordering missed in {missed}; {elapsed:.1f}s")
    assert ok


def test_gradients(verdict):
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(3):
        bundle, users, items, o, r, omega = small_world(seed)
        for into in (False, True):
            _, g = joint_loss(bundle, omega, users, items, o, r, 0.01, True, xi_into_embeddings=into)
            theta = bundle.theta.arrays()
            f_stop = 1 / (1 + np.exp(-mf_logits(theta, users, items)))
            h = bundle.phi.logits(users, items) + omega
            feat = theta if into else {k: v.copy() for k, v in theta.items()}
            xi = {f"xi.{k}": v for k, v in bundle.xi.arrays().items()}
            view = {"weight": xi["xi.weight"], "bias": xi["xi.bias"]}
            num = central_diff(lambda: joint_forward(theta, feat, view, users, items, o, r, h, f_stop, 0.01, True),
                               {**theta, **xi})
            worst = max(worst, max_rel_error({**g["theta"], **{f"xi.{k}": v for k, v in g["xi"].items()}}, num))
        p = np.random.default_rng(seed).uniform(0.1, 1.0, users.size)
        for mrdr in (False, True):
            _, g = imputation_loss(bundle, omega, users, items, r, p, mrdr)
            f_stop = 1 / (1 + np.exp(-bundle.theta.logits(users, items)))
            phi = bundle.phi.arrays()
            num = central_diff(lambda: imputation_forward(phi, users, items, omega, r, f_stop, p, mrdr), phi)
            worst = max(worst, max_rel_error(g, num))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 30
    verdict("analytic gradients vs central differences", ok, f"max rel error {worst:.1e}; {elapsed:.1f}s")
    assert ok


@pytest.fixture(scope="module")
def sweep_rows():
    cfg = load_config("sweep", None)
    cfg["variants"] = ["DR_JL", "TDR_JL", "DR_CL", "TDR_CL"]
    cfg["seeds"] = SEEDS
    cfg["thresholds"] = THRESHOLDS
    t0 = time.perf_counter()
    rows = run_sweep(cfg)
    return rows, time.perf_counter() - t0


def _auc(rows, clip, seed, variant):
    (r,) = [r for r in rows if r["clip"] == clip and r["seed"] == seed and r["variant"] == variant]
    return r["AUC"]


def test_training_ablation(verdict, sweep_rows):
    rows, elapsed = sweep_rows
    cl = sum(_auc(rows, 0.05, s, "TDR_CL") >= _auc(rows, 0.05, s, "DR_CL") for s in SEEDS)
    jl = sum(_auc(rows, 0.05, s, "TDR_JL") >= _auc(rows, 0.05, s, "DR_JL") for s in SEEDS)
    gaps = [f"{_auc(rows, 0.05, s, 'TDR_JL') - _auc(rows, 0.05, s, 'DR_JL'):+.1e}" for s in SEEDS]
    ok = cl >= 4 and jl >= 4 and elapsed < 900 + 1800
    verdict("training ablation on the synthetic split", ok,
            f"TDR-CL >= DR-CL in {cl}/5 seeds, TDR-JL >= DR-JL in {jl}/5 (AUC gaps {', '.join(gaps)})")
    assert ok


def test_clipping_sweep(verdict, sweep_rows):
    rows, elapsed = sweep_rows
    wins = {t: sum(_auc(rows, t, s, "TDR_CL") >= _auc(rows, t, s, "DR_CL") for s in SEEDS) for t in THRESHOLDS}
    ok = all(w > len(SEEDS) / 2 for w in wins.values()) and elapsed < 1800
    verdict("clipping sweep", ok, ", ".join(f"clip {t:.2f}: {w}/5" for t, w in wins.items()) + f"; {elapsed:.0f}s")
    assert ok


def _files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.is_file()}


def test_determinism(verdict, tmp_path):
    small_train = {"dataset": {"kind": "synthetic", "n_users": 80, "n_items": 120},
                   "trainer": {"dim": 8, "max_epochs": 5, "patience": 2, "base_max_epochs": 10}}
    configs = {
        "synth": {"synth": {"n_replicates": 3}},
        "mc": {"replicates": 300, "sweep_replicates": 300},
        "train": {**small_train, "variants": ["DR_CL", "TDR_CL", "TDR_JL"], "seeds": [0, 1]},
        "sweep": {**small_train, "variants": ["DR_CL", "TDR_CL"], "seeds": [0], "thresholds": [0.05, 0.2]},
    }
    same, notes = True, []
    for cmd, cfg in configs.items():
        path = tmp_path / f"{cmd}.yaml"
        path.write_text(yaml.safe_dump(cfg))
        first, second = tmp_path / f"{cmd}-1", tmp_path / f"{cmd}-2"
        main([cmd, "--config", str(path), "--seed", "5" if cmd in ("synth", "mc") else "0", "--out", str(first)])
        main([cmd, "--config", str(first / "run_config.yaml"), "--out", str(second)])
        a, b = _files(first), _files(second)
        ok = a == b and len(a) > 3
        same &= ok
        notes.append(f"{cmd} {'identical' if ok else 'DIFFERS'} ({len(a)} files)")
    ev = tmp_path / "eval.yaml"
    ev.write_text(yaml.safe_dump({"dataset": small_train["dataset"],
                                  "checkpoint": str(tmp_path / "train-1" / "checkpoint_TDR_CL_1.bin")}))
    main(["eval", "--config", str(ev), "--seed", "1", "--out", str(tmp_path / "eval-1")])
    main(["eval", "--config", str(tmp_path / "eval-1" / "run_config.yaml"), "--out", str(tmp_path / "eval-2")])
    ok = _files(tmp_path / "eval-1") == _files(tmp_path / "eval-2")
    same &= ok
    notes.append(f"eval {'identical' if ok else 'DIFFERS'}")
    verdict("byte-identical re-runs from the copied config", same, ", ".join(notes))
    assert same
