"""Independent forward passes and central differences for the trainer losses.

The forwards below re-derive each loss from scratch with plain numpy so that
the finite-difference oracle shares no code with the analytic backward pass.
Stopped quantities are passed in as fixed arrays, which is exactly what a
stop-gradient means for a derivative.
"""
import numpy as np

from tdrcl.core import PairSpace
from tdrcl.models import LogisticParams, ModelBundle
from tdrcl.core import SeededRng


def _sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def mf_logits(a, users, items):
    return (np.sum(a["user"][users] * a["item"][items], axis=1) + a["user_bias"][users]
            + a["item_bias"][items] + a["global_bias"][0])


def joint_forward(theta, theta_feat, xi, users, items, o, r, h, f_stop, clip, learn_propensity):
    f = _sig(mf_logits(theta, users, items))
    d = theta_feat["user"].shape[1]
    s = theta_feat["user"][users] @ xi["weight"][:d] + theta_feat["item"][items] @ xi["weight"][d:] + xi["bias"][0]
    p = np.maximum(_sig(s), clip)
    e_imp = (f - h - f_stop) ** 2
    e_obs = np.where(o > 0, (f - r) ** 2, 0.0)
    val = np.mean(e_imp + o / p * (e_obs - e_imp))
    if learn_propensity:
        val += np.mean(-(o * np.log(p) + (1 - o) * np.log(1 - p)))
    return val


def imputation_forward(phi, users, items, omega, r, f_stop, p, mrdr):
    w = (1 - p) / p ** 2 if mrdr else 1 / p
    h = mf_logits(phi, users, items) + omega
    return np.mean(w * (h - (r - f_stop)) ** 2)


def central_diff(fun, arrays, step=1e-6):
    grads = {}
    for k, a in arrays.items():
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            old = a[idx]
            a[idx] = old + step
            hi = fun()
            a[idx] = old - step
            lo = fun()
            a[idx] = old
            g[idx] = (hi - lo) / (2 * step)
        grads[k] = g
    return grads


def max_rel_error(analytic, numeric):
    worst = 0.0
    for k in numeric:
        a, n = np.asarray(analytic[k]), numeric[k]
        scale = max(np.abs(n).max(), np.abs(a).max(), 1e-8)
        worst = max(worst, float(np.abs(a - n).max() / scale))
    return worst


def small_world(seed=0, n=4, dim=3):
    """A 4x4 world with random parameters, exposures, labels and omega."""
    gen = np.random.default_rng(seed)
    space = PairSpace(n, n)
    bundle = ModelBundle.init(space, dim, SeededRng(seed), scale=0.5)
    for part in (bundle.theta, bundle.phi):
        part.user_bias[:] = gen.normal(0, 0.3, n)
        part.item_bias[:] = gen.normal(0, 0.3, n)
        part.global_bias[:] = gen.normal(0, 0.3, 1)
    bundle.xi = LogisticParams(gen.normal(0, 0.8, 2 * dim), np.array([-0.5]))
    users, items = space.all_pairs()
    o = (gen.random(space.total) < 0.5).astype(float)
    o[0] = 1.0
    r = gen.integers(0, 2, space.total).astype(float)
    omega = gen.normal(0, 0.2, space.total)
    return bundle, users, items, o, r, omega
