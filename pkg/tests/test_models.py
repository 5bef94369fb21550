import numpy as np
import pytest

from tdrcl.core import PairSpace, SeededRng
from tdrcl.models import (AdamState, LogisticParams, MFParams, ModelBundle, adam_step, impute,
                          load_bundle, predict, propensity, propensity_backward, propensity_logits,
                          save_bundle, stop_gradient)

from gradcheck import central_diff, max_rel_error, mf_logits, small_world


def test_prediction_examples():
    zero = MFParams.zeros(3, 4, 2)
    assert np.all(predict(zero, [0, 1], [2, 3]) == 0.5)
    zero.global_bias[0] = 800.0
    assert predict(zero, [0], [0])[0] == pytest.approx(1.0)
    with pytest.raises(IndexError):
        predict(zero, [3], [0])


def test_imputation_examples():
    zero = MFParams.zeros(3, 4, 2)
    assert np.all(impute(zero, [0, 2], [1, 3]) == 0)
    with pytest.raises(IndexError):
        impute(zero, [0], [4])


def test_mf_gradient_matches_central_differences():
    bundle, users, items, *_ = small_world(1)
    theta = bundle.theta
    weights = np.random.default_rng(2).normal(size=users.size)
    arrays = theta.arrays()
    numeric = central_diff(lambda: float(np.sum(weights * np.tanh(mf_logits(arrays, users, items)))), arrays,
                           step=1e-4)
    z = theta.logits(users, items)
    analytic = theta.backward(users, items, weights * (1 - np.tanh(z) ** 2))
    assert max_rel_error(analytic, numeric) < 1e-5


def test_propensity_examples_and_gradient():
    bundle, users, items, *_ = small_world(3)
    zero = LogisticParams.zeros(bundle.dim)
    assert np.all(propensity(zero, bundle.theta, users, items) == 0.5)
    low = LogisticParams(zero.weight, np.array([-20.0]))
    assert np.all(propensity(low, bundle.theta, users, items, clip_threshold=0.05) == 0.05)

    xi, theta = bundle.xi, bundle.theta
    weights = np.random.default_rng(4).normal(size=users.size)
    arrays = {**{f"xi.{k}": v for k, v in xi.arrays().items()}, "user": theta.user, "item": theta.item}

    def fun():
        return float(np.sum(weights * np.sin(propensity_logits(xi, theta, users, items))))

    numeric = central_diff(fun, arrays, step=1e-4)
    gxi, gemb = propensity_backward(xi, theta, users, items,
                                    weights * np.cos(propensity_logits(xi, theta, users, items)), True)
    analytic = {"xi.weight": gxi["weight"], "xi.bias": gxi["bias"], **gemb}
    assert max_rel_error(analytic, numeric) < 1e-5
    _, none = propensity_backward(xi, theta, users, items, weights, False)
    assert none is None


def test_propensity_fits_separable_toy_data():
    from tdrcl.training import pretrain_propensity
    gen = np.random.default_rng(0)
    theta = MFParams.init(30, 40, 2, SeededRng(0), scale=1.0)
    score = theta.user[:, :1] + theta.item[:, :1].T
    o = (score > 0).astype(float)
    xi = pretrain_propensity(theta, o, l2=0.0)
    p = np.clip(propensity(xi, theta, *PairSpace(30, 40).all_pairs()), 1e-12, 1 - 1e-12)
    ce = -np.mean(o.ravel() * np.log(p) + (1 - o.ravel()) * np.log(1 - p))
    rate = o.mean()
    base = -(rate * np.log(rate) + (1 - rate) * np.log(1 - rate))
    assert ce < 0.1 * base
    del gen


def test_stop_gradient_is_a_readonly_copy():
    x = np.arange(3.0)
    y = stop_gradient(x)
    np.testing.assert_array_equal(x, y)
    with pytest.raises(ValueError):
        y[0] = 1.0
    x[0] = 9
    assert y[0] == 0


def test_adam_zero_gradient():
    p = {"w": np.array([1.0, -2.0])}
    st = AdamState(lr=0.1)
    st.m["w"] = np.array([0.5, 0.5])
    st.v["w"] = np.array([0.25, 0.25])
    st.step = 3
    before = p["w"].copy()
    adam_step(p, {"w": np.zeros(2)}, st)
    np.testing.assert_allclose(st.m["w"], 0.45)
    np.testing.assert_allclose(st.v["w"], 0.25 * 0.999)
    # remaining momentum still moves the parameter; with fresh moments it would not
    fresh = {"w": before.copy()}
    adam_step(fresh, {"w": np.zeros(2)}, AdamState(lr=0.1))
    np.testing.assert_array_equal(fresh["w"], before)


def test_adam_first_step_is_lr():
    p = {"w": np.zeros(3)}
    adam_step(p, {"w": np.array([2.0, -0.3, 5.0])}, AdamState(lr=0.01))
    np.testing.assert_allclose(p["w"], [-0.01, 0.01, -0.01], rtol=1e-6)


def test_adam_quadratic_bowl():
    p = {"w": np.array([1.0])}
    st = AdamState(lr=0.1)
    path = []
    for _ in range(200):
        adam_step(p, {"w": 2 * p["w"]}, st)
        path.append(abs(p["w"][0]))
    # monotone descent until the iterate first reaches the noise floor
    head = path[:8]
    assert all(b < a for a, b in zip(head, head[1:]))
    assert path[-1] < 0.05


def test_adam_rejects_non_finite():
    with pytest.raises(FloatingPointError, match="bias"):
        adam_step({"bias": np.zeros(1)}, {"bias": np.array([np.nan])}, AdamState())


def test_bundle_roundtrip(tmp_path):
    b = ModelBundle.init(PairSpace(5, 6), 3, SeededRng(2))
    b.meta = {"variant": "TDR_CL"}
    save_bundle(tmp_path / "m.bin", b)
    got = load_bundle(tmp_path / "m.bin")
    for k, v in b.arrays().items():
        np.testing.assert_array_equal(got.arrays()[k], v)
    assert got.meta["variant"] == "TDR_CL" and got.dim == 3
