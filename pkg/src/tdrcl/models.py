"""Matrix-factorization heads, logistic propensity model, stop-gradient and Adam.

All gradients are written out by hand.  A model maps index arrays
``(users, items)`` to per-pair outputs; gradients are accumulated back into
embedding rows with sparse products, so batches may repeat indices.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np
import scipy.sparse as sp

from .archive import read_archive, write_archive
from .core import PairSpace, SeededRng, as_generator, sigmoid

CHECKPOINT_MAGIC = b"TDRCKPT\x01"


@dataclass
class MFParams:
    """User/item embeddings plus user, item and global biases."""

    user: np.ndarray
    item: np.ndarray
    user_bias: np.ndarray
    item_bias: np.ndarray
    global_bias: np.ndarray

    @classmethod
    def init(cls, n_users: int, n_items: int, dim: int, rng=None, scale: float = 0.1) -> "MFParams":
        gen = as_generator(rng, "init")
        return cls(
            user=gen.normal(0.0, scale, (n_users, dim)),
            item=gen.normal(0.0, scale, (n_items, dim)),
            user_bias=np.zeros(n_users),
            item_bias=np.zeros(n_items),
            global_bias=np.zeros(1),
        )

    @classmethod
    def zeros(cls, n_users: int, n_items: int, dim: int) -> "MFParams":
        return cls(np.zeros((n_users, dim)), np.zeros((n_items, dim)),
                   np.zeros(n_users), np.zeros(n_items), np.zeros(1))

    @property
    def dim(self) -> int:
        return self.user.shape[1]

    @property
    def space(self) -> PairSpace:
        return PairSpace(self.user.shape[0], self.item.shape[0])

    def arrays(self) -> Dict[str, np.ndarray]:
        return {"user": self.user, "item": self.item, "user_bias": self.user_bias,
                "item_bias": self.item_bias, "global_bias": self.global_bias}

    def copy(self) -> "MFParams":
        return MFParams(**{k: v.copy() for k, v in self.arrays().items()})

    def logits(self, users, items) -> np.ndarray:
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        self.space.check(users, items)
        return (np.einsum("ij,ij->i", self.user[users], self.item[items])
                + self.user_bias[users] + self.item_bias[items] + self.global_bias[0])

    def full_logits(self) -> np.ndarray:
        return (self.user @ self.item.T + self.user_bias[:, None]
                + self.item_bias[None, :] + self.global_bias[0])

    def backward(self, users, items, dlogit) -> Dict[str, np.ndarray]:
        """Gradient of ``sum(dlogit * logits(users, items))`` w.r.t. every array."""
        n_users, n_items = self.user.shape[0], self.item.shape[0]
        dlogit = np.asarray(dlogit, dtype=np.float64)
        s = sp.csr_matrix((dlogit, (users, items)), shape=(n_users, n_items))
        return {
            "user": np.asarray(s @ self.item),
            "item": np.asarray(s.T @ self.user),
            "user_bias": np.bincount(users, weights=dlogit, minlength=n_users),
            "item_bias": np.bincount(items, weights=dlogit, minlength=n_items),
            "global_bias": np.array([dlogit.sum()]),
        }


@dataclass
class LogisticParams:
    """Weights over the concatenated (user, item) embedding, plus an intercept."""

    weight: np.ndarray
    bias: np.ndarray

    @classmethod
    def zeros(cls, dim: int) -> "LogisticParams":
        return cls(np.zeros(2 * dim), np.zeros(1))

    def arrays(self) -> Dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}

    def copy(self) -> "LogisticParams":
        return LogisticParams(self.weight.copy(), self.bias.copy())


def stop_gradient(x):
    """Identity in value; the returned array is a detached, read-only constant.

    Gradient code treats anything passed through here as data, so its
    derivative contribution is exactly zero.
    """
    out = np.array(x, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


def predict(theta: MFParams, users, items) -> np.ndarray:
    return sigmoid(theta.logits(users, items))


def impute(phi: MFParams, users, items) -> np.ndarray:
    """Linear MF head: models a signed residual, so it is left unbounded."""
    return phi.logits(users, items)


def propensity_features(theta: MFParams, users, items) -> np.ndarray:
    return np.concatenate([theta.user[users], theta.item[items]], axis=1)


def propensity_logits(xi: LogisticParams, theta: MFParams, users, items) -> np.ndarray:
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    theta.space.check(users, items)
    d = theta.dim
    return theta.user[users] @ xi.weight[:d] + theta.item[items] @ xi.weight[d:] + xi.bias[0]


def propensity(xi: LogisticParams, theta: MFParams, users, items, clip_threshold: float = 0.0) -> np.ndarray:
    return np.maximum(sigmoid(propensity_logits(xi, theta, users, items)), clip_threshold)


def propensity_backward(xi: LogisticParams, theta: MFParams, users, items, dlogit,
                        into_embeddings: bool = False):
    """Gradients of ``sum(dlogit * propensity_logits)``: (xi grads, theta grads or None)."""
    dlogit = np.asarray(dlogit, dtype=np.float64)
    d = theta.dim
    gxi = {
        "weight": np.concatenate([dlogit @ theta.user[users], dlogit @ theta.item[items]]),
        "bias": np.array([dlogit.sum()]),
    }
    gtheta = None
    if into_embeddings:
        gtheta = {
            "user": np.zeros_like(theta.user),
            "item": np.zeros_like(theta.item),
        }
        np.add.at(gtheta["user"], users, np.outer(dlogit, xi.weight[:d]))
        np.add.at(gtheta["item"], items, np.outer(dlogit, xi.weight[d:]))
    return gxi, gtheta


@dataclass
class ModelBundle:
    """Prediction model (theta), imputation model (phi) and propensity model (xi)."""

    theta: MFParams
    phi: MFParams
    xi: LogisticParams
    dim: int
    meta: dict = field(default_factory=dict)

    @classmethod
    def init(cls, space: PairSpace, dim: int = 32, rng: Optional[SeededRng] = None,
             scale: float = 0.1) -> "ModelBundle":
        rng = rng or SeededRng(0)
        theta = MFParams.init(space.n_users, space.n_items, dim, rng.child("theta"), scale)
        phi = MFParams.init(space.n_users, space.n_items, dim, rng.child("phi"), scale)
        return cls(theta, phi, LogisticParams.zeros(dim), dim)

    def copy(self) -> "ModelBundle":
        return ModelBundle(self.theta.copy(), self.phi.copy(), self.xi.copy(), self.dim, dict(self.meta))

    def arrays(self) -> Dict[str, np.ndarray]:
        out = {}
        for prefix, part in (("theta", self.theta), ("phi", self.phi), ("xi", self.xi)):
            for k, v in part.arrays().items():
                out[f"{prefix}.{k}"] = v
        return out

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays().values())


def save_bundle(path, bundle: ModelBundle, header: Optional[dict] = None) -> None:
    meta = {"kind": "ModelBundle", "dim": bundle.dim,
            "n_users": bundle.theta.user.shape[0], "n_items": bundle.theta.item.shape[0]}
    meta.update(bundle.meta)
    meta.update(header or {})
    write_archive(path, CHECKPOINT_MAGIC, meta, bundle.arrays())


def load_bundle(path) -> ModelBundle:
    meta, arrays = read_archive(path, CHECKPOINT_MAGIC)

    def part(prefix):
        return {k.split(".", 1)[1]: v for k, v in arrays.items() if k.startswith(prefix + ".")}

    theta = MFParams(**part("theta"))
    phi = MFParams(**part("phi"))
    xi = LogisticParams(**part("xi"))
    extra = {k: v for k, v in meta.items() if k not in ("kind", "dim", "n_users", "n_items")}
    return ModelBundle(theta, phi, xi, int(meta["dim"]), extra)


@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState):
    """One bias-corrected Adam update, in place.  ``weight_decay`` is added as L2 to the gradient.

    Only parameters present in ``grads`` are touched; their moments are
    created lazily at zero.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        if state.weight_decay:
            g = g + state.weight_decay * p
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state
