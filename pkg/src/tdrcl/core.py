"""Shared domain types, seeded randomness and small numeric helpers."""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Union

import numpy as np
from scipy.special import expit

# Tolerances used across the package.
EXACT_RTOL = 1e-12
VALIDITY_RTOL = 1e-8
LOG_EPS = 1e-6


class DomainError(ValueError):
    """An input value lies outside the mathematical domain of an operation."""


class ConfigError(ValueError):
    """A configuration value is invalid."""


@dataclass(frozen=True)
class PairSpace:
    """The user x item grid.  Pair ``(u, i)`` has flat index ``u * n_items + i``."""

    n_users: int
    n_items: int

    def __post_init__(self):
        if int(self.n_users) <= 0 or int(self.n_items) <= 0:
            raise ConfigError(
                f"PairSpace needs positive sizes, got {self.n_users}x{self.n_items}"
            )

    @property
    def total(self) -> int:
        return self.n_users * self.n_items

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_users, self.n_items)

    def flat(self, users, items) -> np.ndarray:
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        self.check(users, items)
        return users * self.n_items + items

    def unflat(self, idx) -> tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(idx, dtype=np.int64)
        return idx // self.n_items, idx % self.n_items

    def check(self, users, items) -> None:
        users = np.asarray(users)
        items = np.asarray(items)
        if users.size and (users.min() < 0 or users.max() >= self.n_users):
            raise IndexError(f"user index out of range [0, {self.n_users})")
        if items.size and (items.min() < 0 or items.max() >= self.n_items):
            raise IndexError(f"item index out of range [0, {self.n_items})")

    def all_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        return self.unflat(np.arange(self.total))


@dataclass(frozen=True)
class InteractionTable:
    """Dense per-pair arrays of one semi-synthetic world (all shaped ``space.shape``)."""

    space: PairSpace
    r_true: np.ndarray
    r: np.ndarray
    o: np.ndarray
    p_true: np.ndarray

    def __post_init__(self):
        for name in ("r_true", "r", "o", "p_true"):
            arr = getattr(self, name)
            if arr.shape != self.space.shape:
                raise ConfigError(f"{name} has shape {arr.shape}, expected {self.space.shape}")
        if not np.all((self.p_true > 0) & (self.p_true <= 1)):
            raise DomainError("p_true must lie in (0, 1]")
        if not (np.isin(self.r, (0, 1)).all() and np.isin(self.o, (0, 1)).all()):
            raise DomainError("r and o must be binary")


@dataclass(frozen=True)
class PropensityField:
    """Estimated propensities with the lower clipping bound that produced them."""

    p_hat: np.ndarray
    clip_threshold: float = 0.0

    def __post_init__(self):
        p = np.asarray(self.p_hat, dtype=np.float64)
        if np.any(~np.isfinite(p)) or np.any(p <= 0) or np.any(p > 1):
            raise DomainError("propensities must lie in (0, 1]")
        if np.any(p < self.clip_threshold):
            raise DomainError("propensity below its clipping threshold")
        object.__setattr__(self, "p_hat", p)

    @property
    def inverse(self) -> np.ndarray:
        return 1.0 / self.p_hat

    @property
    def targeting_weight(self) -> np.ndarray:
        """The single targeting covariate ``1/p - 1``."""
        return 1.0 / self.p_hat - 1.0


def _key(name: Union[str, int]) -> int:
    if isinstance(name, (int, np.integer)):
        return int(name) & 0xFFFFFFFF
    return zlib.crc32(str(name).encode("utf-8"))


@dataclass(frozen=True)
class SeededRng:
    """Seed plus a path of named substreams.

    ``generator(purpose)`` always returns a fresh ``numpy`` generator for the
    same (seed, path, purpose), so independent purposes never share draws and
    reruns are bit-identical.
    """

    seed: int
    path: tuple[int, ...] = field(default=())

    def child(self, name: Union[str, int]) -> "SeededRng":
        return SeededRng(self.seed, self.path + (_key(name),))

    def generator(self, purpose: str) -> np.random.Generator:
        seq = np.random.SeedSequence(
            entropy=int(self.seed) & ((1 << 64) - 1),
            spawn_key=self.path + (_key(purpose),),
        )
        return np.random.Generator(np.random.PCG64(seq))


def as_generator(rng: Union[SeededRng, np.random.Generator, int, None],
                 purpose: str = "default") -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, SeededRng):
        return rng.generator(purpose)
    return SeededRng(0 if rng is None else int(rng)).generator(purpose)


def bernoulli_sample(probs, rng) -> np.ndarray:
    """Independent Bernoulli draws, one per entry of ``probs`` (int8 output)."""
    probs = np.asarray(probs, dtype=np.float64)
    if np.any(~np.isfinite(probs)) or np.any(probs < 0) or np.any(probs > 1):
        raise DomainError("Bernoulli probabilities must lie in [0, 1]")
    gen = as_generator(rng, "bernoulli")
    return (gen.random(probs.shape) < probs).astype(np.int8)


def clip_propensities(p, threshold: float) -> PropensityField:
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"clip threshold must be in (0, 1), got {threshold}")
    p = np.asarray(p, dtype=np.float64)
    if np.any(p <= 0) or np.any(p > 1):
        raise DomainError("propensities must lie in (0, 1] before clipping")
    return PropensityField(np.maximum(p, threshold), float(threshold))


def sigmoid(x):
    return expit(np.asarray(x, dtype=np.float64))


def binary_cross_entropy(label, prob, eps: float = LOG_EPS) -> np.ndarray:
    """Elementwise ``-[y log q + (1-y) log(1-q)]`` with ``q`` clipped away from 0/1."""
    q = np.clip(np.asarray(prob, dtype=np.float64), eps, 1.0 - eps)
    y = np.asarray(label, dtype=np.float64)
    return -(y * np.log(q) + (1.0 - y) * np.log1p(-q))


def pairwise_sum(x) -> float:
    """Order-fixed summation (numpy's pairwise reduction on a contiguous copy)."""
    return float(np.sum(np.ascontiguousarray(x, dtype=np.float64)))


def standard_error(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.size < 2:
        return float("nan")
    return float(np.std(x, ddof=1) / np.sqrt(x.size))
