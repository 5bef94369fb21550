"""One-parameter targeting of imputed errors.

The imputation is extended with the covariate ``w = 1/p_hat - 1``; fitting its
coefficient by least squares on the exposed pairs zeroes the DR correction
term, so the targeted DR estimate coincides with an EIB estimate.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .core import DomainError, PropensityField

NUMERATOR_RTOL = 1e-12


@dataclass(frozen=True)
class ImputationState:
    """Parametric imputation ``e_hat`` plus the accumulated correction ``omega``."""

    e_hat: np.ndarray
    omega: np.ndarray
    p_hat: PropensityField

    @classmethod
    def fresh(cls, e_hat, p_hat) -> "ImputationState":
        if not isinstance(p_hat, PropensityField):
            p_hat = PropensityField(p_hat)
        e_hat = np.asarray(e_hat, dtype=np.float64)
        return cls(e_hat, np.zeros_like(e_hat), p_hat)

    @property
    def effective(self) -> np.ndarray:
        return self.e_hat + self.omega

    def with_e_hat(self, e_hat) -> "ImputationState":
        return replace(self, e_hat=np.asarray(e_hat, dtype=np.float64))


@dataclass(frozen=True)
class TargetingResult:
    eta_star: float
    residual_correction: float
    degenerate: bool


def _residual(e, state: ImputationState, mask, include_omega: bool) -> np.ndarray:
    e = np.where(mask, np.asarray(e, dtype=np.float64), 0.0)
    base = state.effective if include_omega else state.e_hat
    return np.where(mask, e - base, 0.0)


def solve_eta(e, state: ImputationState, o, include_omega: bool = True) -> TargetingResult:
    """Closed-form least-squares coefficient of ``1/p_hat - 1`` on the exposed pairs.

    With ``include_omega=False`` the residual ignores the accumulated
    correction ``omega`` (useful for ablations).
    """
    mask = np.asarray(o).astype(bool)
    if not mask.any():
        raise DomainError("targeting needs at least one exposed pair")
    w = np.where(mask, state.p_hat.targeting_weight, 0.0)
    d = _residual(e, state, mask, include_omega)
    denom = float(np.sum(w * w))
    if denom == 0.0:
        return TargetingResult(0.0, float(np.mean(d * w)), True)
    num = float(np.sum(w * d))
    # a numerator that is zero up to its own rounding means the constraint
    # already holds; snapping to 0 keeps an already-valid imputation bit-identical
    if abs(num) <= NUMERATOR_RTOL * float(np.sum(np.abs(w * d))):
        num = 0.0
    eta = num / denom
    post = float(np.mean((d - eta * w) * w))
    return TargetingResult(eta, post, False)


def apply_targeting(state: ImputationState, eta: float) -> ImputationState:
    """``omega += eta * (1/p_hat - 1)`` on every pair, exposed or not."""
    if not np.isfinite(eta):
        raise DomainError(f"non-finite targeting coefficient {eta}")
    if eta == 0.0:
        return state
    return replace(state, omega=state.omega + eta * state.p_hat.targeting_weight)


def check_validity(e, o, state: ImputationState) -> float:
    """Mean of ``o (e - e_hat - omega)(1 - p)/p`` over all pairs; zero once targeted."""
    mask = np.asarray(o).astype(bool)
    d = _residual(e, state, mask, include_omega=True)
    return float(np.mean(d * state.p_hat.targeting_weight))


def targeted_imputation(state: ImputationState) -> np.ndarray:
    return state.effective


def target(e, o, e_hat, p_hat, include_omega: bool = True):
    """Run one solve/apply cycle from ``omega = 0``; returns ``(e_tilde, result)``."""
    state = ImputationState.fresh(e_hat, p_hat)
    res = solve_eta(e, state, o, include_omega=include_omega)
    state = apply_targeting(state, res.eta_star)
    return targeted_imputation(state), res
