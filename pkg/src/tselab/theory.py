"""Closed-form expectations, bounds and estimates for the SA-plus-residual step.

For ``Y = X + alpha P X W`` with W entries i.i.d., mean zero, variance
sigma^2, the energy ratios ``xi_i = ||Pi_i Y||^2 / ||Pi_i X||^2`` have
expectations ``1 + alpha^2 d sigma^2 mu_i^2``. Everything here is a pure
function of a handful of scalars, except the two helpers that compute those
scalars from ``(X, P)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import BoundaryError, ValidationError
from .matcore import as_matrix
from .metrics import component_energies, delta, omega
from .spectral import second_eigenvalue_modulus

__all__ = [
    "EscalationEstimate",
    "LowerBound",
    "corollary_estimates",
    "empirical_tail",
    "escalation_estimate",
    "expected_rate_formula",
    "expected_xi",
    "gamma_constant",
    "multihead_mu_bar",
    "technical_condition",
    "theorem_lower_bound",
]


def expected_xi(alpha: float, d_sigma_sq: float, mu1: float, mu2: float) -> tuple[float, float]:
    if alpha < 0 or d_sigma_sq < 0 or mu1 < 0 or mu2 < 0:
        raise ValidationError("alpha, d*sigma^2 and mu values must be nonnegative")
    g = alpha * alpha * d_sigma_sq
    return 1.0 + g * mu1 * mu1, 1.0 + g * mu2 * mu2


def expected_rate_formula(
    alpha: float, d_sigma_sq: float, mu1: float, mu2: float, eta_mean: float, t_sim_x: float
) -> float:
    """Expected escalation rate with the concentration defect ``eta_mean``.

    ``eta_mean = 0`` gives the idealised prediction.
    """
    g = alpha * alpha * d_sigma_sq
    factor = g / (1.0 + g * mu2 * mu2) * (mu1 * mu1 - mu2 * mu2) - eta_mean
    return 1.0 + factor * t_sim_x


class LowerBound(NamedTuple):
    value: float
    hypothesis_ok: bool  # omega + delta < 1


def theorem_lower_bound(alpha: float, omega: float, delta: float, t_sim_x: float) -> LowerBound:
    """``1 + alpha^2/(1 + alpha^2 delta^2) ((1-omega)^2 - delta^2) t_sim``.

    Valid for ``d sigma^2 = 1``. The bound is only asserted when
    ``omega + delta < 1``; the flag reports that hypothesis.
    """
    a2 = alpha * alpha
    value = 1.0 + a2 / (1.0 + a2 * delta * delta) * ((1.0 - omega) ** 2 - delta * delta) * t_sim_x
    return LowerBound(value, omega + delta < 1.0)


def corollary_estimates(omega: float, delta: float, lambda2_mod: float) -> tuple[float, float]:
    """The bound factor and the symmetric-case spectral-gap factor (alpha = 1).

    Returns ``(((1-omega)^2 - delta^2)/(1 + delta^2), (1 - l2^2)/(1 + l2^2))``.
    """
    if omega < 0 or delta < 0 or lambda2_mod < 0:
        raise ValidationError("omega, delta and |lambda_2| must be nonnegative")
    est1 = ((1.0 - omega) ** 2 - delta * delta) / (1.0 + delta * delta)
    l2 = lambda2_mod * lambda2_mod
    return est1, (1.0 - l2) / (1.0 + l2)


def gamma_constant(alpha: float, d_sigma_sq: float, mu1: float, mu2: float) -> float:
    """``E[xi_2]^2 / (E[xi_1] + 2 E[xi_2])``."""
    e1, e2 = expected_xi(alpha, d_sigma_sq, mu1, mu2)
    return e2 * e2 / (e1 + 2.0 * e2)


def technical_condition(mu1: float, mu2: float, omega: float, delta: float) -> float:
    """``max(mu_1^2 - (1-omega)^2, delta^2 - mu_2^2)``; nonnegative in exact arithmetic."""
    return max(mu1 * mu1 - (1.0 - omega) ** 2, delta * delta - mu2 * mu2)


def multihead_mu_bar(x, ps: Sequence) -> tuple[float, float]:
    """Head-averaged ``mu_i``: ``sqrt(mean_k ||Pi_i P_k X||^2 / ||Pi_i X||^2)``."""
    x = as_matrix(x, "X")
    if not ps:
        raise ValidationError("need at least one attention matrix")
    sx, vx = component_energies(x)
    if sx == 0.0:
        raise BoundaryError("Pi_1 X vanishes; mu_1 undefined", projector="Pi_1")
    if vx == 0.0:
        raise BoundaryError("Pi_2 X vanishes; mu_2 undefined", projector="Pi_2")
    s1 = s2 = 0.0
    for p in ps:
        s, v = component_energies(np.asarray(getattr(p, "p", p)) @ x)
        s1 += s
        s2 += v
    h = len(ps)
    return float(np.sqrt(s1 / (h * sx))), float(np.sqrt(s2 / (h * vx)))


@dataclass(frozen=True)
class EscalationEstimate:
    """Theory-side predictions for one SA step at a fixed ``(X, {P_k})``.

    ``omega``, ``delta`` and ``lambda2_modulus`` are head averages;
    ``estimate1``/``estimate2`` are the corollary factors computed from them
    and ``expected_rate_lower`` is the theorem bound.
    """

    t_sim_x: float
    mu1: float
    mu2: float
    omega: float
    delta: float
    lambda2_modulus: float
    expected_xi1: float
    expected_xi2: float
    estimate1: float
    estimate2: float
    expected_rate_lower: float
    hypothesis_ok: bool
    technical: float
    gamma: float

    @property
    def expected_ratio(self) -> float:
        return self.expected_xi1 / self.expected_xi2

    @property
    def rate_estimate1(self) -> float:
        return 1.0 + self.estimate1 * self.t_sim_x

    @property
    def rate_estimate2(self) -> float:
        return 1.0 + self.estimate2 * self.t_sim_x


def escalation_estimate(
    x, ps: Sequence, alpha: float = 1.0, d_sigma_sq: float = 1.0, with_lambda2: bool = True
) -> EscalationEstimate:
    """Evaluate every closed-form quantity for ``X`` and the heads ``ps``."""
    x = as_matrix(x, "X")
    sx, vx = component_energies(x)
    mu1, mu2 = multihead_mu_bar(x, ps)
    om = float(np.mean([omega(x, p) for p in ps]))
    de = float(np.mean([delta(p) for p in ps]))
    l2 = float(np.mean([second_eigenvalue_modulus(p) for p in ps])) if with_lambda2 else float("nan")
    e1, e2 = expected_xi(alpha, d_sigma_sq, mu1, mu2)
    t = sx / (sx + vx)
    est1, est2 = corollary_estimates(om, de, l2) if with_lambda2 else (
        corollary_estimates(om, de, 0.0)[0],
        float("nan"),
    )
    bound = theorem_lower_bound(alpha, om, de, t)
    return EscalationEstimate(
        t_sim_x=t,
        mu1=mu1,
        mu2=mu2,
        omega=om,
        delta=de,
        lambda2_modulus=l2,
        expected_xi1=e1,
        expected_xi2=e2,
        estimate1=est1,
        estimate2=est2,
        expected_rate_lower=bound.value,
        hypothesis_ok=bound.hypothesis_ok,
        technical=technical_condition(mu1, mu2, om, de),
        gamma=gamma_constant(alpha, d_sigma_sq, mu1, mu2),
    )


def empirical_tail(samples, thresholds) -> np.ndarray:
    """Fraction of ``|samples|`` at or above each threshold."""
    a = np.abs(np.asarray(samples, dtype=np.float64)).ravel()
    t = np.atleast_1d(np.asarray(thresholds, dtype=np.float64))
    a.sort()
    return 1.0 - np.searchsorted(a, t, side="left") / a.size
