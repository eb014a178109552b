"""Token similarity measures and the per-step escalation diagnostics.

Notation: ``Pi_1`` averages the rows (column-mean broadcast), ``Pi_2`` is its
complement (column centring), ``e = 1/sqrt(n)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import BoundaryError, UndefinedMeasureError
from .matcore import as_matrix
from .spectral import spectral_norm

__all__ = [
    "DiagnosticsRecord",
    "component_energies",
    "cosine_similarity",
    "delta",
    "escalation_rate",
    "eta_sample",
    "mu_pair",
    "omega",
    "token_diversity",
    "token_similarity",
    "xi_pair",
]


def component_energies(x) -> tuple[float, float]:
    """``(||Pi_1 X||_F^2, ||Pi_2 X||_F^2)``, both from the column means."""
    x = np.asarray(x, dtype=np.float64)
    m = x.mean(axis=0)
    c = x - m
    return float(x.shape[0] * (m @ m)), float(np.einsum("ij,ij->", c, c))


def _nonzero_energies(x) -> tuple[float, float]:
    s, v = component_energies(x)
    if s + v == 0.0:
        raise UndefinedMeasureError("token similarity is undefined for the zero matrix")
    return s, v


def token_similarity(x) -> float:
    """Fraction of ``||X||_F^2`` lying in span{1}; 1 iff all rows are equal."""
    s, v = _nonzero_energies(x)
    return s / (s + v)


def token_diversity(x) -> float:
    """``1 - token_similarity``, evaluated from the centred part directly."""
    s, v = _nonzero_energies(x)
    return v / (s + v)


def cosine_similarity(x) -> float:
    """Average pairwise cosine similarity between distinct rows."""
    x = as_matrix(x, "X")
    n = x.shape[0]
    if n < 2:
        raise UndefinedMeasureError("cosine similarity needs at least two rows")
    norms = np.linalg.norm(x, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise UndefinedMeasureError(f"row {zero[0]} is zero; its cosine is undefined")
    u = x / norms[:, None]
    g = u @ u.T
    # sum over i < j equals (sum of all entries - trace) / 2
    total = (g.sum() - np.trace(g)) / 2.0
    return float(np.clip(2.0 * total / (n * n - n), -1.0, 1.0))


def escalation_rate(x, y) -> float:
    """``t_div(X) / t_div(Y)``; > 1 means Y is more similar than X.

    Only defined when both similarities lie strictly inside (0, 1).
    """
    sx, vx = _nonzero_energies(x)
    sy, vy = _nonzero_energies(y)
    for name, s, v in (("X", sx, vx), ("Y", sy, vy)):
        if s == 0.0 or v == 0.0:
            raise BoundaryError(f"t_sim({name}) is {1.0 if v == 0 else 0.0}; rate undefined")
    return (vx / (sx + vx)) / (vy / (sy + vy))


def xi_pair(x, y) -> tuple[float, float]:
    """``(||Pi_1 Y||^2 / ||Pi_1 X||^2, ||Pi_2 Y||^2 / ||Pi_2 X||^2)``."""
    sx, vx = component_energies(x)
    sy, vy = component_energies(y)
    if sx == 0.0:
        raise BoundaryError("Pi_1 X vanishes; xi_1 undefined", projector="Pi_1")
    if vx == 0.0:
        raise BoundaryError("Pi_2 X vanishes; xi_2 undefined", projector="Pi_2")
    return sy / sx, vy / vx


def _p(p) -> np.ndarray:
    return np.asarray(getattr(p, "p", p), dtype=np.float64)


def mu_pair(x, p) -> tuple[float, float]:
    """``(||Pi_1 P X|| / ||Pi_1 X||, ||Pi_2 P X|| / ||Pi_2 X||)``."""
    x = np.asarray(x, dtype=np.float64)
    sx, vx = component_energies(x)
    if sx == 0.0:
        raise BoundaryError("Pi_1 X vanishes; mu_1 undefined", projector="Pi_1")
    if vx == 0.0:
        raise BoundaryError("Pi_2 X vanishes; mu_2 undefined", projector="Pi_2")
    s, v = component_energies(_p(p) @ x)
    return float(np.sqrt(s / sx)), float(np.sqrt(v / vx))


def omega(x, p) -> float:
    """``||e^T P Pi_2 X|| / ||e^T X||``; zero for doubly stochastic P."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    ex = x.sum(axis=0) / np.sqrt(n)
    den = float(np.linalg.norm(ex))
    if den == 0.0:
        raise BoundaryError("e^T X vanishes; omega undefined", projector="Pi_1")
    c = x - x.mean(axis=0)
    num = float(np.linalg.norm(_p(p).sum(axis=0) @ c)) / np.sqrt(n)
    return num / den


def delta(p) -> float:
    """``||Pi_2 P||_2`` by power iteration."""
    p = _p(p)
    return spectral_norm(p - p.mean(axis=0, keepdims=True))


def eta_sample(x, y, expected_xi1: float, expected_xi2: float) -> float:
    """Realised ``E[xi_1]/E[xi_2] - xi_1/xi_2`` for one draw embedded in ``y``."""
    if not expected_xi2 > 0:
        raise BoundaryError(f"expected_xi2 must be positive, got {expected_xi2}")
    xi1, xi2 = xi_pair(x, y)
    if xi2 == 0.0:
        raise BoundaryError("xi_2 is zero; ratio undefined", projector="Pi_2")
    return expected_xi1 / expected_xi2 - xi1 / xi2


@dataclass
class DiagnosticsRecord:
    """Measurements for one (block, step) cell of one trial."""

    block_index: int
    step_index: int
    t_sim: float
    t_div: float
    t_cos: float = float("nan")
    xi1: float = float("nan")
    xi2: float = float("nan")
    xi_ratio: float = float("nan")
    omega: float = float("nan")
    delta: float = float("nan")
    lambda2_modulus: float = float("nan")
    r_rate: float = float("nan")

    @classmethod
    def measure(cls, block_index: int, step_index: int, before, after, cosine: bool = False):
        """Fill the similarity and xi fields for the transition ``before -> after``."""
        sa, va = _nonzero_energies(after)
        rec = cls(block_index, step_index, t_sim=sa / (sa + va), t_div=va / (sa + va))
        if cosine:
            rec.t_cos = cosine_similarity(after)
        try:
            rec.xi1, rec.xi2 = xi_pair(before, after)
            if rec.xi2 > 0:
                rec.xi_ratio = rec.xi1 / rec.xi2
            rec.r_rate = escalation_rate(before, after)
        except BoundaryError:
            pass
        return rec

    def as_dict(self) -> dict:
        return asdict(self)
