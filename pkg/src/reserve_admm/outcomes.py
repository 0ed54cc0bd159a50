"""Feasible bid extraction and reward allocation.

Any ADMM iterate can be turned into a bid that satisfies every building's
constraints: clip the aggregate offer to its weakest hour, scale each
building's share down in proportion, and re-solve for the cheapest nominal
input that supports the reduced share.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .qp import QpProblem, solve
from .robust_policy import ConstraintSetC

__all__ = [
    "BidOutcome",
    "ExtractionError",
    "clip_and_scale",
    "feasible_extract",
    "reoptimize_policy",
    "proportional_reward",
    "lagrangian_reward",
    "feasible_lagrangian_price",
    "mixed_reward",
]


class ExtractionError(RuntimeError):
    """Reoptimization with reduced shares failed (should be impossible)."""


@dataclass
class BidOutcome:
    """Jointly feasible bid and its bookkeeping.

    Attributes
    ----------
    Y_F : ndarray, shape (N,)
        Time-constant aggregate bid (kW).
    y_F : ndarray, shape (M, N)
        Per-building shares; rows sum to ``Y_F``.
    kappas_F : list of ndarray
        Reoptimized nominal inputs.
    J_F : float
        ``sum_b c_b^T kappa_b - p^T Y_F``.
    """

    Y_F: np.ndarray
    y_F: np.ndarray
    kappas_F: list
    J_F: float
    policies_F: list = field(default_factory=list)
    points_F: list = field(default_factory=list)
    Lambda: np.ndarray | None = None
    Lambda_F: np.ndarray | None = None
    rewards: dict = field(default_factory=dict)

    @property
    def level(self) -> float:
        return float(self.Y_F[0]) if self.Y_F.size else 0.0


def clip_and_scale(y) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(Y_F, y_F)`` from per-building offers ``y`` (M x N).

    Hours where the total offer is zero give zero shares.
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if np.any(y < -1e-9):
        raise ValueError("y: offers must be nonnegative")
    y = np.maximum(y, 0.0)
    total = y.sum(axis=0)
    level = total.min() if total.size else 0.0
    Y_F = np.full(y.shape[1], level)
    scale = np.divide(Y_F, total, out=np.zeros_like(total), where=total > 0)
    y_F = y * scale[None, :]
    return Y_F, y_F


def reoptimize_policy(C: ConstraintSetC, y_fixed, tol: float = 1e-8):
    """Cheapest nominal input with the reserve share pinned to ``y_fixed``.

    Returns the solver point; raises :class:`ExtractionError` if the
    problem is not solved to tolerance.
    """
    lay = C.layout
    y_fixed = np.asarray(y_fixed, dtype=float)
    Ey = C.y_selector()
    Aeq = sp.vstack([C.Aeq, Ey], format="csr")
    beq = np.concatenate([C.beq, y_fixed])
    problem = QpProblem(None, C.cost_vector(), Aeq, beq, C.Aineq, C.hineq)
    sol = solve(problem, tol=tol)
    if not sol.optimal:
        raise ExtractionError(
            f"building {C.model.id}: reoptimization returned {sol.status} "
            f"(max KKT residual {sol.kkt.max:.2e})")
    z = sol.z.copy()
    z[lay.y] = y_fixed
    return z


def feasible_extract(sets: Sequence[ConstraintSetC], y, p, tol: float = 1e-8) -> BidOutcome:
    """Build a jointly feasible bid from the offers ``y`` of any iteration.

    Parameters
    ----------
    sets : sequence of ConstraintSetC
        One constraint set per building, in fleet order.
    y : array_like, shape (M, N)
        Building offers, e.g. from the latest building step.
    p : array_like, shape (N,)
        Reserve price.
    tol : float
        KKT tolerance for the reoptimization problems.
    """
    p = np.asarray(p, dtype=float)
    Y_F, y_F = clip_and_scale(y)
    kappas, policies, points = [], [], []
    cost = 0.0
    for C, share in zip(sets, y_F):
        z = reoptimize_policy(C, share, tol)
        kappa = C.kappa(z)
        kappas.append(kappa)
        policies.append(C.policy(z))
        points.append(z)
        cost += float(C.model.c @ kappa)
    J_F = cost - float(p @ Y_F)
    return BidOutcome(Y_F=Y_F, y_F=y_F, kappas_F=kappas, J_F=J_F, policies_F=policies, points_F=points)


def proportional_reward(p, y) -> np.ndarray:
    """Reward each building with ``p^T y_b``."""
    return np.atleast_2d(np.asarray(y, dtype=float)) @ np.asarray(p, dtype=float)


def lagrangian_reward(Lambda, y) -> np.ndarray:
    """Reward each building with ``Lambda^T y_b``."""
    return np.atleast_2d(np.asarray(y, dtype=float)) @ np.asarray(Lambda, dtype=float)


def feasible_lagrangian_price(Y_F, Lambda_last, rho: float, M: int, p) -> np.ndarray:
    """Hourly price consistent with an extracted bid.

    The result sums to the same total as ``p``, so pricing the extracted
    shares with it pays out exactly ``p^T Y_F``.
    """
    Y_F = np.asarray(Y_F, dtype=float)
    p = np.asarray(p, dtype=float)
    Omega_F = (rho / M) * Y_F - np.asarray(Lambda_last, dtype=float)
    return np.full(p.size, (Omega_F + p).sum() / p.size) - Omega_F


def mixed_reward(alpha: float, r, r_Lambda) -> np.ndarray:
    """Blend proportional and Lagrangian rewards, ``alpha`` in [0, 1]."""
    if not 0.0 <= alpha <= 1.0 or not np.isfinite(alpha):
        raise ValueError(f"alpha: must lie in [0, 1], got {alpha}")
    return alpha * np.asarray(r, dtype=float) + (1.0 - alpha) * np.asarray(r_Lambda, dtype=float)
