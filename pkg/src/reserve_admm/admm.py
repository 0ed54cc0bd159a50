"""Individual and aggregated reserve bidding.

The aggregated problem couples buildings only through the requirement that
their summed offer is constant over the horizon.  ADMM splits it into a
private QP per building and a closed-form aggregation step; the two are
reconciled by per-building multipliers, which in fact coincide after every
iteration.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .model import BuildingModel, ConfigurationError
from .outcomes import BidOutcome, feasible_extract
from .qp import QpProblem, QpSolution, solve
from .robust_policy import AffinePolicy, ConstraintSetC, PolicyStructure, build_constraint_set

__all__ = [
    "THREADS_ENV",
    "AdmmConfig",
    "AdmmIterate",
    "AdmmResult",
    "BuildingLocalState",
    "NegotiationError",
    "InfeasibleModelError",
    "solve_individual",
    "building_step",
    "aggregation_step",
    "accumulate_aggregate",
    "shares_from_aggregate",
    "lagrangian_update",
    "aggregation_kkt_oracle",
    "objective_value",
    "run_centralized",
    "solve_monolithic",
    "write_trace_csv",
    "worker_count",
    "fmt",
]

THREADS_ENV = "RESERVE_ADMM_THREADS"
STOPPING = ("fixed", "residual")


def fmt(value) -> str:
    """Locale-free float formatting with 17 significant digits."""
    return format(float(value), ".17g")


class InfeasibleModelError(ConfigurationError):
    """A building cannot meet its constraints even without reserve."""


class NegotiationError(RuntimeError):
    """A building QP did not reach an optimal status."""

    def __init__(self, building: int, solution: QpSolution, context: str = "building step"):
        self.building = building
        self.status = solution.status
        self.kkt = solution.kkt
        super().__init__(f"building {building}: {context} returned {solution.status} "
                         f"(max KKT residual {solution.kkt.max:.2e})")


@dataclass
class AdmmConfig:
    """Negotiation settings.

    Parameters
    ----------
    rho : float
        Penalty parameter; scale it to the magnitude of the prices.
    max_iters : int
        Iteration budget (exact count with ``stopping="fixed"``).
    stopping : {"fixed", "residual"}
        With ``"residual"`` the loop also ends once the primal residual
        ``max_b ||ybar_b - y_b||`` and the dual residual
        ``rho * max_b ||ybar_b - ybar_b_prev||`` both fall below ``eps``.
    structure : str or PolicyStructure
        Nominal-gain structure of the affine policies.
    qp_tol : float
        KKT tolerance demanded from every QP.
    extract_every : int
        Run feasible extraction every this many iterations (0: only at the
        end).  Extraction costs one LP per building.
    threads : int, optional
        Worker threads for building steps; defaults to the
        ``RESERVE_ADMM_THREADS`` environment variable, else 1.
    """

    rho: float = 1.0
    max_iters: int = 25
    stopping: str = "fixed"
    eps: float = 1e-6
    structure: PolicyStructure | str = "lower_triangular"
    qp_tol: float = 1e-8
    extract_every: int = 1
    threads: int | None = None

    def __post_init__(self):
        if isinstance(self.structure, str):
            self.structure = PolicyStructure(self.structure)
        if not (self.rho > 0 and np.isfinite(self.rho)):
            raise ConfigurationError(f"rho: must be positive, got {self.rho}")
        if int(self.max_iters) < 1:
            raise ConfigurationError(f"max_iters: must be at least 1, got {self.max_iters}")
        if self.stopping not in STOPPING:
            raise ConfigurationError(f"stopping: expected one of {STOPPING}, got {self.stopping!r}")
        if not self.eps > 0:
            raise ConfigurationError("eps: must be positive")
        if self.extract_every < 0:
            raise ConfigurationError("extract_every: must be nonnegative")


def worker_count(threads: int | None = None) -> int:
    if threads is None:
        raw = os.environ.get(THREADS_ENV, "1")
        try:
            threads = int(raw)
        except ValueError:
            raise ConfigurationError(f"{THREADS_ENV}: expected an integer, got {raw!r}") from None
    return max(1, int(threads))


@dataclass
class BuildingLocalState:
    """Private data of one building: its constraint set and last answer."""

    model: BuildingModel
    C: ConstraintSetC
    policy: AffinePolicy | None = None
    y: np.ndarray | None = None
    z: np.ndarray | None = None

    @classmethod
    def from_model(cls, model: BuildingModel, structure: PolicyStructure | str = "lower_triangular"):
        return cls(model=model, C=build_constraint_set(model, structure=structure))

    @property
    def kappa(self) -> np.ndarray:
        if self.z is None:
            return np.zeros(self.model.N * self.model.m)
        return self.C.kappa(self.z)


@dataclass
class AdmmIterate:
    """Snapshot after one full iteration (building, aggregation, mediation).

    Arrays indexed by building have shape ``(M, N)``.
    """

    iter: int
    y: np.ndarray
    ybar: np.ndarray
    lam: np.ndarray
    Y: np.ndarray
    Omega: np.ndarray
    primal_residual: float
    dual_residual: float
    building_residuals: np.ndarray
    J: float
    J_F: float = float("nan")
    outcome: BidOutcome | None = None


@dataclass
class AdmmResult:
    history: list
    states: list
    outcome: BidOutcome
    config: AdmmConfig
    transport: object = None

    @property
    def last(self) -> AdmmIterate:
        return self.history[-1]

    @property
    def converged(self) -> bool:
        """Primal residual at most ``1e-6 * max(1, ||Y||)``."""
        it = self.last
        return it.primal_residual <= 1e-6 * max(1.0, float(np.linalg.norm(it.Y)))


# ---------------------------------------------------------------------------
# single-building problems

def solve_individual(model: BuildingModel, structure: PolicyStructure | str, p, tol: float = 1e-8,
                     C: ConstraintSetC | None = None):
    """Best time-constant bid of one building on its own.

    Returns
    -------
    policy : AffinePolicy
    y : ndarray
        Constant bid level repeated over the horizon (kW).
    objective : float
        ``c^T kappa - p^T y``.
    """
    if C is None:
        C = build_constraint_set(model, structure=structure, time_constant_y=True)
    elif not C.time_constant_y:
        raise ConfigurationError("C: individual bidding needs a time-constant constraint set")
    p = np.asarray(p, dtype=float)
    q = C.cost_vector()
    q[C.layout.y] -= p
    sol = solve(QpProblem(None, q, C.Aeq, C.beq, C.Aineq, C.hineq), tol=tol)
    if not sol.optimal:
        if sol.status == "infeasible":
            raise InfeasibleModelError(f"building {model.id}: constraint set is empty even without reserve "
                                       "(inconsistent model)")
        raise NegotiationError(model.id, sol, "individual bid")
    y = C.y(sol.z)
    return C.policy(sol.z), y, float(C.model.c @ C.kappa(sol.z) - p @ y)


def building_step(state: BuildingLocalState, ybar_b, lambda_b, rho: float, tol: float = 1e-8):
    """Minimize ``c^T kappa - lambda^T y + rho/2 ||ybar - y||^2`` over C.

    Updates ``state`` in place and returns ``(policy, y_b)``.
    """
    C = state.C
    lay = C.layout
    ybar_b = np.asarray(ybar_b, dtype=float)
    lambda_b = np.asarray(lambda_b, dtype=float)
    y_cols = np.arange(lay.y.start, lay.y.stop)
    P = sp.csc_matrix((np.full(lay.N, rho), (y_cols, y_cols)), shape=(C.n_var, C.n_var))
    q = C.cost_vector()
    q[lay.y] = -lambda_b - rho * ybar_b
    sol = solve(QpProblem(P, q, C.Aeq, C.beq, C.Aineq, C.hineq), tol=tol)
    if not sol.optimal:
        raise NegotiationError(state.model.id, sol)
    state.z = sol.z
    state.y = C.y(sol.z)
    state.policy = C.policy(sol.z)
    return state.policy, state.y


# ---------------------------------------------------------------------------
# aggregation

def accumulate_aggregate(contributions) -> np.ndarray:
    """Sum member contributions in member order.

    Coordinator and ring use this exact summation order, which keeps their
    iterates bitwise identical.
    """
    contributions = np.atleast_2d(contributions)
    total = contributions[0].copy()
    for row in contributions[1:]:
        total = total + row
    return total


def shares_from_aggregate(y_b, lambda_b, Omega, rho: float, p):
    """Local evaluation of the aggregation step given ``Omega``.

    Returns ``(ybar_b, Y)``; works row-wise on stacked ``y_b``/``lambda_b``.
    """
    p = np.asarray(p, dtype=float)
    N = p.size
    level = (Omega + p).sum() / (rho * N)
    ybar = (rho * np.asarray(y_b, dtype=float) - np.asarray(lambda_b, dtype=float) - Omega) / rho + level
    return ybar, level


def aggregation_step(y, lam, rho: float, p):
    """Closed-form aggregation update.

    Parameters
    ----------
    y, lam : array_like, shape (M, N)
    rho : float
    p : array_like, shape (N,)

    Returns
    -------
    Y : ndarray, shape (N,)
    ybar : ndarray, shape (M, N)
    Omega : ndarray, shape (N,)
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    lam = np.atleast_2d(np.asarray(lam, dtype=float))
    p = np.asarray(p, dtype=float)
    M, N = y.shape
    Omega = accumulate_aggregate((rho * y - lam) / M)
    ybar, level = shares_from_aggregate(y, lam, Omega, rho, p)
    Y = np.full(N, M * level)
    scale = max(1.0, np.abs(Y).max(initial=0.0), np.abs(ybar).max(initial=0.0))
    if np.abs(ybar.sum(axis=0) - Y).max() > 1e-10 * scale:
        raise ArithmeticError("aggregation: shares do not add up to the aggregate bid")
    return Y, ybar, Omega


def lagrangian_update(lambda_b, ybar_b, y_b, rho: float) -> np.ndarray:
    return np.asarray(lambda_b, dtype=float) + rho * (np.asarray(ybar_b, dtype=float) - np.asarray(y_b, dtype=float))


def aggregation_kkt_oracle(y, lam, rho: float, p):
    """Aggregation step by factoring its KKT system directly.

    Decision variables are the common level ``Y^k`` and all shares
    ``ybar``; the equality ``sum_b ybar_b - 1 Y^k = 0`` carries the
    multiplier ``eta``.  No closed form is used.

    Returns
    -------
    Y : ndarray, shape (N,)
    ybar : ndarray, shape (M, N)
    eta : ndarray, shape (N,)
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    lam = np.atleast_2d(np.asarray(lam, dtype=float))
    p = np.asarray(p, dtype=float)
    M, N = y.shape
    nx = 1 + M * N
    H = np.zeros((nx, nx))
    H[1:, 1:] = rho * np.eye(M * N)
    g = np.concatenate([[-p.sum()], (lam - rho * y).ravel()])
    A = np.hstack([-np.ones((N, 1)), np.tile(np.eye(N), (1, M))])
    KKT = np.block([[H, A.T], [A, np.zeros((N, N))]])
    rhs = np.concatenate([-g, np.zeros(N)])
    sol = sla.lu_solve(sla.lu_factor(KKT), rhs)
    level = sol[0]
    ybar = sol[1:nx].reshape(M, N)
    eta = sol[nx:]
    return np.full(N, level), ybar, eta


def objective_value(fleet: Sequence[BuildingModel], kappas, Y, p) -> float:
    """``sum_b c_b^T kappa_b - p^T Y``."""
    cost = sum(float(np.asarray(b.c) @ np.asarray(k, dtype=float)) for b, k in zip(fleet, kappas))
    return cost - float(np.asarray(p, dtype=float) @ np.asarray(Y, dtype=float))


# ---------------------------------------------------------------------------
# full loop

def _build_states(fleet, structure):
    return [BuildingLocalState.from_model(b, structure) for b in fleet]


def _check_fleet(fleet, p):
    if not fleet:
        raise ConfigurationError("fleet: at least one building is required")
    N = fleet[0].N
    for b in fleet:
        if b.N != N:
            raise ConfigurationError(f"building {b.id}: horizon {b.N} differs from {N}")
    p = np.asarray(p, dtype=float)
    if p.shape != (N,):
        raise ConfigurationError(f"p: expected {N} prices, got shape {p.shape}")
    return N, p


def _map(fn, items, workers):
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def run_centralized(fleet: Sequence[BuildingModel], config: AdmmConfig, p,
                    states: list | None = None,
                    callback: Callable[[AdmmIterate], bool] | None = None) -> AdmmResult:
    """Negotiate an aggregated bid with a central coordinator.

    ``callback`` sees every iterate and may return ``True`` to stop early.
    Feasible extraction is always applied to the final iterate.
    """
    N, p = _check_fleet(fleet, p)
    M = len(fleet)
    rho = config.rho
    if states is None:
        states = _build_states(fleet, config.structure)
    workers = worker_count(config.threads)
    sets = [s.C for s in states]

    ybar = np.zeros((M, N))
    lam = np.zeros((M, N))
    history: list[AdmmIterate] = []
    for it in range(1, config.max_iters + 1):
        def step(b):
            return building_step(states[b], ybar[b], lam[b], rho, config.qp_tol)[1]

        y = np.array(_map(step, list(range(M)), workers))
        Y, ybar_new, Omega = aggregation_step(y, lam, rho, p)
        lam = lagrangian_update(lam, ybar_new, y, rho)
        res = np.linalg.norm(ybar_new - y, axis=1)
        dual = rho * np.linalg.norm(ybar_new - ybar, axis=1).max()
        ybar = ybar_new
        J = objective_value(fleet, [s.kappa for s in states], Y, p)
        record = AdmmIterate(iter=it, y=y, ybar=ybar.copy(), lam=lam.copy(), Y=Y, Omega=Omega,
                             primal_residual=float(res.max()), dual_residual=float(dual),
                             building_residuals=res, J=J)
        if config.extract_every and it % config.extract_every == 0:
            record.outcome = feasible_extract(sets, y, p, config.qp_tol)
            record.J_F = record.outcome.J_F
        history.append(record)
        stop = callback(record) if callback is not None else False
        if config.stopping == "residual" and record.primal_residual <= config.eps and dual <= config.eps:
            stop = True
        if stop:
            break

    last = history[-1]
    if last.outcome is None:
        last.outcome = feasible_extract(sets, last.y, p, config.qp_tol)
        last.J_F = last.outcome.J_F
    outcome = last.outcome
    outcome.Lambda = last.lam[0].copy()
    return AdmmResult(history=history, states=states, outcome=outcome, config=config)


def solve_monolithic(fleet: Sequence[BuildingModel], p, structure: PolicyStructure | str = "lower_triangular",
                     tol: float = 1e-8, sets: list | None = None):
    """Solve the aggregated problem in one piece.

    Returns
    -------
    J : float
        Optimal ``sum_b c_b^T kappa_b - p^T Y``.
    Y : ndarray
        Optimal (constant) aggregate bid.
    y : ndarray, shape (M, N)
        Building offers at the optimum.
    """
    N, p = _check_fleet(fleet, p)
    if sets is None:
        sets = [build_constraint_set(b, structure=structure) for b in fleet]
    offsets = np.cumsum([0] + [C.n_var for C in sets])
    n_total = offsets[-1] + 1  # last variable: the common level
    q = np.concatenate([C.cost_vector() for C in sets] + [[-p.sum()]])
    Aeq_blocks = sp.block_diag([C.Aeq for C in sets], format="csr")
    Aineq = sp.block_diag([C.Aineq for C in sets], format="csr")
    Aeq_blocks = sp.hstack([Aeq_blocks, sp.csr_matrix((Aeq_blocks.shape[0], 1))])
    Aineq = sp.hstack([Aineq, sp.csr_matrix((Aineq.shape[0], 1))])
    # sum_b y_b^k - level = 0
    rows, cols = [], []
    for C, off in zip(sets, offsets[:-1]):
        rows.append(np.arange(N))
        cols.append(off + np.arange(C.layout.y.start, C.layout.y.stop))
    rows.append(np.arange(N))
    cols.append(np.full(N, n_total - 1))
    vals = np.concatenate([np.ones(N * len(sets)), -np.ones(N)])
    link = sp.csr_matrix((vals, (np.concatenate(rows), np.concatenate(cols))), shape=(N, n_total))
    Aeq = sp.vstack([Aeq_blocks, link], format="csr")
    beq = np.concatenate([C.beq for C in sets] + [np.zeros(N)])
    hineq = np.concatenate([C.hineq for C in sets])
    sol = solve(QpProblem(None, q, Aeq, beq, Aineq, hineq), tol=tol)
    if not sol.optimal:
        raise NegotiationError(-1, sol, "monolithic solve")
    y = np.array([C.y(sol.z[off:off + C.n_var]) for C, off in zip(sets, offsets[:-1])])
    Y = np.full(N, sol.z[-1])
    return float(sol.objective), Y, y


def write_trace_csv(history: Sequence[AdmmIterate], path) -> None:
    """Iteration trace: iter, primal_residual, J, J_F, one residual per building."""
    M = history[0].y.shape[0] if history else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "primal_residual", "J", "J_F"] + [f"residual_b{b}" for b in range(M)])
        for it in history:
            w.writerow([it.iter, fmt(it.primal_residual), fmt(it.J), fmt(it.J_F)]
                       + [fmt(r) for r in it.building_residuals])
