"""Convex QP solving with a checkable KKT contract.

Problems have the form::

    minimize    1/2 z^T P z + q^T z
    subject to  Aeq z = beq,  Aineq z <= hineq

An interior-point pass (Clarabel) is followed by an active-set polish: the
inequalities the interior point identifies as active are treated as
equalities and the reduced KKT system is solved with a regularized
factorization plus iterative refinement.  The polished point is kept only
if its recomputed residuals are no worse.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

import clarabel

__all__ = [
    "QpProblem",
    "QpSolution",
    "KktResiduals",
    "QpError",
    "solve",
    "kkt_residuals",
    "dump_problem",
    "load_problem",
]

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
ITERATION_LIMIT = "iteration_limit"


class QpError(ValueError):
    pass


def _as_csc(M, shape):
    if M is None:
        return sp.csc_matrix(shape)
    M = sp.csc_matrix(M, dtype=float)
    if M.shape != shape:
        raise QpError(f"matrix shape {M.shape} does not match expected {shape}")
    return M


@dataclass
class QpProblem:
    """Canonical QP; ``P`` may be ``None`` (linear program)."""

    P: sp.spmatrix | None
    q: np.ndarray
    Aeq: sp.spmatrix | None = None
    beq: np.ndarray | None = None
    Aineq: sp.spmatrix | None = None
    hineq: np.ndarray | None = None

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float).ravel()
        n = self.q.size
        self.beq = np.zeros(0) if self.beq is None else np.asarray(self.beq, dtype=float).ravel()
        self.hineq = np.zeros(0) if self.hineq is None else np.asarray(self.hineq, dtype=float).ravel()
        self.P = _as_csc(self.P, (n, n))
        self.Aeq = _as_csc(self.Aeq, (self.beq.size, n))
        self.Aineq = _as_csc(self.Aineq, (self.hineq.size, n))

    @property
    def n(self) -> int:
        return self.q.size

    def objective(self, z) -> float:
        z = np.asarray(z, dtype=float)
        return float(0.5 * z @ (self.P @ z) + self.q @ z)

    def check(self, psd_floor: float = -1e-10) -> None:
        """Validate symmetry and positive semidefiniteness of ``P``."""
        asym = abs(self.P - self.P.T)
        if asym.nnz and asym.max() > 1e-12 * max(1.0, abs(self.P).max()):
            raise QpError("P: not symmetric")
        if self.P.nnz == 0:
            return
        if self.n <= 2000:
            low = np.linalg.eigvalsh(self.P.toarray()).min()
        else:
            low = spla.eigsh(self.P, k=1, which="SA", return_eigenvectors=False)[0]
        if low < psd_floor:
            raise QpError(f"P: not positive semidefinite (smallest eigenvalue {low:.3g})")


@dataclass
class KktResiduals:
    primal: float
    dual: float
    stationarity: float
    complementarity: float

    @property
    def max(self) -> float:
        return max(self.primal, self.dual, self.stationarity, self.complementarity)


@dataclass
class QpSolution:
    z: np.ndarray
    dual_eq: np.ndarray
    dual_ineq: np.ndarray
    status: str
    kkt: KktResiduals
    objective: float
    iterations: int = 0
    polished: bool = False

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


def kkt_residuals(problem: QpProblem, solution: QpSolution | None = None, *, z=None, dual_eq=None,
                  dual_ineq=None) -> KktResiduals:
    """Recompute infinity-norm KKT residuals from scratch.

    Complementarity is ``max_i |mu_i * slack_i|``.
    """
    if solution is not None:
        z, dual_eq, dual_ineq = solution.z, solution.dual_eq, solution.dual_ineq
    z = np.asarray(z, dtype=float)
    nu = np.zeros(problem.beq.size) if dual_eq is None else np.asarray(dual_eq, dtype=float)
    mu = np.zeros(problem.hineq.size) if dual_ineq is None else np.asarray(dual_ineq, dtype=float)
    eq = problem.Aeq @ z - problem.beq
    slack = problem.hineq - problem.Aineq @ z
    primal = max(np.abs(eq).max(initial=0.0), np.maximum(-slack, 0.0).max(initial=0.0))
    dual = np.maximum(-mu, 0.0).max(initial=0.0)
    grad = problem.P @ z + problem.q + problem.Aeq.T @ nu + problem.Aineq.T @ mu
    stat = np.abs(grad).max(initial=0.0)
    comp = np.abs(mu * slack).max(initial=0.0)
    return KktResiduals(float(primal), float(dual), float(stat), float(comp))


def _clarabel(problem: QpProblem, tol: float, max_iter: int):
    n = problem.n
    A = sp.vstack([problem.Aeq, problem.Aineq], format="csc")
    b = np.concatenate([problem.beq, problem.hineq])
    cones = []
    if problem.beq.size:
        cones.append(clarabel.ZeroConeT(problem.beq.size))
    if problem.hineq.size:
        cones.append(clarabel.NonnegativeConeT(problem.hineq.size))
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.max_iter = max_iter
    settings.tol_gap_abs = tol * 1e-2
    settings.tol_gap_rel = tol * 1e-2
    settings.tol_feas = tol * 1e-2
    settings.tol_ktratio = 1e-8
    settings.presolve_enable = False
    if not cones:
        # Clarabel needs at least one cone; add a vacuous 0 <= 1 row
        A = sp.csc_matrix((1, n))
        b = np.ones(1)
        cones = [clarabel.NonnegativeConeT(1)]
    P = sp.triu(problem.P, format="csc")
    solver = clarabel.DefaultSolver(P, problem.q, A, b, cones, settings)
    return solver.solve()


def _polish(problem: QpProblem, z, mu, ratio=1.0, delta=1e-9, refine=30):
    """Solve the reduced KKT system on the estimated active set.

    A row counts as active when its multiplier exceeds ``ratio`` times its
    slack.
    """
    slack = problem.hineq - problem.Aineq @ z
    active = np.nonzero(mu > ratio * slack)[0]
    n = problem.n
    linear_vars = np.count_nonzero(problem.P.diagonal() == 0)
    if active.size + problem.beq.size < linear_vars:
        # too few active rows to pin the linear directions: singular system
        return None
    A_act = problem.Aineq[active]
    A = sp.vstack([problem.Aeq, A_act], format="csc")
    n_con = A.shape[0]
    K0 = sp.bmat([[problem.P, A.T], [A, None]], format="csc")
    reg = sp.diags(np.concatenate([np.full(n, delta), np.full(n_con, -delta)]), format="csc")
    rhs = np.concatenate([-problem.q, problem.beq, problem.hineq[active]])
    try:
        lu = spla.splu(K0 + reg, permc_spec="COLAMD")
    except RuntimeError:
        return None
    sol = lu.solve(rhs)
    for _ in range(refine):
        r = rhs - K0 @ sol
        if np.abs(r).max(initial=0.0) < 1e-13 * max(1.0, np.abs(rhs).max(initial=0.0)):
            break
        sol = sol + lu.solve(r)
    if not np.all(np.isfinite(sol)):
        return None
    z_p = sol[:n]
    nu = sol[n:n + problem.beq.size]
    mu_p = np.zeros(problem.hineq.size)
    mu_p[active] = sol[n + problem.beq.size:]
    return z_p, nu, mu_p


def _attempt(problem: QpProblem, tol: float, inner_tol: float, max_iter: int, polish: bool) -> QpSolution:
    result = _clarabel(problem, inner_tol, max_iter)
    status_name = str(result.status)
    z = np.asarray(result.x, dtype=float)
    duals = np.asarray(result.z, dtype=float)
    nu = duals[:problem.beq.size]
    mu = duals[problem.beq.size:problem.beq.size + problem.hineq.size]
    if "Infeasible" in status_name:
        kkt = kkt_residuals(problem, z=z, dual_eq=nu, dual_ineq=mu)
        return QpSolution(z, nu, mu, INFEASIBLE, kkt, np.nan, result.iterations)
    if not np.all(np.isfinite(z)):
        z = np.zeros(problem.n)
    mu = np.maximum(mu, 0.0)
    kkt = kkt_residuals(problem, z=z, dual_eq=nu, dual_ineq=mu)
    polished = False
    # polish even tiny-residual points: on degenerate rows mu ~ slack ~ sqrt(tol)
    if polish and problem.hineq.size + problem.beq.size > 0:
        slack = problem.hineq - problem.Aineq @ z
        ratios = [1.0]
        # rows with mu ~ slack are ambiguous; also try treating them as active
        if np.any((mu > 0.01 * slack) & (mu <= slack)):
            ratios.append(0.01)
        z0, mu0 = z, mu
        for ratio in ratios:
            out = _polish(problem, z0, mu0, ratio=ratio)
            if out is None:
                continue
            kkt_p = kkt_residuals(problem, z=out[0], dual_eq=out[1], dual_ineq=out[2])
            if kkt_p.max <= max(kkt.max, tol * 1e-3):
                z, nu, mu = out
                kkt = kkt_p
                polished = True
    status = OPTIMAL if kkt.max <= tol else ITERATION_LIMIT
    return QpSolution(z=z, dual_eq=nu, dual_ineq=mu, status=status, kkt=kkt, objective=problem.objective(z),
                      iterations=result.iterations, polished=polished)


def solve(problem: QpProblem, tol: float = 1e-8, max_iter: int = 200, polish: bool = True) -> QpSolution:
    """Solve ``problem``; ``status == "optimal"`` implies every residual <= ``tol``.

    The interior point stops on relative gaps, which can leave an absolute
    complementarity product slightly above ``tol``, while too tight a setting
    makes it stall on degenerate problems. Inner tolerances are therefore
    tried in turn and the attempt with the smallest residual is kept.
    """
    sol = _attempt(problem, tol, tol * 1e-3, max_iter, polish)
    for factor in (1e-1, 1e-5):
        if sol.status != ITERATION_LIMIT:
            break
        retry = _attempt(problem, tol, tol * factor, max_iter, polish)
        retry.iterations += sol.iterations
        if retry.status != INFEASIBLE and retry.kkt.max < sol.kkt.max:
            sol = retry
        else:
            sol.iterations = retry.iterations
    return sol


def dump_problem(problem: QpProblem, path) -> None:
    """Write ``problem`` as JSON (sparse matrices in COO triplets)."""

    def coo(M):
        M = sp.coo_matrix(M)
        return {"shape": list(M.shape), "row": M.row.tolist(), "col": M.col.tolist(), "data": M.data.tolist()}

    doc = {"schema": "reserve_admm.qp", "version": 1, "P": coo(problem.P), "q": problem.q.tolist(),
           "Aeq": coo(problem.Aeq), "beq": problem.beq.tolist(), "Aineq": coo(problem.Aineq),
           "hineq": problem.hineq.tolist()}
    Path(path).write_text(json.dumps(doc))


def load_problem(path) -> QpProblem:
    doc = json.loads(Path(path).read_text())

    def mat(d):
        return sp.csc_matrix((d["data"], (d["row"], d["col"])), shape=tuple(d["shape"]))

    return QpProblem(mat(doc["P"]), doc["q"], mat(doc["Aeq"]), doc["beq"], mat(doc["Aineq"]), doc["hineq"])
