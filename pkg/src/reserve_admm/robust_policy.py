"""Affine reserve-response policies and their robust constraint set.

The reserve request is written as ``s = diag(y) zeta`` with
``zeta in [-1, 1]^N``.  Inputs follow affine rules in ``zeta``::

    u(zeta)  = K zeta + kappa      (nominal input)
    du(zeta) = F zeta              (reserve response)

Box constraints on states and applied inputs must hold for every
``zeta`` in the box.  For a row ``g + G zeta`` this is exactly
``g + ||G||_1 <= hi`` and ``g - ||G||_1 >= lo``, which is encoded with one
auxiliary variable ``t >= |G_j|`` per structurally nonzero entry.

Coupling ``eta^T du^k = s^k`` for every ``zeta`` is the matrix identity
``(I_N kron eta^T) F = diag(y)``.

Causality: ``F`` is lower block-triangular including the diagonal.  ``K``
never has same-hour blocks.  A same-hour nominal gain could cancel the
reserve response and make any bid look feasible.  Where ``K`` owns a block
``(l, j)``, the matching ``F`` block is folded into ``K``, since only
``K + F`` enters the dynamics and bounds.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .model import BuildingModel, ConfigurationError, StackedSystem, stack_dynamics

__all__ = [
    "STRUCTURES",
    "PolicyStructure",
    "AffinePolicy",
    "Layout",
    "ConstraintSetC",
    "TrajectoryRecord",
    "FeasibilityReport",
    "build_constraint_set",
    "evaluate_policy",
    "check_robust_feasibility",
    "MAX_VERTEX_HORIZON",
]

STRUCTURES = ("zero", "block_diagonal", "lower_triangular")
MAX_VERTEX_HORIZON = 12


@dataclass(frozen=True)
class PolicyStructure:
    """Sparsity pattern of the nominal gain ``K``.

    ``zero``: ``K = 0``.  ``block_diagonal``: hour ``l`` reacts to the
    previous hour's request only.  ``lower_triangular``: hour ``l`` reacts
    to all earlier requests.
    """

    kind: str = "lower_triangular"

    def __post_init__(self):
        if self.kind not in STRUCTURES:
            raise ConfigurationError(f"structure: unknown kind {self.kind!r}, expected one of {STRUCTURES}")

    def k_mask(self, N: int) -> np.ndarray:
        l, j = np.indices((N, N))
        if self.kind == "zero":
            return np.zeros((N, N), dtype=bool)
        if self.kind == "block_diagonal":
            return j == l - 1
        return j < l

    def f_mask(self, N: int) -> np.ndarray:
        l, j = np.indices((N, N))
        return (j <= l) & ~self.k_mask(N)


@dataclass
class AffinePolicy:
    K: np.ndarray
    kappa: np.ndarray
    F: np.ndarray

    def nominal(self, zeta) -> np.ndarray:
        return self.K @ zeta + self.kappa

    def response(self, zeta) -> np.ndarray:
        return self.F @ zeta


@dataclass
class Layout:
    """Index map of the flat decision vector.

    Blocks in order: ``kappa``, ``K`` entries, ``F`` entries, ``y``,
    nominal states ``x`` (stacked), state responses ``g`` and the
    auxiliary 1-norm variables ``t``.  ``hidx[l, a, j]`` is the column of
    entry ``(l*m + a, j)`` of ``K + F`` (-1 for structural zeros) and
    ``owner_is_k`` tells which matrix owns it.  ``gidx[k, i, j]`` is the
    column holding the response of state ``i`` at the end of hour ``k`` to
    ``zeta^j`` (entries with ``j > k`` are -1).
    """

    N: int
    n: int
    m: int
    kappa: slice
    K: slice
    F: slice
    y: slice
    x: slice
    g: slice
    t: slice
    hidx: np.ndarray
    owner_is_k: np.ndarray
    gidx: np.ndarray

    @property
    def n_var(self) -> int:
        return self.t.stop


@dataclass
class ConstraintSetC:
    """Finite linear description of the robust constraint set.

    ``t_map`` selects, for each auxiliary variable, the uncertain
    coefficient it bounds in absolute value.
    """

    model: BuildingModel
    stacked: StackedSystem
    structure: PolicyStructure
    layout: Layout
    Aeq: sp.csr_matrix
    beq: np.ndarray
    Aineq: sp.csr_matrix
    hineq: np.ndarray
    t_map: sp.csr_matrix
    time_constant_y: bool = False
    row_labels: list = field(default_factory=list)

    @property
    def n_var(self) -> int:
        return self.layout.n_var

    def cost_vector(self) -> np.ndarray:
        """Linear cost of the nominal input, ``c^T kappa``."""
        q = np.zeros(self.n_var)
        q[self.layout.kappa] = self.model.c
        return q

    def y_selector(self) -> sp.csr_matrix:
        N = self.layout.N
        return sp.csr_matrix((np.ones(N), (np.arange(N), np.arange(self.layout.y.start, self.layout.y.stop))),
                             shape=(N, self.n_var))

    def y(self, z) -> np.ndarray:
        return np.asarray(z)[self.layout.y].copy()

    def kappa(self, z) -> np.ndarray:
        return np.asarray(z)[self.layout.kappa].copy()

    def policy(self, z) -> AffinePolicy:
        lay = self.layout
        z = np.asarray(z, dtype=float)
        N, m = lay.N, lay.m
        K = np.zeros((N * m, N))
        F = np.zeros((N * m, N))
        l, a, j = np.nonzero(lay.hidx >= 0)
        vals = z[lay.hidx[l, a, j]]
        rows = l * m + a
        own = lay.owner_is_k[l, a, j]
        K[rows[own], j[own]] = vals[own]
        F[rows[~own], j[~own]] = vals[~own]
        return AffinePolicy(K=K, kappa=z[lay.kappa].copy(), F=F)

    def to_vector(self, policy: AffinePolicy, y) -> np.ndarray:
        """Flat point for ``(policy, y)`` with tight auxiliary variables.

        Entries outside the structure masks must be zero; ``K`` and ``F``
        are merged into the owning variable of each block.
        """
        lay = self.layout
        N, m = lay.N, lay.m
        H = (policy.K + policy.F).reshape(N, m, N)
        z = np.zeros(self.n_var)
        z[lay.kappa] = policy.kappa
        z[lay.y] = y
        mask = lay.hidx >= 0
        if np.any(H[~mask] != 0):
            raise ConfigurationError("policy: nonzero entries outside the structure masks")
        z[lay.hidx[mask]] = H[mask]
        z[lay.x] = self.stacked.affine_offset + self.stacked.B_bold @ policy.kappa
        G = (self.stacked.B_bold @ (policy.K + policy.F)).reshape(N, lay.n, N)
        gmask = lay.gidx >= 0
        z[lay.gidx[gmask]] = G[gmask]
        z[lay.t] = np.abs(self.t_map @ z)
        return z

    def linear_residual(self, z) -> float:
        """Largest violation of the linear equalities/inequalities at ``z``."""
        z = np.asarray(z, dtype=float)
        eq = np.abs(self.Aeq @ z - self.beq).max(initial=0.0)
        ineq = np.maximum(self.Aineq @ z - self.hineq, 0.0).max(initial=0.0)
        return float(max(eq, ineq))


def build_constraint_set(model: BuildingModel, stacked: StackedSystem | None = None,
                         structure: PolicyStructure | str = "lower_triangular",
                         time_constant_y: bool = False) -> ConstraintSetC:
    """Assemble the robust counterpart for one building.

    Nominal states and state responses are explicit variables tied
    together by one-step dynamics equalities; this keeps every row short
    and the KKT factorization cheap.
    """
    if isinstance(structure, str):
        structure = PolicyStructure(structure)
    if stacked is None:
        stacked = stack_dynamics(model)
    N, n, m = model.N, model.n, model.m
    A, B = model.A, model.B
    eta = model.eta
    if not np.any(eta != 0):
        raise ConfigurationError("eta: all conversion factors are zero, reserve coupling is infeasible")

    k_mask = structure.k_mask(N)
    f_mask = structure.f_mask(N)
    ar_m = np.arange(m)

    col = N * m
    kappa = slice(0, col)
    hidx = -np.ones((N, m, N), dtype=int)
    owner_is_k = np.zeros((N, m, N), dtype=bool)
    owned = []
    for mask, is_k in ((k_mask, True), (f_mask, False)):
        ls, js = np.nonzero(mask)
        count = ls.size * m
        hidx[ls[:, None], ar_m[None, :], js[:, None]] = col + np.arange(count).reshape(ls.size, m)
        owner_is_k[ls[:, None], ar_m[None, :], js[:, None]] = is_k
        owned.append(slice(col, col + count))
        col += count
    K_sl, F_sl = owned
    y_sl = slice(col, col + N)
    col += N
    x_sl = slice(col, col + N * n)
    col += N * n
    gidx = -np.ones((N, n, N), dtype=int)
    g_start = col
    for j in range(N):
        gidx[j:, :, j] = col + np.arange((N - j) * n).reshape(N - j, n)
        col += (N - j) * n
    g_sl = slice(g_start, col)
    n_base = col

    # --- equalities
    er, ec, ev, beq = [], [], [], []
    n_eq = 0

    def add_block(M, col_map, rhs):
        # M: sparse block whose columns are mapped through col_map (-1 = drop)
        nonlocal n_eq
        M = sp.coo_matrix(M)
        cols = col_map[M.col]
        keep = cols >= 0
        er.append(M.row[keep] + n_eq)
        ec.append(cols[keep])
        ev.append(M.data[keep])
        beq.append(np.asarray(rhs, dtype=float))
        n_eq += M.shape[0]

    # coupling: eta^T F_kk = y_k, eta^T F_kj = 0 below the diagonal
    ls, js = np.nonzero(f_mask)
    nz_eta = np.nonzero(eta)[0]
    rows = np.repeat(np.arange(ls.size), nz_eta.size)
    cols = hidx[ls[:, None], nz_eta[None, :], js[:, None]].ravel()
    vals = np.tile(eta[nz_eta], ls.size)
    diag = np.nonzero(ls == js)[0]
    rows = np.concatenate([rows, diag])
    cols = np.concatenate([cols, y_sl.start + ls[diag]])
    vals = np.concatenate([vals, -np.ones(diag.size)])
    er.append(rows)
    ec.append(cols)
    ev.append(vals)
    beq.append(np.zeros(ls.size))
    n_eq += ls.size

    if time_constant_y and N > 1:
        D = sp.eye(N - 1, N) - sp.eye(N - 1, N, k=1)
        add_block(D, y_sl.start + np.arange(N), np.zeros(N - 1))

    # nominal dynamics: x_k - A x_{k-1} - B kappa_k = E v_k (+ A x1 at k = 0)
    shift = sp.eye(N, k=-1)
    dyn = sp.hstack([sp.eye(N * n) - sp.kron(shift, A), -sp.kron(sp.eye(N), B)])
    col_map = np.concatenate([x_sl.start + np.arange(N * n), np.arange(N * m)])
    rhs = (model.E @ model.v.reshape(N, model.q).T).T.ravel()
    rhs[:n] += A @ model.x1
    add_block(dyn, col_map, rhs)

    # state responses: g_{k,j} - A g_{k-1,j} - B h_{k,j} = 0 for k >= j
    for j in range(N):
        L = N - j
        blk = sp.hstack([sp.eye(L * n) - sp.kron(sp.eye(L, k=-1), A), -sp.kron(sp.eye(L), B)])
        col_map = np.concatenate([gidx[j:, :, j].ravel(), hidx[j:, :, j].ravel()])
        add_block(blk, col_map, np.zeros(L * n))

    # --- robust rows: nominal value + sum_j t_j within bounds, t_j >= |G_j|
    t_vars = []  # variable bounded by each t
    s_rows, s_cols = [], []
    nom_cols, lo, hi, labels = [], [], [], []

    def add_row(nominal_col, entries, lower, upper, label):
        r = len(nom_cols)
        start = len(t_vars)
        t_vars.extend(entries)
        s_rows.extend([r] * len(entries))
        s_cols.extend(range(start, start + len(entries)))
        nom_cols.append(nominal_col)
        lo.append(lower)
        hi.append(upper)
        labels.append(label)

    for l in range(N):
        for a in range(m):
            r = l * m + a
            lower, upper = model.u_lo[r], model.u_hi[r]
            if np.isfinite(lower) or np.isfinite(upper):
                entries = hidx[l, a, :l + 1]
                add_row(r, list(entries[entries >= 0]), lower, upper, ("input", l, a))
    for k in range(N):
        for i in range(n):
            r = k * n + i
            lower, upper = model.x_lo[r], model.x_hi[r]
            if np.isfinite(lower) or np.isfinite(upper):
                add_row(x_sl.start + r, list(gidx[k, i, :k + 1]), lower, upper, ("state", k, i))

    n_t = len(t_vars)
    n_rows = len(nom_cols)
    t_sl = slice(n_base, n_base + n_t)
    n_var = n_base + n_t
    layout = Layout(N=N, n=n, m=m, kappa=kappa, K=K_sl, F=F_sl, y=y_sl, x=x_sl, g=g_sl, t=t_sl,
                    hidx=hidx, owner_is_k=owner_is_k, gidx=gidx)

    T = sp.csr_matrix((np.ones(n_t), (np.arange(n_t), np.array(t_vars, dtype=int))), shape=(n_t, n_var))
    nom = sp.csr_matrix((np.ones(n_rows), (np.arange(n_rows), np.array(nom_cols, dtype=int))),
                        shape=(n_rows, n_var))
    S = sp.csr_matrix((np.ones(n_t), (np.array(s_rows, dtype=int), n_base + np.array(s_cols, dtype=int))),
                      shape=(n_rows, n_var))
    lo = np.array(lo, dtype=float)
    hi = np.array(hi, dtype=float)
    It = sp.csr_matrix((-np.ones(n_t), (np.arange(n_t), n_base + np.arange(n_t))), shape=(n_t, n_var))
    Ey = sp.csr_matrix((-np.ones(N), (np.arange(N), y_sl.start + np.arange(N))), shape=(N, n_var))

    up = np.isfinite(hi)
    dn = np.isfinite(lo)
    Aineq = sp.vstack([Ey, (nom + S)[up], (-nom + S)[dn], T + It, -T + It], format="csr")
    hineq = np.concatenate([np.zeros(N), hi[up], -lo[dn], np.zeros(2 * n_t)])
    row_labels = ([("y_nonneg", k) for k in range(N)]
                  + [("upper",) + labels[r] for r in np.nonzero(up)[0]]
                  + [("lower",) + labels[r] for r in np.nonzero(dn)[0]]
                  + [("t_pos", i) for i in range(n_t)] + [("t_neg", i) for i in range(n_t)])

    Aeq = sp.csr_matrix((np.concatenate(ev), (np.concatenate(er), np.concatenate(ec))), shape=(n_eq, n_var))
    return ConstraintSetC(model=model, stacked=stacked, structure=structure, layout=layout, Aeq=Aeq,
                          beq=np.concatenate(beq), Aineq=Aineq, hineq=hineq, t_map=T,
                          time_constant_y=time_constant_y, row_labels=row_labels)


@dataclass
class TrajectoryRecord:
    x: np.ndarray
    u: np.ndarray
    du: np.ndarray
    s: np.ndarray
    coupling_error: float
    coupling_ok: bool


def evaluate_policy(policy: AffinePolicy, y, zeta, stacked: StackedSystem, eta) -> TrajectoryRecord:
    """Instantiate the policy for one normalized request ``zeta``."""
    zeta = np.asarray(zeta, dtype=float)
    if np.any(np.abs(zeta) > 1.0):
        raise ValueError("zeta: normalized request must lie in [-1, 1]")
    y = np.asarray(y, dtype=float)
    u = policy.nominal(zeta)
    du = policy.response(zeta)
    s = y * zeta
    x = stacked.states(u + du)
    power = du.reshape(stacked.N, stacked.m) @ np.asarray(eta, dtype=float)
    err = float(np.max(np.abs(power - s), initial=0.0))
    return TrajectoryRecord(x=x, u=u, du=du, s=s, coupling_error=err, coupling_ok=err <= 1e-9)


@dataclass
class FeasibilityReport:
    """Worst constraint margin over the checked requests (negative = violated)."""

    min_margin: float
    worst_constraint: str
    worst_zeta: np.ndarray
    n_checked: int
    coupling_error: float
    linear_residual: float

    @property
    def feasible(self) -> bool:
        return self.min_margin >= -1e-8 and self.coupling_error <= 1e-8


def _margins(C: ConstraintSetC, policy: AffinePolicy, y, Z):
    """Margins for every request in the columns of ``Z``."""
    model = C.model
    applied = policy.kappa[:, None] + (policy.K + policy.F) @ Z
    x = C.stacked.states(applied)
    parts = []
    names = []
    for arr, lo, hi, tag in ((applied, model.u_lo, model.u_hi, "input"), (x, model.x_lo, model.x_hi, "state")):
        with np.errstate(invalid="ignore"):
            upper = np.where(np.isfinite(hi)[:, None], hi[:, None] - arr, np.inf)
            lower = np.where(np.isfinite(lo)[:, None], arr - lo[:, None], np.inf)
        parts += [upper, lower]
        names += [f"{tag}_upper", f"{tag}_lower"]
    power = (policy.F @ Z).reshape(C.layout.N, C.layout.m, -1)
    power = np.einsum("kaz,a->kz", power, model.eta)
    coupling = float(np.max(np.abs(power - np.asarray(y)[:, None] * Z), initial=0.0))
    return parts, names, coupling


def check_robust_feasibility(C: ConstraintSetC, point, mode: str = "vertices", n_samples: int = 1000,
                             seed: int = 0, batch: int = 1024) -> FeasibilityReport:
    """Check the policy encoded by ``point`` against explicit requests.

    ``mode="vertices"`` enumerates all ``2^N`` corners of the request box
    (N <= 12); ``mode="samples"`` draws ``n_samples`` uniform requests.
    """
    N = C.layout.N
    point = np.asarray(point, dtype=float)
    policy = C.policy(point)
    y = C.y(point)
    if mode == "vertices":
        if N > MAX_VERTEX_HORIZON:
            raise ValueError(f"vertex enumeration needs 2^{N} checks; use mode='samples' for N > {MAX_VERTEX_HORIZON}")
        zetas = np.array(list(itertools.product((-1.0, 1.0), repeat=N)))
    elif mode == "samples":
        rng = np.random.default_rng(seed)
        zetas = rng.uniform(-1.0, 1.0, size=(n_samples, N))
    else:
        raise ValueError(f"mode: unknown mode {mode!r}")

    best = (np.inf, "", None)
    coupling = 0.0
    for start in range(0, zetas.shape[0], batch):
        Z = zetas[start:start + batch].T
        parts, names, cpl = _margins(C, policy, y, Z)
        coupling = max(coupling, cpl)
        for arr, name in zip(parts, names):
            if arr.size == 0:
                continue
            idx = np.unravel_index(np.argmin(arr), arr.shape)
            if arr[idx] < best[0]:
                best = (float(arr[idx]), f"{name}[{idx[0]}]", Z[:, idx[1]].copy())
    margin, where, zeta = best
    if zeta is None:
        zeta = np.zeros(N)
    return FeasibilityReport(min_margin=margin, worst_constraint=where, worst_zeta=zeta,
                             n_checked=zetas.shape[0], coupling_error=coupling,
                             linear_residual=C.linear_residual(point))
