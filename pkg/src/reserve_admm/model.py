"""Building models, stacked dynamics and synthetic fleets.

A building is a discrete-time linear thermal system

    x^{k+1} = A x^k + B (u^k + du^k) + E v^k,   k = 0, ..., N-1

with per-hour box bounds on the states reached (``x_lo``, ``x_hi``, one
entry per stacked state) and on the applied input ``u + du``.  Hours are
0-based throughout the package; stacked state block ``k`` is the state at
the end of hour ``k``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "ConfigurationError",
    "BuildingModel",
    "StackedSystem",
    "FleetSpec",
    "stack_dynamics",
    "simulate",
    "generate_fleet",
    "capacity_only_building",
    "validate_model",
    "model_to_dict",
    "model_from_dict",
    "save_model",
    "load_model",
    "DEFAULT_C_TILDE",
    "DEFAULT_P",
]

# Fabricated defaults: no published price data backs these values.
DEFAULT_C_TILDE = 0.20  # currency / kWh
DEFAULT_P = 0.30  # currency / (kW h)

SCHEMA_VERSION = 1


class ConfigurationError(ValueError):
    """Raised when model data is inconsistent (names the offending field)."""


@dataclass
class BuildingModel:
    """One aggregation member.

    Bounds may contain ``-inf``/``+inf`` for unconstrained entries.
    ``c`` is the stacked nominal cost (currency per input unit and hour),
    built from the electricity price as ``c_k = c_tilde_k * eta``.
    """

    id: int
    A: np.ndarray
    B: np.ndarray
    E: np.ndarray
    x1: np.ndarray
    v: np.ndarray
    x_lo: np.ndarray
    x_hi: np.ndarray
    u_lo: np.ndarray
    u_hi: np.ndarray
    eta: np.ndarray
    c: np.ndarray
    N: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.B = np.atleast_2d(np.asarray(self.B, dtype=float))
        self.E = np.atleast_2d(np.asarray(self.E, dtype=float))
        for name in ("x1", "v", "x_lo", "x_hi", "u_lo", "u_hi", "eta", "c"):
            setattr(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        self.N = int(self.N)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def q(self) -> int:
        return self.E.shape[1]


@dataclass
class StackedSystem:
    """Horizon-stacked dynamics ``x = A_bold x1 + B_bold (u + du) + E_bold v``."""

    A_bold: np.ndarray
    B_bold: np.ndarray
    E_bold: np.ndarray
    affine_offset: np.ndarray
    N: int
    n: int
    m: int

    def states(self, inputs: np.ndarray) -> np.ndarray:
        """Stacked states for a stacked input (or a matrix of input columns)."""
        inputs = np.asarray(inputs, dtype=float)
        if inputs.ndim == 1:
            return self.affine_offset + self.B_bold @ inputs
        return self.affine_offset[:, None] + self.B_bold @ inputs


def _check_dims(model: BuildingModel) -> None:
    n, N = model.A.shape[0], model.N
    if N < 1:
        raise ConfigurationError("N: horizon must be >= 1")
    if model.A.shape != (n, n):
        raise ConfigurationError(f"A: expected square matrix, got {model.A.shape}")
    if model.B.shape[0] != n:
        raise ConfigurationError(f"B: expected {n} rows, got {model.B.shape[0]}")
    if model.E.shape[0] != n:
        raise ConfigurationError(f"E: expected {n} rows, got {model.E.shape[0]}")
    m, q = model.m, model.q
    expected = {
        "x1": n,
        "v": N * q,
        "x_lo": N * n,
        "x_hi": N * n,
        "u_lo": N * m,
        "u_hi": N * m,
        "eta": m,
        "c": N * m,
    }
    for name, size in expected.items():
        got = getattr(model, name).shape[0]
        if got != size:
            raise ConfigurationError(f"{name}: expected length {size}, got {got}")


def stack_dynamics(model: BuildingModel) -> StackedSystem:
    """Stack the hourly dynamics over the horizon.

    Block ``(k, j)`` of ``B_bold`` is ``A^(k-j) B`` for ``j <= k`` and zero
    otherwise; ``A_bold`` block ``k`` is ``A^(k+1)``.
    """
    _check_dims(model)
    A, B, E, N = model.A, model.B, model.E, model.N
    n, m, q = model.n, model.m, model.q

    powers = [np.eye(n)]
    for _ in range(N):
        powers.append(A @ powers[-1])

    A_bold = np.vstack(powers[1:])
    AB = [P @ B for P in powers[:N]]
    AE = [P @ E for P in powers[:N]]
    B_bold = np.zeros((N * n, N * m))
    E_bold = np.zeros((N * n, N * q))
    for k in range(N):
        for j in range(k + 1):
            B_bold[k * n:(k + 1) * n, j * m:(j + 1) * m] = AB[k - j]
            E_bold[k * n:(k + 1) * n, j * q:(j + 1) * q] = AE[k - j]
    offset = A_bold @ model.x1 + E_bold @ model.v
    return StackedSystem(A_bold, B_bold, E_bold, offset, N, n, m)


def simulate(model: BuildingModel, inputs: np.ndarray) -> np.ndarray:
    """Step-by-step simulation; returns the stacked states ``x^2..x^{N+1}``."""
    inputs = np.asarray(inputs, dtype=float).reshape(model.N, model.m)
    v = model.v.reshape(model.N, model.q)
    x = model.x1.copy()
    out = []
    for k in range(model.N):
        x = model.A @ x + model.B @ inputs[k] + model.E @ v[k]
        out.append(x)
    return np.concatenate(out)


def validate_model(model: BuildingModel) -> list[str]:
    """Return human-readable invariant violations (empty list if none)."""
    try:
        _check_dims(model)
    except ConfigurationError as exc:
        return [str(exc)]

    problems = []
    if not np.all(np.isfinite(model.A)):
        problems.append("A: contains non-finite entries")
    elif model.n > 0:
        radius = max(abs(np.linalg.eigvals(model.A)))
        if radius >= 1.0:
            problems.append(f"A: spectral radius {radius:.6g} is not < 1")

    n, m = model.n, model.m
    bad = np.nonzero(model.x_lo > model.x_hi)[0]
    for idx in bad:
        problems.append(f"x_lo/x_hi: lower bound above upper bound at hour {idx // n}, state {idx % n}")
    bad = np.nonzero(model.u_lo > model.u_hi)[0]
    for idx in bad:
        problems.append(f"u_lo/u_hi: lower bound above upper bound at hour {idx // m}, input {idx % m}")
    if not np.any(model.eta != 0):
        problems.append("eta: no controllable power (all conversion factors are zero)")
    for name in ("B", "E", "x1", "v", "eta", "c"):
        if not np.all(np.isfinite(getattr(model, name))):
            problems.append(f"{name}: contains non-finite entries")
    return problems


def capacity_only_building(cap, price_horizon: int | None = None, id: int = 0) -> BuildingModel:
    """Dynamic-free member whose only limit is ``|du^k| <= cap^k``.

    The single input has ``eta = 1`` and zero cost, so the largest symmetric
    reserve it can hold at hour ``k`` is exactly ``cap[k]``.
    """
    cap = np.atleast_1d(np.asarray(cap, dtype=float))
    N = cap.shape[0] if price_horizon is None else int(price_horizon)
    if cap.shape[0] != N:
        raise ConfigurationError(f"cap: expected length {N}, got {cap.shape[0]}")
    if np.any(cap < 0) or not np.all(np.isfinite(cap)):
        raise ConfigurationError("cap: capacities must be finite and >= 0")
    return BuildingModel(
        id=id,
        A=np.zeros((1, 1)),
        B=np.zeros((1, 1)),
        E=np.zeros((1, 1)),
        x1=np.zeros(1),
        v=np.zeros(N),
        x_lo=np.full(N, -np.inf),
        x_hi=np.full(N, np.inf),
        u_lo=-cap,
        u_hi=cap.copy(),
        eta=np.ones(1),
        c=np.zeros(N),
        N=N,
        meta={"prototype": "capacity_only"},
    )


# ---------------------------------------------------------------------------
# synthetic fleets

PROTOTYPES = ("small", "medium", "large")

COMFORT = {"small": (21.0, 25.0), "medium": (20.0, 28.0), "large": (20.0, 28.0)}
RELAXED = {"small": (17.0, 28.0), "medium": (16.0, 31.0), "large": (16.0, 31.0)}


@dataclass
class FleetSpec:
    """Recipe for a reproducible synthetic fleet.

    ``counts`` maps prototype name (small/medium/large) to a member count;
    within each prototype the first ``round(count * residential_fraction)``
    members are residential, the rest commercial.  ``p`` and ``c_tilde``
    default to flat fabricated prices.
    """

    seed: int = 0
    counts: dict = field(default_factory=lambda: {"small": 1})
    residential_fraction: float = 0.5
    N: int = 24
    start_hour: int = 0
    p: np.ndarray | None = None
    c_tilde: np.ndarray | None = None

    def __post_init__(self):
        unknown = set(self.counts) - set(PROTOTYPES)
        if unknown:
            raise ConfigurationError(f"counts: unknown prototypes {sorted(unknown)}")
        if any(int(c) < 0 for c in self.counts.values()):
            raise ConfigurationError("counts: must be >= 0")
        if self.N < 1:
            raise ConfigurationError("N: horizon must be >= 1")
        if not 0.0 <= self.residential_fraction <= 1.0:
            raise ConfigurationError("residential_fraction: must lie in [0, 1]")
        self.p = self.price_vector(self.p, DEFAULT_P, "p")
        self.c_tilde = self.price_vector(self.c_tilde, DEFAULT_C_TILDE, "c_tilde")

    def price_vector(self, value, default, name):
        if value is None:
            return np.full(self.N, default)
        arr = np.atleast_1d(np.asarray(value, dtype=float))
        if arr.shape[0] == 1:
            arr = np.full(self.N, arr[0])
        if arr.shape[0] != self.N:
            raise ConfigurationError(f"{name}: expected length {self.N}, got {arr.shape[0]}")
        return arr

    @property
    def total(self) -> int:
        return sum(int(c) for c in self.counts.values())


def _occupied(hour: int, building_class: str) -> bool:
    hour %= 24
    if building_class == "residential":
        return hour >= 22 or hour < 8
    return 8 <= hour < 18


def _weather(rng, N, start_hour):
    hours = start_hour + np.arange(N)
    phase = rng.uniform(-1.0, 1.0)
    ambient = rng.uniform(2.0, 7.0) + rng.uniform(3.0, 5.0) * np.sin(2 * np.pi * (hours - 9 + phase) / 24)
    solar = np.clip(np.sin(np.pi * ((hours % 24) - 6) / 12), 0.0, None) * rng.uniform(0.6, 1.0)
    return ambient, solar


def _perturb(rng, arr, scale=0.1):
    return arr * rng.uniform(1 - scale, 1 + scale, size=arr.shape)


def _cap_rows(A):
    rows = A.sum(axis=1)
    over = rows > 0.97
    A[over] *= (0.97 / rows[over])[:, None]
    return A


def _small_prototype(rng, building_class, N, start_hour):
    # states: room air, wall, floor slab
    # inputs: radiator, cooled ceiling, floor heating, ventilation
    # disturbances: outside temperature, solar radiation, occupancy
    A = np.array([
        [0.55, 0.15, 0.15],
        [0.20, 0.70, 0.00],
        [0.20, 0.00, 0.76],
    ])
    A = _cap_rows(_perturb(rng, A))
    B = _perturb(rng, np.array([
        [5.0, -3.0, 0.0, -1.0],
        [0.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, 4.0, 0.0],
    ]))
    ambient_gain = 1.0 - A.sum(axis=1)
    E = np.column_stack([
        ambient_gain,
        _perturb(rng, np.array([1.0, 0.6, 0.2])),
        _perturb(rng, np.array([0.8, 0.0, 0.0])),
    ])
    eta = _perturb(rng, np.array([5.0, 4.0, 5.0, 1.5]))
    ambient, solar = _weather(rng, N, start_hour)
    hours = start_hour + np.arange(N)
    occupancy = np.array([1.0 if _occupied(h, building_class) else 0.2 for h in hours])
    v = np.column_stack([ambient, solar, occupancy]).ravel()
    x1 = np.array([22.0, 18.0, 20.0])
    u_lo = np.zeros(N * 4)
    u_hi = np.ones(N * 4)
    return A, B, E, x1, v, eta, u_lo, u_hi, [0]


def _zoned_prototype(rng, building_class, N, start_hour, n_zones, n_occ, n_pad):
    # per zone: air, envelope, slab; padding states model core/ground masses.
    # inputs: one heating and one cooling circuit per facade
    # disturbances: n_occ occupancy groups, ambient, ground, 4 solar facades
    n = 3 * n_zones + n_pad
    m = 8
    q = n_occ + 2 + 4
    A = np.zeros((n, n))
    B = np.zeros((n, m))
    E = np.zeros((n, q))
    air = 3 * np.arange(n_zones)
    env, slab = air + 1, air + 2
    amb_col, ground_col = n_occ, n_occ + 1
    for z in range(n_zones):
        a, e, s = air[z], env[z], slab[z]
        A[a, a], A[a, e], A[a, s] = 0.5, 0.15, 0.15
        if n_zones > 1:
            A[a, air[(z + 1) % n_zones]] += 0.04
            A[a, air[(z - 1) % n_zones]] += 0.04
        A[e, a], A[e, e] = 0.2, 0.7
        A[s, a], A[s, s] = 0.15, 0.8
        facade = z % 4
        E[a, 2 + n_occ + facade] = 1.2
        E[e, 2 + n_occ + facade] = 0.5
        E[a, z % n_occ] = 0.8
        B[a, facade] = 6.0
        B[a, 4 + facade] = -4.0
    for k in range(n_pad):
        idx = 3 * n_zones + k
        A[idx, idx] = 0.9
        A[idx, air[k % n_zones]] = 0.05
    A = _cap_rows(_perturb(rng, A))
    B = _perturb(rng, B)
    E = _perturb(rng, E)
    leak = 1.0 - A.sum(axis=1)
    E[slab, ground_col] = 0.5 * leak[slab]
    E[slab, amb_col] = 0.5 * leak[slab]
    rest = np.setdiff1d(np.arange(n), slab)
    E[rest, amb_col] = leak[rest]

    zones_per_facade = np.bincount(np.arange(n_zones) % 4, minlength=4).astype(float)
    eta = np.concatenate([_perturb(rng, 4.0 * zones_per_facade), _perturb(rng, 3.0 * zones_per_facade)])
    ambient, solar = _weather(rng, N, start_hour)
    hours = start_hour + np.arange(N)
    occ = np.array([1.0 if _occupied(h, building_class) else 0.1 for h in hours])
    occ_groups = np.column_stack([occ * rng.uniform(0.7, 1.0) for _ in range(n_occ)])
    ground = np.full(N, 10.0)
    solar_facades = np.column_stack([solar * w for w in (0.4, 1.0, 0.7, 0.2)])
    v = np.column_stack([occ_groups, ambient, ground, solar_facades]).ravel()
    x1 = np.full(n, 20.0)
    x1[air] = 22.0
    x1[env] = 16.0
    u_lo = np.zeros(N * m)
    u_hi = np.ones(N * m)
    return A, B, E, x1, v, eta, u_lo, u_hi, list(air)


def _make_member(rng, prototype, building_class, spec: FleetSpec, idx: int) -> BuildingModel:
    N = spec.N
    if prototype == "small":
        parts = _small_prototype(rng, building_class, N, spec.start_hour)
    elif prototype == "medium":
        parts = _zoned_prototype(rng, building_class, N, spec.start_hour, 11, 1, 0)
    else:
        parts = _zoned_prototype(rng, building_class, N, spec.start_hour, 37, 5, 2)
    A, B, E, x1, v, eta, u_lo, u_hi, comfort_states = parts
    n, m = B.shape

    occupied_band = COMFORT[prototype]
    relaxed_band = RELAXED[prototype]
    x_lo = np.full((N, n), -np.inf)
    x_hi = np.full((N, n), np.inf)
    for k in range(N):
        # stacked block k is the state at the end of hour k
        band = occupied_band if _occupied(spec.start_hour + k + 1, building_class) else relaxed_band
        x_lo[k, comfort_states] = band[0]
        x_hi[k, comfort_states] = band[1]

    c = np.concatenate([spec.c_tilde[k] * eta for k in range(N)])
    return BuildingModel(
        id=idx,
        A=A,
        B=B,
        E=E,
        x1=x1,
        v=v,
        x_lo=x_lo.ravel(),
        x_hi=x_hi.ravel(),
        u_lo=u_lo,
        u_hi=u_hi,
        eta=eta,
        c=c,
        N=N,
        meta={"prototype": prototype, "class": building_class},
    )


def generate_fleet(spec: FleetSpec) -> list[BuildingModel]:
    """Deterministically synthesize the members described by ``spec``."""
    rng = np.random.default_rng(spec.seed)
    fleet = []
    for prototype in PROTOTYPES:
        count = int(spec.counts.get(prototype, 0))
        n_res = int(round(count * spec.residential_fraction))
        for i in range(count):
            building_class = "residential" if i < n_res else "commercial"
            fleet.append(_make_member(rng, prototype, building_class, spec, len(fleet)))
    return fleet


# ---------------------------------------------------------------------------
# JSON model files

_ARRAYS = ("x1", "v", "x_lo", "x_hi", "u_lo", "u_hi", "eta", "c")
_MATRICES = ("A", "B", "E")


def _encode(arr):
    return [None if not math.isfinite(x) else float(x) for x in np.asarray(arr, dtype=float).ravel()]


def _decode(values, fill):
    return np.array([fill if x is None else float(x) for x in values], dtype=float)


def model_to_dict(model: BuildingModel) -> dict:
    """JSON-ready dict; matrices row-major, infinite bounds as ``null``."""
    out = {"schema": "reserve_admm.building", "version": SCHEMA_VERSION, "id": model.id, "N": model.N,
           "n": model.n, "m": model.m, "q": model.q}
    for name in _MATRICES:
        out[name] = np.asarray(getattr(model, name)).tolist()
    for name in _ARRAYS:
        out[name] = _encode(getattr(model, name))
    out["meta"] = dict(model.meta)
    return out


def model_from_dict(data: dict) -> BuildingModel:
    if data.get("schema") != "reserve_admm.building":
        raise ConfigurationError("schema: not a building model document")
    if data.get("version") != SCHEMA_VERSION:
        raise ConfigurationError(f"version: unsupported schema version {data.get('version')}")
    fills = {"x_lo": -np.inf, "x_hi": np.inf, "u_lo": -np.inf, "u_hi": np.inf}
    kwargs = {name: np.array(data[name], dtype=float) for name in _MATRICES}
    for name in _ARRAYS:
        kwargs[name] = _decode(data[name], fills.get(name, np.nan))
    model = BuildingModel(id=int(data["id"]), N=int(data["N"]), meta=data.get("meta", {}), **kwargs)
    _check_dims(model)
    return model


def save_model(model: BuildingModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1))


def load_model(path) -> BuildingModel:
    return model_from_dict(json.loads(Path(path).read_text()))
