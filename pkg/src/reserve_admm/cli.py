"""Command-line front end: ``reserve-admm generate | bid | sweep``.

Scenario files are JSON documents::

    {
      "schema": "reserve_admm.scenario", "version": 1,
      "fleet": {"generator": {"seed": 1, "counts": {"small": 4}, "residential_fraction": 0.5}},
      "N": 24, "p": 0.3, "c_tilde": 0.2,
      "admm": {"rho": 0.1, "max_iters": 25, "stopping": "fixed", "structure": "lower_triangular"},
      "mode": "central", "alpha": 0.5, "y_min": 0.0,
      "price_grid": [0.0, 0.5, 1.0], "out": "runs/demo"
    }

The fleet source is exactly one of ``generator``, ``models`` (list of model
files, relative to the scenario file) or ``capacity_only`` (list of
per-hour capacity vectors).

Exit codes: 0 success, 1 invalid input, 2 infeasible, 3 solver failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .admm import AdmmConfig, InfeasibleModelError, NegotiationError, fmt, run_centralized, solve_individual, write_trace_csv
from .decentral import run_decentralized
from .model import (
    DEFAULT_C_TILDE,
    DEFAULT_P,
    BuildingModel,
    ConfigurationError,
    FleetSpec,
    capacity_only_building,
    generate_fleet,
    load_model,
    save_model,
    validate_model,
)
from .outcomes import (
    BidOutcome,
    ExtractionError,
    feasible_extract,
    feasible_lagrangian_price,
    lagrangian_reward,
    mixed_reward,
    proportional_reward,
)
from .robust_policy import build_constraint_set

log = logging.getLogger("reserve_admm")

SCENARIO_SCHEMA = "reserve_admm.scenario"
SCENARIO_VERSION = 1
MODES = ("individual", "central", "decentral")

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_INFEASIBLE = 2
EXIT_SOLVER = 3


@dataclass
class Scenario:
    fleet: dict
    N: int = 24
    p: list | float = DEFAULT_P
    c_tilde: list | float = DEFAULT_C_TILDE
    admm: dict = field(default_factory=dict)
    mode: str = "central"
    alpha: float = 0.5
    y_min: float = 0.0
    price_grid: list = field(default_factory=list)
    out: str | None = None
    base_dir: Path = field(default_factory=Path.cwd)
    prices_defaulted: bool = False

    def __post_init__(self):
        if not isinstance(self.fleet, dict) or len(self.fleet) != 1:
            raise ConfigurationError("fleet: exactly one source (generator, models or capacity_only) is required")
        source = next(iter(self.fleet))
        if source not in ("generator", "models", "capacity_only"):
            raise ConfigurationError(f"fleet: unknown source {source!r}")
        if self.mode not in MODES:
            raise ConfigurationError(f"mode: expected one of {MODES}, got {self.mode!r}")
        if int(self.N) < 1:
            raise ConfigurationError("N: must be at least 1")
        if not 0.0 <= float(self.alpha) <= 1.0:
            raise ConfigurationError(f"alpha: must lie in [0, 1], got {self.alpha}")

    @property
    def source(self) -> str:
        return next(iter(self.fleet))

    def price(self, scale: float = 1.0) -> np.ndarray:
        return scale * _vector(self.p, self.N, "p")

    def config(self) -> AdmmConfig:
        return AdmmConfig(**self.admm)


def _vector(value, N, name) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.full(N, float(arr))
    if arr.shape != (N,):
        raise ConfigurationError(f"{name}: expected a scalar or {N} values, got {arr.size}")
    return arr


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"scenario: cannot read {path}: {exc}") from None
    if doc.get("schema") != SCENARIO_SCHEMA:
        raise ConfigurationError(f"schema: expected {SCENARIO_SCHEMA!r}")
    if doc.get("version") != SCENARIO_VERSION:
        raise ConfigurationError(f"version: unsupported scenario version {doc.get('version')!r}")
    known = {"fleet", "N", "p", "c_tilde", "admm", "mode", "alpha", "y_min", "price_grid", "out"}
    unknown = set(doc) - known - {"schema", "version"}
    if unknown:
        raise ConfigurationError(f"scenario: unknown fields {sorted(unknown)}")
    kwargs = {k: doc[k] for k in known if k in doc}
    kwargs["prices_defaulted"] = "p" not in doc or "c_tilde" not in doc
    return Scenario(base_dir=path.parent, **kwargs)


def build_fleet(sc: Scenario, seed: int | None = None) -> tuple[list[BuildingModel], dict]:
    """Materialize the fleet; returns the models and manifest metadata."""
    source = sc.source
    spec = sc.fleet[source]
    if source == "generator":
        spec = dict(spec)
        if seed is not None:
            spec["seed"] = seed
        fs = FleetSpec(seed=int(spec.get("seed", 0)), counts=dict(spec.get("counts", {})),
                       residential_fraction=float(spec.get("residential_fraction", 0.5)), N=int(sc.N),
                       start_hour=int(spec.get("start_hour", 0)), p=sc.p, c_tilde=sc.c_tilde)
        return generate_fleet(fs), {"source": "generator", "seed": fs.seed, "counts": fs.counts,
                                    "residential_fraction": fs.residential_fraction,
                                    "start_hour": fs.start_hour}
    if source == "models":
        fleet = [load_model(sc.base_dir / rel) for rel in spec]
        for b in fleet:
            if b.N != sc.N:
                raise ConfigurationError(f"models: building {b.id} has horizon {b.N}, scenario says {sc.N}")
        return fleet, {"source": "models", "files": list(spec)}
    fleet = [capacity_only_building(_vector(cap, sc.N, f"capacity_only[{i}]"), id=i) for i, cap in enumerate(spec)]
    return fleet, {"source": "capacity_only"}


# ---------------------------------------------------------------------------
# bidding

@dataclass
class BidReport:
    mode: str
    p: np.ndarray
    y: np.ndarray
    outcome: BidOutcome
    iterations: int
    J: float
    converged: bool
    reward_scheme: str
    individual_levels: np.ndarray
    history: list = field(default_factory=list)


def _individual_levels(fleet, sets_tc, p, tol):
    levels = []
    for b, C in zip(fleet, sets_tc):
        _, y, _ = solve_individual(b, C.structure, p, tol=tol, C=C)
        levels.append(y)
    return np.array(levels)


def _solve_individual_mode(fleet, cfg, p):
    sets_tc = [build_constraint_set(b, structure=cfg.structure, time_constant_y=True) for b in fleet]
    y = _individual_levels(fleet, sets_tc, p, cfg.qp_tol)
    # pooled individual bids are already time-constant; extraction only reoptimizes inputs
    outcome = feasible_extract(sets_tc, y, p, cfg.qp_tol)
    outcome.Lambda = p.copy()
    return y, outcome, y


def run_bid(sc: Scenario, fleet, scale: float = 1.0, mode: str | None = None) -> BidReport:
    mode = mode or sc.mode
    cfg = sc.config()
    p = sc.price(scale)
    if mode == "individual":
        y, outcome, ind = _solve_individual_mode(fleet, cfg, p)
        outcome.Lambda_F = p.copy()
        report = BidReport(mode, p, y, outcome, 1, outcome.J_F, True, "proportional", ind)
    else:
        runner = run_centralized if mode == "central" else run_decentralized
        result = runner(fleet, cfg, p)
        last = result.last
        outcome = result.outcome
        outcome.Lambda_F = feasible_lagrangian_price(outcome.Y_F, last.lam[0], cfg.rho, len(fleet), p)
        scheme = "lagrangian" if result.converged else "lagrangian_feasible"
        sets_tc = [build_constraint_set(b, structure=cfg.structure, time_constant_y=True) for b in fleet]
        ind = _individual_levels(fleet, sets_tc, p, cfg.qp_tol)
        report = BidReport(mode, p, last.y, outcome, len(result.history), last.J, result.converged, scheme, ind,
                           result.history)
    price = outcome.Lambda if report.reward_scheme == "lagrangian" else outcome.Lambda_F
    r = proportional_reward(p, outcome.y_F)
    r_l = lagrangian_reward(price, outcome.y_F)
    outcome.rewards = {"r": r, "r_lambda": r_l, "r_mix": mixed_reward(sc.alpha, r, r_l)}
    return report


def advantage_ratio(pY: float, pooled: float):
    """Aggregate over pooled individual reward; ``inf`` / ``nan`` sentinels.

    A pooled reward below ``1e-9`` (relative to ``max(1, pY)``) is solver
    noise around zero and yields a sentinel.
    """
    if pooled > 1e-9 * max(1.0, abs(pY)):
        return pY / pooled
    return math.inf if pY > 1e-9 else math.nan


def _json_float(x):
    x = float(x)
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    if math.isnan(x):
        return "undefined"
    return x


def write_bid_outputs(sc: Scenario, fleet, report: BidReport, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    o = report.outcome
    N = report.p.size
    with open(out / "bids.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["building", "hour", "y", "y_F"])
        for b, model in enumerate(fleet):
            for k in range(N):
                w.writerow([model.id, k, fmt(report.y[b, k]), fmt(o.y_F[b, k])])
    with open(out / "kappa.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["building", "hour", "input", "kappa"])
        for model, kappa in zip(fleet, o.kappas_F):
            m = model.m
            for idx, value in enumerate(kappa):
                w.writerow([model.id, idx // m, idx % m, fmt(value)])
    write_trace_csv(report.history, out / "trace.csv")
    with open(out / "rewards.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["building", "r", "r_lambda", f"r_mix_alpha_{fmt(sc.alpha)}"])
        for b, model in enumerate(fleet):
            w.writerow([model.id, fmt(o.rewards["r"][b]), fmt(o.rewards["r_lambda"][b]), fmt(o.rewards["r_mix"][b])])
    pY = float(report.p @ o.Y_F)
    pooled = float(sum(report.p @ row for row in report.individual_levels))
    summary = {
        "mode": report.mode,
        "M": len(fleet),
        "N": N,
        "iterations": report.iterations,
        "J": report.J,
        "J_F": o.J_F,
        "pY_F": pY,
        "Y_F_level": o.level,
        "pooled_individual_pY": pooled,
        "pooled_individual_level": float(report.individual_levels[:, 0].sum()) if len(fleet) else 0.0,
        "advantage_ratio": _json_float(advantage_ratio(pY, pooled)),
        "y_min": sc.y_min,
        "y_min_ok": bool(o.level >= sc.y_min),
        "converged": report.converged,
        "reward_scheme": report.reward_scheme,
        "alpha": sc.alpha,
        "prices": "fabricated flat defaults" if sc.prices_defaulted else "scenario",
        "Lambda": [float(v) for v in (o.Lambda if o.Lambda is not None else [])],
        "Lambda_F": [float(v) for v in (o.Lambda_F if o.Lambda_F is not None else [])],
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


# ---------------------------------------------------------------------------
# commands

def cmd_generate(args) -> int:
    sc = load_scenario(args.scenario)
    if sc.source != "generator":
        raise ConfigurationError("generate: the scenario fleet must use a generator")
    fleet, meta = build_fleet(sc, args.seed)
    out = _out_dir(args, sc)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for b in fleet:
        problems = validate_model(b)
        if problems:
            raise ConfigurationError(f"building {b.id}: " + "; ".join(problems))
        name = f"building_{b.id:03d}.json"
        save_model(b, out / name)
        files.append({"file": name, "id": b.id, "prototype": b.meta.get("prototype"),
                      "class": b.meta.get("class"), "n": b.n, "m": b.m, "q": b.q})
    if not fleet:
        log.warning("generate: fleet is empty, writing an empty manifest")
    manifest = {"schema": "reserve_admm.manifest", "version": 1, "N": sc.N, **meta, "buildings": files}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(files)} model file(s) to {out}")
    return EXIT_OK


def _apply_overrides(sc: Scenario, args) -> Scenario:
    if getattr(args, "mode", None):
        sc.mode = args.mode
    if getattr(args, "iters", None) is not None:
        sc.admm["max_iters"] = args.iters
    if getattr(args, "rho", None) is not None:
        sc.admm["rho"] = args.rho
    if getattr(args, "alpha", None) is not None:
        sc.alpha = args.alpha
    sc.__post_init__()
    return sc


def _out_dir(args, sc: Scenario) -> Path:
    if args.out:
        return Path(args.out)
    if sc.out:
        return sc.base_dir / sc.out
    raise ConfigurationError("out: give --out or an 'out' field in the scenario")


def cmd_bid(args) -> int:
    sc = _apply_overrides(load_scenario(args.scenario), args)
    fleet, _ = build_fleet(sc, args.seed)
    if not fleet:
        raise ConfigurationError("fleet: bidding needs at least one building")
    start = time.perf_counter()
    report = run_bid(sc, fleet)
    summary = write_bid_outputs(sc, fleet, report, _out_dir(args, sc))
    log.info("bid finished in %.2f s", time.perf_counter() - start)
    print(f"mode={summary['mode']} M={summary['M']} Y_F={fmt(summary['Y_F_level'])} J_F={fmt(summary['J_F'])} "
          f"advantage={summary['advantage_ratio']}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    sc = _apply_overrides(load_scenario(args.scenario), args)
    grid = [float(g) for g in args.grid.split(",")] if args.grid else [float(g) for g in sc.price_grid]
    if not grid:
        raise ConfigurationError("price grid: empty (use --grid or 'price_grid')")
    fleet, _ = build_fleet(sc, args.seed)
    if not fleet:
        raise ConfigurationError("fleet: sweeping needs at least one building")
    out = _out_dir(args, sc)
    out.mkdir(parents=True, exist_ok=True)
    raw = []
    for scale in sorted(grid):
        report = run_bid(sc, fleet, scale)
        p = report.p
        cost = report.outcome.J_F + float(p @ report.outcome.Y_F)
        raw.append((scale, report.outcome.level, report.outcome.J_F, cost, float(sc.price() @ report.outcome.Y_F)))
    rows = price_envelope(raw)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["price_scale", "Y_F_level", "J_F", "source_scale", "admm_Y_F_level", "admm_J_F"])
        for row in rows:
            w.writerow([fmt(v) for v in row])
    print(f"wrote {len(rows)} sweep row(s) to {out / 'sweep.csv'}")
    return EXIT_OK


def price_envelope(raw):
    """Best known feasible bid at every price scale.

    ``raw`` holds ``(scale, level, J_F, cost, base_reward)`` per solved
    scale, where ``cost`` is the input cost of the extracted bid and
    ``base_reward`` its reward at scale 1.  Every extracted bid stays
    feasible at any price, so each scale picks the bid minimizing
    ``cost - scale * base_reward``.  Ties keep the bid solved at that scale,
    otherwise the larger one.  Any such choice is non-decreasing in the
    scale whenever the price sum is positive.
    """
    rows = []
    for scale, level, J_F, _, _ in raw:
        best = None
        for src_scale, src_level, _, cost, reward in raw:
            value = cost - scale * reward
            own = src_scale == scale
            if best is None:
                best = (value, src_scale, src_level, own)
                continue
            slack = 1e-12 * max(1.0, abs(value))
            tie = abs(value - best[0]) <= slack
            if value < best[0] - slack or (tie and not best[3] and (own or src_level > best[2])):
                best = (value, src_scale, src_level, own)
        if best[1] != scale:
            log.info("sweep: scale %s uses the bid extracted at scale %s", fmt(scale), fmt(best[1]))
        rows.append((scale, best[2], best[0], best[1], level, J_F))
    return rows


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="reserve-admm", description="Aggregated reserve bidding for building fleets.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, with_run=True):
        p.add_argument("--scenario", required=True, help="scenario JSON file")
        p.add_argument("--out", help="output directory (overrides the scenario)")
        p.add_argument("--seed", type=int, help="override the generator seed")
        if with_run:
            p.add_argument("--mode", choices=MODES)
            p.add_argument("--iters", type=int, help="ADMM iteration budget")
            p.add_argument("--rho", type=float, help="ADMM penalty parameter")
            p.add_argument("--alpha", type=float, help="weight of the proportional reward in the mix")

    g = sub.add_parser("generate", help="write synthetic building models and a manifest")
    common(g, with_run=False)
    g.set_defaults(func=cmd_generate)
    b = sub.add_parser("bid", help="negotiate a bid and write bids, trace, rewards and summary")
    common(b)
    b.set_defaults(func=cmd_bid)
    s = sub.add_parser("sweep", help="bid level as a function of a price multiplier")
    common(s)
    s.add_argument("--grid", help="comma-separated price multipliers")
    s.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except NegotiationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE if exc.status == "infeasible" else EXIT_SOLVER
    except ExtractionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except InfeasibleModelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
