"""Relative gap of the extracted bid to the monolithic optimum per iteration.

    python demos/convergence.py [buildings] [seed]
"""

import sys

import numpy as np

from reserve_admm import AdmmConfig, FleetSpec, generate_fleet, run_centralized, solve_monolithic

M = int(sys.argv[1]) if len(sys.argv) > 1 else 6
seed = int(sys.argv[2]) if len(sys.argv) > 2 else 0

fleet = generate_fleet(FleetSpec(seed=seed, counts={"small": M}, N=24))
p = np.full(24, 0.3)
J_star, Y_star, _ = solve_monolithic(fleet, p)
print(f"M={M} seed={seed}: monolithic J* = {J_star:.6f}, Y* = {Y_star[0]:.4f} kW")

result = run_centralized(fleet, AdmmConfig(rho=0.1, max_iters=30, extract_every=1), p)
print(f"{'iter':>4} {'J':>12} {'J_F':>12} {'gap':>9} {'Y_F':>9} {'primal':>9}")
for it in result.history:
    gap = (it.J_F - J_star) / abs(J_star)
    print(f"{it.iter:4d} {it.J:12.6f} {it.J_F:12.6f} {gap:9.2e} {it.outcome.level:9.4f} {it.primal_residual:9.2e}")
