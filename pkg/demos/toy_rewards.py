"""Seven capacity-only buildings: six "black" ones idle at one critical hour,
one "red" building that can only help at that hour.

Prints the proportional and Lagrangian reward of each building.

    python demos/toy_rewards.py [black_capacity]
"""

import sys

import numpy as np

from reserve_admm import AdmmConfig, capacity_only_building, lagrangian_reward, proportional_reward, run_centralized

N, K_CRIT = 12, 5
black_cap = float(sys.argv[1]) if len(sys.argv) > 1 else 2.0

black = np.where(np.arange(N) == K_CRIT, 0.0, black_cap)
red = 6.0 * (np.arange(N) == K_CRIT)
fleet = [capacity_only_building(black, id=i) for i in range(6)] + [capacity_only_building(red, id=6)]
p = np.ones(N)

result = run_centralized(fleet, AdmmConfig(rho=1.0, max_iters=600, extract_every=0), p)
out = result.outcome
Lam = result.last.lam[0]
r = proportional_reward(p, out.y_F)
r_lam = lagrangian_reward(Lam, out.y_F)

print(f"aggregate bid level {out.level:.6f} kW over {N} hours, R = p^T Y = {p @ out.Y_F:.6f}")
print("Lambda:", np.array2string(Lam, precision=4, suppress_small=True))
print(f"{'building':>8} {'proportional':>13} {'lagrangian':>11}")
for b in range(len(fleet)):
    name = f"{b} (red)" if b == 6 else str(b)
    print(f"{name:>8} {r[b]:13.6f} {r_lam[b]:11.6f}")
print(f"red/black proportional ratio {r[6] / r[0]:.6f} (6/11 = {6 / 11:.6f})")
print(f"red share of R under the Lagrangian rule {r_lam[6] / r_lam.sum():.4f}")
