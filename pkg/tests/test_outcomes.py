import numpy as np
import pytest

from reserve_admm.admm import AdmmConfig, run_centralized
from reserve_admm.model import capacity_only_building
from reserve_admm.outcomes import (
    clip_and_scale,
    feasible_extract,
    feasible_lagrangian_price,
    lagrangian_reward,
    mixed_reward,
    proportional_reward,
)
from reserve_admm.robust_policy import build_constraint_set, check_robust_feasibility


def test_already_constant_offers_are_kept():
    Y, yF = clip_and_scale([[1.0, 2.0], [2.0, 1.0]])
    assert np.array_equal(Y, [3.0, 3.0])
    assert np.array_equal(yF, [[1.0, 2.0], [2.0, 1.0]])


def test_clip_and_scale_example():
    Y, yF = clip_and_scale([[1.0, 2.0], [2.0, 2.0]])
    assert np.array_equal(Y, [3.0, 3.0])
    assert np.array_equal(yF, [[1.0, 1.5], [2.0, 1.5]])


def test_zero_hour_clips_everything():
    Y, yF = clip_and_scale([[1.0, 0.0, 2.0], [2.0, 0.0, 1.0]])
    assert not Y.any() and not yF.any()


def test_negative_offers_rejected():
    with pytest.raises(ValueError, match="nonnegative"):
        clip_and_scale([[1.0, -0.1]])


@pytest.mark.parametrize("seed", range(10))
def test_extraction_invariants(seed):
    rng = np.random.default_rng(seed)
    y = rng.uniform(0, 2, (5, 8)) * (rng.uniform(size=(5, 8)) > 0.2)
    Y, yF = clip_and_scale(y)
    assert np.ptp(Y) == 0.0
    assert np.abs(yF.sum(axis=0) - Y).max() <= 1e-10 * max(1.0, Y.max())
    assert np.all(yF >= 0) and np.all(yF <= y + 1e-15)


def test_extracted_policies_are_robustly_feasible(small_fleet_n6):
    fleet = small_fleet_n6
    p = np.full(fleet[0].N, 0.3)
    res = run_centralized(fleet, AdmmConfig(rho=0.1, max_iters=3), p)
    sets = [s.C for s in res.states]
    for it in res.history:
        out = it.outcome
        for C, z, share in zip(sets, out.points_F, out.y_F):
            rep = check_robust_feasibility(C, z, "vertices")
            assert rep.feasible, rep
            assert np.array_equal(C.y(z), share)
        cost = sum(float(b.c @ k) for b, k in zip(fleet, out.kappas_F))
        assert abs(out.J_F - (cost - p @ out.Y_F)) <= 1e-12 * max(1.0, abs(out.J_F))


def test_reoptimized_cost_beats_iterate(small_fleet_n6):
    # pinning y to a smaller share never forces a more expensive input than needed
    fleet = small_fleet_n6
    p = np.full(fleet[0].N, 0.3)
    res = run_centralized(fleet, AdmmConfig(rho=0.1, max_iters=2, extract_every=0), p)
    sets = [s.C for s in res.states]
    zero = feasible_extract(sets, np.zeros_like(res.last.y), p)
    assert zero.level == 0.0
    assert zero.J_F <= res.outcome.J_F + p @ res.outcome.Y_F + 1e-7


def test_proportional_reward_examples():
    N, k = 12, 4
    black = np.where(np.arange(N) == k, 0.0, 1.0)
    red = 6.0 * (np.arange(N) == k)
    r = proportional_reward(np.ones(N), np.vstack([black] * 6 + [red]))
    assert r[6] / r[0] == 6 / 11
    assert not proportional_reward(np.zeros(N), np.vstack([black, red])).any()
    y = np.array([[0.3, 0.5]])
    assert proportional_reward([2.0, 1.0], y)[0] == 1.1


def test_proportional_conservation(rng):
    y = rng.uniform(0, 1, (4, 6))
    p = rng.uniform(0, 1, 6)
    assert abs(proportional_reward(p, y).sum() - p @ y.sum(axis=0)) <= 1e-12


def test_lagrangian_with_price_equals_proportional(rng):
    y = rng.uniform(0, 1, (3, 5))
    p = rng.uniform(0, 1, 5)
    assert np.array_equal(lagrangian_reward(p, y), proportional_reward(p, y))


def test_lagrangian_conservation_at_convergence():
    fleet = [capacity_only_building([1.0, 0.5, 2.0], id=0), capacity_only_building([0.5, 1.5, 0.2], id=1)]
    p = np.array([1.0, 0.5, 0.8])
    res = run_centralized(fleet, AdmmConfig(rho=0.5, max_iters=3000, stopping="residual", eps=1e-12,
                                            extract_every=0), p)
    assert res.converged
    R = p @ res.last.Y
    total = lagrangian_reward(res.last.lam[0], res.last.y).sum()
    assert abs(total - R) <= 1e-8 * abs(R)


def test_feasible_price_zero_omega_case():
    rho, M = 0.5, 3
    Y_F = np.full(4, 2.0)
    p = np.array([1.0, 2.0, 3.0, 6.0])
    Lambda_last = rho / M * Y_F  # makes Omega^F vanish
    assert np.allclose(feasible_lagrangian_price(Y_F, Lambda_last, rho, M, p), np.full(4, 3.0), rtol=0,
                       atol=1e-15)


@pytest.mark.parametrize("seed", range(20))
def test_feasible_price_column_sums(seed):
    rng = np.random.default_rng(seed)
    N = int(rng.integers(1, 25))
    p = rng.normal(size=N)
    LF = feasible_lagrangian_price(np.full(N, rng.uniform(0, 5)), rng.normal(size=N), rng.uniform(0.1, 3),
                                   int(rng.integers(1, 20)), p)
    assert abs(LF.sum() - p.sum()) <= 1e-12 * max(1.0, np.abs(p).sum(), np.abs(LF).sum())


def test_feasible_price_conserves_early_extraction(small_fleet_n6):
    fleet = small_fleet_n6
    p = np.full(fleet[0].N, 0.3)
    rho = 0.1
    res = run_centralized(fleet, AdmmConfig(rho=rho, max_iters=5, extract_every=5), p)
    out = res.history[4].outcome
    LF = feasible_lagrangian_price(out.Y_F, res.history[4].lam[0], rho, len(fleet), p)
    R = p @ out.Y_F
    assert abs(lagrangian_reward(LF, out.y_F).sum() - R) <= 1e-10 * max(abs(R), 1e-300)


def test_mixed_reward_limits_and_conservation(rng):
    r = rng.uniform(size=4)
    rl = rng.uniform(size=4)
    rl *= r.sum() / rl.sum()
    assert np.array_equal(mixed_reward(1.0, r, rl), r)
    assert np.array_equal(mixed_reward(0.0, r, rl), rl)
    assert abs(mixed_reward(0.5, r, rl).sum() - r.sum()) <= 1e-10


@pytest.mark.parametrize("alpha", [-0.1, 1.5, float("nan")])
def test_mixed_reward_rejects_alpha(alpha):
    with pytest.raises(ValueError, match="alpha"):
        mixed_reward(alpha, [1.0], [1.0])


def test_extract_on_capacity_pair():
    sets = [build_constraint_set(capacity_only_building([1.0, 0.0])),
            build_constraint_set(capacity_only_building([0.0, 1.0]))]
    out = feasible_extract(sets, np.array([[1.0, 0.0], [0.0, 1.0]]), np.ones(2))
    assert np.array_equal(out.Y_F, [1.0, 1.0])
    assert out.J_F == -2.0
