import numpy as np
import pytest
import torch

from config.run_config import BcdConfig, LinkBudget
from app.services.bcd_service import association_block, power_block, project, solve_bcd
from app.services.mdp_service import check_feasibility

SMALL = BcdConfig(waypoints=10, max_iterations=5)


def test_project_respects_box_and_hop_length(open_env):
    start = np.array([0.0, 0.0, 60.0])
    raw = torch.tensor([[5.0, 5.0, 70.0], [180.0, -40.0, 400.0], [0.0, 190.0, 10.0]], dtype=torch.float64)
    w = project(raw, open_env, start, v_max=50.0, dt=1.0, pin_start=True).numpy()
    np.testing.assert_array_equal(w[0], start)
    assert np.all(w >= open_env.lower_bounds - 1e-9) and np.all(w <= open_env.upper_bounds + 1e-9)
    assert np.all(np.linalg.norm(np.diff(w, axis=0), axis=1) <= 50.0 + 1e-9)


def test_power_block_uses_full_power_only_where_reachable(open_env, params):
    overhead = np.array([[150.0, 120.0, 60.0]])
    assert power_block(overhead, open_env, LinkBudget(), params)[0] == 33.0
    strict = LinkBudget(p_min_dbm=-10.0)
    assert power_block(overhead, open_env, strict, params)[0] == strict.p_floor_dbm


def test_association_counts(city_env, params, link):
    w = np.array([[100.0, 150.0, 60.0], [100.0, 150.0, 60.0]])
    alpha, counts = association_block(w, np.array([33.0, -200.0]), city_env, link, params)
    np.testing.assert_array_equal(counts, [2.0, 0.0])
    assert alpha.dtype == bool


def test_objective_never_increases(open_env, link, params, episode):
    traj = solve_bcd(open_env, SMALL, link, params, episode)
    history = traj.info['objective_history']
    assert len(history) >= 2
    assert all(b <= a + 1e-12 for a, b in zip(history, history[1:]))


def test_solution_is_deterministic(city_env, link, params, episode):
    a = solve_bcd(city_env, SMALL, link, params, episode)
    b = solve_bcd(city_env, SMALL, link, params, episode)
    np.testing.assert_array_equal(a.info['waypoints'], b.info['waypoints'])
    np.testing.assert_array_equal(a.positions(), b.positions())


def test_open_scene_replay_is_feasible(open_env, link, params, episode):
    traj = solve_bcd(open_env, SMALL, link, params, episode)
    assert traj.success
    assert traj.info['feasible']
    assert check_feasibility(traj, episode, link) == []
    np.testing.assert_array_equal(traj.info['waypoints'][0], [0.0, 0.0, open_env.h_min])


def test_loose_start_returns_to_its_own_start(open_env, link, params, episode):
    cfg = BcdConfig(waypoints=10, max_iterations=5, variant='loose-start')
    traj = solve_bcd(open_env, cfg, link, params, episode)
    assert traj.info['method'] == 'bcd-loose-start'
    np.testing.assert_allclose(traj.start, traj.info['waypoints'][0])
    np.testing.assert_allclose(traj.home, traj.start)


@pytest.mark.slow
def test_loose_start_surrogate_is_no_worse(city_env, link, params, episode):
    fixed = solve_bcd(city_env, BcdConfig(waypoints=40, max_iterations=40), link, params, episode)
    loose = solve_bcd(city_env, BcdConfig(waypoints=40, max_iterations=40, variant='loose-start'), link, params, episode)
    assert loose.info['objective_history'][-1] <= fixed.info['objective_history'][-1] * 1.05


@pytest.mark.slow
@pytest.mark.parametrize('seed', [0, 1, 2])
@pytest.mark.parametrize('scene', ['city_env', 'open_env'])
def test_loose_start_replay_finishes_no_later(request, scene, seed, link, params, episode):
    env = request.getfixturevalue(scene)
    fixed = solve_bcd(env, BcdConfig(waypoints=40, max_iterations=40, seed=seed), link, params, episode)
    loose = solve_bcd(
        env, BcdConfig(waypoints=40, max_iterations=40, seed=seed, variant='loose-start'), link, params, episode
    )
    assert loose.t_end <= fixed.t_end
