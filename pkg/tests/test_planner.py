import json
import math

import numpy as np
import pytest
from scipy import stats

from terrain_nav.analyzer import TerrainAnalyzer
from terrain_nav.planner import (
    PFRRTStar,
    PlaneNode,
    PlannerConfig,
    PlanningError,
    edge_cost,
    edge_costs,
    plan,
    replan_heuristic,
    sample_ellipsoid,
)

from conftest import assert_monotone_non_increasing, make_map, plate


def _node(pos, tau):
    from terrain_nav.assessment import LocalPlane

    return PlaneNode(0, LocalPlane(np.asarray(pos, float), np.eye(3), np.zeros((0, 3)), 1.0), tau, None, 0.0)


# -- edge cost ------------------------------------------------------------------------


def test_edge_cost_zero_tau_is_length():
    assert edge_cost(_node([0, 0, 0], 0), _node([3, 4, 0], 0), 0.7) == pytest.approx(5.0)


def test_edge_cost_hand_value():
    # (1 + 0.2 * (1/0.5 + 1/0.5 - 2)) * 1 = 1.4
    assert edge_cost(_node([0, 0, 0], 0.5), _node([1, 0, 0], 0.5), 0.2) == pytest.approx(1.4)


def test_edge_cost_omega_zero():
    assert edge_cost(_node([0, 0, 0], 0.9), _node([0, 0, 2], 0.3), 0.0) == pytest.approx(2.0)


def test_edge_cost_uses_3d_length_and_is_at_least_length():
    a, b = _node([0, 0, 0], 0.2), _node([1, 0, 1], 0.6)
    assert edge_cost(a, b, 0.5) >= math.sqrt(2)


def test_edge_cost_tau_one_is_infinite():
    assert math.isinf(edge_cost(_node([0, 0, 0], 1.0), _node([1, 0, 0], 0), 0.5))
    assert math.isinf(float(edge_costs(0.2, 1.0, 1.0, 0.0)))


# -- planning on a flat plate -----------------------------------------------------------------


def test_flat_plate_path(flat10, acfg):
    cloud, grid = flat10
    path, tree = plan(grid, cloud, (1, 1), (9, 9), PlannerConfig(max_iterations=2000, seed=1), acfg)
    assert path is not None
    straight = math.hypot(8, 8)
    assert path.cost <= 1.10 * straight
    np.testing.assert_allclose(path.positions[0, :2], [1, 1])
    assert np.hypot(*(path.positions[-1, :2] - [9, 9])) <= 0.3
    # consecutive spacing below half the support cube edge
    assert np.all(np.linalg.norm(np.diff(path.positions, axis=0), axis=1) < acfg.side / 2)
    # best path ends at the cheapest goal-region node
    assert path.cost == pytest.approx(min(tree.cost[g] for g in tree.goal_nodes))


def test_zero_iterations(flat10, acfg):
    cloud, grid = flat10
    path, tree = plan(grid, cloud, (1, 1), (9, 9), PlannerConfig(max_iterations=0), acfg)
    assert path is None and len(tree) == 1


def test_unreachable_goal_returns_none_with_tree(island, acfg):
    cloud, grid = island
    path, tree = plan(grid, cloud, (1, 2), (9, 2), PlannerConfig(max_iterations=600), acfg)
    assert path is None
    assert len(tree) > 1
    assert np.all(tree.positions[:, 0] < 6.5)


def test_inadmissible_goal_raises(island, acfg):
    cloud, grid = island
    with pytest.raises(PlanningError, match="goal"):
        plan(grid, cloud, (1, 2), (6.8, 2), PlannerConfig(), acfg)
    with pytest.raises(PlanningError, match="outside"):
        plan(grid, cloud, (1, 2), (50, 2), PlannerConfig(), acfg)


def test_admission_and_tree_invariants(flat10, acfg):
    cloud, grid = flat10
    cfg = PlannerConfig(max_iterations=400, seed=3, debug_checks=True, tau_max_accept=0.5)
    path, tree = plan(grid, cloud, (1, 1), (9, 9), cfg, acfg)
    assert np.all(tree.taus < cfg.tau_max_accept)
    tree.check_invariants(cfg.omega)


def test_cost_monotone_every_100_iterations(flat10, acfg):
    cloud, grid = flat10
    p = PFRRTStar(TerrainAnalyzer(grid, cloud, acfg), PlannerConfig(seed=4))
    p.reset((1, 5), (9, 5))
    costs = []
    for _ in range(20):
        p.iterate(100)
        costs.append(p.best_cost)
    assert_monotone_non_increasing(costs)
    assert_monotone_non_increasing([e.cost for e in p.cost_trace])


def test_determinism(flat10, acfg):
    cloud, grid = flat10
    cfg = PlannerConfig(max_iterations=500, seed=9)
    a_path, a_tree = plan(grid, cloud, (1, 1), (9, 9), cfg, acfg)
    b_path, b_tree = plan(grid, cloud, (1, 1), (9, 9), cfg, acfg)
    assert json.dumps(a_tree.to_dict()) == json.dumps(b_tree.to_dict())
    assert json.dumps(a_path.to_dict()) == json.dumps(b_path.to_dict())


def test_path_refit_points_to_next_node(flat10, acfg):
    cloud, grid = flat10
    path, _ = plan(grid, cloud, (1, 1), (9, 9), PlannerConfig(max_iterations=800, seed=2), acfg)
    p = path.positions
    for node, nxt in zip(path.nodes[:-1], p[1:]):
        d = nxt - node.position
        d /= np.linalg.norm(d)
        assert np.dot(node.plane.e_x, d) == pytest.approx(1.0, abs=1e-9)


def test_tree_export_round_trips_through_json(flat10, acfg):
    cloud, grid = flat10
    _, tree = plan(grid, cloud, (1, 1), (3, 3), PlannerConfig(max_iterations=100), acfg)
    doc = json.loads(json.dumps(tree.to_dict()))
    assert len(doc["nodes"]) == len(tree)
    assert doc["nodes"][0]["parent"] is None
    assert all(len(n["rotation"]) == 3 for n in doc["nodes"])


def test_config_rejects_non_positive_lengths():
    with pytest.raises(ValueError):
        PlannerConfig(step=0)
    with pytest.raises(ValueError):
        PlannerConfig(tau_max_accept=1.5)


# -- informed sampling ---------------------------------------------------------------------------


def test_degenerate_ellipse_is_the_segment():
    rng = np.random.default_rng(0)
    s, g = np.array([1.0, 2.0]), np.array([4.0, 6.0])
    for _ in range(100):
        p = sample_ellipsoid(s, g, 5.0, rng)
        t = np.dot(p - s, g - s) / 25.0
        assert -1e-12 <= t <= 1 + 1e-12
        np.testing.assert_allclose(p, s + t * (g - s), atol=1e-9)


def _to_unit_disc(p, s, g, c_best):
    d = g - s
    c_min = np.hypot(*d)
    a, b = c_best / 2, math.sqrt(c_best ** 2 - c_min ** 2) / 2
    ang = math.atan2(d[1], d[0])
    R = np.array([[math.cos(ang), -math.sin(ang)], [math.sin(ang), math.cos(ang)]])
    q = (p - (s + g) / 2) @ R
    return q / [a, b]


def test_samples_inside_ellipse():
    rng = np.random.default_rng(1)
    s, g, c = np.array([0.0, 0.0]), np.array([3.0, 1.0]), 4.5
    pts = np.array([sample_ellipsoid(s, g, c, rng) for _ in range(10_000)])
    # focal-distance definition of the ellipse
    assert np.all(np.linalg.norm(pts - s, axis=1) + np.linalg.norm(pts - g, axis=1) <= c + 1e-9)


def test_ellipse_samples_are_uniform():
    rng = np.random.default_rng(2)
    s, g, c = np.array([0.0, 0.0]), np.array([3.0, 1.0]), 4.5
    pts = np.array([sample_ellipsoid(s, g, c, rng) for _ in range(8000)])
    u = _to_unit_disc(pts, s, g, c)
    # 5 equal-area rings x 8 sectors of the unit disc (the affine map preserves area ratios)
    ring = np.minimum((np.sum(u * u, axis=1) * 5).astype(int), 4)
    sector = ((np.arctan2(u[:, 1], u[:, 0]) + math.pi) / (2 * math.pi) * 8).astype(int) % 8
    counts = np.bincount(ring * 8 + sector, minlength=40)
    assert stats.chisquare(counts).pvalue > 0.01


# -- replanning heuristic ----------------------------------------------------------------------------


def test_replan_on_unchanged_map_is_immediate(flat10, acfg):
    cloud, grid = flat10
    first, _ = plan(grid, cloud, (1, 1), (9, 9), PlannerConfig(max_iterations=800, seed=5), acfg)
    p = PFRRTStar(TerrainAnalyzer(grid, cloud, acfg), PlannerConfig(seed=6))
    p.reset((1, 1), (9, 9))
    replan_heuristic(p, first)
    assert p.tree.best_node is not None
    assert p.iteration == 0


def test_replan_skips_blocked_nodes(acfg):
    cloud, grid = make_map(plate())
    first, _ = plan(grid, cloud, (1, 5), (9, 5), PlannerConfig(max_iterations=800, seed=5), acfg)
    cloud2, grid2 = make_map(plate(), {"type": "hole", "x": [4, 6], "y": [3, 7]})
    p = PFRRTStar(TerrainAnalyzer(grid2, cloud2, acfg), PlannerConfig(seed=6))
    p.reset((1, 5), (9, 5))
    tree = replan_heuristic(p, first)
    pos = tree.positions
    in_hole = (pos[:, 0] > 4) & (pos[:, 0] < 6) & (pos[:, 1] > 3) & (pos[:, 1] < 7)
    assert not in_hole.any()
    p.iterate(1500)
    path = p.best_path()
    assert path is not None
    xy = path.positions[:, :2]
    assert not np.any((xy[:, 0] > 3.9) & (xy[:, 0] < 6.1) & (xy[:, 1] > 2.9) & (xy[:, 1] < 7.1))


def test_replan_with_no_previous_path_is_identity(flat10, acfg):
    cloud, grid = flat10
    p = PFRRTStar(TerrainAnalyzer(grid, cloud, acfg), PlannerConfig())
    p.reset((1, 1), (9, 9))
    assert len(replan_heuristic(p, None)) == 1
