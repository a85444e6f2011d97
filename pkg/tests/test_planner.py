"""Planner tests: collision oracles, RRT/RRT* behavior, waypoint following."""

import math

import numpy as np
import pytest

from rovtwin.envsim import VehicleParams, VehicleState, step_dynamics
from rovtwin.geom import Box
from rovtwin.mapping import OccupancyOctree, insert_cloud
from rovtwin.messages import PlanRequest, PointCloud, Pose, Twist, Wrench
from rovtwin.planner import (
    RRT,
    RRT_STAR,
    FollowerGains,
    GoalInCollision,
    NoPathFound,
    PlannerParams,
    StartInCollision,
    WaypointFollower,
    check_segment,
    check_sphere,
    follow_waypoints,
    plan,
    segment_samples,
)


def sphere_box_oracle(center, radius, tree):
    """Brute force: exact box-sphere test against every occupied voxel."""
    if not tree.occupied:
        return False
    res = tree.resolution
    mn = np.array(tree.bounds.min)
    keys = np.array(sorted(tree.occupied), dtype=float)
    lo = mn + keys * res
    closest = np.clip(np.asarray(center, dtype=float), lo, lo + res)
    d2 = ((closest - center) ** 2).sum(axis=1)
    return bool((d2 <= radius * radius).any())


def segment_oracle_fine(a, b, radius, tree, factor=10):
    """Fine-sampling oracle: same sphere test at 10x finer spacing."""
    pts = segment_samples(a, b, tree.resolution / 2.0 / factor)
    return any(sphere_box_oracle(p, radius, tree) for p in pts)


def tree_with(points, res=0.25, lo=(0, 0, -10), hi=(10, 10, 0)):
    tree = OccupancyOctree(res, Box(lo, hi))
    insert_cloud(tree, PointCloud(points))
    return tree


def empty_tree(res=0.25, lo=(0, 0, -10), hi=(10, 10, 0)):
    return OccupancyOctree(res, Box(lo, hi))


# -- collision checking -------------------------------------------------------


def test_check_sphere_empty_tree():
    tree = empty_tree()
    rng = np.random.default_rng(0)
    for _ in range(100):
        assert not check_sphere(rng.uniform(0, 10, 3) * [1, 1, -1], 0.5, tree)


def test_check_sphere_center_inside_voxel():
    tree = tree_with([[5.1, 5.1, -5.1]])
    assert check_sphere((5.1, 5.1, -5.1), 0.3, tree)


def test_check_sphere_radius_validation():
    with pytest.raises(ValueError):
        check_sphere((0, 0, 0), 0.0, empty_tree())


def test_check_sphere_matches_bruteforce_oracle():
    rng = np.random.default_rng(13)
    tree = tree_with(
        np.column_stack([rng.uniform(0, 10, 900), rng.uniform(0, 10, 900), rng.uniform(-10, 0, 900)])
    )
    agree_hits = 0
    for _ in range(10_000):
        center = np.array([rng.uniform(-1, 11), rng.uniform(-1, 11), rng.uniform(-11, 1)])
        radius = rng.uniform(0.05, 1.2)
        expect = sphere_box_oracle(center, radius, tree)
        assert check_sphere(center, radius, tree) == expect
        agree_hits += expect
    assert 0 < agree_hits < 10_000  # both outcomes exercised


def test_check_segment_trivials():
    tree = empty_tree()
    assert not check_segment((1, 1, -5), (9, 9, -5), 0.45, tree)
    # one-voxel wall pierced mid-segment
    wall = tree_with([[5.1, 5.1, -5.1]])
    assert check_segment((1, 5.1, -5.1), (9, 5.1, -5.1), 0.3, wall)


def test_check_segment_never_misses_fine_oracle():
    rng = np.random.default_rng(21)
    tree = tree_with(
        np.column_stack([rng.uniform(0, 10, 600), rng.uniform(0, 10, 600), rng.uniform(-10, 0, 600)])
    )
    radius = 0.25  # >= resolution/2 guarantees no tunnel-through
    missed = 0
    oracle_hits = 0
    for _ in range(1000):
        a = np.array([rng.uniform(0, 10), rng.uniform(0, 10), rng.uniform(-10, 0)])
        b = a + rng.uniform(-3, 3, 3)
        fine = segment_oracle_fine(a, b, radius, tree)
        got = check_segment(a, b, radius, tree)
        oracle_hits += fine
        if fine and not got:
            missed += 1
    assert missed == 0
    assert oracle_hits > 50


# -- plan ---------------------------------------------------------------------


def default_request(seed=0, budget=30.0, start=(0.5, 0.5, -5.0), goal=(9.5, 0.5, -5.0)):
    return PlanRequest(
        start=start,
        goal=goal,
        robot_radius=0.45,
        time_budget=budget,
        goal_tolerance=0.5,
        bounds=Box((0, 0, -10), (10, 10, 0)),
        rng_seed=seed,
    )


def test_plan_empty_map_cost_bounds():
    req = default_request(seed=4, goal=(9.89, 0.5, -5.0))
    # straight-line distance 9.39; budget replaced by an iteration cap
    params = PlannerParams(max_iterations=4000)
    path = plan(req, empty_tree(), params, RRT_STAR)
    assert path.waypoints[0] == req.start
    assert np.linalg.norm(np.subtract(path.waypoints[-1], req.goal)) <= req.goal_tolerance
    lower = np.linalg.norm(np.subtract(req.goal, req.start)) - req.goal_tolerance
    assert lower <= path.cost <= 1.5 * np.linalg.norm(np.subtract(req.goal, req.start))
    assert path.planner_id == RRT_STAR
    recomputed = sum(
        float(np.linalg.norm(np.subtract(b, a)))
        for a, b in zip(path.waypoints, path.waypoints[1:])
    )
    assert abs(path.cost - recomputed) < 1e-9


def test_plan_goal_in_collision():
    tree = tree_with([[5.1, 5.1, -5.1]])
    req = default_request(goal=(5.1, 5.1, -5.1))
    with pytest.raises(GoalInCollision):
        plan(req, tree, PlannerParams(max_iterations=100))


def test_plan_start_in_collision():
    tree = tree_with([[0.6, 0.6, -5.0]])
    req = default_request(start=(0.6, 0.6, -5.0))
    with pytest.raises(StartInCollision):
        plan(req, tree, PlannerParams(max_iterations=100))


def test_plan_no_path_when_sealed():
    # solid wall with no gap across the whole box
    ys, zs = np.meshgrid(np.arange(0.125, 10, 0.2), np.arange(-9.875, 0, 0.2))
    wall = np.column_stack([np.full(ys.size, 5.0), ys.ravel(), zs.ravel()])
    tree = tree_with(wall, res=0.5)
    req = default_request(budget=0.8)
    with pytest.raises(NoPathFound) as err:
        plan(req, tree, PlannerParams(max_iterations=1500), RRT_STAR)
    assert err.value.iterations > 0


def test_plan_deterministic_with_iteration_cap():
    req = default_request(seed=11)
    params = PlannerParams(max_iterations=900)
    tree = tree_with([[5, 5, -5], [5, 5.2, -5], [5.2, 5, -5]])
    trace_a, trace_b = [], []
    a = plan(req, tree, params, RRT_STAR, cost_trace=trace_a)
    b = plan(req, tree, params, RRT_STAR, cost_trace=trace_b)
    assert a.waypoints == b.waypoints
    assert a.cost == b.cost
    assert a.iterations == b.iterations
    assert trace_a == trace_b


def gap_wall_tree(res=0.5):
    """Wall at x = 5 spanning the box, with a 4-voxel (2 m) square gap."""
    tree = OccupancyOctree(res, Box((0, 0, -10), (10, 10, 0)))
    centers = np.arange(res / 2, 10, res)
    zs = np.arange(-10 + res / 2, 0, res)
    pts = []
    for y in centers:
        for z in zs:
            in_gap = 4.0 <= y <= 6.0 and -6.0 <= z <= -4.0
            if not in_gap:
                pts.append([5.0 + res / 2, y, z])
    insert_cloud(tree, PointCloud(pts))
    return tree


def gap_wall_request(seed):
    return PlanRequest(
        start=(1.0, 5.0, -5.0),
        goal=(9.0, 5.0, -5.0),
        robot_radius=0.45,
        time_budget=60.0,
        goal_tolerance=0.5,
        bounds=Box((0, 0, -10), (10, 10, 0)),
        rng_seed=seed,
    )


def test_gap_wall_paired_seeds_and_anytime_monotone():
    tree = gap_wall_tree()
    params = PlannerParams(max_iterations=1200)
    rrt_costs, star_costs = [], []
    for seed in range(10):
        req = gap_wall_request(seed)
        trace = []
        try:
            star = plan(req, tree, params, RRT_STAR, cost_trace=trace)
            star_costs.append(star.cost)
            for a, b in zip(star.waypoints, star.waypoints[1:]):
                assert not segment_oracle_fine(a, b, req.robot_radius, tree)
        except NoPathFound:
            star_costs.append(math.inf)
        costs_only = [c for _, c in trace]
        assert all(x >= y - 1e-12 for x, y in zip(costs_only, costs_only[1:]))
        try:
            rrt = plan(req, tree, params, RRT)
            rrt_costs.append(rrt.cost)
            for a, b in zip(rrt.waypoints, rrt.waypoints[1:]):
                assert not segment_oracle_fine(a, b, req.robot_radius, tree)
        except NoPathFound:
            rrt_costs.append(math.inf)
    assert np.median(star_costs) <= np.median(rrt_costs)
    assert sum(math.isfinite(c) for c in star_costs) >= 8


def test_trivial_request_start_near_goal():
    req = default_request(goal=(0.6, 0.5, -5.0))
    path = plan(req, empty_tree(), PlannerParams(max_iterations=50))
    assert path.cost <= 0.5
    assert path.waypoints[0] == req.start


def test_plan_rejects_out_of_bounds_endpoints():
    req = default_request(goal=(20.0, 0.5, -5.0))
    with pytest.raises(ValueError):
        plan(req, empty_tree(), PlannerParams(max_iterations=10))


# -- waypoint follower --------------------------------------------------------


def straight_path(length=10.0, z=-5.0):
    from rovtwin.messages import Path

    return Path(((0.0, 0.0, z), (length / 2, 0.0, z), (length, 0.0, z)), length, RRT_STAR, 0, 0.0)


def test_follower_done_at_final_waypoint():
    path = straight_path()
    pose = Pose((10.0, 0.0, -5.0))
    wrench, idx, done = follow_waypoints(pose, Twist(), path, index=2)
    assert done
    assert wrench.force == (0.0, 0.0, 0.0)
    assert wrench.torque == (0.0, 0.0, 0.0)


def test_follower_pd_force_at_rest():
    gains = FollowerGains(kp_lin=8.0, kd_lin=6.0)
    path = straight_path(length=1.0)
    # displaced -1 m in x from the active (final) waypoint, at rest
    pose = Pose((0.0, 0.0, -5.0))
    wrench, idx, done = follow_waypoints(pose, Twist(), path, index=2, gains=gains)
    assert not done
    assert wrench.force[0] == pytest.approx(gains.kp_lin * 1.0)
    assert wrench.force[1] == pytest.approx(0.0)


def test_follower_closed_loop_reaches_goal():
    params = VehicleParams()
    path = straight_path(length=10.0)
    follower = WaypointFollower(path, force_max=params.force_max, torque_max=params.torque_max)
    state = VehicleState.at((0.0, 0.0, -5.0))
    dt = 0.01
    wrench = Wrench()
    for step in range(12_000):  # 120 simulated seconds
        if step % 5 == 0:  # 20 Hz control on a 100 Hz sim
            wrench = follower.update(state.pose, state.twist)
            if follower.done:
                break
        state = step_dynamics(state, wrench, params, dt)
    assert follower.done, f"not done; at {state.pose.position}"
    dist = np.linalg.norm(np.subtract(state.pose.position, path.waypoints[-1]))
    assert dist <= follower.accept_radius + 0.1
    assert step * dt < 120.0
