"""Sampling-based path planning over the occupancy octree.

plan() grows a rapidly exploring random tree in 3-D position space (the
vehicle is treated as a sphere; orientation is not planned). The RRT_STAR
variant additionally picks the minimum-cost parent among neighbors inside
a shrinking radius min(gamma * (log n / n)^(1/3), step_eta) and rewires
neighbors whose cost improves, so path cost is anytime non-increasing.

Collision checking is an exact box-vs-sphere distance test against every
occupied voxel near the query point; segments are sampled at half the voxel
resolution, which cannot step over a voxel once the robot radius is at
least resolution/2.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .geom import quat_rotate, quat_rotate_inverse, quat_yaw, wrap_angle
from .mapping import OccupancyOctree
from .messages import Path, PlanRequest, Pose, Twist, Wrench

RRT = "RRT"
RRT_STAR = "RRT_STAR"


@dataclass(frozen=True)
class PlannerParams:
    step_eta: float = 1.0  # m, steer extension cap
    goal_bias: float = 0.05
    rewire_gamma: float = 8.0  # m, neighbor-radius scale
    max_iterations: int = 200_000

    def __post_init__(self):
        if self.step_eta <= 0:
            raise ValueError("step_eta must be > 0")
        if not (0.0 <= self.goal_bias <= 1.0):
            raise ValueError("goal_bias must be in [0, 1]")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


DEFAULT_ROBOT_RADIUS = 0.45  # collision sphere 0.3 m + 0.15 m margin
DEFAULT_GOAL_TOLERANCE = 0.5


class PlanningError(Exception):
    pass


class StartInCollision(PlanningError):
    pass


class GoalInCollision(PlanningError):
    pass


class NoPathFound(PlanningError):
    def __init__(self, iterations: int, elapsed: float):
        super().__init__(f"no path after {iterations} iterations ({elapsed:.3f} s)")
        self.iterations = iterations
        self.elapsed = elapsed


def _occupied_near(tree: OccupancyOctree, centers: np.ndarray, radius: float):
    """Per sample center: (candidate occupied keys, owning-center index).

    Scans the cube of half-width radius + resolution around each center and
    keeps only keys present in the tree. A superset is fine; the exact
    box-sphere test runs afterwards.
    """
    if len(tree.occupied) == 0:
        return None, None
    res = tree.resolution
    mn = np.array(tree.bounds.min)
    span = int(2.0 * (radius + res) / res) + 2
    k_lo = np.floor((centers - radius - res - mn) / res).astype(np.int64)
    offs = np.stack(
        np.meshgrid(np.arange(span), np.arange(span), np.arange(span), indexing="ij"),
        axis=-1,
    ).reshape(-1, 3)
    keys = k_lo[:, None, :] + offs[None, :, :]  # (m, span^3, 3)
    dims = np.array(tree.dims) - 1
    np.clip(keys, 0, dims, out=keys)
    m = centers.shape[0]
    flat_keys = keys.reshape(-1, 3)
    mask = tree.dense_mask()
    if mask is not None:
        present = mask[flat_keys[:, 0], flat_keys[:, 1], flat_keys[:, 2]]
    else:
        codes_sorted = tree.sorted_codes()
        codes = tree.encode_keys(flat_keys)
        pos = np.searchsorted(codes_sorted, codes)
        pos_clamped = np.minimum(pos, codes_sorted.size - 1)
        present = codes_sorted[pos_clamped] == codes
    if not present.any():
        return None, None
    owner = np.repeat(np.arange(m), offs.shape[0])
    return flat_keys[present], owner[present]


def _any_sphere_collision(tree: OccupancyOctree, centers: np.ndarray, radius: float) -> bool:
    """True iff any center's sphere intersects any occupied voxel box."""
    keys, owner = _occupied_near(tree, centers, radius)
    if keys is None:
        return False
    res = tree.resolution
    mn = np.array(tree.bounds.min)
    box_lo = mn + keys * res
    c = centers[owner]
    closest = np.clip(c, box_lo, box_lo + res)
    d2 = ((c - closest) ** 2).sum(axis=1)
    return bool((d2 <= radius * radius).any())


def check_sphere(center, radius: float, tree: OccupancyOctree) -> bool:
    """Exact sphere-vs-occupied-voxel collision test."""
    if radius <= 0:
        raise ValueError("radius must be > 0")
    return _any_sphere_collision(tree, np.asarray(center, dtype=float).reshape(1, 3), radius)


def segment_samples(a, b, spacing: float) -> np.ndarray:
    """Points along [a, b] at most `spacing` apart, both endpoints included."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    length = float(np.linalg.norm(b - a))
    if length == 0.0:
        return a.reshape(1, 3)
    n = int(math.ceil(length / spacing)) + 1
    ts = np.linspace(0.0, 1.0, n)
    return a[None, :] + ts[:, None] * (b - a)[None, :]


def check_segment(a, b, radius: float, tree: OccupancyOctree) -> bool:
    """Swept-sphere segment test, sampled at half the voxel resolution.

    Each sample is tested with the radius inflated by half the actual sample
    spacing. The capsule distance function is 1-Lipschitz along the segment,
    so this is conservative: a reported free segment is truly free at the
    requested radius, no matter how finely an oracle resamples it.
    """
    pts = segment_samples(a, b, tree.resolution / 2.0)
    spacing = 0.0
    if pts.shape[0] > 1:
        spacing = float(np.linalg.norm(pts[1] - pts[0]))
    return _any_sphere_collision(tree, pts, radius + spacing / 2.0)


class _Tree:
    """Growable node store with parent/cost bookkeeping for RRT variants."""

    def __init__(self, root: np.ndarray, capacity: int = 1024):
        self.pts = np.empty((capacity, 3))
        self.pts[0] = root
        self.n = 1
        self.parent = [-1]
        self.cost = [0.0]
        self.children: list[list[int]] = [[]]

    def positions(self) -> np.ndarray:
        return self.pts[: self.n]

    def nearest(self, q: np.ndarray) -> int:
        d2 = ((self.pts[: self.n] - q) ** 2).sum(axis=1)
        return int(d2.argmin())  # argmin returns the lowest index on ties

    def neighbors_within(self, q: np.ndarray, radius: float) -> np.ndarray:
        d2 = ((self.pts[: self.n] - q) ** 2).sum(axis=1)
        return np.nonzero(d2 <= radius * radius)[0]

    def add(self, p: np.ndarray, parent: int, cost: float) -> int:
        if self.n == self.pts.shape[0]:
            grown = np.empty((2 * self.n, 3))
            grown[: self.n] = self.pts
            self.pts = grown
        idx = self.n
        self.pts[idx] = p
        self.n += 1
        self.parent.append(parent)
        self.cost.append(cost)
        self.children.append([])
        self.children[parent].append(idx)
        return idx

    def reparent(self, node: int, new_parent: int, new_cost: float) -> None:
        delta = new_cost - self.cost[node]
        self.children[self.parent[node]].remove(node)
        self.parent[node] = new_parent
        self.children[new_parent].append(node)
        stack = [node]
        while stack:
            i = stack.pop()
            self.cost[i] += delta
            stack.extend(self.children[i])

    def chain(self, node: int) -> list[int]:
        out = []
        while node != -1:
            out.append(node)
            node = self.parent[node]
        return out[::-1]


def plan(
    req: PlanRequest,
    tree: OccupancyOctree,
    params: PlannerParams | None = None,
    variant: str = RRT_STAR,
    stop_at_first: bool = False,
    cost_trace: list | None = None,
) -> Path:
    """Grow an RRT / RRT* from start and return the best goal-reaching path.

    The loop ends at req.time_budget or params.max_iterations, whichever
    comes first; with a generous time budget the result is a deterministic
    function of (request, octree, params, seed). `stop_at_first` ends the
    loop at the first solution instead of spending the whole budget
    improving it. `cost_trace`, if given, receives (iteration, best_cost)
    pairs whenever the best cost improves.
    """
    if variant not in (RRT, RRT_STAR):
        raise ValueError(f"unknown variant {variant!r}")
    params = params or PlannerParams()
    start = np.asarray(req.start, dtype=float)
    goal = np.asarray(req.goal, dtype=float)
    if not req.bounds.contains(start) or not req.bounds.contains(goal):
        raise ValueError("start and goal must lie within the request bounds")
    if check_sphere(start, req.robot_radius, tree):
        raise StartInCollision(f"start {tuple(start)} is in collision")
    if check_sphere(goal, req.robot_radius, tree):
        raise GoalInCollision(f"goal {tuple(goal)} is in collision")

    rng = np.random.default_rng(req.rng_seed)
    lo = np.array(req.bounds.min)
    hi = np.array(req.bounds.max)
    eta = params.step_eta
    nodes = _Tree(start)
    goal_nodes: list[int] = []
    goal_exact = -1  # node placed exactly at the goal, if connectable
    best_node = -1
    best_cost = math.inf
    t0 = time.perf_counter()
    iterations = 0

    if float(np.linalg.norm(start - goal)) <= req.goal_tolerance:
        goal_nodes.append(0)
        best_node, best_cost = 0, 0.0

    while iterations < params.max_iterations:
        if time.perf_counter() - t0 >= req.time_budget:
            break
        if stop_at_first and best_node >= 0:
            break
        iterations += 1

        sample = goal if rng.random() < params.goal_bias else rng.uniform(lo, hi)
        near_idx = nodes.nearest(sample)
        near = nodes.pts[near_idx]
        delta = sample - near
        dist = float(np.linalg.norm(delta))
        if dist == 0.0:
            continue
        new = sample if dist <= eta else near + (eta / dist) * delta

        if variant == RRT:
            if check_segment(near, new, req.robot_radius, tree):
                continue
            parent = near_idx
            cost = nodes.cost[near_idx] + min(dist, eta)
            idx = nodes.add(new, parent, cost)
        else:
            n = nodes.n
            radius = min(params.rewire_gamma * (math.log(n) / n) ** (1.0 / 3.0), eta) if n > 1 else 0.0
            nbrs = nodes.neighbors_within(new, radius) if radius > 0 else np.empty(0, dtype=int)
            cands = {int(i) for i in nbrs}
            cands.add(near_idx)
            seg = {i: float(np.linalg.norm(nodes.pts[i] - new)) for i in cands}
            order = sorted(cands, key=lambda i: (nodes.cost[i] + seg[i], i))
            parent = -1
            for i in order:
                if not check_segment(nodes.pts[i], new, req.robot_radius, tree):
                    parent = i
                    break
            if parent == -1:
                continue
            cost = nodes.cost[parent] + seg[parent]
            idx = nodes.add(new, parent, cost)
            for i in sorted(int(j) for j in nbrs):
                if i == parent:
                    continue
                rewired = cost + seg[i]
                if rewired < nodes.cost[i] - 1e-12:
                    if not check_segment(new, nodes.pts[i], req.robot_radius, tree):
                        nodes.reparent(i, idx, rewired)

        goal_gap = float(np.linalg.norm(new - goal))
        if goal_gap <= req.goal_tolerance:
            goal_nodes.append(idx)
            # connect the region hit to the exact goal so the follower has a
            # true endpoint; the goal node then competes like any other node
            if goal_exact == -1 and goal_gap > 0.0:
                if not check_segment(new, goal, req.robot_radius, tree):
                    goal_exact = nodes.add(goal.copy(), idx, nodes.cost[idx] + goal_gap)
                    goal_nodes.append(goal_exact)

        if goal_nodes:
            c, i = min((nodes.cost[i], i) for i in goal_nodes)
            improved = c < best_cost
            best_cost, best_node = c, i
            if improved and cost_trace is not None:
                cost_trace.append((iterations, c))

    elapsed = time.perf_counter() - t0
    if best_node == -1:
        raise NoPathFound(iterations, elapsed)

    chain = nodes.chain(best_node)
    waypoints = [tuple(map(float, nodes.pts[i])) for i in chain]
    cost = 0.0
    for a, b in zip(waypoints, waypoints[1:]):
        if check_segment(a, b, req.robot_radius, tree):
            raise PlanningError("internal error: returned path fails re-verification")
        cost += float(np.linalg.norm(np.subtract(b, a)))
    return Path(tuple(waypoints), cost, variant, iterations, elapsed)


# -- waypoint following ----------------------------------------------------


@dataclass(frozen=True)
class FollowerGains:
    kp_lin: float = 8.0  # N/m
    kd_lin: float = 6.0  # N s/m
    kp_yaw: float = 2.0  # N m/rad
    kd_yaw: float = 0.5  # N m s/rad


DEFAULT_ACCEPT_RADIUS = 0.5


def follow_waypoints(
    pose: Pose,
    twist: Twist,
    path: Path,
    index: int,
    gains: FollowerGains = FollowerGains(),
    accept_radius: float = DEFAULT_ACCEPT_RADIUS,
    force_max: float = 50.0,
    torque_max: float = 5.0,
) -> tuple[Wrench, int, bool]:
    """One PD step toward the active waypoint.

    Returns (body-frame wrench, advanced waypoint index, done). Done means
    the final waypoint is inside accept_radius; the wrench is then zero.
    """
    if not path.waypoints:
        raise ValueError("path has no waypoints")
    pos = np.array(pose.position)
    index = max(0, min(index, len(path.waypoints) - 1))
    while (
        index < len(path.waypoints) - 1
        and np.linalg.norm(np.array(path.waypoints[index]) - pos) <= accept_radius
    ):
        index += 1
    wp = np.array(path.waypoints[index])
    offset = wp - pos
    if index == len(path.waypoints) - 1 and np.linalg.norm(offset) <= accept_radius:
        return Wrench(stamp_ns=pose.stamp_ns), index, True

    v_world = quat_rotate(pose.orientation, twist.linear)
    force_world = gains.kp_lin * offset - gains.kd_lin * v_world
    force_body = quat_rotate_inverse(pose.orientation, force_world)

    torque_z = 0.0
    if math.hypot(offset[0], offset[1]) > accept_radius:
        bearing = math.atan2(offset[1], offset[0])
        err = wrap_angle(bearing - quat_yaw(pose.orientation))
        torque_z = gains.kp_yaw * err - gains.kd_yaw * twist.angular[2]

    wrench = Wrench(tuple(force_body), (0.0, 0.0, torque_z), pose.stamp_ns)
    return wrench.clamped(force_max, torque_max), index, False


class WaypointFollower:
    """Stateful wrapper: remembers the active waypoint between updates."""

    def __init__(
        self,
        path: Path,
        gains: FollowerGains = FollowerGains(),
        accept_radius: float = DEFAULT_ACCEPT_RADIUS,
        force_max: float = 50.0,
        torque_max: float = 5.0,
    ):
        self.path = path
        self.gains = gains
        self.accept_radius = accept_radius
        self.force_max = force_max
        self.torque_max = torque_max
        self.index = 0
        self.done = False

    def update(self, pose: Pose, twist: Twist) -> Wrench:
        wrench, self.index, self.done = follow_waypoints(
            pose,
            twist,
            self.path,
            self.index,
            self.gains,
            self.accept_radius,
            self.force_max,
            self.torque_max,
        )
        return wrench
