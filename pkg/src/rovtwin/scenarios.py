"""Headless experiment machinery: planning campaign, latency bench, e2e run.

Everything here is deterministic under an explicit seed except wall-clock
latency numbers and time-budgeted planner cutoffs (budgets can be swapped
for iteration caps to pin campaign tables exactly).
"""

from __future__ import annotations

import csv
import io
import logging
import math
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .bridge import Broker, BridgeClient, DelayCollector, DelayReport, measure_delays
from .envsim import Heightmap, VehicleParams, generate_harbor
from .geom import Box, quat_rotate_inverse
from .mapping import OccupancyOctree
from .messages import (
    ImageFrame,
    MsgType,
    PlanRequest,
    PointCloud,
    Pose,
    Wrench,
)
from .perception import CameraModel, NoiseConfig
from .planner import NoPathFound, PlannerParams, check_sphere, plan
from .sim_node import SimConfig, SimNode
from .twin_server import Mode, PlannerService, TwinConfig, TwinServer

log = logging.getLogger(__name__)

SCENARIO_CLASSES = ("SIMPLE", "COLLISION_PRONE", "NEAR_FLOOR")
DEFAULT_BUDGETS = (0.5, 1.0, 2.0)
DEFAULT_HARBOR_SEED = 20240901

SIMPLE_CLEARANCE = 5.0  # m above the highest terrain on the straight line
NEAR_FLOOR_BAND = 1.0  # m above the local floor


def default_harbor(seed: int = DEFAULT_HARBOR_SEED) -> Heightmap:
    return generate_harbor(seed)


def map_bounds(hmap: Heightmap, pad: float = 5.0) -> Box:
    """Octree bounds: heightmap extent padded, floor-to-surface plus pad."""
    x0, y0, x1, y1 = hmap.extent
    return Box(
        (x0 - pad, y0 - pad, hmap.min_depth() - pad),
        (x1 + pad, y1 + pad, pad),
    )


def build_terrain_octree(
    hmap: Heightmap,
    resolution: float = 0.25,
    bounds: Box | None = None,
    shell_depth: float = 2.0,
) -> OccupancyOctree:
    """Ground-truth terrain octree: surface voxels plus solid fill below.

    The fill (shell_depth meters) closes the gaps a one-voxel shell would
    leave underneath rugged terrain, so planners cannot tunnel below the
    seafloor.
    """
    bounds = bounds or map_bounds(hmap)
    tree = OccupancyOctree(resolution, bounds)
    x0, y0, x1, y1 = hmap.extent
    xs = np.arange(x0 + resolution / 2, x1, resolution)
    ys = np.arange(y0 + resolution / 2, y1, resolution)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    depth = hmap.depth_at(gx, gy)
    for dz in np.arange(0.0, shell_depth, resolution):
        layer = np.column_stack([gx.ravel(), gy.ravel(), (depth - dz).ravel()])
        tree.insert_points(layer)
    return tree


# -- planning campaign ---------------------------------------------------------


@dataclass
class Trial:
    scenario_class: str
    budget_s: float
    index: int
    start: tuple
    goal: tuple
    seed: int
    success: bool = False
    cost: float = math.nan
    iterations: int = 0
    elapsed: float = 0.0
    error: str = ""
    waypoints: tuple = ()


@dataclass
class CampaignResult:
    trials: list[Trial] = field(default_factory=list)
    robot_radius: float = 0.45

    def rows(self) -> list[dict]:
        out = []
        for cls in SCENARIO_CLASSES:
            for budget in sorted({t.budget_s for t in self.trials}):
                group = [t for t in self.trials if t.scenario_class == cls and t.budget_s == budget]
                if not group:
                    continue
                wins = [t for t in group if t.success]
                out.append(
                    {
                        "class": cls,
                        "budget_s": budget,
                        "trials": len(group),
                        "successes": len(wins),
                        "rate": len(wins) / len(group),
                        "mean_cost_m": float(np.mean([t.cost for t in wins])) if wins else math.nan,
                        "mean_iterations": float(np.mean([t.iterations for t in wins])) if wins else math.nan,
                    }
                )
        return out

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out)
        writer.writerow(
            ["class", "budget_s", "trials", "successes", "rate", "mean_cost_m", "mean_iterations"]
        )
        for row in self.rows():
            writer.writerow(
                [
                    row["class"],
                    row["budget_s"],
                    row["trials"],
                    row["successes"],
                    f"{row['rate']:.4f}",
                    "" if math.isnan(row["mean_cost_m"]) else f"{row['mean_cost_m']:.3f}",
                    "" if math.isnan(row["mean_iterations"]) else f"{row['mean_iterations']:.1f}",
                ]
            )
        return out.getvalue()

    def rate(self, cls: str, budget: float) -> float:
        for row in self.rows():
            if row["class"] == cls and row["budget_s"] == budget:
                return row["rate"]
        raise KeyError((cls, budget))


def _line_depth_profile(hmap: Heightmap, a, b, n: int = 64) -> np.ndarray:
    ts = np.linspace(0.0, 1.0, n)
    xs = a[0] + ts * (b[0] - a[0])
    ys = a[1] + ts * (b[1] - a[1])
    return hmap.depth_at(xs, ys)


def sample_scenario(
    scenario_class: str,
    hmap: Heightmap,
    tree: OccupancyOctree,
    rng: np.random.Generator,
    robot_radius: float = 0.45,
    min_sep: float = 12.0,
    max_sep: float = 30.0,
    margin: float = 4.0,
) -> tuple[tuple, tuple]:
    """Draw a (start, goal) pair satisfying the class geometry.

    SIMPLE: both endpoints at least SIMPLE_CLEARANCE above the highest
    terrain under the straight line. COLLISION_PRONE: the straight line dips
    below the terrain. NEAR_FLOOR: the start hovers within NEAR_FLOOR_BAND
    of the local floor. Endpoints are always collision-free.
    """
    x0, y0, x1, y1 = hmap.extent
    lo = np.array([x0 + margin, y0 + margin])
    hi = np.array([x1 - margin, y1 - margin])
    for _ in range(4000):
        axy = rng.uniform(lo, hi)
        bxy = rng.uniform(lo, hi)
        sep = float(np.linalg.norm(bxy - axy))
        if not (min_sep <= sep <= max_sep):
            continue
        da = float(hmap.depth_at(axy[0], axy[1]))
        db = float(hmap.depth_at(bxy[0], bxy[1]))
        profile = _line_depth_profile(hmap, axy, bxy)
        ridge = float(profile.max())
        if scenario_class == "SIMPLE":
            z_lo = ridge + SIMPLE_CLEARANCE
            z_hi = -1.0
            if z_lo >= z_hi:
                continue
            za = float(rng.uniform(z_lo, z_hi))
            zb = float(rng.uniform(z_lo, z_hi))
        elif scenario_class == "COLLISION_PRONE":
            za = da + float(rng.uniform(1.2, 2.5))
            zb = db + float(rng.uniform(1.2, 2.5))
            # straight line must dip below the terrain somewhere
            ts = np.linspace(0.0, 1.0, profile.size)
            line_z = za + ts * (zb - za)
            if not np.any(line_z < profile):
                continue
        elif scenario_class == "NEAR_FLOOR":
            za = da + float(rng.uniform(robot_radius + 0.4, NEAR_FLOOR_BAND))
            zb = db + float(rng.uniform(2.0, 4.0))
            if za - da > NEAR_FLOOR_BAND:
                continue
        else:
            raise ValueError(f"unknown scenario class {scenario_class!r}")
        start = (float(axy[0]), float(axy[1]), za)
        goal = (float(bxy[0]), float(bxy[1]), zb)
        if za >= -0.5 or zb >= -0.5:
            continue
        if check_sphere(start, robot_radius, tree) or check_sphere(goal, robot_radius, tree):
            continue
        return start, goal
    raise RuntimeError(f"could not sample a {scenario_class} scenario")


def run_campaign(
    hmap: Heightmap | None = None,
    tree: OccupancyOctree | None = None,
    classes=SCENARIO_CLASSES,
    budgets=DEFAULT_BUDGETS,
    trials: int = 50,
    seed: int = 0,
    variant: str = "RRT_STAR",
    params: PlannerParams | None = None,
    robot_radius: float = 0.45,
    goal_tolerance: float = 0.5,
    iteration_budgets: dict[float, int] | None = None,
    keep_waypoints: bool = True,
    progress=None,
) -> CampaignResult:
    """The three-class planning campaign.

    Budgets are wall-clock seconds; `iteration_budgets` maps each budget to
    an iteration cap instead, making the tables bit-reproducible. Scenarios
    are paired across budget tiers (same start/goal per trial index).
    """
    hmap = hmap or default_harbor()
    tree = tree if tree is not None else build_terrain_octree(hmap)
    params = params or PlannerParams()
    bounds = plan_bounds(hmap)
    result = CampaignResult(robot_radius=robot_radius)

    for ci, cls in enumerate(classes):
        scenarios = []
        for t in range(trials):
            rng = np.random.default_rng(seed * 1_000_003 + ci * 7919 + t)
            scenarios.append(sample_scenario(cls, hmap, tree, rng, robot_radius))
        for bi, budget in enumerate(budgets):
            for t, (start, goal) in enumerate(scenarios):
                plan_seed = seed * 1_000_000 + ci * 100_000 + bi * 10_000 + t
                if iteration_budgets is not None:
                    trial_params = PlannerParams(
                        step_eta=params.step_eta,
                        goal_bias=params.goal_bias,
                        rewire_gamma=params.rewire_gamma,
                        max_iterations=iteration_budgets[budget],
                    )
                    time_budget = 1e9
                else:
                    trial_params = params
                    time_budget = budget
                request = PlanRequest(
                    start=start,
                    goal=goal,
                    robot_radius=robot_radius,
                    time_budget=time_budget,
                    goal_tolerance=goal_tolerance,
                    bounds=bounds,
                    rng_seed=plan_seed,
                )
                trial = Trial(cls, budget, t, start, goal, plan_seed)
                try:
                    path = plan(request, tree, trial_params, variant, stop_at_first=True)
                    trial.success = True
                    trial.cost = path.cost
                    trial.iterations = path.iterations
                    trial.elapsed = path.elapsed
                    if keep_waypoints:
                        trial.waypoints = path.waypoints
                except NoPathFound as e:
                    trial.error = "NoPathFound"
                    trial.iterations = e.iterations
                    trial.elapsed = e.elapsed
                except Exception as e:  # StartInCollision etc. count as failures
                    trial.error = type(e).__name__
                result.trials.append(trial)
                if progress:
                    progress(trial)
    return result


def plan_bounds(hmap: Heightmap) -> Box:
    """Sampling volume for plan requests: the water column over the map."""
    x0, y0, x1, y1 = hmap.extent
    return Box((x0, y0, hmap.min_depth()), (x1, y1, -0.5))


# -- gap-wall RRT vs RRT* -------------------------------------------------------


def build_gap_wall_tree(resolution: float = 0.5) -> OccupancyOctree:
    """Full-section wall at x = 5 with one 2 m square gap (4 voxels wide)."""
    tree = OccupancyOctree(resolution, Box((0, 0, -10), (10, 10, 0)))
    ys = np.arange(resolution / 2, 10, resolution)
    zs = np.arange(-10 + resolution / 2, 0, resolution)
    pts = [
        [5.0 + resolution / 2, y, z]
        for y in ys
        for z in zs
        if not (4.0 <= y <= 6.0 and -6.0 <= z <= -4.0)
    ]
    tree.insert_points(np.array(pts))
    return tree


def gap_wall_request(seed: int, time_budget: float = 120.0) -> PlanRequest:
    return PlanRequest(
        start=(1.0, 5.0, -5.0),
        goal=(9.0, 5.0, -5.0),
        robot_radius=0.45,
        time_budget=time_budget,
        goal_tolerance=0.5,
        bounds=Box((0, 0, -10), (10, 10, 0)),
        rng_seed=seed,
    )


@dataclass
class GapWallRun:
    seed: int
    rrt_cost: float
    star_cost: float
    star_trace: list
    rrt_path: tuple
    star_path: tuple


def run_gap_wall_comparison(
    seeds: int = 50, iteration_cap: int = 1500, params: PlannerParams | None = None
) -> list[GapWallRun]:
    """Paired-seed RRT vs RRT* on the gap wall, equal iteration caps."""
    base = params or PlannerParams()
    capped = PlannerParams(
        step_eta=base.step_eta,
        goal_bias=base.goal_bias,
        rewire_gamma=base.rewire_gamma,
        max_iterations=iteration_cap,
    )
    tree = build_gap_wall_tree()
    runs = []
    for seed in range(seeds):
        req = gap_wall_request(seed)
        trace: list = []
        try:
            star = plan(req, tree, capped, "RRT_STAR", cost_trace=trace)
            star_cost, star_path = star.cost, star.waypoints
        except NoPathFound:
            star_cost, star_path = math.inf, ()
        try:
            rrt = plan(req, tree, capped, "RRT")
            rrt_cost, rrt_path = rrt.cost, rrt.waypoints
        except NoPathFound:
            rrt_cost, rrt_path = math.inf, ()
        runs.append(GapWallRun(seed, rrt_cost, star_cost, trace, rrt_path, star_path))
    return runs


# -- latency bench ----------------------------------------------------------------


@dataclass
class BenchTraffic:
    """Synthetic per-type traffic: default sizes give the bandwidth ordering
    pointcloud >> image >> pose ~ wrench."""

    cloud_points: int = 20_000
    image_width: int = 320
    image_height: int = 240
    cloud_rate_hz: float = 5.0
    image_rate_hz: float = 10.0
    pose_rate_hz: float = 20.0
    wrench_rate_hz: float = 20.0


def run_latency_bench(
    window: int = 15,
    traffic: BenchTraffic | None = None,
    timeout: float = 45.0,
    transport: str = "tcp",
) -> DelayReport:
    """Spin a private broker, stream all four types, report one-way delays."""
    traffic = traffic or BenchTraffic()
    broker = Broker(tcp_port=0, ws_port=0).start()
    host, port = broker.ws_address if transport == "ws" else broker.tcp_address
    collector = DelayCollector()
    stop = threading.Event()
    threads = []
    try:
        sub = BridgeClient(host, port, transport=transport, name="bench-sub", collector=collector)
        topics = {
            "bench/cloud": MsgType.POINTCLOUD,
            "bench/image": MsgType.IMAGE,
            "bench/pose": MsgType.POSE,
            "bench/wrench": MsgType.WRENCH,
        }
        for topic in topics:
            sub.subscribe(topic)
        pub = BridgeClient(host, port, transport=transport, name="bench-pub")
        rng = np.random.default_rng(0)
        payloads = {
            "bench/cloud": PointCloud(rng.normal(size=(traffic.cloud_points, 3)), 0, 0),
            "bench/image": ImageFrame(
                traffic.image_width,
                traffic.image_height,
                bytes(rng.integers(0, 256, traffic.image_width * traffic.image_height, dtype=np.uint8)),
            ),
            "bench/pose": Pose((1.0, 2.0, -5.0)),
            "bench/wrench": Wrench((1.0, 0.5, -0.25)),
        }
        rates = {
            "bench/cloud": traffic.cloud_rate_hz,
            "bench/image": traffic.image_rate_hz,
            "bench/pose": traffic.pose_rate_hz,
            "bench/wrench": traffic.wrench_rate_hz,
        }

        def pump(topic: str):
            period = 1.0 / rates[topic]
            nxt = time.perf_counter()
            while not stop.is_set():
                try:
                    pub.publish(topic, topics[topic], payloads[topic])
                except Exception:
                    return
                nxt += period
                delay = nxt - time.perf_counter()
                if delay > 0:
                    time.sleep(delay)

        for topic in topics:
            t = threading.Thread(target=pump, args=(topic,), name=f"pump-{topic}", daemon=True)
            t.start()
            threads.append(t)
        report = measure_delays(collector, window, timeout=timeout)
        return report
    finally:
        stop.set()
        for t in threads:
            t.join(timeout=2.0)
        broker.stop()


# -- end-to-end autonomous run ------------------------------------------------------


@dataclass
class E2EResult:
    reached: bool
    final_distance: float
    contact_events: int
    goal: tuple
    sim_time_s: float
    wall_time_s: float
    map_cells: int
    octree_voxels: int
    traversal_points: int
    plan_cost: float
    notes: str = ""

    def to_dict(self) -> dict:
        return {
            "reached": self.reached,
            "final_distance_m": self.final_distance,
            "contact_events": self.contact_events,
            "goal": list(self.goal),
            "sim_time_s": self.sim_time_s,
            "wall_time_s": self.wall_time_s,
            "map_cells": self.map_cells,
            "octree_voxels": self.octree_voxels,
            "traversal_points": self.traversal_points,
            "plan_cost_m": self.plan_cost,
            "notes": self.notes,
        }


def _sweep_waypoints(center, goal, altitude_z):
    """Lawnmower legs covering the corridor from start area to the goal."""
    cx, cy = center
    gx, gy = goal[0], goal[1]
    ux, uy = gx - cx, gy - cy
    n = math.hypot(ux, uy)
    ux, uy = ux / n, uy / n
    px, py = -uy, ux  # perpendicular
    legs = []
    offsets = (-4.0, 0.0, 4.0)
    for i, off in enumerate(offsets):
        a = (cx + px * off, cy + py * off)
        b = (cx + px * off + ux * (n + 4.0), cy + py * off + uy * (n + 4.0))
        pair = [a, b] if i % 2 == 0 else [b, a]
        legs.extend(pair)
    return [(x, y, altitude_z) for x, y in legs]


def run_autonomous_e2e(
    seed: int = 0,
    harbor_seed: int = DEFAULT_HARBOR_SEED,
    real_time_factor: float = 12.0,
    goal_offset: float = 15.0,
    budget: float = 2.0,
    teleop_speed_axis: float = 0.8,
    timeout_s: float = 150.0,
) -> E2EResult:
    """Scripted teleop traversal -> map -> plan -> closed-loop arrival.

    The traversal is driven through the twin's teleop relay from the SLAM
    pose stream (the operator surface), the plan request goes through the
    bridge to the planner service, and the follower streams wrenches until
    the vehicle reaches an open-water goal `goal_offset` meters away.
    """
    t_wall = time.perf_counter()
    hmap = generate_harbor(harbor_seed)
    x0, y0, x1, y1 = hmap.extent
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    start_xy = (cx - goal_offset / 2, cy - goal_offset / 2)
    corridor = np.array([1.0, 1.0]) / math.sqrt(2.0)  # sweep along the diagonal
    corridor_end = (
        start_xy[0] + corridor[0] * goal_offset,
        start_xy[1] + corridor[1] * goal_offset,
    )
    cruise_z = -3.0

    broker = Broker(tcp_port=0, ws_port=None).start()
    host, port = broker.tcp_address
    twin = None
    planner_svc = None
    sim = None
    notes = ""
    try:
        twin_cfg = TwinConfig(
            map_bounds=map_bounds(hmap),
            rebuild_threshold=30_000,
            plan_bounds=plan_bounds(hmap),
            plan_seed=seed,
        )
        twin = TwinServer(host, port, twin_cfg)
        planner_svc = PlannerService(host, port, twin.get_octree_snapshot)
        noise = NoiseConfig(sigma_pos=0.05, sigma_ang=0.005, sigma_obs=0.05,
                            drift_rate=0.0, rng_seed=seed)
        cam = CameraModel(max_range=12.0, features_per_frame=200)
        sim_cfg = SimConfig(
            real_time_factor=real_time_factor,
            image_rate_hz=0.0,  # rendering is exercised elsewhere; keep e2e lean
            start_position=(start_xy[0], start_xy[1], cruise_z),
        )
        sim = SimNode(host, port, hmap, VehicleParams(), noise, cam, sim_cfg)

        # teleop traversal over the corridor, driven by the SLAM pose stream
        waypoints = _sweep_waypoints(start_xy, (corridor_end[0], corridor_end[1], cruise_z), cruise_z)
        wp_index = [0]
        done_mapping = threading.Event()

        def teleop_driver(env):
            if done_mapping.is_set():
                return
            pose: Pose = env.payload
            pos = np.array(pose.position)
            while wp_index[0] < len(waypoints):
                target = np.array(waypoints[wp_index[0]])
                offset = target - pos
                if np.linalg.norm(offset[:2]) < 1.5:
                    wp_index[0] += 1
                    continue
                break
            if wp_index[0] >= len(waypoints):
                done_mapping.set()
                try:
                    twin.teleop_relay([0.0] * 6)
                except Exception:
                    pass
                return
            direction = offset / max(np.linalg.norm(offset), 1e-9)
            body_dir = quat_rotate_inverse(pose.orientation, direction)
            axes = np.clip(body_dir * teleop_speed_axis * 2.0, -teleop_speed_axis, teleop_speed_axis)
            try:
                twin.teleop_relay([axes[0], axes[1], axes[2], 0.0, 0.0, 0.0])
            except Exception:
                pass

        driver_client = BridgeClient(host, port, name="teleop-driver")
        driver_client.subscribe("slam/pose", teleop_driver)

        twin.set_mode(Mode.TELEOP)
        sim.start()
        if not done_mapping.wait(timeout_s):
            notes = "traversal did not finish in time"
            raise TimeoutError(notes)
        twin.set_mode(Mode.IDLE)
        twin.flush_map()

        # open-water goal exactly goal_offset meters from the mirrored pose,
        # back along the mapped corridor
        here = twin.last_pose()
        goal = (
            float(here.position[0] - corridor[0] * goal_offset),
            float(here.position[1] - corridor[1] * goal_offset),
            cruise_z,
        )
        path = twin.request_plan(goal, budget, wait=True, timeout=budget + 60.0)
        if not twin.autonomy_done.wait(timeout_s):
            notes = "follower did not reach the goal in time"

        final = sim.true_state
        final_distance = float(np.linalg.norm(np.subtract(final.pose.position, goal)))
        reached = twin.autonomy_done.is_set() and final_distance <= twin_cfg.goal_tolerance
        surface = twin.surface
        octree = twin.octree
        return E2EResult(
            reached=reached,
            final_distance=final_distance,
            contact_events=sim.contact_events,
            goal=goal,
            sim_time_s=sim.steps * sim_cfg.dt,
            wall_time_s=time.perf_counter() - t_wall,
            map_cells=surface.defined_count() if surface else 0,
            octree_voxels=len(octree) if octree else 0,
            traversal_points=twin.metrics.to_dict()["points_accumulated"],
            plan_cost=path.cost if path else math.nan,
            notes=notes,
        )
    finally:
        if sim is not None:
            sim.stop()
        if planner_svc is not None:
            planner_svc.close()
        if twin is not None:
            twin.close()
        broker.stop()
