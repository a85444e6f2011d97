"""Digital-side core: mirrored twin state, teleop relay, plan orchestration.

The twin owns a single mutable state mirror fed by bridge subscriptions
(estimated pose, feature clouds, plan replies) and republishes operator
intent (wrench commands, plan requests). Pose authority is the SLAM
estimate; ground truth arrives only on a debug topic and feeds an error
metric, never control.

Threading: ingest runs on the bridge client's reader thread in arrival
order; all state lives behind one lock, and snapshot() returns plain-dict
copies safe to hand elsewhere. Map rebuilds are heavy, so they run on a
single builder thread (one writer; the result is frozen and swapped in) and
never stall the pose/control path. Planning runs in PlannerService's worker
thread against a frozen octree snapshot.
"""

from __future__ import annotations

import enum
import logging
import math
import queue
import threading
from dataclasses import dataclass, field

import numpy as np

from .bridge import BridgeClient, DelayCollector, build_delay_report
from .clock import now_ns
from .geom import Box, quat_rotate_inverse, quat_yaw, wrap_angle
from .mapping import (
    DenseSurface,
    OccupancyOctree,
    densify,
    insert_cloud,
    surface_to_cloud,
)
from .messages import (
    TOPIC_CMD_WRENCH,
    TOPIC_PLAN_REQUEST,
    TOPIC_PLAN_RESULT,
    TOPIC_PLAN_STATUS,
    TOPIC_SIM_TRUTH,
    TOPIC_SLAM_FEATURES,
    TOPIC_SLAM_POSE,
    TOPIC_TWIN_METRICS,
    TOPIC_TWIN_OCTREE,
    TOPIC_TWIN_SNAPSHOT,
    TOPIC_TWIN_SURFACE,
    TOPIC_UI_AXES,
    TOPIC_UI_MODE,
    TOPIC_UI_PLAN_REQUEST,
    Envelope,
    MsgType,
    Path,
    PlanRequest,
    PointCloud,
    Pose,
    Twist,
    Wrench,
)
from .planner import (
    FollowerGains,
    GoalInCollision,
    NoPathFound,
    PlannerParams,
    StartInCollision,
    WaypointFollower,
    check_segment,
    plan,
)

log = logging.getLogger(__name__)


class Mode(str, enum.Enum):
    IDLE = "IDLE"
    TELEOP = "TELEOP"
    AUTONOMOUS = "AUTONOMOUS"


class ModeError(RuntimeError):
    pass


class NoMapError(RuntimeError):
    pass


class PlanRejected(RuntimeError):
    def __init__(self, error: str, detail: str = ""):
        super().__init__(f"{error}: {detail}" if detail else error)
        self.error = error
        self.detail = detail


@dataclass
class TwinConfig:
    map_bounds: Box
    octree_resolution: float = 0.25
    surface_cell: float = 0.25
    max_fill_distance: int = 4
    rebuild_threshold: int = 2000
    teleop_force_gain: float = 20.0  # N at full axis deflection
    teleop_torque_gain: float = 2.0  # N m at full axis deflection
    force_max: float = 50.0
    torque_max: float = 5.0
    robot_radius: float = 0.45
    goal_tolerance: float = 0.5
    accept_radius: float = 0.2
    follower_gains: FollowerGains = field(
        default_factory=lambda: FollowerGains(kp_lin=6.0, kd_lin=14.0)
    )
    plan_bounds: Box | None = None  # defaults to map_bounds
    plan_seed: int = 0
    velocity_smoothing: float = 0.25  # EMA weight on finite-difference velocity


class SessionMetrics:
    """Monotone counters describing the session; all reads take the lock."""

    def __init__(self):
        self.lock = threading.Lock()
        self.cmd_sent: dict[str, int] = {"teleop": 0, "follower": 0}
        self.poses_ingested = 0
        self.stale_dropped = 0
        self.duplicate_dropped = 0
        self.clouds_ingested = 0
        self.points_accumulated = 0
        self.rebuilds = 0
        self.plans_requested = 0
        self.plans_succeeded = 0
        self.plans_failed = 0
        self.truth_error_m = 0.0  # latest |estimate - truth|, debug only

    def to_dict(self) -> dict:
        with self.lock:
            return {
                "cmd_sent": dict(self.cmd_sent),
                "poses_ingested": self.poses_ingested,
                "stale_dropped": self.stale_dropped,
                "duplicate_dropped": self.duplicate_dropped,
                "clouds_ingested": self.clouds_ingested,
                "points_accumulated": self.points_accumulated,
                "rebuilds": self.rebuilds,
                "plans_requested": self.plans_requested,
                "plans_succeeded": self.plans_succeeded,
                "plans_failed": self.plans_failed,
                "truth_error_m": self.truth_error_m,
            }


def _pose_to_dict(pose: Pose) -> dict:
    return {
        "position": list(pose.position),
        "orientation": list(pose.orientation),
        "stamp_ns": pose.stamp_ns,
        "frame": pose.frame,
    }


def _path_to_dict(path: Path | None) -> dict | None:
    if path is None:
        return None
    return {
        "waypoints": [list(w) for w in path.waypoints],
        "cost": path.cost,
        "planner_id": path.planner_id,
        "iterations": path.iterations,
        "elapsed": path.elapsed,
    }


class TwinServer:
    """Maintains the mirrored state and drives the teleop/autonomy workflow."""

    def __init__(self, host: str, port: int, config: TwinConfig, name: str = "twin"):
        self.config = config
        self.metrics = SessionMetrics()
        self._lock = threading.RLock()
        self.mode = Mode.IDLE
        self._version = 0
        self._field_versions: dict[str, int] = {}
        self._last_pose: Pose | None = None
        self._last_pose_recv_ns: int | None = None
        self._last_pose_seq = -1
        self._last_feature_seq = -1
        self._vel_world = np.zeros(3)
        self._yaw_rate = 0.0
        self._accum: list[np.ndarray] = []
        self._pending_points = 0
        self.surface: DenseSurface | None = None
        self.octree: OccupancyOctree | None = None
        self.surface_version = 0
        self.octree_version = 0
        self.active_path: Path | None = None
        self._follower: WaypointFollower | None = None
        self._plan_pending = False
        self._plan_goal: tuple | None = None
        self._plan_reply: Path | None = None
        self._plan_error: tuple[str, str] | None = None
        self._plan_event = threading.Event()
        self.autonomy_done = threading.Event()
        self._mode_history: list[tuple[Mode, Mode]] = []
        self._build_queue: queue.Queue = queue.Queue()
        self._installed_points = 0
        threading.Thread(target=self._builder, name=f"{name}-builder", daemon=True).start()

        self.collector = DelayCollector()
        self.client = BridgeClient(host, port, name=name, collector=self.collector)
        self.client.subscribe(TOPIC_SLAM_POSE, self._on_pose)
        self.client.subscribe(TOPIC_SLAM_FEATURES, self._on_features)
        self.client.subscribe(TOPIC_SIM_TRUTH, self._on_truth)
        self.client.subscribe(TOPIC_PLAN_RESULT, self._on_plan_result)
        self.client.subscribe(TOPIC_PLAN_STATUS, self._on_plan_status)
        self.client.subscribe(TOPIC_UI_AXES, self._on_ui_axes)
        self.client.subscribe(TOPIC_UI_MODE, self._on_ui_mode)
        self.client.subscribe(TOPIC_UI_PLAN_REQUEST, self._on_ui_plan_request)

    def close(self) -> None:
        self.client.close()

    # -- versioning helpers ----------------------------------------------------

    def _bump(self, *fields: str) -> None:
        self._version += 1
        for f in fields:
            self._field_versions[f] = self._version

    # -- mode machine ------------------------------------------------------------

    def _set_mode(self, target: Mode) -> None:
        """Transition respecting the TELEOP <-> IDLE <-> AUTONOMOUS chain."""
        with self._lock:
            if target == self.mode:
                return
            if self.mode is Mode.TELEOP and target is Mode.AUTONOMOUS:
                self._transition(Mode.IDLE)
            if self.mode is Mode.AUTONOMOUS and target is Mode.TELEOP:
                self._transition(Mode.IDLE)
            self._transition(target)

    def _transition(self, target: Mode) -> None:
        if target == self.mode:
            return
        legal = {
            (Mode.IDLE, Mode.TELEOP),
            (Mode.TELEOP, Mode.IDLE),
            (Mode.IDLE, Mode.AUTONOMOUS),
            (Mode.AUTONOMOUS, Mode.IDLE),
        }
        if (self.mode, target) not in legal:
            raise ModeError(f"illegal transition {self.mode.value} -> {target.value}")
        self._mode_history.append((self.mode, target))
        if self.mode is Mode.AUTONOMOUS:
            self.active_path = None
            self._follower = None
            self._bump("path")
        self.mode = target
        self._bump("mode")

    def set_mode(self, target: Mode | str) -> None:
        self._set_mode(Mode(target))

    @property
    def mode_history(self) -> list[tuple[Mode, Mode]]:
        with self._lock:
            return list(self._mode_history)

    # -- teleop -------------------------------------------------------------------

    def teleop_relay(self, axes) -> Wrench:
        """Six [-1, 1] axes -> published wrench command. TELEOP mode only."""
        axes = [float(a) for a in axes]
        if len(axes) != 6:
            raise ValueError(f"expected 6 axes, got {len(axes)}")
        with self._lock:
            if self.mode is not Mode.TELEOP:
                raise ModeError(f"teleop_relay requires TELEOP mode, currently {self.mode.value}")
            clipped = [min(max(a, -1.0), 1.0) for a in axes]
            fg, tg = self.config.teleop_force_gain, self.config.teleop_torque_gain
            wrench = Wrench(
                (clipped[0] * fg, clipped[1] * fg, clipped[2] * fg),
                (clipped[3] * tg, clipped[4] * tg, clipped[5] * tg),
                now_ns(),
            ).clamped(self.config.force_max, self.config.torque_max)
            self._publish_wrench(wrench, "teleop")
            return wrench

    def _publish_wrench(self, wrench: Wrench, source: str) -> None:
        # provenance invariant: TELEOP wrenches from the relay, AUTONOMOUS
        # wrenches from the follower, nothing in IDLE
        if source == "teleop" and self.mode is not Mode.TELEOP:
            raise ModeError("teleop wrench outside TELEOP mode")
        if source == "follower" and self.mode is not Mode.AUTONOMOUS:
            raise ModeError("follower wrench outside AUTONOMOUS mode")
        self.client.publish(TOPIC_CMD_WRENCH, MsgType.WRENCH, wrench)
        with self.metrics.lock:
            self.metrics.cmd_sent[source] += 1

    # -- ingest ---------------------------------------------------------------------

    def _on_pose(self, env: Envelope) -> None:
        pose: Pose = env.payload
        follower_step = None
        with self._lock:
            if env.seq <= self._last_pose_seq:
                with self.metrics.lock:
                    if env.seq == self._last_pose_seq:
                        self.metrics.duplicate_dropped += 1
                    else:
                        self.metrics.stale_dropped += 1
                return
            prev, prev_recv = self._last_pose, self._last_pose_recv_ns
            self._last_pose_seq = env.seq
            self._last_pose = pose
            self._last_pose_recv_ns = now_ns()
            with self.metrics.lock:
                self.metrics.poses_ingested += 1
            if prev is not None and pose.stamp_ns > prev.stamp_ns:
                dt = (pose.stamp_ns - prev.stamp_ns) * 1e-9
                raw = (np.array(pose.position) - np.array(prev.position)) / dt
                a = self.config.velocity_smoothing
                self._vel_world = a * raw + (1 - a) * self._vel_world
                dyaw = wrap_angle(quat_yaw(pose.orientation) - quat_yaw(prev.orientation))
                self._yaw_rate = a * (dyaw / dt) + (1 - a) * self._yaw_rate
            self._bump("pose")
            if self.mode is Mode.AUTONOMOUS and self._follower is not None:
                follower_step = self._follower
        if follower_step is not None:
            self._drive_follower(pose)

    def _drive_follower(self, pose: Pose) -> None:
        with self._lock:
            follower = self._follower
            if follower is None or self.mode is not Mode.AUTONOMOUS:
                return
            v_body = quat_rotate_inverse(pose.orientation, self._vel_world)
            twist = Twist(tuple(v_body), (0.0, 0.0, self._yaw_rate))
            wrench = follower.update(pose, twist)
            if follower.done:
                self._publish_wrench(Wrench(stamp_ns=now_ns()), "follower")
                self._transition(Mode.IDLE)
                self.autonomy_done.set()
                return
            self._publish_wrench(wrench, "follower")

    def _on_features(self, env: Envelope) -> None:
        cloud: PointCloud = env.payload
        with self._lock:
            if env.seq <= self._last_feature_seq:
                with self.metrics.lock:
                    self.metrics.duplicate_dropped += 1
                return
            self._last_feature_seq = env.seq
            if len(cloud):
                self._accum.append(np.asarray(cloud.points, dtype=np.float32))
                self._pending_points += len(cloud)
            with self.metrics.lock:
                self.metrics.clouds_ingested += 1
                self.metrics.points_accumulated += len(cloud)
            if self._pending_points >= self.config.rebuild_threshold:
                self._pending_points = 0
                self._schedule_build()

    def _on_truth(self, env: Envelope) -> None:
        truth: Pose = env.payload
        with self._lock:
            if self._last_pose is None:
                return
            err = float(
                np.linalg.norm(np.array(truth.position) - np.array(self._last_pose.position))
            )
        with self.metrics.lock:
            self.metrics.truth_error_m = err

    def flush_map(self, timeout: float = 60.0) -> None:
        """Rebuild from everything accumulated so far; returns when installed."""
        with self._lock:
            self._pending_points = 0
            done = self._schedule_build()
        if done is not None and not done.wait(timeout):
            raise TimeoutError("map build did not finish in time")

    def _schedule_build(self) -> threading.Event | None:
        """Queue a build job over a snapshot of the accumulated cloud.

        Caller holds the lock. Returns an event set when the job lands.
        """
        if not self._accum:
            return None
        pts = list(self._accum)
        count = sum(len(p) for p in pts)
        stamp = self._last_pose.stamp_ns if self._last_pose else 0
        done = threading.Event()
        self._build_queue.put((count, pts, stamp, done))
        return done

    def _builder(self) -> None:
        while True:
            count, pts, stamp, done = self._build_queue.get()
            try:
                cloud = PointCloud(np.vstack(pts), stamp, 0)
                surface = densify(
                    cloud, self.config.surface_cell, self.config.max_fill_distance
                )
                tree = OccupancyOctree(self.config.octree_resolution, self.config.map_bounds)
                insert_cloud(tree, surface_to_cloud(surface))
            except Exception:
                log.exception("map build failed")
                done.set()
                continue
            with self._lock:
                if count >= self._installed_points:  # accumulation only grows
                    self._installed_points = count
                    self.surface = surface
                    self.octree = tree
                    self.surface_version += 1
                    self.octree_version += 1
                    with self.metrics.lock:
                        self.metrics.rebuilds += 1
                    self._bump("surface", "octree")
            self._publish_map()
            done.set()

    def _publish_map(self) -> None:
        with self._lock:
            surface = self.surface
            octree = self.octree
            octree_version = self.octree_version
        if surface is not None:
            self.client.publish(
                TOPIC_TWIN_SURFACE, MsgType.POINTCLOUD, surface_to_cloud(surface)
            )
        if octree is not None:
            summary = {
                "version": octree_version,
                "resolution": octree.resolution,
                "bounds": octree.bounds.to_json(),
                "occupied": len(octree),
            }
            self.client.publish(TOPIC_TWIN_OCTREE, MsgType.STATUS, summary)

    # -- planning -----------------------------------------------------------------

    def get_octree_snapshot(self) -> OccupancyOctree | None:
        """Frozen octree for the planner worker (rebuilds replace, not mutate)."""
        with self._lock:
            return self.octree

    def request_plan(self, goal, budget: float, wait: bool = True, timeout: float | None = None) -> Path | None:
        """Publish a plan request from the current mirrored pose.

        With wait=True, blocks for the PATH reply and enters AUTONOMOUS on
        success (raises PlanRejected on planner errors). With wait=False the
        reply is handled by ingest when it arrives.
        """
        with self._lock:
            if self.octree is None:
                raise NoMapError("no octree yet; drive around or flush the map first")
            if self.mode is Mode.AUTONOMOUS:
                raise ModeError("already AUTONOMOUS")
            if self._last_pose is None:
                raise NoMapError("no pose received yet")
            if self._plan_pending:
                raise PlanRejected("Busy", "a plan request is already in flight")
            request = PlanRequest(
                start=self._last_pose.position,
                goal=tuple(float(g) for g in goal),
                robot_radius=self.config.robot_radius,
                time_budget=float(budget),
                goal_tolerance=self.config.goal_tolerance,
                bounds=self.config.plan_bounds or self.config.map_bounds,
                rng_seed=self.config.plan_seed,
            )
            self._plan_goal = request.goal
            self._plan_pending = True
            self._plan_reply = None
            self._plan_error = None
            self._plan_event.clear()
            with self.metrics.lock:
                self.metrics.plans_requested += 1
        self.client.publish(TOPIC_PLAN_REQUEST, MsgType.PLAN_REQUEST, request)
        if not wait:
            return None
        if not self._plan_event.wait(timeout if timeout is not None else budget + 30.0):
            with self._lock:
                self._plan_pending = False
            raise PlanRejected("Timeout", "no reply from planner service")
        with self._lock:
            if self._plan_error is not None:
                error, detail = self._plan_error
                raise PlanRejected(error, detail)
            return self.active_path

    def _extend_to_goal(self, path: Path) -> Path:
        """Append the exact requested goal when the final hop is free.

        The planner returns the cheapest terminal inside goal_tolerance; for
        execution we want the follower to park on the goal itself.
        """
        goal = self._plan_goal
        if goal is None or self.octree is None:
            return path
        gap = float(np.linalg.norm(np.subtract(path.waypoints[-1], goal)))
        if gap <= 1e-9:
            return path
        if check_segment(path.waypoints[-1], goal, self.config.robot_radius, self.octree):
            return path
        return Path(
            path.waypoints + (goal,),
            path.cost + gap,
            path.planner_id,
            path.iterations,
            path.elapsed,
        )

    def _on_plan_result(self, env: Envelope) -> None:
        path: Path = env.payload
        with self._lock:
            if not self._plan_pending:
                return  # unsolicited
            self._plan_pending = False
            path = self._extend_to_goal(path)
            self.active_path = path
            self._follower = WaypointFollower(
                path,
                gains=self.config.follower_gains,
                accept_radius=self.config.accept_radius,
                force_max=self.config.force_max,
                torque_max=self.config.torque_max,
            )
            self.autonomy_done.clear()
            self._set_mode(Mode.AUTONOMOUS)
            self._bump("path")
            with self.metrics.lock:
                self.metrics.plans_succeeded += 1
            self._plan_event.set()

    def _on_plan_status(self, env: Envelope) -> None:
        payload = env.payload if isinstance(env.payload, dict) else {}
        if payload.get("event") != "error":
            return
        with self._lock:
            if not self._plan_pending:
                return
            self._plan_pending = False
            self._plan_error = (payload.get("error", "Unknown"), payload.get("detail", ""))
            with self.metrics.lock:
                self.metrics.plans_failed += 1
            self._plan_event.set()

    # -- UI topics -------------------------------------------------------------------

    def _on_ui_axes(self, env: Envelope) -> None:
        payload = env.payload if isinstance(env.payload, dict) else {}
        axes = payload.get("axes")
        if not isinstance(axes, list) or len(axes) != 6:
            return
        try:
            self.teleop_relay(axes)
        except ModeError:
            pass  # stale axes after a mode switch; ignore

    def _on_ui_mode(self, env: Envelope) -> None:
        payload = env.payload if isinstance(env.payload, dict) else {}
        try:
            self.set_mode(payload.get("mode", ""))
        except (ValueError, ModeError) as e:
            log.info("ui mode change rejected: %s", e)

    def _on_ui_plan_request(self, env: Envelope) -> None:
        payload = env.payload if isinstance(env.payload, dict) else {}
        goal = payload.get("goal")
        budget = float(payload.get("budget", 1.0))
        if not isinstance(goal, list) or len(goal) != 3:
            return
        try:
            self.request_plan(goal, budget, wait=False)
        except (NoMapError, ModeError, PlanRejected) as e:
            log.info("ui plan request rejected: %s", e)
            self.client.publish(
                TOPIC_PLAN_STATUS,
                MsgType.STATUS,
                {"event": "rejected", "error": type(e).__name__, "detail": str(e)},
            )

    # -- state inspection ---------------------------------------------------------

    def staleness_s(self) -> float:
        with self._lock:
            if self._last_pose_recv_ns is None:
                return math.inf
            return (now_ns() - self._last_pose_recv_ns) * 1e-9

    def last_pose(self) -> Pose | None:
        with self._lock:
            return self._last_pose

    def snapshot(self, cursor: int | None = None) -> dict:
        """Versioned delta: fields changed since `cursor` plus the new cursor.

        Surface and octree bodies travel on their own topics; the snapshot
        carries their versions only.
        """
        with self._lock:
            changed: dict = {}
            include = lambda f: cursor is None or self._field_versions.get(f, 0) > cursor
            if include("pose") and self._last_pose is not None:
                changed["pose"] = _pose_to_dict(self._last_pose)
            if include("mode"):
                changed["mode"] = self.mode.value
            if include("path"):
                changed["path"] = _path_to_dict(self.active_path)
            if include("surface"):
                changed["surface_version"] = self.surface_version
                changed["surface_cells"] = (
                    self.surface.defined_count() if self.surface else 0
                )
            if include("octree"):
                changed["octree_version"] = self.octree_version
                changed["octree_occupied"] = len(self.octree) if self.octree else 0
            return {
                "cursor": self._version,
                "changed": changed,
                "staleness_s": self.staleness_s(),
            }

    def publish_snapshot(self, cursor: int | None) -> int:
        snap = self.snapshot(cursor)
        self.client.publish(TOPIC_TWIN_SNAPSHOT, MsgType.STATUS, snap)
        return snap["cursor"]

    def publish_metrics(self) -> None:
        metrics = self.metrics.to_dict()
        if self.collector.samples:
            report = build_delay_report(self.collector, 0)
            metrics["delays"] = [
                {"msg_type": s.msg_type, "n": s.n, "mean_ms": s.mean_ms,
                 "median_ms": s.median_ms, "p95_ms": s.p95_ms, "mean_bytes": s.mean_bytes}
                for s in report.stats
            ]
        self.client.publish(TOPIC_TWIN_METRICS, MsgType.STATUS, metrics)


class PlannerService:
    """Dedicated planning worker: PLAN_REQUEST in, PATH or error status out.

    Plans against frozen octree snapshots obtained from `octree_provider`;
    one request is served at a time, later ones queue.
    """

    def __init__(
        self,
        host: str,
        port: int,
        octree_provider,
        params: PlannerParams | None = None,
        variant: str = "RRT_STAR",
        name: str = "planner",
    ):
        self.octree_provider = octree_provider
        self.params = params or PlannerParams()
        self.variant = variant
        self._queue: queue.Queue[PlanRequest | None] = queue.Queue()
        self.client = BridgeClient(host, port, name=name)
        self.client.subscribe(TOPIC_PLAN_REQUEST, self._on_request)
        self._worker = threading.Thread(target=self._run, name=f"{name}-worker", daemon=True)
        self._worker.start()

    def _on_request(self, env: Envelope) -> None:
        self._queue.put(env.payload)

    def close(self) -> None:
        self._queue.put(None)
        self.client.close()

    def _run(self) -> None:
        while True:
            request = self._queue.get()
            if request is None:
                return
            tree = self.octree_provider()
            if tree is None:
                self._publish_error("NoMap", "planner has no octree snapshot")
                continue
            self.client.publish(
                TOPIC_PLAN_STATUS, MsgType.STATUS, {"event": "planning", "goal": list(request.goal)}
            )
            try:
                path = plan(request, tree, self.params, self.variant)
            except (StartInCollision, GoalInCollision) as e:
                self._publish_error(type(e).__name__, str(e))
            except NoPathFound as e:
                self._publish_error(
                    "NoPathFound", str(e), iterations=e.iterations, elapsed=e.elapsed
                )
            except Exception as e:  # surface planner bugs to the operator
                log.exception("planner worker failed")
                self._publish_error("PlannerError", str(e))
            else:
                self.client.publish(TOPIC_PLAN_RESULT, MsgType.PATH, path)

    def _publish_error(self, error: str, detail: str, **extra) -> None:
        payload = {"event": "error", "error": error, "detail": detail}
        payload.update(extra)
        self.client.publish(TOPIC_PLAN_STATUS, MsgType.STATUS, payload)
