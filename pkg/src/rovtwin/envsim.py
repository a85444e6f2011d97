"""Simulated physical side: seafloor heightmap plus 6-DOF rigid-body dynamics.

The vehicle is a rigid body driven by body-frame wrench commands, with
quadratic diagonal drag and a vertical buoyancy/weight pair. Hydrodynamic
niceties (added mass, Coriolis coupling, currents) are deliberately out:
the diagonal quadratic model gives the right qualitative dissipation for
teleoperation at a fraction of the complexity.

The integrator is semi-implicit Euler: accelerations from the pre-step
state, velocities updated first, pose advanced with the updated velocities
(rotation taken from the pre-step orientation). Identical inputs produce
bit-identical trajectories.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geom import Quat, Vec3, quat_from_rotvec, quat_multiply, quat_normalize, quat_to_matrix, vec3
from .messages import Pose, Twist, Wrench

GRAVITY = 9.81


class ParamError(ValueError):
    """Out-of-range simulation parameter."""


class Heightmap:
    """Regular xy grid of seafloor depths (z < 0), bilinear in between.

    depth[ix, iy] is the depth at world (origin_x + ix*cell, origin_y + iy*cell).
    Queries outside the grid clamp to the nearest border.
    """

    def __init__(self, origin: tuple[float, float], cell_size: float, depth):
        d = np.asarray(depth, dtype=float)
        if d.ndim != 2 or d.shape[0] < 2 or d.shape[1] < 2:
            raise ParamError(f"depth grid must be at least 2x2, got {d.shape}")
        if cell_size <= 0:
            raise ParamError(f"cell_size must be > 0, got {cell_size}")
        if not np.all(np.isfinite(d)):
            raise ParamError("depth grid has non-finite entries")
        if not np.all(d < 0):
            raise ParamError("all depths must be below the surface (z < 0)")
        self.origin = (float(origin[0]), float(origin[1]))
        self.cell_size = float(cell_size)
        self.depth = d
        self.depth.setflags(write=False)

    @property
    def nx(self) -> int:
        return self.depth.shape[0]

    @property
    def ny(self) -> int:
        return self.depth.shape[1]

    @property
    def extent(self) -> tuple[float, float, float, float]:
        """(xmin, ymin, xmax, ymax) of the grid nodes."""
        ox, oy = self.origin
        return (ox, oy, ox + (self.nx - 1) * self.cell_size, oy + (self.ny - 1) * self.cell_size)

    def depth_at(self, x, y):
        """Bilinear depth at world xy; accepts scalars or same-shape arrays."""
        gx = (np.asarray(x, dtype=float) - self.origin[0]) / self.cell_size
        gy = (np.asarray(y, dtype=float) - self.origin[1]) / self.cell_size
        gx = np.clip(gx, 0.0, self.nx - 1.0)
        gy = np.clip(gy, 0.0, self.ny - 1.0)
        ix = np.minimum(gx.astype(int), self.nx - 2)
        iy = np.minimum(gy.astype(int), self.ny - 2)
        fx = gx - ix
        fy = gy - iy
        d = self.depth
        val = (
            d[ix, iy] * (1 - fx) * (1 - fy)
            + d[ix + 1, iy] * fx * (1 - fy)
            + d[ix, iy + 1] * (1 - fx) * fy
            + d[ix + 1, iy + 1] * fx * fy
        )
        return float(val) if np.isscalar(x) or np.asarray(x).ndim == 0 else val

    def min_depth(self) -> float:
        return float(self.depth.min())

    def max_depth(self) -> float:
        return float(self.depth.max())

    def to_json(self) -> dict:
        return {
            "origin": list(self.origin),
            "cell_size": self.cell_size,
            "nx": self.nx,
            "ny": self.ny,
            "depth": [float(v) for v in self.depth.reshape(-1)],
        }

    @staticmethod
    def from_json(obj: dict) -> "Heightmap":
        nx, ny = int(obj["nx"]), int(obj["ny"])
        depth = np.asarray(obj["depth"], dtype=float).reshape(nx, ny)
        return Heightmap(tuple(obj["origin"]), float(obj["cell_size"]), depth)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_json(), f)

    @staticmethod
    def load(path) -> "Heightmap":
        with open(path, encoding="utf-8") as f:
            return Heightmap.from_json(json.load(f))


def seafloor_depth(hmap: Heightmap, xy) -> float:
    """Bilinear seafloor depth at world xy (clamped at the borders)."""
    return hmap.depth_at(float(xy[0]), float(xy[1]))


def generate_harbor(
    seed: int,
    nx: int = 97,
    ny: int = 97,
    cell_size: float = 0.5,
    base_depth: float = -10.0,
    relief: float = 4.0,
    origin: tuple[float, float] = (0.0, 0.0),
) -> Heightmap:
    """Fractal-noise harbor floor: layered bilinear value noise from a seed."""
    if base_depth + relief / 2 >= 0:
        raise ParamError("harbor must stay below the surface")
    rng = np.random.default_rng(seed)
    acc = np.zeros((nx, ny))
    total = 0.0
    amp = 1.0
    for n in (4, 8, 16, 32):
        coarse = rng.uniform(-1.0, 1.0, (n + 1, n + 1))
        gx = np.linspace(0.0, n, nx)
        gy = np.linspace(0.0, n, ny)
        ix = np.minimum(gx.astype(int), n - 1)
        iy = np.minimum(gy.astype(int), n - 1)
        fx = (gx - ix)[:, None]
        fy = (gy - iy)[None, :]
        c00 = coarse[np.ix_(ix, iy)]
        c10 = coarse[np.ix_(ix + 1, iy)]
        c01 = coarse[np.ix_(ix, iy + 1)]
        c11 = coarse[np.ix_(ix + 1, iy + 1)]
        acc += amp * (c00 * (1 - fx) * (1 - fy) + c10 * fx * (1 - fy)
                      + c01 * (1 - fx) * fy + c11 * fx * fy)
        total += amp
        amp *= 0.5
    depth = base_depth + (relief / 2.0) * (acc / total)
    return Heightmap(origin, cell_size, depth)


@dataclass(frozen=True)
class VehicleParams:
    """BlueROV2-class defaults; every field is config-overridable."""

    mass: float = 11.0  # kg
    inertia_diag: Vec3 = (0.2, 0.25, 0.3)  # kg m^2
    drag_lin: Vec3 = (30.0, 45.0, 60.0)  # N (s/m)^2, quadratic, body axes
    drag_ang: Vec3 = (1.0, 1.0, 1.5)  # N m (s/rad)^2
    buoyancy_force: float = 11.0 * GRAVITY  # N, world +z
    weight_force: float = 11.0 * GRAVITY  # N, world -z
    collision_radius: float = 0.3  # m
    force_max: float = 50.0  # N, per-component actuator clamp
    torque_max: float = 5.0  # N m

    def __post_init__(self):
        if self.mass <= 0:
            raise ParamError("mass must be > 0")
        if any(i <= 0 for i in self.inertia_diag):
            raise ParamError("inertia_diag must be > 0")
        if any(d < 0 for d in self.drag_lin) or any(d < 0 for d in self.drag_ang):
            raise ParamError("drag coefficients must be >= 0")
        if self.buoyancy_force < 0 or self.weight_force < 0:
            raise ParamError("buoyancy/weight must be >= 0")
        if self.collision_radius <= 0:
            raise ParamError("collision_radius must be > 0")
        object.__setattr__(self, "inertia_diag", vec3(self.inertia_diag))
        object.__setattr__(self, "drag_lin", vec3(self.drag_lin))
        object.__setattr__(self, "drag_ang", vec3(self.drag_ang))

    def to_json(self) -> dict:
        return {
            "mass": self.mass,
            "inertia_diag": list(self.inertia_diag),
            "drag_lin": list(self.drag_lin),
            "drag_ang": list(self.drag_ang),
            "buoyancy_force": self.buoyancy_force,
            "weight_force": self.weight_force,
            "collision_radius": self.collision_radius,
            "force_max": self.force_max,
            "torque_max": self.torque_max,
        }

    @staticmethod
    def from_json(obj: dict) -> "VehicleParams":
        return VehicleParams(**{k: tuple(v) if isinstance(v, list) else v for k, v in obj.items()})


@dataclass(frozen=True)
class VehicleState:
    """True pose (world) plus body-frame twist of the simulated vehicle."""

    pose: Pose
    twist: Twist = Twist()

    @property
    def stamp_ns(self) -> int:
        return self.pose.stamp_ns

    @staticmethod
    def at(position, orientation: Quat = (1.0, 0.0, 0.0, 0.0), stamp_ns: int = 0) -> "VehicleState":
        return VehicleState(Pose(vec3(position), orientation, stamp_ns))


MAX_DT = 0.05


def step_dynamics(state: VehicleState, cmd: Wrench, params: VehicleParams, dt: float) -> VehicleState:
    """One semi-implicit Euler step under a (clamped) wrench command."""
    if not (0.0 < dt <= MAX_DT):
        raise ParamError(f"dt must be in (0, {MAX_DT}], got {dt}")
    cmd = cmd.clamped(params.force_max, params.torque_max)

    q = state.pose.orientation
    rot = quat_to_matrix(q)
    v = np.array(state.twist.linear)
    w = np.array(state.twist.angular)

    drag = -np.array(params.drag_lin) * v * np.abs(v)
    net_vertical = np.array([0.0, 0.0, params.buoyancy_force - params.weight_force])
    accel = (np.array(cmd.force) + drag + rot.T @ net_vertical) / params.mass

    inertia = np.array(params.inertia_diag)
    ang_drag = -np.array(params.drag_ang) * w * np.abs(w)
    ang_accel = (np.array(cmd.torque) + ang_drag) / inertia

    v_new = v + accel * dt
    w_new = w + ang_accel * dt

    pos_new = np.array(state.pose.position) + rot @ v_new * dt
    q_new = quat_normalize(quat_multiply(q, quat_from_rotvec(w_new * dt)))
    stamp_new = state.pose.stamp_ns + round(dt * 1e9)

    return VehicleState(
        Pose(tuple(pos_new), q_new, stamp_new, state.pose.frame),
        Twist(tuple(v_new), tuple(w_new)),
    )


def check_ground_contact(state: VehicleState, hmap: Heightmap, params: VehicleParams) -> bool:
    """True iff the collision sphere dips below the seafloor at the pose xy."""
    x, y, z = state.pose.position
    return z - params.collision_radius < seafloor_depth(hmap, (x, y))


def resolve_ground_contact(
    state: VehicleState, hmap: Heightmap, params: VehicleParams
) -> tuple[VehicleState, bool]:
    """Clamp-to-floor contact response: zero downward velocity, lift z.

    Returns (possibly corrected state, contact flag). No bounce.
    """
    if not check_ground_contact(state, hmap, params):
        return state, False
    x, y, z = state.pose.position
    floor = seafloor_depth(hmap, (x, y))
    rot = quat_to_matrix(state.pose.orientation)
    v_world = rot @ np.array(state.twist.linear)
    if v_world[2] < 0.0:
        v_world[2] = 0.0
    v_body = rot.T @ v_world
    corrected = VehicleState(
        Pose((x, y, floor + params.collision_radius), state.pose.orientation,
             state.pose.stamp_ns, state.pose.frame),
        Twist(tuple(v_body), state.twist.angular),
    )
    return corrected, True
