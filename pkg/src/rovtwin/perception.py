"""Simulated visual SLAM over the seafloor heightmap.

Stands in for a real sparse visual SLAM pipeline: pose estimates are truth
corrupted by Gaussian noise plus a random-walk drift bias, and feature
clouds come from raycasting a downward camera cone onto the heightmap.
Observation noise is applied to each hit, and the hit is then re-expressed
in the world frame through the *estimated* pose, so localization error
propagates into the map exactly the way it does in the real failure mode.

Feature tracking, loop closure, and image-based pose recovery are not
modeled. All randomness comes from one seeded generator owned by the
simulator, so outputs are reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .envsim import Heightmap, VehicleState
from .geom import quat_from_rotvec, quat_multiply, quat_normalize, quat_to_matrix
from .messages import ImageFrame, PointCloud, Pose


@dataclass(frozen=True)
class NoiseConfig:
    sigma_pos: float = 0.05  # m, isotropic position noise
    sigma_ang: float = 0.01  # rad, axis-angle orientation noise
    sigma_obs: float = 0.05  # m, per-feature observation noise
    drift_rate: float = 0.0  # m/sqrt(s), random-walk bias growth
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("sigma_pos", "sigma_ang", "sigma_obs", "drift_rate"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class CameraModel:
    fov_half_angle: float = math.radians(35.0)  # rad, around the down axis
    max_range: float = 12.0  # m
    features_per_frame: int = 200
    image_width: int = 320
    image_height: int = 240

    def __post_init__(self):
        if not (0.0 < self.fov_half_angle < math.pi / 2):
            raise ValueError("fov_half_angle must be in (0, pi/2)")
        if self.max_range <= 0:
            raise ValueError("max_range must be > 0")
        if self.features_per_frame < 0:
            raise ValueError("features_per_frame must be >= 0")
        if self.image_width < 1 or self.image_height < 1:
            raise ValueError("image dimensions must be >= 1")


@dataclass(frozen=True)
class SlamEstimate:
    """Estimated pose plus the feature cloud registered through it."""

    est_pose: Pose
    features: PointCloud
    stamp_ns: int


def raycast_heightmap(
    hmap: Heightmap,
    origin: np.ndarray,
    directions: np.ndarray,
    max_range: float,
    march_step: float | None = None,
    refine_iters: int = 45,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Intersect unit-direction rays from one origin with the bilinear floor.

    Marches at `march_step` (default half a grid cell) to bracket the first
    surface crossing, then bisects the bracket. Returns (hit_mask, points,
    ranges); points/ranges are only meaningful where hit_mask is true.
    """
    dirs = np.asarray(directions, dtype=float)
    n = dirs.shape[0]
    if n == 0:
        return np.zeros(0, bool), np.zeros((0, 3)), np.zeros(0)
    step = march_step if march_step is not None else hmap.cell_size * 0.5
    ts = np.arange(0.0, max_range + step, step)
    ts[-1] = min(ts[-1], max_range)

    # above-floor clearance along each ray; first sign change brackets the hit
    px = origin[0] + dirs[:, 0][:, None] * ts[None, :]
    py = origin[1] + dirs[:, 1][:, None] * ts[None, :]
    pz = origin[2] + dirs[:, 2][:, None] * ts[None, :]
    clearance = pz - hmap.depth_at(px, py)

    below = clearance <= 0.0
    any_hit = below.any(axis=1)
    first = np.where(any_hit, below.argmax(axis=1), 0)

    hit_mask = any_hit.copy()
    points = np.zeros((n, 3))
    ranges = np.zeros(n)
    idx = np.nonzero(hit_mask)[0]
    if idx.size:
        lo = ts[np.maximum(first[idx] - 1, 0)]
        hi = ts[first[idx]]
        # rays already below the floor at t=0 hit immediately
        started_below = first[idx] == 0
        lo = np.where(started_below, 0.0, lo)
        hi = np.where(started_below, 0.0, hi)
        d = dirs[idx]
        for _ in range(refine_iters):
            mid = 0.5 * (lo + hi)
            cz = origin[2] + d[:, 2] * mid - hmap.depth_at(
                origin[0] + d[:, 0] * mid, origin[1] + d[:, 1] * mid
            )
            above = cz > 0.0
            lo = np.where(above, mid, lo)
            hi = np.where(above, hi, mid)
        t_hit = hi
        points[idx, 0] = origin[0] + d[:, 0] * t_hit
        points[idx, 1] = origin[1] + d[:, 1] * t_hit
        points[idx, 2] = origin[2] + d[:, 2] * t_hit
        ranges[idx] = t_hit
    return hit_mask, points, ranges


def pixel_directions(cam: CameraModel) -> np.ndarray:
    """Body-frame unit ray directions for every pixel, row-major.

    The camera looks along body -z. Image columns map to body +y, image rows
    map to body -x (row 0 is the forward edge). fov_half_angle spans the half
    width; rows scale by the aspect ratio.
    """
    t = math.tan(cam.fov_half_angle)
    cols = (np.arange(cam.image_width) + 0.5 - cam.image_width / 2) / (cam.image_width / 2)
    rows = (np.arange(cam.image_height) + 0.5 - cam.image_height / 2) / (cam.image_height / 2)
    aspect = cam.image_height / cam.image_width
    yc = cols[None, :] * t
    xc = -rows[:, None] * t * aspect
    dirs = np.stack(
        [
            np.broadcast_to(xc, (cam.image_height, cam.image_width)),
            np.broadcast_to(yc, (cam.image_height, cam.image_width)),
            np.full((cam.image_height, cam.image_width), -1.0),
        ],
        axis=-1,
    ).reshape(-1, 3)
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


class SlamSimulator:
    """Owns the noise streams and drift state for one simulated SLAM session."""

    def __init__(self, noise: NoiseConfig, cam: CameraModel):
        self.noise = noise
        self.cam = cam
        self.rng = np.random.default_rng(noise.rng_seed)
        self.drift_bias = np.zeros(3)
        self._feature_seq = 0

    def estimate_pose(self, true_state: VehicleState, elapsed: float) -> Pose:
        """Noisy pose estimate; `elapsed` is seconds since the last estimate.

        Draw order per call: drift step (3), position noise (3), axis-angle
        noise (3) — fixed so seeded runs reproduce exactly.
        """
        if elapsed < 0:
            raise ValueError("elapsed must be >= 0")
        cfg = self.noise
        self.drift_bias = self.drift_bias + self.rng.normal(
            0.0, cfg.drift_rate * math.sqrt(elapsed), 3
        )
        pos_noise = self.rng.normal(0.0, cfg.sigma_pos, 3)
        rot_noise = self.rng.normal(0.0, cfg.sigma_ang, 3)
        true_pose = true_state.pose
        position = np.array(true_pose.position) + self.drift_bias + pos_noise
        orientation = quat_normalize(
            quat_multiply(true_pose.orientation, quat_from_rotvec(rot_noise))
        )
        return Pose(tuple(position), orientation, true_pose.stamp_ns, true_pose.frame)

    def observe_features(
        self,
        true_state: VehicleState,
        hmap: Heightmap,
        est_pose: Pose | None = None,
    ) -> SlamEstimate:
        """One SLAM frame: cone raycast, observation noise, registration.

        Rays are solid-angle uniform inside the downward cone. Hits beyond
        max_range (after noise) are dropped, so the feature cloud always
        stays within max_range of the estimated pose.
        """
        if est_pose is None:
            est_pose = self.estimate_pose(true_state, 0.0)
        cam = self.cam
        n = cam.features_per_frame
        cos_t = self.rng.uniform(math.cos(cam.fov_half_angle), 1.0, n)
        phi = self.rng.uniform(0.0, 2.0 * math.pi, n)
        sin_t = np.sqrt(1.0 - cos_t**2)
        dirs_body = np.stack([sin_t * np.cos(phi), sin_t * np.sin(phi), -cos_t], axis=1)

        true_pose = true_state.pose
        rot_true = quat_to_matrix(true_pose.orientation)
        p_true = np.array(true_pose.position)
        dirs_world = dirs_body @ rot_true.T

        hit_mask, hits, _ = raycast_heightmap(hmap, p_true, dirs_world, cam.max_range)
        hits = hits[hit_mask]
        if len(hits):
            hits = hits + self.rng.normal(0.0, self.noise.sigma_obs, hits.shape)
            in_range = np.linalg.norm(hits - p_true, axis=1) <= cam.max_range
            hits = hits[in_range]
        if len(hits):
            # map through estimated pose: world -> true body -> estimated world
            body = (hits - p_true) @ rot_true
            rot_est = quat_to_matrix(est_pose.orientation)
            hits = body @ rot_est.T + np.array(est_pose.position)

        cloud = PointCloud(hits.astype(np.float32), true_pose.stamp_ns, self._feature_seq)
        self._feature_seq += 1
        return SlamEstimate(est_pose, cloud, true_pose.stamp_ns)

    def render_image(self, true_state: VehicleState, hmap: Heightmap) -> ImageFrame:
        """Depth-shaded raster: 255*(1 - range/max_range), 0 where rays miss."""
        cam = self.cam
        dirs_body = pixel_directions(cam)
        rot = quat_to_matrix(true_state.pose.orientation)
        dirs_world = dirs_body @ rot.T
        origin = np.array(true_state.pose.position)
        hit_mask, _, ranges = raycast_heightmap(
            hmap, origin, dirs_world, cam.max_range, refine_iters=30
        )
        shade = np.clip(1.0 - ranges / cam.max_range, 0.0, 1.0)
        values = np.where(hit_mask, np.rint(255.0 * shade), 0.0).astype(np.uint8)
        return ImageFrame(
            cam.image_width,
            cam.image_height,
            values.tobytes(),
            "GRAY8",
            true_state.pose.stamp_ns,
        )
