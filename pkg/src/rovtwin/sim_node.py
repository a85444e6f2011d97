"""Physical-component process: dynamics loop, simulated SLAM, publishers.

Runs the fixed-step integrator, consumes wrench commands from the bridge,
and publishes the estimated pose, feature clouds, rendered camera frames,
and a ground-truth debug pose at configurable sim-time rates. Pacing is
controlled by real_time_factor: 1.0 tracks wall time, larger values run
faster, 0 runs flat out (headless tests).
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field

from .bridge import BridgeClient
from .envsim import (
    Heightmap,
    VehicleParams,
    VehicleState,
    resolve_ground_contact,
    step_dynamics,
)
from .messages import (
    TOPIC_CMD_WRENCH,
    TOPIC_SIM_IMAGE,
    TOPIC_SIM_TRUTH,
    TOPIC_SLAM_FEATURES,
    TOPIC_SLAM_POSE,
    Envelope,
    MsgType,
    Wrench,
)
from .perception import CameraModel, NoiseConfig, SlamSimulator

log = logging.getLogger(__name__)


@dataclass
class SimConfig:
    dt: float = 0.01
    pose_rate_hz: float = 20.0
    feature_rate_hz: float = 5.0
    image_rate_hz: float = 10.0
    truth_rate_hz: float = 20.0
    real_time_factor: float = 1.0  # 0 = unpaced
    start_position: tuple = (0.0, 0.0, -5.0)

    def steps_per(self, rate_hz: float) -> int | None:
        if rate_hz <= 0:
            return None
        return max(1, round(1.0 / (self.dt * rate_hz)))


class SimNode:
    """One simulated vehicle wired to the broker."""

    def __init__(
        self,
        host: str,
        port: int,
        hmap: Heightmap,
        params: VehicleParams | None = None,
        noise: NoiseConfig | None = None,
        cam: CameraModel | None = None,
        config: SimConfig | None = None,
        name: str = "sim",
    ):
        self.hmap = hmap
        self.params = params or VehicleParams()
        self.config = config or SimConfig()
        self.slam = SlamSimulator(noise or NoiseConfig(), cam or CameraModel())
        self._lock = threading.Lock()
        self.state = VehicleState.at(self.config.start_position)
        self._cmd = Wrench()
        self.cmd_received = 0
        self.contact_events = 0
        self.steps = 0
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self.client = BridgeClient(host, port, name=name)
        self.client.subscribe(TOPIC_CMD_WRENCH, self._on_cmd)

    def _on_cmd(self, env: Envelope) -> None:
        with self._lock:
            self._cmd = env.payload
            self.cmd_received += 1

    @property
    def true_state(self) -> VehicleState:
        with self._lock:
            return self.state

    def start(self) -> "SimNode":
        self._thread = threading.Thread(target=self.run, name="sim-loop", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5.0)
        self.client.close()

    def run(self, max_steps: int | None = None) -> None:
        cfg = self.config
        pose_every = cfg.steps_per(cfg.pose_rate_hz)
        feat_every = cfg.steps_per(cfg.feature_rate_hz)
        img_every = cfg.steps_per(cfg.image_rate_hz)
        truth_every = cfg.steps_per(cfg.truth_rate_hz)
        last_estimate = None
        wall_start = time.perf_counter()
        while not self._stop.is_set():
            if max_steps is not None and self.steps >= max_steps:
                return
            with self._lock:
                cmd = self._cmd
                state = self.state
            state = step_dynamics(state, cmd, self.params, cfg.dt)
            state, contact = resolve_ground_contact(state, self.hmap, self.params)
            with self._lock:
                self.state = state
                if contact:
                    self.contact_events += 1
            self.steps += 1

            if pose_every and self.steps % pose_every == 0:
                last_estimate = self.slam.estimate_pose(state, pose_every * cfg.dt)
                self.client.publish(TOPIC_SLAM_POSE, MsgType.POSE, last_estimate)
            if truth_every and self.steps % truth_every == 0:
                self.client.publish(TOPIC_SIM_TRUTH, MsgType.POSE, state.pose)
            if feat_every and self.steps % feat_every == 0:
                estimate = self.slam.observe_features(state, self.hmap, last_estimate)
                self.client.publish(TOPIC_SLAM_FEATURES, MsgType.POINTCLOUD, estimate.features)
            if img_every and self.steps % img_every == 0:
                frame = self.slam.render_image(state, self.hmap)
                self.client.publish(TOPIC_SIM_IMAGE, MsgType.IMAGE, frame)

            if cfg.real_time_factor > 0:
                target = wall_start + self.steps * cfg.dt / cfg.real_time_factor
                delay = target - time.perf_counter()
                if delay > 0:
                    time.sleep(delay)
