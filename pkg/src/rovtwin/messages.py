"""Wire-visible message types and their byte-exact serialized form.

Every inter-component exchange in the stack uses exactly one frame format:
a 4-byte little-endian unsigned length prefix followed by a UTF-8 JSON
object {topic, msg_type, seq, stamp_ns, payload}. Point cloud and image
payloads carry their bulk data as base64; everything else is plain JSON.
The same frames travel over raw TCP and inside WebSocket binary frames.

All message objects are immutable after construction and safe to share
between threads; encode/decode are pure functions.
"""

from __future__ import annotations

import base64
import json
import math
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Union

import numpy as np

from .geom import Box, Quat, Vec3, vec3

# Reserved broker control topic (SUBSCRIBE / UNSUBSCRIBE / acks travel here).
CONTROL_TOPIC = "@control"

# Topic names used by the stock sim / twin wiring.
TOPIC_CMD_WRENCH = "cmd/wrench"
TOPIC_SLAM_POSE = "slam/pose"
TOPIC_SLAM_FEATURES = "slam/features"
TOPIC_SIM_IMAGE = "sim/image"
TOPIC_SIM_TRUTH = "sim/truth"
TOPIC_PLAN_REQUEST = "plan/request"
TOPIC_PLAN_RESULT = "plan/result"
TOPIC_PLAN_STATUS = "plan/status"
TOPIC_TWIN_SNAPSHOT = "twin/snapshot"
TOPIC_TWIN_METRICS = "twin/metrics"
TOPIC_TWIN_SURFACE = "twin/surface"
TOPIC_TWIN_OCTREE = "twin/octree"
TOPIC_UI_AXES = "ui/axes"
TOPIC_UI_PLAN_REQUEST = "ui/plan_request"
TOPIC_UI_MODE = "ui/mode"

MAX_FRAME_BYTES = 64 * 1024 * 1024


class MsgType(str, Enum):
    POINTCLOUD = "POINTCLOUD"
    IMAGE = "IMAGE"
    POSE = "POSE"
    WRENCH = "WRENCH"
    PATH = "PATH"
    PLAN_REQUEST = "PLAN_REQUEST"
    STATUS = "STATUS"


class EncodeError(ValueError):
    """Envelope violates its invariants (non-finite field, bad shape...)."""


class DecodeError(ValueError):
    """Malformed frame. `offset` is the byte offset of the problem."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class NeedMoreData(Exception):
    """Frame is truncated; feed more bytes and retry."""


@dataclass(frozen=True)
class Pose:
    """Position + unit quaternion (w,x,y,z), world frame, z-up, stamped."""

    position: Vec3
    orientation: Quat = (1.0, 0.0, 0.0, 0.0)
    stamp_ns: int = 0
    frame: str = "world"

    def __post_init__(self):
        object.__setattr__(self, "position", vec3(self.position))
        q = self.orientation
        object.__setattr__(self, "orientation", tuple(float(c) for c in q))


@dataclass(frozen=True)
class Twist:
    """Body-frame linear (m/s) and angular (rad/s) velocity."""

    linear: Vec3 = (0.0, 0.0, 0.0)
    angular: Vec3 = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "linear", vec3(self.linear))
        object.__setattr__(self, "angular", vec3(self.angular))


@dataclass(frozen=True)
class Wrench:
    """Body-frame force (N) and torque (N*m) command."""

    force: Vec3 = (0.0, 0.0, 0.0)
    torque: Vec3 = (0.0, 0.0, 0.0)
    stamp_ns: int = 0

    def __post_init__(self):
        object.__setattr__(self, "force", vec3(self.force))
        object.__setattr__(self, "torque", vec3(self.torque))

    def clamped(self, force_max: float, torque_max: float) -> "Wrench":
        cf = tuple(min(max(c, -force_max), force_max) for c in self.force)
        ct = tuple(min(max(c, -torque_max), torque_max) for c in self.torque)
        return Wrench(cf, ct, self.stamp_ns)


class PointCloud:
    """World-frame points, stored as an (n, 3) float32 array.

    float32 is the wire precision: values survive encode/decode bit-exactly.
    """

    __slots__ = ("points", "stamp_ns", "seq")

    def __init__(self, points, stamp_ns: int = 0, seq: int = 0):
        arr = np.asarray(points, dtype=np.float32)
        if arr.size == 0:
            arr = arr.reshape(0, 3)
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise ValueError(f"points must be (n, 3), got {arr.shape}")
        self.points = np.ascontiguousarray(arr)
        self.points.setflags(write=False)
        self.stamp_ns = int(stamp_ns)
        self.seq = int(seq)

    def __len__(self) -> int:
        return self.points.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, PointCloud):
            return NotImplemented
        return (
            self.stamp_ns == other.stamp_ns
            and self.seq == other.seq
            and np.array_equal(self.points, other.points)
        )

    def __repr__(self) -> str:
        return f"PointCloud(n={len(self)}, stamp_ns={self.stamp_ns}, seq={self.seq})"


@dataclass(frozen=True)
class ImageFrame:
    """GRAY8 raster; data length is exactly width * height."""

    width: int
    height: int
    data: bytes
    encoding: str = "GRAY8"
    stamp_ns: int = 0


@dataclass(frozen=True)
class Path:
    """Planner output: ordered waypoints, first = start, last near goal."""

    waypoints: tuple[Vec3, ...]
    cost: float
    planner_id: str  # "RRT" | "RRT_STAR"
    iterations: int
    elapsed: float

    def __post_init__(self):
        object.__setattr__(self, "waypoints", tuple(vec3(w) for w in self.waypoints))


@dataclass(frozen=True)
class PlanRequest:
    start: Vec3
    goal: Vec3
    robot_radius: float
    time_budget: float
    goal_tolerance: float
    bounds: Box
    rng_seed: int

    def __post_init__(self):
        object.__setattr__(self, "start", vec3(self.start))
        object.__setattr__(self, "goal", vec3(self.goal))


# STATUS payloads are free-form JSON objects.
Payload = Union[Pose, Twist, Wrench, PointCloud, ImageFrame, Path, PlanRequest, dict]

PAYLOAD_CLASSES = {
    MsgType.POSE: Pose,
    MsgType.WRENCH: Wrench,
    MsgType.POINTCLOUD: PointCloud,
    MsgType.IMAGE: ImageFrame,
    MsgType.PATH: Path,
    MsgType.PLAN_REQUEST: PlanRequest,
    MsgType.STATUS: dict,
}


@dataclass(frozen=True)
class Envelope:
    """Typed, timestamped, sequenced wrapper routed by topic.

    seq increases by exactly 1 per (publisher, topic) stream; stamp_ns is the
    shared monotonic clock at publish.
    """

    topic: str
    msg_type: MsgType
    seq: int
    stamp_ns: int
    payload: Payload


def _require_finite(name: str, *values: float) -> None:
    for v in values:
        if not math.isfinite(v):
            raise EncodeError(f"non-finite value in {name}: {v!r}")


def _check_quat(q: Quat) -> None:
    _require_finite("orientation", *q)
    n = math.sqrt(sum(c * c for c in q))
    if abs(n - 1.0) > 1e-9:
        raise EncodeError(f"orientation quaternion norm {n} not within 1e-9 of 1")


def encode_payload(msg_type: MsgType, payload: Payload) -> dict:
    """Payload object -> plain JSON dict per the wire schema."""
    if msg_type is MsgType.POSE:
        p: Pose = payload
        _require_finite("position", *p.position)
        _check_quat(p.orientation)
        return {
            "position": list(p.position),
            "orientation": list(p.orientation),
            "stamp_ns": p.stamp_ns,
            "frame": p.frame,
        }
    if msg_type is MsgType.WRENCH:
        w: Wrench = payload
        _require_finite("force", *w.force)
        _require_finite("torque", *w.torque)
        return {"force": list(w.force), "torque": list(w.torque), "stamp_ns": w.stamp_ns}
    if msg_type is MsgType.POINTCLOUD:
        pc: PointCloud = payload
        if not np.all(np.isfinite(pc.points)):
            raise EncodeError("non-finite point in cloud")
        raw = pc.points.astype("<f4", copy=False).tobytes()
        return {
            "n": len(pc),
            "data": base64.b64encode(raw).decode("ascii"),
            "stamp_ns": pc.stamp_ns,
            "seq": pc.seq,
        }
    if msg_type is MsgType.IMAGE:
        im: ImageFrame = payload
        if im.encoding != "GRAY8":
            raise EncodeError(f"unsupported encoding {im.encoding!r}")
        if len(im.data) != im.width * im.height:
            raise EncodeError(
                f"image data length {len(im.data)} != {im.width}x{im.height}"
            )
        return {
            "width": im.width,
            "height": im.height,
            "encoding": im.encoding,
            "data": base64.b64encode(im.data).decode("ascii"),
            "stamp_ns": im.stamp_ns,
        }
    if msg_type is MsgType.PATH:
        pt: Path = payload
        for wp in pt.waypoints:
            _require_finite("waypoint", *wp)
        _require_finite("cost/elapsed", pt.cost, pt.elapsed)
        return {
            "waypoints": [list(w) for w in pt.waypoints],
            "cost": pt.cost,
            "planner_id": pt.planner_id,
            "iterations": pt.iterations,
            "elapsed": pt.elapsed,
        }
    if msg_type is MsgType.PLAN_REQUEST:
        rq: PlanRequest = payload
        _require_finite("start", *rq.start)
        _require_finite("goal", *rq.goal)
        _require_finite("scalars", rq.robot_radius, rq.time_budget, rq.goal_tolerance)
        return {
            "start": list(rq.start),
            "goal": list(rq.goal),
            "robot_radius": rq.robot_radius,
            "time_budget": rq.time_budget,
            "goal_tolerance": rq.goal_tolerance,
            "bounds": rq.bounds.to_json(),
            "rng_seed": rq.rng_seed,
        }
    if msg_type is MsgType.STATUS:
        if not isinstance(payload, dict):
            raise EncodeError("STATUS payload must be a JSON object")
        return payload
    raise EncodeError(f"unknown msg_type {msg_type!r}")


def _expect_keys(obj: dict, keys: set[str], msg_type: MsgType, offset: int) -> None:
    if not isinstance(obj, dict):
        raise DecodeError(f"{msg_type.value} payload is not an object", offset)
    if set(obj.keys()) != keys:
        raise DecodeError(
            f"{msg_type.value} payload keys {sorted(obj.keys())} != {sorted(keys)}",
            offset,
        )


def _vec(obj, n: int, what: str, offset: int) -> tuple:
    if not isinstance(obj, list) or len(obj) != n:
        raise DecodeError(f"{what} must be a {n}-element array", offset)
    try:
        return tuple(float(c) for c in obj)
    except (TypeError, ValueError):
        raise DecodeError(f"{what} has non-numeric entries", offset) from None


def decode_payload(msg_type: MsgType, obj: Any, offset: int = 0) -> Payload:
    """Plain JSON dict -> payload object; schema violations -> DecodeError."""
    if msg_type is MsgType.POSE:
        _expect_keys(obj, {"position", "orientation", "stamp_ns", "frame"}, msg_type, offset)
        pose = Pose(
            _vec(obj["position"], 3, "position", offset),
            _vec(obj["orientation"], 4, "orientation", offset),
            int(obj["stamp_ns"]),
            str(obj["frame"]),
        )
        n = math.sqrt(sum(c * c for c in pose.orientation))
        if abs(n - 1.0) > 1e-9:
            raise DecodeError("orientation not unit-norm", offset)
        return pose
    if msg_type is MsgType.WRENCH:
        _expect_keys(obj, {"force", "torque", "stamp_ns"}, msg_type, offset)
        return Wrench(
            _vec(obj["force"], 3, "force", offset),
            _vec(obj["torque"], 3, "torque", offset),
            int(obj["stamp_ns"]),
        )
    if msg_type is MsgType.POINTCLOUD:
        _expect_keys(obj, {"n", "data", "stamp_ns", "seq"}, msg_type, offset)
        n = int(obj["n"])
        try:
            raw = base64.b64decode(obj["data"], validate=True)
        except Exception:
            raise DecodeError("invalid base64 in point cloud", offset) from None
        if len(raw) != 12 * n:
            raise DecodeError(f"cloud data is {len(raw)} bytes, expected {12 * n}", offset)
        pts = np.frombuffer(raw, dtype="<f4").reshape(n, 3)
        return PointCloud(pts, int(obj["stamp_ns"]), int(obj["seq"]))
    if msg_type is MsgType.IMAGE:
        _expect_keys(obj, {"width", "height", "encoding", "data", "stamp_ns"}, msg_type, offset)
        w, h = int(obj["width"]), int(obj["height"])
        if obj["encoding"] != "GRAY8":
            raise DecodeError(f"unsupported encoding {obj['encoding']!r}", offset)
        try:
            raw = base64.b64decode(obj["data"], validate=True)
        except Exception:
            raise DecodeError("invalid base64 in image", offset) from None
        if len(raw) != w * h:
            raise DecodeError(f"image data is {len(raw)} bytes, expected {w * h}", offset)
        return ImageFrame(w, h, raw, "GRAY8", int(obj["stamp_ns"]))
    if msg_type is MsgType.PATH:
        _expect_keys(obj, {"waypoints", "cost", "planner_id", "iterations", "elapsed"}, msg_type, offset)
        if not isinstance(obj["waypoints"], list):
            raise DecodeError("waypoints must be an array", offset)
        wps = tuple(_vec(w, 3, "waypoint", offset) for w in obj["waypoints"])
        if obj["planner_id"] not in ("RRT", "RRT_STAR"):
            raise DecodeError(f"unknown planner_id {obj['planner_id']!r}", offset)
        return Path(wps, float(obj["cost"]), str(obj["planner_id"]),
                    int(obj["iterations"]), float(obj["elapsed"]))
    if msg_type is MsgType.PLAN_REQUEST:
        _expect_keys(
            obj,
            {"start", "goal", "robot_radius", "time_budget", "goal_tolerance", "bounds", "rng_seed"},
            msg_type,
            offset,
        )
        try:
            bounds = Box.from_json(obj["bounds"])
        except (KeyError, TypeError, ValueError) as e:
            raise DecodeError(f"bad bounds: {e}", offset) from None
        return PlanRequest(
            _vec(obj["start"], 3, "start", offset),
            _vec(obj["goal"], 3, "goal", offset),
            float(obj["robot_radius"]),
            float(obj["time_budget"]),
            float(obj["goal_tolerance"]),
            bounds,
            int(obj["rng_seed"]),
        )
    if msg_type is MsgType.STATUS:
        if not isinstance(obj, dict):
            raise DecodeError("STATUS payload is not an object", offset)
        return obj
    raise DecodeError(f"unknown msg_type {msg_type!r}", offset)


def encode(envelope: Envelope) -> bytes:
    """Envelope -> length-prefixed JSON frame."""
    if envelope.seq < 0:
        raise EncodeError(f"negative seq {envelope.seq}")
    if envelope.stamp_ns < 0:
        raise EncodeError(f"negative stamp_ns {envelope.stamp_ns}")
    if not envelope.topic:
        raise EncodeError("empty topic")
    expected = PAYLOAD_CLASSES[envelope.msg_type]
    if not isinstance(envelope.payload, expected):
        raise EncodeError(
            f"payload {type(envelope.payload).__name__} does not match "
            f"msg_type {envelope.msg_type.value}"
        )
    obj = {
        "topic": envelope.topic,
        "msg_type": envelope.msg_type.value,
        "seq": int(envelope.seq),
        "stamp_ns": int(envelope.stamp_ns),
        "payload": encode_payload(envelope.msg_type, envelope.payload),
    }
    body = json.dumps(obj, separators=(",", ":")).encode("utf-8")
    if len(body) > MAX_FRAME_BYTES:
        raise EncodeError(f"frame body {len(body)} exceeds {MAX_FRAME_BYTES} bytes")
    return struct.pack("<I", len(body)) + body


def envelope_from_wire_obj(obj: Any, offset: int = 0) -> Envelope:
    """Parsed frame JSON -> Envelope (shared by decode and bag loading)."""
    if not isinstance(obj, dict):
        raise DecodeError("frame body is not a JSON object", offset)
    required = {"topic", "msg_type", "seq", "stamp_ns", "payload"}
    if set(obj.keys()) != required:
        raise DecodeError(f"frame keys {sorted(obj.keys())} != {sorted(required)}", offset)
    try:
        msg_type = MsgType(obj["msg_type"])
    except ValueError:
        raise DecodeError(f"unknown msg_type {obj['msg_type']!r}", offset) from None
    seq = obj["seq"]
    stamp = obj["stamp_ns"]
    if not isinstance(seq, int) or isinstance(seq, bool) or seq < 0:
        raise DecodeError(f"bad seq {seq!r}", offset)
    if not isinstance(stamp, int) or isinstance(stamp, bool) or stamp < 0:
        raise DecodeError(f"bad stamp_ns {stamp!r}", offset)
    payload = decode_payload(msg_type, obj["payload"], offset)
    return Envelope(str(obj["topic"]), msg_type, seq, stamp, payload)


def envelope_to_wire_obj(envelope: Envelope) -> dict:
    """Envelope -> plain JSON dict (frame body without the length prefix)."""
    return {
        "topic": envelope.topic,
        "msg_type": envelope.msg_type.value,
        "seq": int(envelope.seq),
        "stamp_ns": int(envelope.stamp_ns),
        "payload": encode_payload(envelope.msg_type, envelope.payload),
    }


def decode_prefixed(data: bytes, start: int = 0) -> tuple[Envelope, int]:
    """Decode one frame at `start`; returns (envelope, end offset)."""
    if len(data) - start < 4:
        raise NeedMoreData
    (n,) = struct.unpack_from("<I", data, start)
    if n > MAX_FRAME_BYTES:
        raise DecodeError(f"declared frame length {n} exceeds limit", start)
    if len(data) - start - 4 < n:
        raise NeedMoreData
    body = data[start + 4 : start + 4 + n]
    try:
        obj = json.loads(body.decode("utf-8"))
    except UnicodeDecodeError as e:
        raise DecodeError("frame body is not valid UTF-8", start + 4 + e.start) from None
    except json.JSONDecodeError as e:
        raise DecodeError(f"malformed JSON: {e.msg}", start + 4 + e.pos) from None
    return envelope_from_wire_obj(obj, start + 4), start + 4 + n


def decode(data: bytes) -> Envelope:
    """Inverse of encode for exactly one frame."""
    env, end = decode_prefixed(data, 0)
    if end != len(data):
        raise DecodeError(f"{len(data) - end} trailing bytes after frame", end)
    return env


def decode_frames(data: bytes) -> list[Envelope]:
    """Decode a concatenation of frames, in order."""
    out = []
    pos = 0
    while pos < len(data):
        env, pos = decode_prefixed(data, pos)
        out.append(env)
    return out


class FrameDecoder:
    """Incremental frame splitter for a byte stream."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, chunk: bytes) -> list[Envelope]:
        return [env for env, _ in self.feed_sized(chunk)]

    def feed_sized(self, chunk: bytes) -> list[tuple[Envelope, int]]:
        """Like feed, but pairs each envelope with its frame size in bytes."""
        self._buf.extend(chunk)
        out = []
        pos = 0
        while True:
            try:
                env, end = decode_prefixed(bytes(self._buf), pos)
            except NeedMoreData:
                break
            out.append((env, end - pos))
            pos = end
        del self._buf[:pos]
        return out

    @property
    def pending_bytes(self) -> int:
        return len(self._buf)
