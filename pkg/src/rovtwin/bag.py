"""Native message bag: JSON-lines record and rate-scaled replay.

Line 1 is the header {created_ns, topics, count}; each following line is
{recv_ns, envelope} with the envelope in the same JSON shape as the wire
frame body. recv_ns is the receiver's monotonic clock at delivery and is
non-decreasing through the file.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field

from .clock import now_ns
from .messages import Envelope, envelope_from_wire_obj, envelope_to_wire_obj


class BagFormatError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass
class Bag:
    records: list[tuple[int, Envelope]] = field(default_factory=list)
    created_ns: int = 0

    def __len__(self) -> int:
        return len(self.records)

    @property
    def topics(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for _, env in self.records:
            counts[env.topic] = counts.get(env.topic, 0) + 1
        return counts

    @property
    def span_ns(self) -> int:
        if len(self.records) < 2:
            return 0
        return self.records[-1][0] - self.records[0][0]

    def save(self, path) -> None:
        header = {"created_ns": self.created_ns, "topics": self.topics, "count": len(self.records)}
        with open(path, "w", encoding="utf-8") as f:
            f.write(json.dumps(header, separators=(",", ":")) + "\n")
            for recv_ns, env in self.records:
                line = {"recv_ns": recv_ns, "envelope": envelope_to_wire_obj(env)}
                f.write(json.dumps(line, separators=(",", ":")) + "\n")


def load_bag(path) -> Bag:
    bag = Bag()
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise BagFormatError("empty file, missing header", 1)
    try:
        header = json.loads(lines[0])
        bag.created_ns = int(header["created_ns"])
        declared = int(header["count"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise BagFormatError(f"bad header: {e}", 1) from None
    prev = None
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            recv_ns = int(obj["recv_ns"])
            env = envelope_from_wire_obj(obj["envelope"])
        except Exception as e:
            raise BagFormatError(str(e), i) from None
        if prev is not None and recv_ns < prev:
            raise BagFormatError(f"recv_ns {recv_ns} decreases (previous {prev})", i)
        prev = recv_ns
        bag.records.append((recv_ns, env))
    if len(bag.records) != declared:
        raise BagFormatError(
            f"header declares {declared} records, file has {len(bag.records)}", 1
        )
    return bag


class BagRecorder:
    """Collects delivered envelopes; attach its callback to subscriptions."""

    def __init__(self):
        self.bag = Bag(created_ns=now_ns())
        self._lock = threading.Lock()

    def on_envelope(self, env: Envelope) -> None:
        stamp = now_ns()
        with self._lock:
            self.bag.records.append((stamp, env))

    def snapshot(self) -> Bag:
        with self._lock:
            return Bag(records=list(self.bag.records), created_ns=self.bag.created_ns)


@dataclass(frozen=True)
class ReplaySummary:
    count: int
    duration_s: float


def bag_replay(bag: Bag, rate: float, publisher) -> ReplaySummary:
    """Republish a bag through `publisher` (a BridgeClient).

    Inter-message gaps are scaled by 1/rate; payloads are untouched; each
    envelope gets a fresh stamp and the publisher's own seq numbering.
    """
    if rate <= 0:
        raise ValueError(f"rate must be > 0, got {rate}")
    t0 = time.perf_counter()
    prev_ns = None
    count = 0
    for recv_ns, env in bag.records:
        if prev_ns is not None:
            gap = (recv_ns - prev_ns) * 1e-9 / rate
            if gap > 0:
                time.sleep(gap)
        prev_ns = recv_ns
        publisher.publish(env.topic, env.msg_type, env.payload)
        count += 1
    return ReplaySummary(count, time.perf_counter() - t0)
