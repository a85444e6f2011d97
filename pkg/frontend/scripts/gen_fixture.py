#!/usr/bin/env python3
"""Produce the seeded replay fixture the console tests run against.

Runs a short headless twin session (broker + twin + planner service + a
scripted feeder), records every envelope a UI client would receive on its
subscribed topics, and stores them as wire-shaped JSON together with the
ground expectations (final surface cell count, path waypoint count).

Usage: python3 scripts/gen_fixture.py > test/fixtures/replay.json
"""

import json
import sys
import time

import numpy as np

from rovtwin.bridge import Broker, BridgeClient
from rovtwin.geom import Box
from rovtwin.messages import (
    TOPIC_SLAM_FEATURES,
    TOPIC_SLAM_POSE,
    MsgType,
    PointCloud,
    Pose,
    envelope_to_wire_obj,
)
from rovtwin.twin_server import PlannerService, TwinConfig, TwinServer

UI_TOPICS = ("twin/snapshot", "twin/metrics", "twin/surface", "plan/result", "plan/status")


def main() -> int:
    rng = np.random.default_rng(7)
    broker = Broker(tcp_port=0, ws_port=None).start()
    host, port = broker.tcp_address
    twin = TwinServer(host, port, TwinConfig(map_bounds=Box((-5, -5, -15), (45, 45, 5)), plan_seed=7))
    planner = PlannerService(host, port, twin.get_octree_snapshot)
    feeder = BridgeClient(host, port, name="feeder")

    captured = []
    ui = BridgeClient(host, port, name="ui-capture")
    for topic in UI_TOPICS:
        ui.subscribe(topic, lambda env: captured.append(envelope_to_wire_obj(env)))

    def wait(predicate, timeout=15.0):
        deadline = time.time() + timeout
        while time.time() < deadline:
            if predicate():
                return
            time.sleep(0.01)
        raise TimeoutError("fixture generation timed out")

    cursor = None
    # a short teleop-like pose walk with periodic snapshots
    for i in range(10):
        feeder.publish(TOPIC_SLAM_POSE, MsgType.POSE,
                       Pose((10.0 + i * 0.5, 10.0, -5.0), stamp_ns=i * 50_000_000))
        wait(lambda: twin.metrics.to_dict()["poses_ingested"] == i + 1)
        cursor = twin.publish_snapshot(cursor)
    # map a flat patch and flush
    pts = np.column_stack([rng.uniform(5, 30, 5000), rng.uniform(5, 30, 5000),
                           np.full(5000, -10.0)]).astype(np.float32)
    feeder.publish(TOPIC_SLAM_FEATURES, MsgType.POINTCLOUD, PointCloud(pts, 0, 0))
    wait(lambda: twin.metrics.to_dict()["clouds_ingested"] == 1)
    twin.flush_map()
    cursor = twin.publish_snapshot(cursor)
    twin.publish_metrics()
    # plan to a goal over the mapped patch
    path = twin.request_plan((20.0, 18.0, -5.0), budget=2.0)
    cursor = twin.publish_snapshot(cursor)
    wait(lambda: any(o["topic"] == "plan/result" for o in captured))
    time.sleep(0.3)

    fixture = {
        "seed": 7,
        "envelopes": captured,
        "expect": {
            "surface_cells": twin.surface.defined_count(),
            "path_waypoints": len(path.waypoints),
            "final_pose": list(twin.last_pose().position),
            "final_mode": twin.mode.value,
        },
    }
    json.dump(fixture, sys.stdout, indent=1)
    feeder.close()
    ui.close()
    planner.close()
    twin.close()
    broker.stop()
    return 0


if __name__ == "__main__":
    sys.exit(main())
