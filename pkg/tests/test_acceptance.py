"""Acceptance suite: every exit criterion, one pass/fail line each.

Run with `pytest tests/test_acceptance.py -v -s` to see the lines live.
The campaign (3 classes x 3 budgets x 50 trials) and the end-to-end run are
the slow parts; the whole module stays inside its stated runtime budgets.
"""

import math
import threading
import time
from contextlib import contextmanager

import numpy as np
import pytest
from scipy.spatial import cKDTree

from rovtwin.bridge import Broker, BridgeClient
from rovtwin.envsim import VehicleParams, VehicleState, step_dynamics
from rovtwin.messages import (
    TOPIC_CMD_WRENCH,
    MsgType,
    Pose,
    Twist,
    Wrench,
    decode,
    encode,
)
from rovtwin.perception import CameraModel, NoiseConfig, SlamSimulator
from rovtwin.scenarios import (
    DEFAULT_BUDGETS,
    SCENARIO_CLASSES,
    build_terrain_octree,
    default_harbor,
    run_autonomous_e2e,
    run_campaign,
    run_gap_wall_comparison,
    run_latency_bench,
)
from rovtwin.twin_server import Mode, TwinConfig, TwinServer

from test_envsim import kinetic_energy_oracle, random_orientation
from test_messages import envelopes_equal_oracle, random_envelope
from test_twin import BOUNDS as TWIN_BOUNDS


@contextmanager
def criterion(name: str):
    t0 = time.perf_counter()
    try:
        yield
    except Exception:
        print(f"[FAIL] {name} ({time.perf_counter() - t0:.1f} s)", flush=True)
        raise
    print(f"[PASS] {name} ({time.perf_counter() - t0:.1f} s)", flush=True)


# -- shared slow fixtures ------------------------------------------------------


@pytest.fixture(scope="module")
def campaign():
    """One full campaign shared by the success-rate and soundness criteria."""
    hmap = default_harbor()
    tree = build_terrain_octree(hmap)
    t0 = time.perf_counter()
    result = run_campaign(hmap=hmap, tree=tree, trials=50, seed=0)
    return hmap, tree, result, time.perf_counter() - t0


def test_command_delivery_100_percent():
    with criterion("command delivery: 1000 teleop wrenches, complete and in order"):
        t0 = time.perf_counter()
        broker = Broker(tcp_port=0, ws_port=None).start()
        try:
            host, port = broker.tcp_address
            twin = TwinServer(host, port, TwinConfig(map_bounds=TWIN_BOUNDS))
            got = []
            done = threading.Event()

            def on_cmd(env):
                got.append(env.seq)
                if len(got) >= 1000:
                    done.set()

            sim_side = BridgeClient(host, port, name="sim-side")
            sim_side.subscribe(TOPIC_CMD_WRENCH, on_cmd)
            twin.set_mode(Mode.TELEOP)
            for _ in range(1000):
                twin.teleop_relay([0.4, -0.2, 0.1, 0.0, 0.0, 0.3])
            assert done.wait(25), f"only {len(got)}/1000 delivered"
            assert got == list(range(1000))  # complete, in order, no loss
            sim_side.close()
            twin.close()
        finally:
            broker.stop()
        assert time.perf_counter() - t0 < 30.0


def test_latency_ordering():
    with criterion("latency ordering: POINTCLOUD slowest, WRENCH fastest, >=15 samples"):
        t0 = time.perf_counter()
        report = run_latency_bench(window=15)
        by_type = report.by_type()
        assert set(by_type) == {"POINTCLOUD", "IMAGE", "POSE", "WRENCH"}
        for stats in by_type.values():
            assert stats.n >= 15
        means = {k: v.mean_ms for k, v in by_type.items()}
        assert means["POINTCLOUD"] == max(means.values()), means
        assert means["WRENCH"] == min(means.values()), means
        assert time.perf_counter() - t0 < 60.0


def test_planning_campaign_success_rates(campaign):
    with criterion("planning campaign: SIMPLE 100%, others >= 50%, all budgets"):
        _, _, result, elapsed = campaign
        assert elapsed < 600.0, f"campaign took {elapsed:.0f} s"
        for budget in DEFAULT_BUDGETS:
            assert result.rate("SIMPLE", budget) == 1.0, (budget, result.rate("SIMPLE", budget))
            for cls in ("COLLISION_PRONE", "NEAR_FLOOR"):
                assert result.rate(cls, budget) >= 0.5, (cls, budget, result.rate(cls, budget))
        assert len(result.trials) == 50 * len(DEFAULT_BUDGETS) * len(SCENARIO_CLASSES)


def test_campaign_collision_soundness(campaign):
    with criterion("collision soundness: fine-sampling oracle, zero violations"):
        _, tree, result, _ = campaign
        res = tree.resolution
        keys = np.array(sorted(tree.occupied), dtype=float)
        centers = np.array(tree.bounds.min) + (keys + 0.5) * res
        index = cKDTree(centers)
        half_diag = res * math.sqrt(3.0) / 2.0
        radius = result.robot_radius
        fine = res / 2.0 / 10.0  # 10x finer than the implementation's spacing

        violations = 0
        checked_segments = 0
        for trial in result.trials:
            if not trial.success:
                continue
            wps = np.array(trial.waypoints)
            for a, b in zip(wps, wps[1:]):
                length = float(np.linalg.norm(b - a))
                n = max(2, int(math.ceil(length / fine)) + 1)
                samples = a[None, :] + np.linspace(0, 1, n)[:, None] * (b - a)[None, :]
                cand = index.query_ball_point(samples, radius + half_diag, workers=-1)
                checked_segments += 1
                for s, neighbors in zip(samples, cand):
                    if not neighbors:
                        continue
                    lo = np.array(tree.bounds.min) + keys[neighbors] * res
                    closest = np.clip(s, lo, lo + res)
                    d2 = ((closest - s) ** 2).sum(axis=1)
                    if (d2 <= radius * radius).any():
                        violations += 1
                        break
        assert checked_segments > 1000
        assert violations == 0, f"{violations} segments collide per the oracle"


def test_rrt_star_dominance_and_anytime():
    with criterion("RRT* dominance: median cost <= RRT, anytime non-increasing, 50 seeds"):
        runs = run_gap_wall_comparison(seeds=50, iteration_cap=3000)
        star = [r.star_cost for r in runs]
        rrt = [r.rrt_cost for r in runs]
        assert np.median(star) <= np.median(rrt), (np.median(star), np.median(rrt))
        solved = sum(math.isfinite(c) for c in star)
        assert solved >= 45, f"RRT* solved only {solved}/50"
        for r in runs:
            costs = [c for _, c in r.star_trace]
            assert all(x >= y - 1e-12 for x, y in zip(costs, costs[1:])), r.seed


def test_mapping_oracle_equivalence():
    with criterion("mapping equivalence: twin streaming == offline; insert == brute force"):
        # streaming-vs-offline reuses the dedicated integration test body
        from test_twin import test_streaming_equals_offline_pipeline

        broker = Broker(tcp_port=0, ws_port=None).start()
        try:
            host, port = broker.tcp_address
            twin = TwinServer(host, port, TwinConfig(map_bounds=TWIN_BOUNDS))
            pub = BridgeClient(host, port, name="feeder")
            test_streaming_equals_offline_pipeline((broker, twin, pub))
            pub.close()
            twin.close()
        finally:
            broker.stop()

        from rovtwin.geom import Box
        from rovtwin.mapping import OccupancyOctree, insert_cloud
        from rovtwin.messages import PointCloud

        tree = OccupancyOctree(0.25, Box((0, 0, 0), (8, 8, 8)))
        rng = np.random.default_rng(99)
        pts = rng.uniform(-0.5, 8.5, (10_000, 3))
        insert_cloud(tree, PointCloud(pts))
        oracle = set()
        for p in np.asarray(PointCloud(pts).points, dtype=float):
            if all(0.0 <= c < 8.0 for c in p):
                oracle.add(tuple(int(math.floor(c / 0.25)) for c in p))
        assert tree.occupied == oracle


def test_dynamics_properties():
    with criterion("dynamics: equilibrium exact, hand-computed 1e-12, energy dissipates"):
        params = VehicleParams()
        state = VehicleState.at((1, 2, -5), stamp_ns=7)
        nxt = step_dynamics(state, Wrench(), params, 0.01)
        assert nxt.pose.position == state.pose.position
        assert nxt.twist == state.twist

        free = VehicleParams(mass=10.0, drag_lin=(0, 0, 0), drag_ang=(0, 0, 0),
                             buoyancy_force=0.0, weight_force=0.0)
        nxt = step_dynamics(VehicleState.at((0, 0, -5)), Wrench((1.0, 0, 0)), free, 0.05)
        assert abs(nxt.twist.linear[0] - 0.005) < 1e-12
        assert abs(nxt.pose.position[0] - 0.00025) < 1e-12

        rng = np.random.default_rng(314)
        for _ in range(1000):
            v = rng.uniform(-2, 2, 3)
            v[np.abs(v) < 0.1] = 0.1
            st = VehicleState(
                Pose(tuple(rng.uniform(-20, -1, 3)), random_orientation(rng), 0),
                Twist(tuple(v), tuple(rng.uniform(-1.5, 1.5, 3))),
            )
            before = kinetic_energy_oracle(st, params)
            after = kinetic_energy_oracle(step_dynamics(st, Wrench(), params, 0.01), params)
            assert after < before


def test_perception_identity_and_calibration():
    with criterion("perception: zero-noise identity, flat floor 1e-9, noise calibration"):
        from rovtwin.envsim import Heightmap

        zero = NoiseConfig(0, 0, 0, 0, 1)
        sim = SlamSimulator(zero, CameraModel())
        state = VehicleState.at((20, 20, -2), stamp_ns=3)
        est = sim.estimate_pose(state, 0.05)
        assert est.position == state.pose.position
        assert est.orientation == state.pose.orientation

        flat = Heightmap((0, 0), 1.0, np.full((40, 40), -10.0))
        obs = sim.observe_features(state, flat)
        assert len(obs.features) > 0
        assert np.all(np.abs(obs.features.points[:, 2] - (-10.0)) < 1e-9)

        noisy = SlamSimulator(NoiseConfig(sigma_pos=0.1, rng_seed=0), CameraModel())
        errs = np.empty((10_000, 3))
        for i in range(10_000):
            e = noisy.estimate_pose(state, 0.1)
            errs[i] = np.array(e.position) - np.array(state.pose.position)
        assert np.all(np.abs(errs.mean(axis=0)) < 0.1 * 3 / math.sqrt(10_000))
        assert np.all(np.abs(errs.std(axis=0) - 0.1) < 0.01)


def test_wire_round_trip_10k():
    with criterion("wire round-trip: 10^4 randomized envelopes, field-exact"):
        rng = np.random.default_rng(365)
        for i in range(10_000):
            env = random_envelope(rng, topic=f"t/{i % 7}", seq=i)
            back = decode(encode(env))
            assert envelopes_equal_oracle(env, back)
            assert back == env


def test_end_to_end_autonomous_run():
    with criterion("end-to-end: map, plan 15 m, arrive in tolerance, zero contacts"):
        t0 = time.perf_counter()
        result = run_autonomous_e2e(seed=0)
        wall = time.perf_counter() - t0
        assert result.reached, result.to_dict()
        assert result.final_distance <= 0.5, result.final_distance
        assert result.contact_events == 0
        assert result.plan_cost >= 14.0  # goal really is ~15 m out
        assert wall < 180.0, f"e2e took {wall:.0f} s"
