"""Command-line front end: run every experiment headlessly, emit artifacts.

Subcommands:
  gen-map        fractal-noise harbor heightmap from a seed
  sim            physical component: dynamics + simulated SLAM publishers
  twin           digital component: broker + twin server + planner service
  replay         feed a recorded bag through a publisher
  bench-latency  per-type one-way delay benchmark, CSV out
  campaign-plan  three-class planning campaign, CSV out
  e2e            headless autonomous end-to-end run, JSON out
  report         render the CSV/JSON artifacts in --out into markdown

Everything is deterministic under --seed except wall-clock latency numbers
and wall-clock planner cutoffs (use --iter-budget for reproducible tables).
"""

from __future__ import annotations

import argparse
import json
import math
import signal
import sys
import time
from pathlib import Path as FsPath

import numpy as np

from . import scenarios
from .bag import bag_replay, load_bag
from .bridge import (
    DEFAULT_TCP_PORT,
    DEFAULT_WS_PORT,
    BindError,
    BridgeClient,
    Broker,
)
from .envsim import Heightmap, VehicleParams, generate_harbor
from .perception import CameraModel, NoiseConfig
from .planner import PlannerParams
from .sim_node import SimConfig, SimNode
from .twin_server import PlannerService, TwinConfig, TwinServer

DEFAULT_HTTP_PORT = 9872


def load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path, encoding="utf-8") as f:
            cfg = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise SystemExit(f"bad config {path}: {e}")
    if not isinstance(cfg, dict):
        raise SystemExit(f"bad config {path}: top level must be an object")
    return cfg


def resolve_heightmap(args, cfg: dict) -> Heightmap:
    section = cfg.get("heightmap", {})
    if getattr(args, "map", None):
        return Heightmap.load(args.map)
    if section.get("file"):
        return Heightmap.load(section["file"])
    seed = getattr(args, "map_seed", None)
    if seed is None:
        seed = section.get("seed", scenarios.DEFAULT_HARBOR_SEED)
    return generate_harbor(
        int(seed),
        nx=int(section.get("nx", 97)),
        ny=int(section.get("ny", 97)),
        cell_size=float(section.get("cell_size", 0.5)),
        base_depth=float(section.get("base_depth", -10.0)),
        relief=float(section.get("relief", 4.0)),
    )


def out_dir(args) -> FsPath:
    path = FsPath(getattr(args, "out", None) or ".")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _section_kwargs(cfg: dict, name: str, cls) -> dict:
    section = dict(cfg.get(name, {}))
    if not section:
        return {}
    return {k: tuple(v) if isinstance(v, list) else v for k, v in section.items()}


# -- subcommands -----------------------------------------------------------------


def cmd_gen_map(args) -> int:
    cfg = load_config(args.config)
    hmap = generate_harbor(
        args.seed if args.seed is not None else scenarios.DEFAULT_HARBOR_SEED,
        nx=args.nx,
        ny=args.ny,
        cell_size=args.cell_size,
        base_depth=args.base_depth,
        relief=args.relief,
    )
    target = FsPath(args.file or (out_dir(args) / "harbor.json"))
    hmap.save(target)
    print(f"wrote {target} ({hmap.nx}x{hmap.ny} cells, depth "
          f"{hmap.min_depth():.2f}..{hmap.max_depth():.2f} m)")
    return 0


def cmd_sim(args) -> int:
    cfg = load_config(args.config)
    hmap = resolve_heightmap(args, cfg)
    noise_kwargs = _section_kwargs(cfg, "noise", NoiseConfig)
    if args.seed is not None:
        noise_kwargs["rng_seed"] = args.seed
    sim_cfg = SimConfig(
        pose_rate_hz=args.rate_pose,
        feature_rate_hz=args.rate_cloud,
        image_rate_hz=args.rate_image,
        real_time_factor=args.rtf,
        start_position=tuple(cfg.get("start_position", (10.0, 10.0, -4.0))),
    )
    sim = SimNode(
        args.host,
        args.port_tcp,
        hmap,
        VehicleParams(**_section_kwargs(cfg, "vehicle", VehicleParams)),
        NoiseConfig(**noise_kwargs),
        CameraModel(**_section_kwargs(cfg, "camera", CameraModel)),
        sim_cfg,
    )
    print(f"sim: connected to {args.host}:{args.port_tcp}, dt={sim_cfg.dt}, "
          f"rtf={sim_cfg.real_time_factor}; Ctrl+C to stop")
    try:
        sim.run(max_steps=args.steps)
    except KeyboardInterrupt:
        pass
    finally:
        sim.stop()
    print(f"sim: {sim.steps} steps, {sim.cmd_received} commands, "
          f"{sim.contact_events} ground contacts")
    return 0


def cmd_twin(args) -> int:
    cfg = load_config(args.config)
    hmap = resolve_heightmap(args, cfg)
    try:
        broker = Broker(tcp_port=args.port_tcp, ws_port=args.port_ws).start()
    except BindError as e:
        print(f"BindError: {e}", file=sys.stderr)
        return 3
    twin_cfg = TwinConfig(
        map_bounds=scenarios.map_bounds(hmap),
        plan_bounds=scenarios.plan_bounds(hmap),
        plan_seed=args.seed or 0,
    )
    twin = TwinServer(args.host, broker.tcp_address[1], twin_cfg)
    planner_svc = PlannerService(
        args.host,
        broker.tcp_address[1],
        twin.get_octree_snapshot,
        PlannerParams(**_section_kwargs(cfg, "planner", PlannerParams)),
    )
    httpd = None
    if args.ui_dir:
        import functools
        import http.server
        import threading

        handler = functools.partial(
            http.server.SimpleHTTPRequestHandler, directory=args.ui_dir
        )
        try:
            httpd = http.server.ThreadingHTTPServer((args.host, args.http_port), handler)
        except OSError as e:
            print(f"BindError: ui port {args.http_port}: {e}", file=sys.stderr)
            return 3
        threading.Thread(target=httpd.serve_forever, daemon=True).start()
        print(f"twin: operator console at http://{args.host}:{args.http_port}/")
    print(f"twin: broker tcp={broker.tcp_address} ws={broker.ws_address}; Ctrl+C to stop")
    stop = False

    def on_sigint(*_):
        nonlocal stop
        stop = True

    signal.signal(signal.SIGINT, on_sigint)
    cursor = None
    last_metrics = 0.0
    try:
        while not stop:
            time.sleep(1.0 / args.snapshot_rate)
            cursor = twin.publish_snapshot(cursor)
            if time.monotonic() - last_metrics >= 1.0:
                twin.publish_metrics()
                last_metrics = time.monotonic()
    finally:
        if httpd is not None:
            httpd.shutdown()
        planner_svc.close()
        twin.close()
        broker.stop()
    return 0


def cmd_replay(args) -> int:
    try:
        bag = load_bag(args.bag)
    except FileNotFoundError:
        print(f"no such bag: {args.bag}", file=sys.stderr)
        return 2
    pub = BridgeClient(args.host, args.port_tcp, name="replay")
    try:
        summary = bag_replay(bag, args.rate, pub)
    finally:
        pub.close()
    print(f"replayed {summary.count} envelopes in {summary.duration_s:.3f} s "
          f"(rate x{args.rate})")
    return 0


def cmd_bench_latency(args) -> int:
    report = scenarios.run_latency_bench(window=args.window, transport=args.transport)
    target = out_dir(args) / "delay_report.csv"
    target.write_text(report.to_csv())
    print(report.to_csv().rstrip())
    by_type = report.by_type()
    ordered = sorted(by_type.values(), key=lambda s: s.mean_ms, reverse=True)
    print(f"wrote {target}")
    print("mean delay ordering:", " > ".join(s.msg_type for s in ordered))
    return 0


def cmd_campaign_plan(args) -> int:
    cfg = load_config(args.config)
    hmap = resolve_heightmap(args, cfg)
    campaign_cfg = cfg.get("campaign", {})
    classes = args.scenario_class or campaign_cfg.get("classes", list(scenarios.SCENARIO_CLASSES))
    budgets = args.budget or campaign_cfg.get("budgets", list(scenarios.DEFAULT_BUDGETS))
    trials = args.trials or campaign_cfg.get("trials", 50)
    iteration_budgets = None
    if args.iter_budget:
        if len(args.iter_budget) != len(budgets):
            raise SystemExit("--iter-budget needs one cap per budget tier")
        iteration_budgets = dict(zip(budgets, args.iter_budget))
    t0 = time.perf_counter()
    done = [0]

    def progress(trial):
        done[0] += 1
        if done[0] % 25 == 0:
            print(f"  {done[0]} trials, {time.perf_counter() - t0:.0f} s", flush=True)

    result = scenarios.run_campaign(
        hmap=hmap,
        classes=classes,
        budgets=budgets,
        trials=trials,
        seed=args.seed or 0,
        variant=args.variant,
        params=PlannerParams(**_section_kwargs(cfg, "planner", PlannerParams)),
        iteration_budgets=iteration_budgets,
        progress=progress if args.verbose else None,
    )
    target = out_dir(args) / "campaign.csv"
    target.write_text(result.to_csv())
    print(result.to_csv().rstrip())
    print(f"wrote {target} ({time.perf_counter() - t0:.1f} s)")
    return 0


def cmd_e2e(args) -> int:
    result = scenarios.run_autonomous_e2e(seed=args.seed or 0, real_time_factor=args.rtf)
    target = out_dir(args) / "e2e.json"
    target.write_text(json.dumps(result.to_dict(), indent=2))
    print(json.dumps(result.to_dict(), indent=2))
    print(f"wrote {target}")
    return 0 if result.reached and result.contact_events == 0 else 1


def cmd_report(args) -> int:
    base = out_dir(args)
    lines = ["# Run report", ""]
    campaign = base / "campaign.csv"
    if campaign.exists():
        lines += ["## Planning campaign", "", _csv_to_markdown(campaign.read_text()), ""]
    delays = base / "delay_report.csv"
    if delays.exists():
        lines += ["## Message delays", "", _csv_to_markdown(delays.read_text()), ""]
    e2e = base / "e2e.json"
    if e2e.exists():
        data = json.loads(e2e.read_text())
        lines += ["## Autonomous end-to-end", ""]
        lines += [f"- {k}: {v}" for k, v in data.items()]
        lines += [""]
    if len(lines) <= 2:
        print(f"nothing to report in {base}", file=sys.stderr)
        return 1
    target = base / "report.md"
    target.write_text("\n".join(lines))
    print(f"wrote {target}")
    return 0


def _csv_to_markdown(text: str) -> str:
    rows = [line.split(",") for line in text.strip().splitlines()]
    if not rows:
        return "(empty)"
    header, body = rows[0], rows[1:]
    out = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    out += ["| " + " | ".join(r) + " |" for r in body]
    return "\n".join(out)


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rovtwin", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, ports=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", help="artifact directory (default .)")
        p.add_argument("--seed", type=int, help="master random seed")
        if ports:
            p.add_argument("--host", default="127.0.0.1")
            p.add_argument("--port-tcp", type=int, default=DEFAULT_TCP_PORT)
            p.add_argument("--port-ws", type=int, default=DEFAULT_WS_PORT)

    p = sub.add_parser("gen-map", help="generate a fractal-noise harbor heightmap")
    common(p, ports=False)
    p.add_argument("--file", help="output path (default OUT/harbor.json)")
    p.add_argument("--nx", type=int, default=97)
    p.add_argument("--ny", type=int, default=97)
    p.add_argument("--cell-size", type=float, default=0.5)
    p.add_argument("--base-depth", type=float, default=-10.0)
    p.add_argument("--relief", type=float, default=4.0)
    p.set_defaults(func=cmd_gen_map)

    p = sub.add_parser("sim", help="run the physical component against a broker")
    common(p)
    p.add_argument("--map", help="heightmap JSON file")
    p.add_argument("--map-seed", type=int, help="generate the map from this seed")
    p.add_argument("--rate-pose", type=float, default=20.0)
    p.add_argument("--rate-wrench", type=float, default=20.0,
                   help="accepted for symmetry; wrench is inbound traffic")
    p.add_argument("--rate-image", type=float, default=10.0)
    p.add_argument("--rate-cloud", type=float, default=5.0)
    p.add_argument("--rtf", type=float, default=1.0, help="real-time factor (0 = unpaced)")
    p.add_argument("--steps", type=int, help="stop after N integrator steps")
    p.set_defaults(func=cmd_sim)

    p = sub.add_parser("twin", help="run broker + twin server + planner service")
    common(p)
    p.add_argument("--map", help="heightmap JSON file (for map bounds)")
    p.add_argument("--map-seed", type=int)
    p.add_argument("--snapshot-rate", type=float, default=10.0)
    p.add_argument("--ui-dir", help="serve this directory as the operator console")
    p.add_argument("--http-port", type=int, default=DEFAULT_HTTP_PORT)
    p.set_defaults(func=cmd_twin)

    p = sub.add_parser("replay", help="replay a bag through the broker")
    common(p)
    p.add_argument("--bag", required=True)
    p.add_argument("--rate", type=float, default=1.0)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("bench-latency", help="per-type one-way delay benchmark")
    common(p, ports=False)
    p.add_argument("--window", type=int, default=15)
    p.add_argument("--transport", choices=("tcp", "ws"), default="tcp")
    p.set_defaults(func=cmd_bench_latency)

    p = sub.add_parser("campaign-plan", help="three-class planning campaign")
    common(p, ports=False)
    p.add_argument("--map", help="heightmap JSON file")
    p.add_argument("--map-seed", type=int)
    p.add_argument("--class", dest="scenario_class", action="append",
                   choices=scenarios.SCENARIO_CLASSES,
                   help="repeatable; default all three classes")
    p.add_argument("--budget", type=float, action="append",
                   help="repeatable; default 0.5 1.0 2.0 seconds")
    p.add_argument("--trials", type=int)
    p.add_argument("--variant", choices=("RRT", "RRT_STAR"), default="RRT_STAR")
    p.add_argument("--iter-budget", type=int, action="append",
                   help="iteration cap per budget tier (reproducible tables)")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_campaign_plan)

    p = sub.add_parser("e2e", help="headless autonomous end-to-end run")
    common(p, ports=False)
    p.add_argument("--rtf", type=float, default=12.0)
    p.set_defaults(func=cmd_e2e)

    p = sub.add_parser("report", help="render artifacts in --out to markdown")
    common(p, ports=False)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except BindError as e:
        print(f"BindError: {e}", file=sys.stderr)
        return 3
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
