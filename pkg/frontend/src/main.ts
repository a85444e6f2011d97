/** Operator console entry point: session + scene + HUD + input wiring. */

import { Hud } from "./hud.js";
import { DEFAULT_BINDINGS, keysToAxes, validateBindings } from "./keys.js";
import { DEFAULT_GOAL_STANDOFF, goalFromHit, pickSurfacePoint } from "./picking.js";
import { TwinScene } from "./scene.js";
import { TwinSession } from "./session.js";

const AXES_SEND_HZ = 20;
const PLAN_BUDGET_S = 2.0;

function byId(id: string): HTMLElement {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing #${id}`);
  return el;
}

function wsUrl(): string {
  const params = new URLSearchParams(location.search);
  const port = params.get("ws") ?? "9871";
  return `ws://${location.hostname || "127.0.0.1"}:${port}/`;
}

function start(): void {
  const canvas = byId("viewport") as HTMLCanvasElement;
  const banner = byId("banner");
  const scene = new TwinScene(canvas);
  const hud = new Hud({
    pose: byId("hud-pose"),
    depth: byId("hud-depth"),
    mode: byId("hud-mode"),
    staleness: byId("hud-staleness"),
    delays: byId("hud-delays"),
    viewpoint: byId("hud-viewpoint"),
    toast: byId("toast"),
  });

  validateBindings(DEFAULT_BINDINGS);
  const pressed = new Set<string>();
  let goalMarker: [number, number, number] | null = null;

  const session = new TwinSession({
    url: wsUrl(),
    onStatus: (status, detail) => {
      if (status === "connected") {
        banner.classList.remove("visible");
      } else {
        banner.textContent =
          status === "connecting" ? "connecting to twin…" : `twin unreachable, retrying… (${detail ?? ""})`;
        banner.classList.add("visible");
      }
    },
    onUpdate: (view) => {
      if (view.planError) {
        hud.toast(`plan failed — ${view.planError}`);
        view.planError = null;
      }
    },
  });
  session.connect();

  // keyboard: teleop axes plus viewpoint/mode shortcuts
  window.addEventListener("keydown", (ev) => {
    if (ev.code === "KeyV") {
      scene.cycleViewpoint();
      return;
    }
    if (ev.code === "KeyT") {
      session.sendMode("TELEOP");
      return;
    }
    if (ev.code === "KeyI") {
      session.sendMode("IDLE");
      return;
    }
    pressed.add(ev.code);
  });
  window.addEventListener("keyup", (ev) => pressed.delete(ev.code));
  window.addEventListener("blur", () => pressed.clear());

  setInterval(() => {
    if (session.view.mode === "TELEOP") {
      session.sendAxes(keysToAxes(pressed, DEFAULT_BINDINGS));
    }
  }, 1000 / AXES_SEND_HZ);

  byId("btn-teleop").addEventListener("click", () => session.sendMode("TELEOP"));
  byId("btn-idle").addEventListener("click", () => session.sendMode("IDLE"));
  byId("btn-view").addEventListener("click", () => scene.cycleViewpoint());

  // free-orbit mouse control
  let dragging = false;
  let lastX = 0;
  let lastY = 0;
  canvas.addEventListener("mousedown", (ev) => {
    dragging = true;
    lastX = ev.clientX;
    lastY = ev.clientY;
  });
  window.addEventListener("mouseup", () => (dragging = false));
  window.addEventListener("mousemove", (ev) => {
    if (!dragging || scene.viewpoint !== "FREE_ORBIT") return;
    scene.orbitBy(-(ev.clientX - lastX) * 0.005, (ev.clientY - lastY) * 0.005);
    lastX = ev.clientX;
    lastY = ev.clientY;
  });
  canvas.addEventListener("wheel", (ev) => {
    if (scene.viewpoint === "FREE_ORBIT") {
      scene.orbitZoom(ev.deltaY > 0 ? 1.1 : 0.9);
      ev.preventDefault();
    }
  });

  // click-to-goal: ray through the click against the reconstructed surface
  canvas.addEventListener("dblclick", (ev) => {
    const surface = session.view.surface;
    if (!surface || surface.n === 0) {
      hud.toast("no map yet — drive around first");
      return;
    }
    const rect = canvas.getBoundingClientRect();
    const ndcX = ((ev.clientX - rect.left) / rect.width) * 2 - 1;
    const ndcY = -(((ev.clientY - rect.top) / rect.height) * 2 - 1);
    const ray = scene.pixelRay(ndcX, ndcY);
    const hit = pickSurfacePoint(
      ray.origin as [number, number, number],
      ray.dir as [number, number, number],
      surface.points,
    );
    if (!hit) {
      hud.toast("click missed the surface");
      return;
    }
    goalMarker = goalFromHit(hit.point, DEFAULT_GOAL_STANDOFF);
    scene.setGoalMarker(goalMarker);
    session.sendPlanRequest(goalMarker, PLAN_BUDGET_S);
    hud.toast(
      `plan requested to (${goalMarker[0].toFixed(1)}, ${goalMarker[1].toFixed(1)}, ${goalMarker[2].toFixed(1)})`,
    );
  });

  const resize = () => scene.resize(window.innerWidth, window.innerHeight);
  window.addEventListener("resize", resize);
  resize();

  let lastPathVersion: object | null = null;
  function frame(): void {
    const view = session.view;
    if (view.pose) scene.setRobotPose(view.pose);
    if (view.surface) scene.setTerrain(view.surface, view.surfaceVersion);
    if (view.path !== lastPathVersion) {
      scene.setPath(view.path);
      lastPathVersion = view.path;
    }
    hud.update(view, scene.viewpoint);
    scene.render();
    requestAnimationFrame(frame);
  }
  requestAnimationFrame(frame);
}

start();
