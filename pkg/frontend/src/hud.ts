/** Sensor HUD: pose, depth, mode, staleness, delay stats, plan errors. */

import { TwinView } from "./session.js";
import { Viewpoint } from "./scene.js";

export interface HudElements {
  pose: HTMLElement;
  depth: HTMLElement;
  mode: HTMLElement;
  staleness: HTMLElement;
  delays: HTMLElement;
  viewpoint: HTMLElement;
  toast: HTMLElement;
}

export function formatPose(view: TwinView): string {
  if (!view.pose) return "pose: —";
  const [x, y, z] = view.pose.position;
  return `pose: x ${x.toFixed(2)}  y ${y.toFixed(2)}  z ${z.toFixed(2)} m`;
}

export function formatDepth(view: TwinView): string {
  if (!view.pose) return "depth: —";
  return `depth: ${(-view.pose.position[2]).toFixed(2)} m`;
}

export function formatStaleness(view: TwinView): string {
  if (!isFinite(view.stalenessS)) return "staleness: —";
  return `staleness: ${(view.stalenessS * 1000).toFixed(0)} ms`;
}

export function formatDelays(view: TwinView): string {
  const delays = (view.metrics as any)?.delays;
  if (!Array.isArray(delays) || delays.length === 0) return "delays: —";
  return (
    "delays: " +
    delays
      .map((d: any) => `${String(d.msg_type).toLowerCase()} ${d.mean_ms.toFixed(1)}ms`)
      .join("  ")
  );
}

export class Hud {
  private toastTimer: ReturnType<typeof setTimeout> | null = null;

  constructor(private readonly el: HudElements) {}

  update(view: TwinView, viewpoint: Viewpoint): void {
    this.el.pose.textContent = formatPose(view);
    this.el.depth.textContent = formatDepth(view);
    this.el.mode.textContent = `mode: ${view.mode}`;
    this.el.staleness.textContent = formatStaleness(view);
    this.el.delays.textContent = formatDelays(view);
    this.el.viewpoint.textContent = `view: ${viewpoint.toLowerCase().replace("_", " ")}`;
  }

  toast(message: string, ms = 2500): void {
    this.el.toast.textContent = message;
    this.el.toast.classList.add("visible");
    if (this.toastTimer !== null) clearTimeout(this.toastTimer);
    this.toastTimer = setTimeout(() => this.el.toast.classList.remove("visible"), ms);
  }
}
