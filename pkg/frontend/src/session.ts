/**
 * Live twin session over the bridge WebSocket.
 *
 * Subscribes to the twin's snapshot/metrics/surface topics and the planner
 * reply topics, folds snapshot deltas into one view object, and publishes
 * operator intent (axes, mode, plan requests). Reconnects with backoff when
 * the server is unreachable; the view object is the single source the
 * renderer reads, with no client-side extrapolation.
 */

import {
  CloudMsg,
  Envelope,
  MsgType,
  PathMsg,
  PoseMsg,
  decodeCloud,
  decodeFrames,
  encodeFrame,
} from "./wire.js";

export type SessionStatus = "connecting" | "connected" | "retrying";

export interface DelayRow {
  msg_type: string;
  n: number;
  mean_ms: number;
}

export interface TwinView {
  pose: PoseMsg | null;
  mode: string;
  stalenessS: number;
  path: PathMsg | null;
  surface: CloudMsg | null;
  surfaceVersion: number;
  surfaceCells: number;
  octreeVersion: number;
  octreeOccupied: number;
  metrics: Record<string, unknown> | null;
  planError: string | null;
  snapshotCount: number;
}

export function emptyView(): TwinView {
  return {
    pose: null,
    mode: "IDLE",
    stalenessS: Infinity,
    path: null,
    surface: null,
    surfaceVersion: 0,
    surfaceCells: 0,
    octreeVersion: 0,
    octreeOccupied: 0,
    metrics: null,
    planError: null,
    snapshotCount: 0,
  };
}

/**
 * Fold one twin/snapshot payload into the view. Only fields present in
 * `changed` move; staleness rides along on every snapshot.
 */
export function applySnapshot(view: TwinView, payload: any): TwinView {
  const changed = payload.changed ?? {};
  if ("pose" in changed) view.pose = changed.pose;
  if ("mode" in changed) view.mode = changed.mode;
  if ("path" in changed) view.path = changed.path;
  if ("surface_version" in changed) view.surfaceVersion = changed.surface_version;
  if ("surface_cells" in changed) view.surfaceCells = changed.surface_cells;
  if ("octree_version" in changed) view.octreeVersion = changed.octree_version;
  if ("octree_occupied" in changed) view.octreeOccupied = changed.octree_occupied;
  view.stalenessS = payload.staleness_s;
  view.snapshotCount += 1;
  return view;
}

/** Minimal facade over WebSocket so tests can inject a fake. */
export interface SocketLike {
  binaryType: string;
  onopen: ((ev?: unknown) => void) | null;
  onclose: ((ev?: unknown) => void) | null;
  onerror: ((ev?: unknown) => void) | null;
  onmessage: ((ev: { data: ArrayBuffer }) => void) | null;
  send(data: Uint8Array): void;
  close(): void;
}

export type SocketFactory = (url: string) => SocketLike;

export interface SessionOptions {
  url: string;
  socketFactory?: SocketFactory;
  /** called whenever the view changed */
  onUpdate?: (view: TwinView) => void;
  onStatus?: (status: SessionStatus, detail?: string) => void;
  retryBaseMs?: number;
  retryMaxMs?: number;
}

const SUBSCRIPTIONS = [
  "twin/snapshot",
  "twin/metrics",
  "twin/surface",
  "plan/result",
  "plan/status",
];

export class TwinSession {
  readonly view: TwinView = emptyView();
  private readonly opts: SessionOptions;
  private socket: SocketLike | null = null;
  private seqByTopic = new Map<string, number>();
  private retryMs: number;
  private retryTimer: ReturnType<typeof setTimeout> | null = null;
  private closed = false;

  constructor(opts: SessionOptions) {
    this.opts = opts;
    this.retryMs = opts.retryBaseMs ?? 500;
  }

  connect(): void {
    if (this.closed) return;
    this.opts.onStatus?.("connecting");
    const factory =
      this.opts.socketFactory ??
      ((url: string) => new WebSocket(url) as unknown as SocketLike);
    let sock: SocketLike;
    try {
      sock = factory(this.opts.url);
    } catch (err) {
      this.scheduleRetry(String(err));
      return;
    }
    this.socket = sock;
    sock.binaryType = "arraybuffer";
    sock.onopen = () => {
      this.retryMs = this.opts.retryBaseMs ?? 500;
      this.opts.onStatus?.("connected");
      for (const topic of SUBSCRIPTIONS) {
        this.control({ verb: "SUBSCRIBE", topic });
      }
    };
    sock.onmessage = (ev) => this.handleMessage(ev.data);
    sock.onerror = () => {};
    sock.onclose = () => {
      this.socket = null;
      this.scheduleRetry("connection closed");
    };
  }

  close(): void {
    this.closed = true;
    if (this.retryTimer !== null) clearTimeout(this.retryTimer);
    this.socket?.close();
  }

  private scheduleRetry(detail: string): void {
    if (this.closed) return;
    this.opts.onStatus?.("retrying", detail);
    const delay = this.retryMs;
    this.retryMs = Math.min(this.retryMs * 2, this.opts.retryMaxMs ?? 5000);
    this.retryTimer = setTimeout(() => this.connect(), delay);
  }

  private handleMessage(data: ArrayBuffer): void {
    let envelopes: Envelope[];
    try {
      envelopes = decodeFrames(data);
    } catch (err) {
      console.warn("undecodable frame:", err);
      return;
    }
    let dirty = false;
    for (const env of envelopes) {
      dirty = this.apply(env) || dirty;
    }
    if (dirty) this.opts.onUpdate?.(this.view);
  }

  /** Returns true when the view visibly changed. */
  apply(env: Envelope): boolean {
    switch (env.topic) {
      case "twin/snapshot":
        applySnapshot(this.view, env.payload);
        return true;
      case "twin/metrics":
        this.view.metrics = env.payload as Record<string, unknown>;
        return true;
      case "twin/surface":
        this.view.surface = decodeCloud(env.payload as any);
        return true;
      case "plan/result":
        this.view.planError = null;
        return true;
      case "plan/status": {
        const payload = env.payload as any;
        if (payload?.event === "error" || payload?.event === "rejected") {
          this.view.planError = `${payload.error}: ${payload.detail ?? ""}`;
          return true;
        }
        return false;
      }
      default:
        return false;
    }
  }

  // -- outbound ------------------------------------------------------------

  publish(topic: string, msgType: MsgType, payload: unknown): void {
    if (!this.socket) return;
    const seq = this.seqByTopic.get(topic) ?? 0;
    this.seqByTopic.set(topic, seq + 1);
    const stamp = Math.round(performance.now() * 1e6);
    this.socket.send(encodeFrame(topic, msgType, seq, stamp, payload));
  }

  private control(payload: Record<string, unknown>): void {
    this.publish("@control", "STATUS", payload);
  }

  sendAxes(axes: number[]): void {
    this.publish("ui/axes", "STATUS", { axes });
  }

  sendMode(mode: string): void {
    this.publish("ui/mode", "STATUS", { mode });
  }

  sendPlanRequest(goal: [number, number, number], budget: number): void {
    this.view.planError = null;
    this.publish("ui/plan_request", "STATUS", { goal, budget });
  }
}
