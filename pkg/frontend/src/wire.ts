/**
 * Envelope wire format: 4-byte little-endian length prefix + JSON body.
 * Identical on raw TCP and inside WebSocket binary frames; point cloud and
 * image payloads carry base64 binary.
 */

export type MsgType =
  | "POINTCLOUD"
  | "IMAGE"
  | "POSE"
  | "WRENCH"
  | "PATH"
  | "PLAN_REQUEST"
  | "STATUS";

export interface PoseMsg {
  position: [number, number, number];
  orientation: [number, number, number, number]; // w, x, y, z
  stamp_ns: number;
  frame: string;
}

export interface PathMsg {
  waypoints: [number, number, number][];
  cost: number;
  planner_id: "RRT" | "RRT_STAR";
  iterations: number;
  elapsed: number;
}

export interface CloudMsg {
  /** xyz triplets, little-endian float32, decoded from base64 */
  points: Float32Array;
  n: number;
  stamp_ns: number;
  seq: number;
}

export interface Envelope {
  topic: string;
  msg_type: MsgType;
  seq: number;
  stamp_ns: number;
  payload: unknown;
}

const encoder = new TextEncoder();
const decoder = new TextDecoder();

export function encodeFrame(
  topic: string,
  msgType: MsgType,
  seq: number,
  stampNs: number,
  payload: unknown,
): Uint8Array {
  const body = encoder.encode(
    JSON.stringify({ topic, msg_type: msgType, seq, stamp_ns: stampNs, payload }),
  );
  const frame = new Uint8Array(4 + body.length);
  new DataView(frame.buffer).setUint32(0, body.length, true);
  frame.set(body, 4);
  return frame;
}

/** Split a buffer into decoded envelopes (a WS message may carry several). */
export function decodeFrames(data: ArrayBuffer): Envelope[] {
  const view = new DataView(data);
  const out: Envelope[] = [];
  let pos = 0;
  while (pos + 4 <= data.byteLength) {
    const n = view.getUint32(pos, true);
    if (pos + 4 + n > data.byteLength) {
      throw new Error(`truncated frame at offset ${pos}`);
    }
    const body = decoder.decode(new Uint8Array(data, pos + 4, n));
    const obj = JSON.parse(body);
    out.push({
      topic: obj.topic,
      msg_type: obj.msg_type,
      seq: obj.seq,
      stamp_ns: obj.stamp_ns,
      payload: obj.payload,
    });
    pos += 4 + n;
  }
  if (pos !== data.byteLength) {
    throw new Error(`trailing bytes after frame at offset ${pos}`);
  }
  return out;
}

export function base64ToBytes(b64: string): Uint8Array {
  const raw = atob(b64);
  const out = new Uint8Array(raw.length);
  for (let i = 0; i < raw.length; i++) out[i] = raw.charCodeAt(i);
  return out;
}

/** POINTCLOUD payload -> typed points; validates the declared count. */
export function decodeCloud(payload: {
  n: number;
  data: string;
  stamp_ns: number;
  seq: number;
}): CloudMsg {
  const bytes = base64ToBytes(payload.data);
  if (bytes.length !== payload.n * 12) {
    throw new Error(`cloud data ${bytes.length} bytes, expected ${payload.n * 12}`);
  }
  const points = new Float32Array(bytes.buffer, bytes.byteOffset, payload.n * 3);
  return { points, n: payload.n, stamp_ns: payload.stamp_ns, seq: payload.seq };
}
