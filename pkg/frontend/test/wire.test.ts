import { describe, expect, it } from "vitest";

import { decodeCloud, decodeFrames, encodeFrame } from "../src/wire.js";

function toArrayBuffer(u8: Uint8Array): ArrayBuffer {
  return u8.buffer.slice(u8.byteOffset, u8.byteOffset + u8.byteLength) as ArrayBuffer;
}

describe("wire codec", () => {
  it("round-trips a status frame", () => {
    const frame = encodeFrame("ui/axes", "STATUS", 3, 123456, { axes: [1, 0, 0, 0, 0, 0] });
    const [env] = decodeFrames(toArrayBuffer(frame));
    expect(env.topic).toBe("ui/axes");
    expect(env.msg_type).toBe("STATUS");
    expect(env.seq).toBe(3);
    expect(env.stamp_ns).toBe(123456);
    expect(env.payload).toEqual({ axes: [1, 0, 0, 0, 0, 0] });
  });

  it("decodes concatenated frames in order", () => {
    const a = encodeFrame("t", "STATUS", 0, 1, { i: 0 });
    const b = encodeFrame("t", "STATUS", 1, 2, { i: 1 });
    const joined = new Uint8Array(a.length + b.length);
    joined.set(a, 0);
    joined.set(b, a.length);
    const envs = decodeFrames(toArrayBuffer(joined));
    expect(envs.map((e) => e.seq)).toEqual([0, 1]);
  });

  it("rejects truncated frames", () => {
    const frame = encodeFrame("t", "STATUS", 0, 1, { x: 1 });
    expect(() => decodeFrames(toArrayBuffer(frame.slice(0, frame.length - 2)))).toThrow(
      /truncated/,
    );
  });

  it("decodes point cloud base64 into float32 triplets", () => {
    const floats = new Float32Array([1.5, -2.25, 3.125, 40, 50, -60]);
    const b64 = Buffer.from(floats.buffer).toString("base64");
    const cloud = decodeCloud({ n: 2, data: b64, stamp_ns: 9, seq: 4 });
    expect(cloud.n).toBe(2);
    expect(Array.from(cloud.points)).toEqual([1.5, -2.25, 3.125, 40, 50, -60]);
    expect(cloud.stamp_ns).toBe(9);
  });

  it("rejects clouds whose byte length disagrees with n", () => {
    const b64 = Buffer.from(new Float32Array([1, 2, 3]).buffer).toString("base64");
    expect(() => decodeCloud({ n: 2, data: b64, stamp_ns: 0, seq: 0 })).toThrow(/expected 24/);
  });
});
