/**
 * Click-to-goal: intersect a camera ray with the reconstructed seafloor
 * point cloud and raise the hit by a safety standoff.
 */

export const DEFAULT_GOAL_STANDOFF = 2.0; // meters above the surface hit

export interface RayHit {
  point: [number, number, number];
  rayT: number;
  perpendicular: number;
}

/**
 * Nearest cloud point to the ray within `threshold` meters (perpendicular),
 * preferring the closest along the ray. Returns null on a miss.
 */
export function pickSurfacePoint(
  origin: [number, number, number],
  dir: [number, number, number],
  points: Float32Array,
  threshold = 0.6,
): RayHit | null {
  const n = Math.sqrt(dir[0] ** 2 + dir[1] ** 2 + dir[2] ** 2);
  if (n === 0) return null;
  const d = [dir[0] / n, dir[1] / n, dir[2] / n];
  let best: RayHit | null = null;
  for (let i = 0; i + 2 < points.length; i += 3) {
    const rx = points[i] - origin[0];
    const ry = points[i + 1] - origin[1];
    const rz = points[i + 2] - origin[2];
    const t = rx * d[0] + ry * d[1] + rz * d[2];
    if (t <= 0) continue; // behind the camera
    const px = rx - t * d[0];
    const py = ry - t * d[1];
    const pz = rz - t * d[2];
    const perp = Math.sqrt(px * px + py * py + pz * pz);
    if (perp > threshold) continue;
    if (best === null || t < best.rayT) {
      best = {
        point: [points[i], points[i + 1], points[i + 2]],
        rayT: t,
        perpendicular: perp,
      };
    }
  }
  return best;
}

/** Hit point -> plan goal: raised by the standoff, straight up. */
export function goalFromHit(
  hit: [number, number, number],
  standoff = DEFAULT_GOAL_STANDOFF,
): [number, number, number] {
  return [hit[0], hit[1], hit[2] + standoff];
}
