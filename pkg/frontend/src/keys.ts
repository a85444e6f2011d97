/**
 * Keyboard teleoperation: keys map onto the six wrench axes
 * (surge, sway, heave, roll, pitch, yaw). Holding the + and - key of the
 * same axis cancels to zero.
 */

export const AXIS_COUNT = 6;

export interface KeyBinding {
  /** KeyboardEvent.code, e.g. "KeyW" */
  code: string;
  axis: number; // 0..5
  sign: 1 | -1;
}

export const DEFAULT_BINDINGS: KeyBinding[] = [
  { code: "KeyW", axis: 0, sign: 1 }, // surge +
  { code: "KeyS", axis: 0, sign: -1 }, // surge -
  { code: "KeyA", axis: 1, sign: 1 }, // sway left
  { code: "KeyD", axis: 1, sign: -1 }, // sway right
  { code: "KeyR", axis: 2, sign: 1 }, // heave up
  { code: "KeyF", axis: 2, sign: -1 }, // heave down
  { code: "KeyQ", axis: 5, sign: 1 }, // yaw left
  { code: "KeyE", axis: 5, sign: -1 }, // yaw right
];

/** Reject tables that bind one key to two axes (or twice to one). */
export function validateBindings(bindings: KeyBinding[]): void {
  const seen = new Set<string>();
  for (const b of bindings) {
    if (seen.has(b.code)) {
      throw new Error(`key ${b.code} bound more than once`);
    }
    if (b.axis < 0 || b.axis >= AXIS_COUNT) {
      throw new Error(`axis ${b.axis} out of range for ${b.code}`);
    }
    seen.add(b.code);
  }
}

/**
 * Pressed keys -> six axes in [-1, 1]: each axis is (+1 if its positive key
 * is held) + (-1 if its negative key is held), so both held gives 0.
 */
export function keysToAxes(
  pressed: ReadonlySet<string>,
  bindings: KeyBinding[] = DEFAULT_BINDINGS,
): number[] {
  const axes = new Array(AXIS_COUNT).fill(0);
  for (const b of bindings) {
    if (pressed.has(b.code)) {
      axes[b.axis] += b.sign;
    }
  }
  return axes.map((a) => Math.max(-1, Math.min(1, a)));
}
