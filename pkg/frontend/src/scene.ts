/**
 * Three.js scene: robot model over the point-sprite seafloor, planned-path
 * polyline with green waypoint markers, goal marker, and three viewpoints.
 *
 * World frame is right-handed z-up (water surface at z = 0); the camera's
 * up vector is pinned to +z so world coordinates are used directly. The
 * robot pose is always the latest snapshot pose, never extrapolated.
 */

import * as THREE from "three";
import { CloudMsg, PathMsg, PoseMsg } from "./wire.js";

export type Viewpoint = "FIRST_PERSON" | "THIRD_PERSON" | "FREE_ORBIT";

const THIRD_PERSON_OFFSET = new THREE.Vector3(-4.0, 0.0, 2.5); // robot frame

export class TwinScene {
  readonly renderer: THREE.WebGLRenderer;
  readonly scene: THREE.Scene;
  readonly camera: THREE.PerspectiveCamera;
  viewpoint: Viewpoint = "THIRD_PERSON";

  private robot: THREE.Group;
  private terrain: THREE.Points | null = null;
  private terrainVersion = -1;
  private pathLine: THREE.Line | null = null;
  private waypointMarkers: THREE.Group | null = null;
  private goalMarker: THREE.Mesh;
  private orbitTarget = new THREE.Vector3(0, 0, -8);
  private orbitAzimuth = Math.PI / 4;
  private orbitElevation = 0.6;
  private orbitRadius = 30;
  private lastPose: PoseMsg | null = null;

  constructor(canvas: HTMLCanvasElement) {
    this.renderer = new THREE.WebGLRenderer({ canvas, antialias: true });
    this.scene = new THREE.Scene();
    this.scene.background = new THREE.Color(0x06182e);
    this.scene.fog = new THREE.Fog(0x06182e, 25, 90);
    this.camera = new THREE.PerspectiveCamera(60, 1, 0.05, 500);
    this.camera.up.set(0, 0, 1);

    this.scene.add(new THREE.AmbientLight(0x8899bb, 1.2));
    const sun = new THREE.DirectionalLight(0xbfdcff, 1.4);
    sun.position.set(10, 6, 30);
    this.scene.add(sun);

    this.robot = buildRobotModel();
    this.scene.add(this.robot);

    this.goalMarker = new THREE.Mesh(
      new THREE.SphereGeometry(0.3, 16, 12),
      new THREE.MeshBasicMaterial({ color: 0xff49c4, wireframe: true }),
    );
    this.goalMarker.visible = false;
    this.scene.add(this.goalMarker);

    const surfacePlane = new THREE.Mesh(
      new THREE.PlaneGeometry(400, 400),
      new THREE.MeshBasicMaterial({
        color: 0x1c4a7a,
        transparent: true,
        opacity: 0.25,
        side: THREE.DoubleSide,
      }),
    );
    surfacePlane.position.set(0, 0, 0); // the water surface, z = 0
    this.scene.add(surfacePlane);
  }

  resize(width: number, height: number): void {
    this.renderer.setSize(width, height, false);
    this.camera.aspect = width / height;
    this.camera.updateProjectionMatrix();
  }

  /** Exact snapshot pose; the invariant is no client-side extrapolation. */
  setRobotPose(pose: PoseMsg): void {
    this.lastPose = pose;
    this.robot.position.set(pose.position[0], pose.position[1], pose.position[2]);
    const [w, x, y, z] = pose.orientation;
    this.robot.quaternion.set(x, y, z, w);
  }

  get robotPosition(): THREE.Vector3 {
    return this.robot.position.clone();
  }

  setTerrain(cloud: CloudMsg, version: number): void {
    if (version === this.terrainVersion) return;
    this.terrainVersion = version;
    if (this.terrain) {
      this.scene.remove(this.terrain);
      this.terrain.geometry.dispose();
      (this.terrain.material as THREE.Material).dispose();
    }
    const geometry = new THREE.BufferGeometry();
    geometry.setAttribute("position", new THREE.BufferAttribute(cloud.points, 3));
    geometry.setAttribute(
      "color",
      new THREE.BufferAttribute(depthColors(cloud.points), 3),
    );
    const material = new THREE.PointsMaterial({ size: 0.22, vertexColors: true });
    this.terrain = new THREE.Points(geometry, material);
    this.scene.add(this.terrain);
    if (cloud.n > 0) {
      geometry.computeBoundingSphere();
      const sphere = geometry.boundingSphere;
      if (sphere) this.orbitTarget.copy(sphere.center);
    }
  }

  get terrainPointCount(): number {
    return this.terrain
      ? (this.terrain.geometry.getAttribute("position") as THREE.BufferAttribute).count
      : 0;
  }

  setPath(path: PathMsg | null): void {
    if (this.pathLine) {
      this.scene.remove(this.pathLine);
      this.pathLine.geometry.dispose();
      this.pathLine = null;
    }
    if (this.waypointMarkers) {
      this.scene.remove(this.waypointMarkers);
      this.waypointMarkers = null;
    }
    if (!path || path.waypoints.length === 0) return;
    const flat = new Float32Array(path.waypoints.length * 3);
    path.waypoints.forEach((wp, i) => flat.set(wp, i * 3));
    const geometry = new THREE.BufferGeometry();
    geometry.setAttribute("position", new THREE.BufferAttribute(flat, 3));
    this.pathLine = new THREE.Line(
      geometry,
      new THREE.LineBasicMaterial({ color: 0x27e858 }),
    );
    this.scene.add(this.pathLine);

    this.waypointMarkers = new THREE.Group();
    const markerGeometry = new THREE.SphereGeometry(0.12, 8, 6);
    const markerMaterial = new THREE.MeshBasicMaterial({ color: 0x27e858 });
    for (const wp of path.waypoints) {
      const marker = new THREE.Mesh(markerGeometry, markerMaterial);
      marker.position.set(wp[0], wp[1], wp[2]);
      this.waypointMarkers.add(marker);
    }
    this.scene.add(this.waypointMarkers);
  }

  get pathVertexCount(): number {
    return this.waypointMarkers ? this.waypointMarkers.children.length : 0;
  }

  setGoalMarker(goal: [number, number, number] | null): void {
    if (!goal) {
      this.goalMarker.visible = false;
      return;
    }
    this.goalMarker.visible = true;
    this.goalMarker.position.set(goal[0], goal[1], goal[2]);
  }

  cycleViewpoint(): Viewpoint {
    const order: Viewpoint[] = ["FIRST_PERSON", "THIRD_PERSON", "FREE_ORBIT"];
    this.viewpoint = order[(order.indexOf(this.viewpoint) + 1) % order.length];
    return this.viewpoint;
  }

  orbitBy(dAzimuth: number, dElevation: number): void {
    this.orbitAzimuth += dAzimuth;
    this.orbitElevation = Math.max(
      -1.4,
      Math.min(1.4, this.orbitElevation + dElevation),
    );
  }

  orbitZoom(factor: number): void {
    this.orbitRadius = Math.max(2, Math.min(150, this.orbitRadius * factor));
  }

  /** Camera ray through a canvas pixel (for click-to-goal picking). */
  pixelRay(ndcX: number, ndcY: number): { origin: number[]; dir: number[] } {
    const raycaster = new THREE.Raycaster();
    raycaster.setFromCamera(new THREE.Vector2(ndcX, ndcY), this.camera);
    return {
      origin: raycaster.ray.origin.toArray(),
      dir: raycaster.ray.direction.toArray(),
    };
  }

  render(): void {
    this.updateCamera();
    this.renderer.render(this.scene, this.camera);
  }

  private updateCamera(): void {
    if (this.viewpoint === "FIRST_PERSON") {
      // rigidly attached: slightly above the hull, looking along body +x
      const eye = this.robot.localToWorld(new THREE.Vector3(0.25, 0, 0.12));
      const ahead = this.robot.localToWorld(new THREE.Vector3(4, 0, -0.8));
      this.camera.position.copy(eye);
      this.camera.lookAt(ahead);
    } else if (this.viewpoint === "THIRD_PERSON") {
      const eye = this.robot.localToWorld(THIRD_PERSON_OFFSET.clone());
      this.camera.position.copy(eye);
      this.camera.lookAt(this.robot.position);
    } else {
      const ce = Math.cos(this.orbitElevation);
      this.camera.position.set(
        this.orbitTarget.x + this.orbitRadius * ce * Math.cos(this.orbitAzimuth),
        this.orbitTarget.y + this.orbitRadius * ce * Math.sin(this.orbitAzimuth),
        this.orbitTarget.z + this.orbitRadius * Math.sin(this.orbitElevation),
      );
      this.camera.lookAt(this.orbitTarget);
    }
  }
}

function buildRobotModel(): THREE.Group {
  const group = new THREE.Group();
  const hull = new THREE.Mesh(
    new THREE.BoxGeometry(0.48, 0.34, 0.26),
    new THREE.MeshStandardMaterial({ color: 0xf2c521, roughness: 0.6 }),
  );
  group.add(hull);
  const nose = new THREE.Mesh(
    new THREE.ConeGeometry(0.1, 0.22, 12),
    new THREE.MeshStandardMaterial({ color: 0xff5533 }),
  );
  nose.rotation.z = -Math.PI / 2; // cone points along body +x
  nose.position.set(0.32, 0, 0);
  group.add(nose);
  const ring = new THREE.Mesh(
    new THREE.TorusGeometry(0.42, 0.02, 8, 24),
    new THREE.MeshBasicMaterial({ color: 0x3fd2ff }),
  );
  group.add(ring);
  return group;
}

function depthColors(points: Float32Array): Float32Array {
  let zMin = Infinity;
  let zMax = -Infinity;
  for (let i = 2; i < points.length; i += 3) {
    zMin = Math.min(zMin, points[i]);
    zMax = Math.max(zMax, points[i]);
  }
  const span = Math.max(zMax - zMin, 1e-6);
  const colors = new Float32Array(points.length);
  for (let i = 0; i < points.length; i += 3) {
    const t = (points[i + 2] - zMin) / span; // 0 deep .. 1 shallow
    colors[i] = 0.15 + 0.35 * t;
    colors[i + 1] = 0.35 + 0.5 * t;
    colors[i + 2] = 0.55 + 0.3 * t;
  }
  return colors;
}
