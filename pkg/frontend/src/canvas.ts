// BEV canvas: world-meter scene drawing (north-up) plus hit testing for
// drag interactions. Display transforms only; all geometry math lives on
// the server.

import type { Scene, Vehicle, Violation } from "./types.js";
import type { Selection } from "./state.js";

export interface ViewTransform {
  scale: number; // px per meter
  cx: number; // canvas center x
  cy: number;
}

export function makeTransform(canvas: { width: number; height: number }, extent: number): ViewTransform {
  const scale = Math.min(canvas.width, canvas.height) / (extent * 1.1);
  return { scale, cx: canvas.width / 2, cy: canvas.height / 2 };
}

export function worldToScreen(t: ViewTransform, x: number, y: number): [number, number] {
  return [t.cx + x * t.scale, t.cy - y * t.scale];
}

export function screenToWorld(t: ViewTransform, px: number, py: number): [number, number] {
  return [(px - t.cx) / t.scale, (t.cy - py) / t.scale];
}

export function vehicleCorners(v: Vehicle): [number, number][] {
  const c = Math.cos(v.yaw);
  const s = Math.sin(v.yaw);
  const hl = v.length / 2;
  const hw = v.width / 2;
  const local: [number, number][] = [
    [hl, hw],
    [-hl, hw],
    [-hl, -hw],
    [hl, -hw],
  ];
  return local.map(([x, y]) => [v.center[0] + c * x - s * y, v.center[1] + s * x + c * y]);
}

export function pointInVehicle(v: Vehicle, x: number, y: number): boolean {
  const dx = x - v.center[0];
  const dy = y - v.center[1];
  const c = Math.cos(v.yaw);
  const s = Math.sin(v.yaw);
  const u = dx * c + dy * s;
  const w = -dx * s + dy * c;
  return Math.abs(u) <= v.length / 2 && Math.abs(w) <= v.width / 2;
}

/** Hit test in priority order: yaw handle, vehicle body, road vertex. */
export function hitTest(scene: Scene, x: number, y: number, tolM: number): Selection {
  for (let i = scene.vehicles.length - 1; i >= 0; i--) {
    if (pointInVehicle(scene.vehicles[i], x, y)) return { kind: "vehicle", index: i };
  }
  for (let r = 0; r < scene.roads.length; r++) {
    const poly = scene.roads[r].polygon;
    for (let v = 0; v < poly.length; v++) {
      const dx = poly[v][0] - x;
      const dy = poly[v][1] - y;
      if (Math.hypot(dx, dy) <= tolM) return { kind: "road", index: r, vertex: v };
    }
  }
  return { kind: "none" };
}

/** Yaw-handle position: just beyond the vehicle nose. */
export function yawHandle(v: Vehicle): [number, number] {
  const r = v.length / 2 + 1.0;
  return [v.center[0] + Math.cos(v.yaw) * r, v.center[1] + Math.sin(v.yaw) * r];
}

/** Ground-plane frustum wedge for a camera (two edge rays of length range). */
export function frustumWedge(camera: Scene["cameras"][number], range: number): [number, number][] {
  const fx = camera.K[0][0];
  const w = camera.image_wh[0];
  const halfFov = Math.atan(w / 2 / fx);
  // camera forward in world: third row of R transposed times [0,0,1]
  const fwd = [camera.R[2][0], camera.R[2][1]];
  const yaw = Math.atan2(fwd[1], fwd[0]);
  const origin: [number, number] = [camera.t[0], camera.t[1]];
  return [
    origin,
    [origin[0] + Math.cos(yaw - halfFov) * range, origin[1] + Math.sin(yaw - halfFov) * range],
    [origin[0] + Math.cos(yaw + halfFov) * range, origin[1] + Math.sin(yaw + halfFov) * range],
  ];
}

const COLORS = {
  background: "#0d1117",
  road: "#4a4a52",
  roadEdge: "#6a6a74",
  vehicle: "#c24444",
  vehicleSel: "#ff8833",
  handle: "#ffcc33",
  frustum: "rgba(90, 150, 220, 0.25)",
  violation: "#ff3355",
  grid: "#1c222b",
};

export function drawScene(
  ctx: CanvasRenderingContext2D,
  scene: Scene,
  selection: Selection,
  violations: Violation[],
  t: ViewTransform,
): void {
  const { width, height } = ctx.canvas;
  ctx.fillStyle = COLORS.background;
  ctx.fillRect(0, 0, width, height);

  // 10 m grid
  ctx.strokeStyle = COLORS.grid;
  ctx.lineWidth = 1;
  const half = scene.extent_m / 2;
  for (let m = -half; m <= half; m += 10) {
    let [x1, y1] = worldToScreen(t, m, -half);
    let [x2, y2] = worldToScreen(t, m, half);
    ctx.beginPath();
    ctx.moveTo(x1, y1);
    ctx.lineTo(x2, y2);
    ctx.stroke();
    [x1, y1] = worldToScreen(t, -half, m);
    [x2, y2] = worldToScreen(t, half, m);
    ctx.beginPath();
    ctx.moveTo(x1, y1);
    ctx.lineTo(x2, y2);
    ctx.stroke();
  }

  const violated = new Set(
    violations.flatMap((v) => v.subject.split(",").map((s) => v.subject.split(":")[0] + ":" + s.replace(/^\D*/, ""))),
  );

  for (let i = 0; i < scene.roads.length; i++) {
    const poly = scene.roads[i].polygon;
    ctx.beginPath();
    poly.forEach(([x, y], j) => {
      const [px, py] = worldToScreen(t, x, y);
      j === 0 ? ctx.moveTo(px, py) : ctx.lineTo(px, py);
    });
    ctx.closePath();
    ctx.fillStyle = COLORS.road;
    ctx.fill();
    ctx.strokeStyle = violated.has(`road:${i}`) ? COLORS.violation : COLORS.roadEdge;
    ctx.lineWidth = 1.5;
    ctx.stroke();
    if (selection.kind === "road" && selection.index === i) {
      for (const [x, y] of poly) {
        const [px, py] = worldToScreen(t, x, y);
        ctx.fillStyle = COLORS.handle;
        ctx.fillRect(px - 3, py - 3, 6, 6);
      }
    }
  }

  // camera frusta
  for (const cam of scene.cameras) {
    const wedge = frustumWedge(cam, scene.extent_m * 0.35);
    ctx.beginPath();
    wedge.forEach(([x, y], j) => {
      const [px, py] = worldToScreen(t, x, y);
      j === 0 ? ctx.moveTo(px, py) : ctx.lineTo(px, py);
    });
    ctx.closePath();
    ctx.fillStyle = COLORS.frustum;
    ctx.fill();
  }

  for (let i = 0; i < scene.vehicles.length; i++) {
    const v = scene.vehicles[i];
    const selected = selection.kind === "vehicle" && selection.index === i;
    ctx.beginPath();
    vehicleCorners(v).forEach(([x, y], j) => {
      const [px, py] = worldToScreen(t, x, y);
      j === 0 ? ctx.moveTo(px, py) : ctx.lineTo(px, py);
    });
    ctx.closePath();
    ctx.fillStyle = selected ? COLORS.vehicleSel : COLORS.vehicle;
    ctx.fill();
    if (violated.has(`vehicle:${i}`)) {
      ctx.strokeStyle = COLORS.violation;
      ctx.lineWidth = 2.5;
      ctx.stroke();
    }
    if (selected) {
      const [hx, hy] = yawHandle(v);
      const [px, py] = worldToScreen(t, hx, hy);
      ctx.beginPath();
      ctx.arc(px, py, 5, 0, 2 * Math.PI);
      ctx.fillStyle = COLORS.handle;
      ctx.fill();
    }
  }
}
