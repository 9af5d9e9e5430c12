// Editor state: a working scene, selection, undo history, and result caches
// keyed by scene-content hash. Pure logic, no DOM.

import type { GenerationPayload, ProjectResponse, Scene, Vehicle, Violation } from "./types.js";

export type Selection =
  | { kind: "none" }
  | { kind: "vehicle"; index: number }
  | { kind: "road"; index: number; vertex: number | null }
  | { kind: "camera"; name: string };

export interface CachedResult<T> {
  sceneHash: string;
  payload: T;
}

export interface EditorState {
  scene: Scene;
  selection: Selection;
  dirty: boolean;
  undoStack: string[];
  violations: Violation[];
  projection: CachedResult<ProjectResponse> | null;
  generation: CachedResult<GenerationPayload> | null;
  generationSeed: number;
  generationWeather: string;
}

// Canonical serialization: fixed key order matching the scene JSON schema,
// so export -> import -> export is byte-identical.
export function serializeScene(scene: Scene): string {
  const canonical = {
    extent_m: scene.extent_m,
    weather: scene.weather,
    roads: scene.roads.map((r) => ({ polygon: r.polygon.map((p) => [p[0], p[1]]) })),
    vehicles: scene.vehicles.map((v) => ({
      center: [v.center[0], v.center[1]],
      yaw: v.yaw,
      length: v.length,
      width: v.width,
      height: v.height,
    })),
    cameras: scene.cameras.map((c) => ({
      name: c.name,
      K: c.K,
      R: c.R,
      t: c.t,
      image_wh: c.image_wh,
    })),
    seed: scene.seed,
  };
  return JSON.stringify(canonical, null, 1);
}

export function parseScene(text: string): Scene {
  const raw = JSON.parse(text);
  for (const key of ["extent_m", "weather", "roads", "vehicles", "cameras", "seed"]) {
    if (!(key in raw)) throw new Error(`scene JSON missing field ${key}`);
  }
  return raw as Scene;
}

// FNV-1a over the canonical serialization; cheap content key for caches.
export function sceneHash(scene: Scene): string {
  const text = serializeScene(scene);
  let hash = 0x811c9dc5;
  for (let i = 0; i < text.length; i++) {
    hash ^= text.charCodeAt(i);
    hash = Math.imul(hash, 0x01000193) >>> 0;
  }
  return hash.toString(16).padStart(8, "0");
}

export function initialState(scene: Scene): EditorState {
  return {
    scene,
    selection: { kind: "none" },
    dirty: false,
    undoStack: [],
    violations: [],
    projection: null,
    generation: null,
    generationSeed: 0,
    generationWeather: scene.weather,
  };
}

function pushUndo(state: EditorState): EditorState {
  return { ...state, undoStack: [...state.undoStack, serializeScene(state.scene)] };
}

function withScene(state: EditorState, scene: Scene): EditorState {
  return { ...state, scene, dirty: true };
}

// -- edits -------------------------------------------------------------------

export function moveVehicle(state: EditorState, index: number, dx: number, dy: number): EditorState {
  const next = pushUndo(state);
  const vehicles = state.scene.vehicles.map((v, i) =>
    i === index ? { ...v, center: [v.center[0] + dx, v.center[1] + dy] as [number, number] } : v,
  );
  return withScene(next, { ...state.scene, vehicles });
}

export function rotateVehicle(state: EditorState, index: number, dYaw: number): EditorState {
  const next = pushUndo(state);
  const vehicles = state.scene.vehicles.map((v, i) => {
    if (i !== index) return v;
    let yaw = v.yaw + dYaw;
    while (yaw > Math.PI) yaw -= 2 * Math.PI;
    while (yaw <= -Math.PI) yaw += 2 * Math.PI;
    return { ...v, yaw };
  });
  return withScene(next, { ...state.scene, vehicles });
}

export function addVehicle(state: EditorState, center: [number, number]): EditorState {
  const next = pushUndo(state);
  const vehicle: Vehicle = { center, yaw: 0, length: 4.5, width: 1.9, height: null };
  const scene = { ...state.scene, vehicles: [...state.scene.vehicles, vehicle] };
  return { ...withScene(next, scene), selection: { kind: "vehicle", index: scene.vehicles.length - 1 } };
}

export function removeVehicle(state: EditorState, index: number): EditorState {
  const next = pushUndo(state);
  const scene = { ...state.scene, vehicles: state.scene.vehicles.filter((_, i) => i !== index) };
  return { ...withScene(next, scene), selection: { kind: "none" } };
}

export function moveRoadVertex(
  state: EditorState,
  road: number,
  vertex: number,
  x: number,
  y: number,
): EditorState {
  const next = pushUndo(state);
  const roads = state.scene.roads.map((r, i) =>
    i === road
      ? { polygon: r.polygon.map((p, j) => (j === vertex ? ([x, y] as [number, number]) : p)) }
      : r,
  );
  return withScene(next, { ...state.scene, roads });
}

export function setWeather(state: EditorState, weather: string): EditorState {
  const next = pushUndo(state);
  return withScene(next, { ...state.scene, weather });
}

export function undo(state: EditorState): EditorState {
  if (state.undoStack.length === 0) return state;
  const stack = [...state.undoStack];
  const previous = stack.pop()!;
  return {
    ...state,
    scene: parseScene(previous),
    undoStack: stack,
    dirty: true,
    selection: { kind: "none" },
  };
}

// -- result caching & staleness ----------------------------------------------

export function storeProjection(state: EditorState, payload: ProjectResponse): EditorState {
  return { ...state, projection: { sceneHash: sceneHash(state.scene), payload } };
}

export function storeGeneration(state: EditorState, payload: GenerationPayload): EditorState {
  return { ...state, generation: { sceneHash: sceneHash(state.scene), payload } };
}

// A cached result is stale when the working scene no longer matches the hash
// it was computed for; stale results are flagged, never silently current.
export function projectionStale(state: EditorState): boolean {
  return state.projection !== null && state.projection.sceneHash !== sceneHash(state.scene);
}

export function generationStale(state: EditorState): boolean {
  return state.generation !== null && state.generation.sceneHash !== sceneHash(state.scene);
}
