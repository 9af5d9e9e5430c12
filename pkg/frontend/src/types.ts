// Client-side mirror of the scene JSON schema and the /v1 API payloads.

export interface Road {
  polygon: [number, number][];
}

export interface Vehicle {
  center: [number, number];
  yaw: number;
  length: number;
  width: number;
  height: number | null;
}

export interface Camera {
  name: string;
  K: number[][];
  R: number[][];
  t: number[];
  image_wh: [number, number];
}

export interface Scene {
  extent_m: number;
  weather: string;
  roads: Road[];
  vehicles: Vehicle[];
  cameras: Camera[];
  seed: number;
}

export interface Violation {
  code: string;
  message: string;
  subject: string;
  severity: "error" | "warning";
}

export interface ValidateResponse {
  valid: boolean;
  violations: Violation[];
}

export interface SemanticPayload {
  width: number;
  height: number;
  classes: string[];
  resolution_tag: string;
  png: string;
  labels: string;
}

export interface ProjectedView {
  camera_name: string;
  initial: SemanticPayload;
  refined: SemanticPayload;
}

export interface ProjectResponse {
  views: ProjectedView[];
}

export interface GeneratedView {
  camera_name: string;
  image_png: string;
  condition: SemanticPayload;
  seed: number;
  adapter_id: string | null;
  warning: string | null;
}

export interface GenerationPayload {
  views: GeneratedView[];
  panel_png: string;
  config_hash: string;
  timing: Record<string, number>;
}

export interface JobStatus {
  job_id: string;
  status: "queued" | "running" | "done" | "failed";
  result: GenerationPayload | null;
  error: string | null;
}

export const WEATHERS = ["clear", "rain", "fog", "sunset"] as const;
