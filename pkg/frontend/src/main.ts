// App wiring: BEV canvas editing on the left, projection / generation
// panels on the right. The server is the single source of truth for all
// geometry; this file only handles gestures and display.

import { ApiClient, LatestWins, debounce } from "./api.js";
import { drawScene, hitTest, makeTransform, screenToWorld, yawHandle } from "./canvas.js";
import {
  EditorState,
  addVehicle,
  generationStale,
  initialState,
  moveRoadVertex,
  moveVehicle,
  parseScene,
  projectionStale,
  removeVehicle,
  rotateVehicle,
  sceneHash,
  serializeScene,
  setWeather,
  storeGeneration,
  storeProjection,
  undo,
} from "./state.js";
import type { Scene } from "./types.js";
import { WEATHERS } from "./types.js";

const API_BASE = (window as any).B2S_API ?? "";
const api = new ApiClient(API_BASE);

const DEFAULT_SCENE: Scene = {
  extent_m: 50,
  weather: "clear",
  roads: [
    {
      polygon: [
        [-25, -6],
        [25, -6],
        [25, 6],
        [-25, 6],
      ],
    },
  ],
  vehicles: [{ center: [10, 0], yaw: 0, length: 4.5, width: 1.9, height: null }],
  cameras: [],
  seed: 0,
};

document.body.innerHTML = `
  <div id="app">
    <div id="left">
      <h1>BEV layout editor</h1>
      <canvas id="bev" width="520" height="520"></canvas>
      <div id="toolbar">
        <button id="addVehicle">Add vehicle</button>
        <button id="removeVehicle">Remove selected</button>
        <button id="undoBtn">Undo</button>
        <select id="weather"></select>
        <label>seed <input id="seed" type="number" value="0" style="width:5em"></label>
        <button id="exportBtn">Export</button>
        <button id="importBtn">Import</button>
      </div>
      <div id="violations"></div>
      <div id="status"></div>
    </div>
    <div id="right">
      <div class="panel-head">
        <h2>Projected semantics</h2>
        <button id="projectBtn">Project</button>
        <span id="projStale" class="stale-badge" hidden>stale</span>
      </div>
      <div id="legend">road <span class="sw road"></span> vehicle <span class="sw veh"></span> background <span class="sw bg"></span></div>
      <div id="projPanels" class="panels"></div>
      <div class="panel-head">
        <h2>Generated views</h2>
        <button id="generateBtn">Generate</button>
        <span id="genStale" class="stale-badge" hidden>stale</span>
      </div>
      <div id="genPanels" class="panels"></div>
      <div id="jobStatus"></div>
    </div>
  </div>
  <textarea id="io" hidden rows="14" cols="80"></textarea>
`;

const canvas = document.getElementById("bev") as HTMLCanvasElement;
const ctx = canvas.getContext("2d")!;
const weatherSel = document.getElementById("weather") as HTMLSelectElement;
for (const w of WEATHERS) {
  const opt = document.createElement("option");
  opt.value = w;
  opt.textContent = w;
  weatherSel.appendChild(opt);
}

let state: EditorState = initialState(DEFAULT_SCENE);
let offline = false;
const projectGuard = new LatestWins();

function setState(next: EditorState): void {
  state = next;
  render();
  if (next.dirty) validateSoon();
}

function render(): void {
  const t = makeTransform(canvas, state.scene.extent_m);
  drawScene(ctx, state.scene, state.selection, state.violations, t);
  (document.getElementById("projStale") as HTMLElement).hidden = !projectionStale(state);
  (document.getElementById("genStale") as HTMLElement).hidden = !generationStale(state);
  const vio = document.getElementById("violations")!;
  vio.innerHTML = state.violations
    .map((v) => `<div class="violation ${v.severity}">${v.code}: ${v.message}</div>`)
    .join("");
  const status = document.getElementById("status")!;
  status.textContent = offline
    ? "service unreachable - cached panels retained"
    : `scene ${sceneHash(state.scene)}`;
}

const validateSoon = debounce(async () => {
  try {
    const result = await api.validate(state.scene);
    offline = false;
    state = { ...state, violations: result.violations };
  } catch {
    offline = true;
  }
  render();
}, 300);

// -- canvas gestures ----------------------------------------------------------

type Drag =
  | { kind: "vehicle"; index: number; lastX: number; lastY: number }
  | { kind: "yaw"; index: number }
  | { kind: "vertex"; road: number; vertex: number }
  | null;
let drag: Drag = null;

canvas.addEventListener("mousedown", (ev) => {
  const t = makeTransform(canvas, state.scene.extent_m);
  const [x, y] = screenToWorld(t, ev.offsetX, ev.offsetY);
  if (state.selection.kind === "vehicle") {
    const v = state.scene.vehicles[state.selection.index];
    const [hx, hy] = yawHandle(v);
    if (Math.hypot(hx - x, hy - y) < 1.2) {
      drag = { kind: "yaw", index: state.selection.index };
      return;
    }
  }
  const hit = hitTest(state.scene, x, y, 1.0);
  if (hit.kind === "vehicle") {
    drag = { kind: "vehicle", index: hit.index, lastX: x, lastY: y };
  } else if (hit.kind === "road" && hit.vertex !== null) {
    drag = { kind: "vertex", road: hit.index, vertex: hit.vertex };
  }
  setState({ ...state, selection: hit });
});

canvas.addEventListener("mousemove", (ev) => {
  if (!drag) return;
  const t = makeTransform(canvas, state.scene.extent_m);
  const [x, y] = screenToWorld(t, ev.offsetX, ev.offsetY);
  if (drag.kind === "vehicle") {
    setState(moveVehicle(state, drag.index, x - drag.lastX, y - drag.lastY));
    drag = { ...drag, lastX: x, lastY: y };
  } else if (drag.kind === "yaw") {
    const v = state.scene.vehicles[drag.index];
    const target = Math.atan2(y - v.center[1], x - v.center[0]);
    setState(rotateVehicle(state, drag.index, target - v.yaw));
  } else {
    setState(moveRoadVertex(state, drag.road, drag.vertex, x, y));
  }
});

window.addEventListener("mouseup", () => (drag = null));

// -- toolbar -------------------------------------------------------------------

document.getElementById("addVehicle")!.onclick = () => setState(addVehicle(state, [0, 0]));
document.getElementById("removeVehicle")!.onclick = () => {
  if (state.selection.kind === "vehicle") setState(removeVehicle(state, state.selection.index));
};
document.getElementById("undoBtn")!.onclick = () => setState(undo(state));
weatherSel.onchange = () => setState(setWeather(state, weatherSel.value));

document.getElementById("exportBtn")!.onclick = () => {
  const io = document.getElementById("io") as HTMLTextAreaElement;
  io.hidden = false;
  io.value = serializeScene(state.scene);
};
document.getElementById("importBtn")!.onclick = () => {
  const io = document.getElementById("io") as HTMLTextAreaElement;
  if (io.hidden) {
    io.hidden = false;
    return;
  }
  try {
    setState({ ...initialState(parseScene(io.value)), violations: [] });
  } catch (err) {
    alert(`import failed: ${err}`);
  }
};

// -- projection panels ----------------------------------------------------------

document.getElementById("projectBtn")!.onclick = async () => {
  const reqId = projectGuard.next();
  try {
    const result = await api.project(state.scene);
    offline = false;
    if (!projectGuard.isCurrent(reqId)) return; // superseded
    setState(storeProjection(state, result));
    const panels = document.getElementById("projPanels")!;
    panels.innerHTML = result.views
      .map(
        (v) => `
        <figure>
          <img src="data:image/png;base64,${v.initial.png}" width="128" alt="${v.camera_name} initial">
          <img src="data:image/png;base64,${v.refined.png}" width="128" alt="${v.camera_name} refined">
          <figcaption>${v.camera_name}: initial | refined</figcaption>
        </figure>`,
      )
      .join("");
  } catch {
    offline = true;
    render();
  }
};

// -- generation ------------------------------------------------------------------

let generating = false;

document.getElementById("generateBtn")!.onclick = async () => {
  if (generating) return; // one in-flight job per tab
  const seed = Number((document.getElementById("seed") as HTMLInputElement).value) || 0;
  const requestHash = sceneHash(state.scene);
  if (state.generation && state.generation.sceneHash === requestHash && state.generationSeed === seed) {
    return; // served from the hash-keyed cache
  }
  generating = true;
  const jobBox = document.getElementById("jobStatus")!;
  jobBox.textContent = "generating...";
  try {
    const { job_id } = await api.submitGeneration(state.scene, seed, weatherSel.value);
    const result = await api.pollJob(job_id);
    setState({ ...storeGeneration(state, result), generationSeed: seed });
    const panels = document.getElementById("genPanels")!;
    panels.innerHTML = result.views
      .map(
        (v) => `
        <figure>
          <img src="data:image/png;base64,${v.image_png}" width="128" alt="${v.camera_name}">
          <img src="data:image/png;base64,${v.condition.png}" width="128" class="overlay" alt="${v.camera_name} condition">
          <figcaption>${v.camera_name}${v.warning ? " (no adapter)" : ""}</figcaption>
        </figure>`,
      )
      .join("");
    jobBox.textContent = `done (config ${result.config_hash.slice(0, 12)})`;
  } catch (err) {
    jobBox.innerHTML = `<div class="violation error">generation failed: ${err}</div>`;
  } finally {
    generating = false;
  }
};

// boot: adopt the service rig so edits project through real cameras
(async () => {
  try {
    const rig = await api.rig();
    setState({ ...state, scene: { ...state.scene, cameras: rig.cameras } });
  } catch {
    offline = true;
    render();
  }
  validateSoon();
})();

render();
