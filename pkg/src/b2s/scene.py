"""Synthetic world: scene sampling, BEV rasterization and frame rendering.

A scene is a vector description (road polygons, oriented vehicle boxes, a
camera rig, a weather tag) over a square ground region. Everything here is a
pure function of its inputs and seeds.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import palette

WEATHERS = ("clear", "rain", "fog", "sunset")

# Generator bounds for vehicle dimensions (meters).
LENGTH_RANGE = (3.5, 5.5)
WIDTH_RANGE = (1.6, 2.2)
HEIGHT_RANGE = (1.5, 2.0)


class ConfigurationError(ValueError):
    pass


class SceneInfeasibleError(RuntimeError):
    """Raised when placement retries are exhausted; names the constraint."""


# ---------------------------------------------------------------------------
# domain types


@dataclass
class VehicleBox:
    center_xy: tuple[float, float]
    yaw: float  # radians in (-pi, pi], 0 = +x
    length: float
    width: float
    height: float | None = None  # absent = sampled at projection time


@dataclass
class CameraSpec:
    name: str
    K: np.ndarray  # 3x3 intrinsics
    R: np.ndarray  # 3x3 world->camera rotation
    t: np.ndarray  # camera position in world meters
    image_wh: tuple[int, int]  # (width, height) pixels


@dataclass
class CameraRig:
    cameras: list[CameraSpec]

    def by_name(self, name: str) -> CameraSpec:
        for cam in self.cameras:
            if cam.name == name:
                return cam
        raise KeyError(f"no camera named {name!r} in rig")

    def names(self) -> list[str]:
        return [c.name for c in self.cameras]


@dataclass
class SceneGraph:
    roads: list[np.ndarray]  # each (N, 2), CCW simple polygon, meters
    vehicles: list[VehicleBox]
    cameras: CameraRig
    weather: str
    extent_m: float
    rng_seed: int


@dataclass
class BevLayout:
    grid: np.ndarray  # (Hb, Wb, c) in {0, 1}
    classes: list[str]
    meters_per_cell: float


@dataclass
class SceneConfig:
    extent_m: float = 100.0
    n_roads: tuple[int, int] = (1, 3)
    n_vehicles: tuple[int, int] = (2, 8)
    road_width: tuple[float, float] = (8.0, 14.0)
    weathers: tuple[str, ...] = WEATHERS
    image_wh: tuple[int, int] = (64, 32)
    max_placement_attempts: int = 80
    ego_clearance_m: float = 3.0  # vehicles keep clear of the rig position


@dataclass
class StyleConfig:
    """Rendering style knobs; weather itself comes from the scene."""

    road_shading: float = 0.16  # depth-dependent road value swing
    vehicle_shading: float = 0.30


@dataclass
class RenderedFrame:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    semantics: "object"  # geometry.SemanticView, ground truth at full detail
    camera_name: str
    weather: str


# ---------------------------------------------------------------------------
# 2D primitives (footprints, polygons)


def box_corners(box: VehicleBox) -> np.ndarray:
    """Footprint corners (4, 2), CCW order."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    hl, hw = box.length / 2.0, box.width / 2.0
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.asarray(box.center_xy)


def points_in_polygon(points: np.ndarray, polygon: np.ndarray) -> np.ndarray:
    """Crossing-number point-in-polygon test, vectorized over points."""
    pts = np.atleast_2d(points)
    x, y = pts[:, 0], pts[:, 1]
    inside = np.zeros(len(pts), dtype=bool)
    n = len(polygon)
    for i in range(n):
        x1, y1 = polygon[i]
        x2, y2 = polygon[(i + 1) % n]
        crosses = (y1 > y) != (y2 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (x < np.where(crosses, xint, np.inf))
    return inside


def points_in_box(points: np.ndarray, box: VehicleBox) -> np.ndarray:
    pts = np.atleast_2d(points) - np.asarray(box.center_xy)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    u = pts[:, 0] * c + pts[:, 1] * s
    v = -pts[:, 0] * s + pts[:, 1] * c
    return (np.abs(u) <= box.length / 2.0) & (np.abs(v) <= box.width / 2.0)


def box_distance_to_point(box: VehicleBox, point: tuple[float, float]) -> float:
    """Euclidean distance from a point to the oriented footprint (0 inside)."""
    dx = point[0] - box.center_xy[0]
    dy = point[1] - box.center_xy[1]
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    du = max(abs(u) - box.length / 2.0, 0.0)
    dv = max(abs(v) - box.width / 2.0, 0.0)
    return math.hypot(du, dv)


def boxes_overlap(a: VehicleBox, b: VehicleBox) -> bool:
    """Positive-area overlap of two oriented footprints (separating axes).

    Touching edges count as non-overlapping (intersection area 0).
    """
    ca, cb = box_corners(a), box_corners(b)
    for yaw in (a.yaw, b.yaw):
        c, s = math.cos(yaw), math.sin(yaw)
        for axis in ((c, s), (-s, c)):
            pa = ca @ axis
            pb = cb @ axis
            if pa.max() <= pb.min() or pb.max() <= pa.min():
                return False
    return True


def polygon_is_simple(polygon: np.ndarray) -> bool:
    """Non-adjacent edge pairs must not intersect."""

    def cross2(a, b) -> float:
        return float(a[0] * b[1] - a[1] * b[0])

    def seg_intersect(p1, p2, p3, p4) -> bool:
        d1 = cross2(p4 - p3, p1 - p3)
        d2 = cross2(p4 - p3, p2 - p3)
        d3 = cross2(p2 - p1, p3 - p1)
        d4 = cross2(p2 - p1, p4 - p1)
        return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0))

    n = len(polygon)
    for i in range(n):
        a1, a2 = polygon[i], polygon[(i + 1) % n]
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or (i + 1) % n == j:
                continue
            if seg_intersect(a1, a2, polygon[j], polygon[(j + 1) % n]):
                return False
    return True


def polygon_area(polygon: np.ndarray) -> float:
    x, y = polygon[:, 0], polygon[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def clip_polygon_to_square(polygon: np.ndarray, half_extent: float) -> np.ndarray:
    """Sutherland-Hodgman clip of a convex CCW polygon to the centered square."""
    edges = [  # (axis, sign): keep sign*p[axis] <= half_extent
        (0, 1.0),
        (0, -1.0),
        (1, 1.0),
        (1, -1.0),
    ]
    poly = [np.asarray(p, dtype=float) for p in polygon]
    for axis, sign in edges:
        if not poly:
            break
        out: list[np.ndarray] = []
        for i, cur in enumerate(poly):
            prev = poly[i - 1]
            cur_in = sign * cur[axis] <= half_extent
            prev_in = sign * prev[axis] <= half_extent
            if cur_in != prev_in:
                tpar = (half_extent - sign * prev[axis]) / (sign * (cur[axis] - prev[axis]))
                out.append(prev + tpar * (cur - prev))
            if cur_in:
                out.append(cur)
        poly = out
    return np.array(poly) if poly else np.zeros((0, 2))


# ---------------------------------------------------------------------------
# validation


def validate_scene(scene: SceneGraph) -> list[dict]:
    """Invariant report: list of {code, message, subject, severity} entries."""
    out: list[dict] = []
    half = scene.extent_m / 2.0 + 1e-9

    def err(code: str, message: str, subject: str) -> None:
        out.append({"code": code, "message": message, "subject": subject, "severity": "error"})

    for i, poly in enumerate(scene.roads):
        if len(poly) < 3:
            err("road_degenerate", f"road {i} has fewer than 3 vertices", f"road:{i}")
            continue
        if np.abs(poly).max() > half:
            err("road_out_of_bounds", f"road {i} has vertices outside the extent", f"road:{i}")
        if not polygon_is_simple(poly):
            err("road_self_intersecting", f"road {i} polygon self-intersects", f"road:{i}")
    for i, veh in enumerate(scene.vehicles):
        if max(abs(veh.center_xy[0]), abs(veh.center_xy[1])) > half:
            err("vehicle_out_of_bounds", f"vehicle {i} center outside the extent", f"vehicle:{i}")
        if not (LENGTH_RANGE[0] <= veh.length <= LENGTH_RANGE[1]):
            err("vehicle_length", f"vehicle {i} length {veh.length} outside {LENGTH_RANGE}", f"vehicle:{i}")
        if not (WIDTH_RANGE[0] <= veh.width <= WIDTH_RANGE[1]):
            err("vehicle_width", f"vehicle {i} width {veh.width} outside {WIDTH_RANGE}", f"vehicle:{i}")
        if veh.height is not None and not (HEIGHT_RANGE[0] <= veh.height <= HEIGHT_RANGE[1]):
            err("vehicle_height", f"vehicle {i} height {veh.height} outside {HEIGHT_RANGE}", f"vehicle:{i}")
    for i in range(len(scene.vehicles)):
        for j in range(i + 1, len(scene.vehicles)):
            if boxes_overlap(scene.vehicles[i], scene.vehicles[j]):
                err("vehicle_overlap", f"vehicles {i} and {j} overlap", f"vehicle:{i},{j}")
    if scene.weather not in WEATHERS:
        err("weather_unknown", f"weather {scene.weather!r} not one of {WEATHERS}", "weather")
    for cam in scene.cameras.cameras:
        rtr = cam.R.T @ cam.R
        if np.abs(rtr - np.eye(3)).max() >= 1e-9 or np.linalg.det(cam.R) < 0:
            err("camera_rotation", f"camera {cam.name} R is not a proper rotation", f"camera:{cam.name}")
        if cam.K[1, 0] != 0 or cam.K[2, 0] != 0 or cam.K[2, 1] != 0 or cam.K[0, 0] <= 0 or cam.K[1, 1] <= 0:
            err("camera_intrinsics", f"camera {cam.name} K not upper-triangular with positive focals", f"camera:{cam.name}")
    # Advisory only: generator guarantees this, hand edits may not.
    for i, veh in enumerate(scene.vehicles):
        on_road = any(points_in_polygon(np.array([veh.center_xy]), poly)[0] for poly in scene.roads)
        if not on_road:
            out.append(
                {
                    "code": "vehicle_off_road",
                    "message": f"vehicle {i} center is not on any road",
                    "subject": f"vehicle:{i}",
                    "severity": "warning",
                }
            )
    return out


def scene_is_valid(scene: SceneGraph) -> bool:
    return not any(v["severity"] == "error" for v in validate_scene(scene))


# ---------------------------------------------------------------------------
# serialization (canonical scene JSON schema)


def scene_to_dict(scene: SceneGraph) -> dict:
    return {
        "extent_m": float(scene.extent_m),
        "weather": scene.weather,
        "roads": [{"polygon": [[float(x), float(y)] for x, y in poly]} for poly in scene.roads],
        "vehicles": [
            {
                "center": [float(v.center_xy[0]), float(v.center_xy[1])],
                "yaw": float(v.yaw),
                "length": float(v.length),
                "width": float(v.width),
                "height": None if v.height is None else float(v.height),
            }
            for v in scene.vehicles
        ],
        "cameras": [
            {
                "name": c.name,
                "K": [[float(x) for x in row] for row in c.K],
                "R": [[float(x) for x in row] for row in c.R],
                "t": [float(x) for x in c.t],
                "image_wh": [int(c.image_wh[0]), int(c.image_wh[1])],
            }
            for c in scene.cameras.cameras
        ],
        "seed": int(scene.rng_seed),
    }


def scene_from_dict(data: dict) -> SceneGraph:
    return SceneGraph(
        roads=[np.asarray(r["polygon"], dtype=float) for r in data["roads"]],
        vehicles=[
            VehicleBox(
                center_xy=(float(v["center"][0]), float(v["center"][1])),
                yaw=float(v["yaw"]),
                length=float(v["length"]),
                width=float(v["width"]),
                height=None if v.get("height") is None else float(v["height"]),
            )
            for v in data["vehicles"]
        ],
        cameras=CameraRig(
            cameras=[
                CameraSpec(
                    name=c["name"],
                    K=np.asarray(c["K"], dtype=float),
                    R=np.asarray(c["R"], dtype=float),
                    t=np.asarray(c["t"], dtype=float),
                    image_wh=(int(c["image_wh"][0]), int(c["image_wh"][1])),
                )
                for c in data["cameras"]
            ]
        ),
        weather=data["weather"],
        extent_m=float(data["extent_m"]),
        rng_seed=int(data["seed"]),
    )


def scene_to_json(scene: SceneGraph) -> str:
    return json.dumps(scene_to_dict(scene), indent=1)


def scene_from_json(text: str) -> SceneGraph:
    return scene_from_dict(json.loads(text))


def save_scene(scene: SceneGraph, path: str | Path) -> None:
    Path(path).write_text(scene_to_json(scene))


def load_scene(path: str | Path) -> SceneGraph:
    return scene_from_json(Path(path).read_text())


# ---------------------------------------------------------------------------
# camera rig


def default_rig(image_wh: tuple[int, int] = (64, 32), height_m: float = 1.2) -> CameraRig:
    """Six cameras at the ego origin, yaws {0, +-55, +-125, 180} degrees.

    Horizontal FOV is the largest yaw gap (70 deg) times a 1.2 overlap factor
    so adjacent frusta share a margin of view. The rig sits below the vehicle
    height prior's minimum (1.5 m), so vehicle roofs face away from every
    camera and silhouettes show the side profile.
    """
    w, h = image_wh
    hfov = math.radians(70.0 * 1.2)
    fx = (w / 2.0) / math.tan(hfov / 2.0)
    K = np.array([[fx, 0.0, w / 2.0], [0.0, fx, h / 2.0], [0.0, 0.0, 1.0]])
    cams = []
    for i, yaw_deg in enumerate([0.0, 55.0, -55.0, 125.0, -125.0, 180.0]):
        cams.append(
            CameraSpec(
                name=f"cam{i}",
                K=K.copy(),
                R=camera_rotation(math.radians(yaw_deg)),
                t=np.array([0.0, 0.0, height_m]),
                image_wh=(w, h),
            )
        )
    return CameraRig(cameras=cams)


def camera_rotation(yaw: float, pitch: float = 0.0) -> np.ndarray:
    """World->camera rotation for a camera looking along world yaw (0 = +x).

    Camera frame: x right, y down, z forward. Positive pitch tilts the view
    down toward the ground.
    """
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    forward = np.array([cy * cp, sy * cp, -sp])
    right = np.array([sy, -cy, 0.0])
    down = np.cross(forward, right)
    return np.stack([right, down, forward])


# ---------------------------------------------------------------------------
# sampling


def sample_scene(seed: int, config: SceneConfig) -> SceneGraph:
    """Deterministically sample a valid scene; vehicles sit fully on roads."""
    if config.extent_m <= 0:
        raise ConfigurationError("extent_m must be positive")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5CE2E]))
    half = config.extent_m / 2.0

    n_roads = int(rng.integers(config.n_roads[0], config.n_roads[1] + 1))
    roads: list[np.ndarray] = []
    for k in range(n_roads):
        theta = rng.uniform(0.0, math.pi)
        # First road passes near the ego origin so the rig looks at road.
        spread = config.extent_m / (10.0 if k == 0 else 4.0)
        offset = rng.uniform(-spread, spread, size=2)
        width = rng.uniform(*config.road_width)
        d = np.array([math.cos(theta), math.sin(theta)])
        n = np.array([-d[1], d[0]])
        hl = config.extent_m * 1.5
        rect = np.array(
            [
                offset + hl * d + (width / 2) * n,
                offset - hl * d + (width / 2) * n,
                offset - hl * d - (width / 2) * n,
                offset + hl * d - (width / 2) * n,
            ]
        )
        if polygon_area(rect) < 0:
            rect = rect[::-1]
        clipped = clip_polygon_to_square(rect, half)
        if len(clipped) >= 3:
            roads.append(clipped)
    if not roads:
        raise SceneInfeasibleError("no road strip intersects the world extent")

    road_dirs = []
    for poly in roads:
        # Strip direction: longest edge of the clipped polygon.
        edges = np.roll(poly, -1, axis=0) - poly
        road_dirs.append(math.atan2(*edges[np.argmax(np.linalg.norm(edges, axis=1))][::-1]))

    n_veh = int(rng.integers(config.n_vehicles[0], config.n_vehicles[1] + 1))
    vehicles: list[VehicleBox] = []
    for _ in range(n_veh):
        placed = False
        for _attempt in range(config.max_placement_attempts):
            ridx = int(rng.integers(0, len(roads)))
            poly = roads[ridx]
            lo, hi = poly.min(axis=0), poly.max(axis=0)
            center = rng.uniform(lo, hi)
            if not points_in_polygon(center[None, :], poly)[0]:
                continue
            yaw = road_dirs[ridx] + rng.normal(0.0, 0.10) + (math.pi if rng.random() < 0.5 else 0.0)
            yaw = math.atan2(math.sin(yaw), math.cos(yaw))
            box = VehicleBox(
                center_xy=(float(center[0]), float(center[1])),
                yaw=float(yaw),
                length=float(rng.uniform(*LENGTH_RANGE)),
                width=float(rng.uniform(*WIDTH_RANGE)),
                height=None,
            )
            # Whole footprint on the (convex) road keeps BEV vehicle cells on
            # road cells; corners checked against the chosen polygon.
            if not points_in_polygon(box_corners(box), poly).all():
                continue
            if box_distance_to_point(box, (0.0, 0.0)) < config.ego_clearance_m:
                continue
            if any(boxes_overlap(box, other) for other in vehicles):
                continue
            vehicles.append(box)
            placed = True
            break
        if not placed:
            raise SceneInfeasibleError(
                "vehicle placement failed: could not satisfy on-road and "
                f"non-overlap constraints after {config.max_placement_attempts} attempts"
            )

    weather = str(rng.choice(list(config.weathers)))
    return SceneGraph(
        roads=roads,
        vehicles=vehicles,
        cameras=default_rig(config.image_wh),
        weather=weather,
        extent_m=config.extent_m,
        rng_seed=int(seed),
    )


# ---------------------------------------------------------------------------
# BEV rasterization


def rasterize_bev(scene: SceneGraph, meters_per_cell: float) -> BevLayout:
    """Occupancy grid over ["road", "vehicle"]; a cell is set iff its center
    lies inside the corresponding footprint. Channels are independent."""
    if meters_per_cell <= 0:
        raise ConfigurationError("meters_per_cell must be positive")
    cells = scene.extent_m / meters_per_cell
    n = round(cells)
    if abs(cells - n) > 1e-9:
        raise ConfigurationError(
            f"meters_per_cell {meters_per_cell} does not divide extent {scene.extent_m}"
        )
    half = scene.extent_m / 2.0
    xs = -half + (np.arange(n) + 0.5) * meters_per_cell
    ys = half - (np.arange(n) + 0.5) * meters_per_cell
    gx, gy = np.meshgrid(xs, ys)  # row i: y descending (north-up)
    centers = np.stack([gx.ravel(), gy.ravel()], axis=1)

    road = np.zeros(len(centers), dtype=bool)
    for poly in scene.roads:
        road |= points_in_polygon(centers, poly)
    vehicle = np.zeros(len(centers), dtype=bool)
    for veh in scene.vehicles:
        vehicle |= points_in_box(centers, veh)

    grid = np.zeros((n, n, 2), dtype=np.uint8)
    grid[:, :, 0] = road.reshape(n, n)
    grid[:, :, 1] = vehicle.reshape(n, n)
    return BevLayout(grid=grid, classes=list(palette.CLASSES), meters_per_cell=meters_per_cell)


# ---------------------------------------------------------------------------
# frame rendering


def _weather_style(weather: str) -> dict:
    # (value scale, saturation scale) per surface; chosen so every class
    # stays inside its palette band after modulation.
    table = {
        "clear": {"sky": (1.00, 1.00), "road": 0.00, "vehicle": (1.00, 1.00)},
        "rain": {"sky": (0.75, 0.80), "road": -0.04, "vehicle": (0.85, 0.90)},
        "fog": {"sky": (1.05, 0.45), "road": +0.04, "vehicle": (0.95, 0.70)},
        "sunset": {"sky": (0.82, 1.20), "road": -0.02, "vehicle": (0.80, 1.10)},
    }
    return table[weather]


def vehicle_hue(scene_seed: int, index: int) -> float:
    """Deterministic per-vehicle hue inside the red band."""
    r = np.random.default_rng(np.random.SeedSequence([int(scene_seed), 0xC0105, index]))
    offset = r.uniform(-palette.VEHICLE_HUE_MAX, palette.VEHICLE_HUE_MAX)
    return offset % 360.0


def render_frame(scene: SceneGraph, camera: CameraSpec, style: StyleConfig | None = None) -> RenderedFrame:
    """Deterministic toy street image plus its exact semantic ground truth.

    Ground-truth semantics use the detailed vehicle profile (body plus cabin
    block); image colors follow the palette contract, modulated by weather.
    """
    from . import geometry  # local import: geometry depends on scene types

    style = style or StyleConfig()
    view, maps = geometry.render_detailed_with_maps(scene, camera)
    class_map, depth, veh_index = maps.class_map, maps.depth, maps.vehicle_index
    h_px, w_px = class_map.shape
    wmod = _weather_style(scene.weather)

    # Sky background: hue gradient down the image, safely inside [200, 230].
    rows = np.linspace(0.0, 1.0, h_px)[:, None] * np.ones((1, w_px))
    sky_v_scale, sky_s_scale = wmod["sky"]
    hue = 205.0 + 22.0 * rows
    sat = np.clip(0.45 * sky_s_scale, 0.18, 0.95) * np.ones_like(rows)
    val = np.clip((0.92 - 0.20 * rows) * sky_v_scale, 0.05, 1.0)

    road_mask = class_map == palette.ROAD
    if road_mask.any():
        d = depth[road_mask]
        v_road = 0.34 + style.road_shading * np.exp(-d / 30.0) + wmod["road"]
        hue[road_mask] = 0.0
        sat[road_mask] = 0.04
        val[road_mask] = np.clip(v_road, palette.ROAD_VALUE[0] + 0.02, palette.ROAD_VALUE[1] - 0.02)

    veh_mask = class_map == palette.VEHICLE
    if veh_mask.any():
        v_scale, s_scale = wmod["vehicle"]
        d = depth[veh_mask]
        idx = veh_index[veh_mask]
        hues = np.array([vehicle_hue(scene.rng_seed, i) for i in range(len(scene.vehicles))])
        hue[veh_mask] = hues[idx]
        sat[veh_mask] = np.clip(0.78 * s_scale, palette.ACHROMATIC_SAT + 0.25, 1.0)
        val[veh_mask] = np.clip((0.40 + style.vehicle_shading * np.exp(-d / 20.0)) * v_scale, 0.25, 0.95)

    image = palette.hsv_to_rgb(hue, sat, val).astype(np.float32)
    return RenderedFrame(image=image, semantics=view, camera_name=camera.name, weather=scene.weather)
