"""Exact projection of the BEV world into per-camera semantic views.

Pinhole projection x = K R (X - t) in homogeneous coordinates; rasterization
is per-pixel ray casting against the ground plane (roads, flat-ground
assumption) and oriented vehicle cuboids, so occlusion and silhouettes are
analytic. Vehicle heights come from a uniform [1.5, 2] prior, seeded per
(seed, vehicle index).

All per-pixel math is written as explicit component arithmetic (no matmul
over the pixel axis) so casting one ray is bitwise identical to the same
pixel inside a full-frame render.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import palette, tensorio
from .scene import CameraSpec, SceneGraph, VehicleBox

NEAR_PLANE = 0.1
DEPTH_TIE = 1e-9  # depth ties resolve to vehicle

CLASSES = list(palette.CLASSES)


@dataclass
class SemanticView:
    """One-hot-or-empty per-camera semantic grid (all-zero pixel = background)."""

    grid: np.ndarray  # (H, W, c) uint8 in {0, 1}
    camera_name: str
    resolution_tag: str  # initial_lowres | refined | groundtruth
    classes: list[str]

    def class_map(self) -> np.ndarray:
        """(H, W) label map: 0 background, 1 road, 2 vehicle."""
        out = np.zeros(self.grid.shape[:2], dtype=np.uint8)
        for i in range(self.grid.shape[2]):
            out[self.grid[:, :, i] > 0] = i + 1
        return out


def view_from_class_map(class_map: np.ndarray, camera_name: str, tag: str) -> SemanticView:
    grid = np.zeros((*class_map.shape, len(CLASSES)), dtype=np.uint8)
    for i in range(len(CLASSES)):
        grid[:, :, i] = class_map == i + 1
    return SemanticView(grid=grid, camera_name=camera_name, resolution_tag=tag, classes=list(CLASSES))


def save_view(view: SemanticView, path: str | Path) -> None:
    """Portable tensor file plus JSON sidecar."""
    import json

    path = Path(path)
    tensorio.write_tensor(path, view.grid.astype(np.float32))
    sidecar = {
        "camera_name": view.camera_name,
        "resolution_tag": view.resolution_tag,
        "classes": view.classes,
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=1))


def load_view(path: str | Path) -> SemanticView:
    import json

    path = Path(path)
    grid = tensorio.read_tensor(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    return SemanticView(
        grid=(grid > 0.5).astype(np.uint8),
        camera_name=meta["camera_name"],
        resolution_tag=meta["resolution_tag"],
        classes=list(meta["classes"]),
    )


@dataclass
class Ray:
    origin: np.ndarray  # camera position t
    direction: np.ndarray  # unit world vector


@dataclass
class Hit:
    class_name: str
    depth: float


@dataclass
class RenderMaps:
    """Aux rasterization outputs used by the image renderer."""

    class_map: np.ndarray  # (H, W) uint8, 0 bg / 1 road / 2 vehicle
    depth: np.ndarray  # (H, W) float64, inf on background
    vehicle_index: np.ndarray  # (H, W) int32, -1 where not vehicle


# ---------------------------------------------------------------------------
# projection


def project_points(X: np.ndarray, camera: CameraSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized pinhole projection.

    Returns (u, v, depth, valid); valid is False behind the 0.1 m near plane,
    and (u, v) are NaN there.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    R, t, K = camera.R, camera.t, camera.K
    dx, dy, dz = X[:, 0] - t[0], X[:, 1] - t[1], X[:, 2] - t[2]
    xc = R[0, 0] * dx + R[0, 1] * dy + R[0, 2] * dz
    yc = R[1, 0] * dx + R[1, 1] * dy + R[1, 2] * dz
    zc = R[2, 0] * dx + R[2, 1] * dy + R[2, 2] * dz
    valid = zc > NEAR_PLANE
    with np.errstate(divide="ignore", invalid="ignore"):
        u = (K[0, 0] * xc + K[0, 1] * yc + K[0, 2] * zc) / zc
        v = (K[1, 1] * yc + K[1, 2] * zc) / zc
    u = np.where(valid, u, np.nan)
    v = np.where(valid, v, np.nan)
    return u, v, zc, valid


def project_point(X: np.ndarray, camera: CameraSpec) -> tuple[float, float, float] | None:
    """Project one world point; None when behind the near plane."""
    u, v, depth, valid = project_points(np.asarray(X, dtype=np.float64)[None, :], camera)
    if not valid[0]:
        return None
    return float(u[0]), float(v[0]), float(depth[0])


def scale_camera(camera: CameraSpec, factor: float) -> CameraSpec:
    """Same camera at a scaled resolution (intrinsics scaled, pose kept)."""
    K = camera.K.copy()
    K[0, :] *= factor
    K[1, :] *= factor
    w, h = camera.image_wh
    return CameraSpec(
        name=camera.name,
        K=K,
        R=camera.R.copy(),
        t=camera.t.copy(),
        image_wh=(math.ceil(w * factor), math.ceil(h * factor)),
    )


def pixel_rays(camera: CameraSpec, u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """World-frame ray directions through continuous pixel coords (u, v).

    Directions are scaled so the camera-frame z component is 1: the ray
    parameter equals pinhole depth. Returns (Dx, Dy, Dz) world components.
    """
    K, R = camera.K, camera.R
    yc = (v - K[1, 2]) / K[1, 1]
    xc = (u - K[0, 2] - K[0, 1] * yc) / K[0, 0]
    dxw = R[0, 0] * xc + R[1, 0] * yc + R[2, 0]
    dyw = R[0, 1] * xc + R[1, 1] * yc + R[2, 1]
    dzw = R[0, 2] * xc + R[1, 2] * yc + R[2, 2]
    return dxw, dyw, dzw


def pixel_ray(camera: CameraSpec, pixel: tuple[float, float]) -> Ray:
    dx, dy, dz = pixel_rays(camera, np.asarray([pixel[0]]), np.asarray([pixel[1]]))
    d = np.array([dx[0], dy[0], dz[0]])
    return Ray(origin=camera.t.copy(), direction=d / np.linalg.norm(d))


def ipm_ground(pixel: tuple[float, float], camera: CameraSpec) -> tuple[float, float] | None:
    """Inverse perspective mapping: pixel to ground plane z=0 intersection.

    None when the ray misses the ground (parallel, ascending, or behind the
    near plane).
    """
    u, v = float(pixel[0]), float(pixel[1])
    dx, dy, dz = pixel_rays(camera, np.asarray([u]), np.asarray([v]))
    dzc = dz[0]
    if dzc == 0.0:
        return None
    s = -camera.t[2] / dzc
    if not np.isfinite(s) or s <= NEAR_PLANE:
        return None
    return float(camera.t[0] + s * dx[0]), float(camera.t[1] + s * dy[0])


# ---------------------------------------------------------------------------
# vehicle height prior


def sample_vehicle_height(rng: np.random.Generator) -> float:
    """Uniform height prior on [1.5, 2.0] meters."""
    return float(rng.uniform(1.5, 2.0))


def vehicle_heights(scene: SceneGraph, seed: int | None = None) -> np.ndarray:
    """Per-vehicle heights: explicit heights kept, absent ones drawn from the
    prior with a stream seeded per (seed, vehicle index)."""
    seed = scene.rng_seed if seed is None else seed
    out = np.empty(len(scene.vehicles))
    for i, veh in enumerate(scene.vehicles):
        if veh.height is not None:
            out[i] = veh.height
        else:
            rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x8E16, i]))
            out[i] = sample_vehicle_height(rng)
    return out


# ---------------------------------------------------------------------------
# cuboid models


def vehicle_cuboids(veh: VehicleBox, height: float, detailed: bool) -> list[tuple[np.ndarray, float, np.ndarray]]:
    """(center3, yaw, half_extents) solids for one vehicle.

    Plain mode: the full 3D bounding box. Detailed mode: body cuboid (full
    footprint, 60% of height) plus a centered cabin block (half length, half
    width, the remaining height).
    """
    cx, cy = veh.center_xy
    if not detailed:
        return [
            (
                np.array([cx, cy, height / 2.0]),
                veh.yaw,
                np.array([veh.length / 2.0, veh.width / 2.0, height / 2.0]),
            )
        ]
    body_h = 0.6 * height
    return [
        (
            np.array([cx, cy, body_h / 2.0]),
            veh.yaw,
            np.array([veh.length / 2.0, veh.width / 2.0, body_h / 2.0]),
        ),
        (
            np.array([cx, cy, (height + body_h) / 2.0]),
            veh.yaw,
            np.array([veh.length / 4.0, veh.width / 4.0, (height - body_h) / 2.0]),
        ),
    ]


def _ray_box_depths(
    origin: np.ndarray,
    Dx: np.ndarray,
    Dy: np.ndarray,
    Dz: np.ndarray,
    center: np.ndarray,
    yaw: float,
    half: np.ndarray,
) -> np.ndarray:
    """Slab-method ray/OBB intersection; +inf where missed.

    Ray parameter equals camera depth (directions have unit camera-z), so the
    near-plane cut is a plain threshold on the parameter.
    """
    c, s = math.cos(yaw), math.sin(yaw)
    ox, oy, oz = origin - center
    o_loc = (ox * c + oy * s, -ox * s + oy * c, oz)
    d_loc = (Dx * c + Dy * s, -Dx * s + Dy * c, Dz)

    t_lo = np.full(Dx.shape, -np.inf)
    t_hi = np.full(Dx.shape, np.inf)
    for axis in range(3):
        o_k, d_k, h_k = o_loc[axis], d_loc[axis], half[axis]
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-h_k - o_k) / d_k
            t2 = (h_k - o_k) / d_k
        lo = np.minimum(t1, t2)
        hi = np.maximum(t1, t2)
        parallel = d_k == 0.0
        inside = abs(o_k) <= h_k
        lo = np.where(parallel, -np.inf if inside else np.inf, lo)
        hi = np.where(parallel, np.inf if inside else -np.inf, hi)
        t_lo = np.maximum(t_lo, lo)
        t_hi = np.minimum(t_hi, hi)

    hit = (t_lo <= t_hi) & (t_hi > NEAR_PLANE)
    depth = np.where(t_lo > NEAR_PLANE, t_lo, t_hi)
    return np.where(hit, depth, np.inf)


def _cast_pixels(
    scene: SceneGraph,
    camera: CameraSpec,
    heights: np.ndarray,
    u: np.ndarray,
    v: np.ndarray,
    detailed: bool,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shared class/depth resolution for a batch of pixel centers.

    Returns (class codes, depth, vehicle index) flat arrays.
    """
    from .scene import points_in_polygon

    Dx, Dy, Dz = pixel_rays(camera, u, v)

    road_depth = np.full(u.shape, np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        s_ground = -camera.t[2] / Dz
    ground_ok = np.isfinite(s_ground) & (s_ground > NEAR_PLANE)
    if ground_ok.any():
        gx = camera.t[0] + s_ground * Dx
        gy = camera.t[1] + s_ground * Dy
        pts = np.stack([gx[ground_ok], gy[ground_ok]], axis=1)
        on_road = np.zeros(len(pts), dtype=bool)
        for poly in scene.roads:
            on_road |= points_in_polygon(pts, poly)
        hit_idx = np.flatnonzero(ground_ok)[on_road]
        road_depth[hit_idx] = s_ground[hit_idx]

    veh_depth = np.full(u.shape, np.inf)
    veh_index = np.full(u.shape, -1, dtype=np.int32)
    for i, veh in enumerate(scene.vehicles):
        for center, yaw, half in vehicle_cuboids(veh, float(heights[i]), detailed):
            d = _ray_box_depths(camera.t, Dx, Dy, Dz, center, yaw, half)
            closer = d < veh_depth
            veh_depth[closer] = d[closer]
            veh_index[closer] = i

    classes = np.zeros(u.shape, dtype=np.uint8)
    is_vehicle = np.isfinite(veh_depth) & (veh_depth <= road_depth + DEPTH_TIE)
    is_road = np.isfinite(road_depth) & ~is_vehicle
    classes[is_road] = palette.ROAD
    classes[is_vehicle] = palette.VEHICLE
    depth = np.where(is_vehicle, veh_depth, np.where(is_road, road_depth, np.inf))
    veh_index[~is_vehicle] = -1
    return classes, depth, veh_index


def render_scene(
    scene: SceneGraph,
    camera: CameraSpec,
    heights: np.ndarray,
    detailed: bool,
    tag: str,
) -> tuple[SemanticView, RenderMaps]:
    """Rasterize the scene through pixel-center rays."""
    w, h = camera.image_wh
    cols, rows = np.meshgrid(np.arange(w), np.arange(h))
    u = cols.ravel() + 0.5
    v = rows.ravel() + 0.5
    classes, depth, veh_index = _cast_pixels(scene, camera, heights, u, v, detailed)
    maps = RenderMaps(
        class_map=classes.reshape(h, w),
        depth=depth.reshape(h, w),
        vehicle_index=veh_index.reshape(h, w),
    )
    return view_from_class_map(maps.class_map, camera.name, tag), maps


def ray_cast(
    camera: CameraSpec,
    pixel: tuple[float, float],
    scene: SceneGraph,
    heights: np.ndarray,
    detailed: bool = False,
) -> Hit | None:
    """Nearest intersection along one pixel ray; None is a miss.

    Runs the exact kernels the renderer uses, so a full render and per-pixel
    casts agree class-for-class.
    """
    u = np.asarray([float(pixel[0])])
    v = np.asarray([float(pixel[1])])
    classes, depth, _ = _cast_pixels(scene, camera, heights, u, v, detailed)
    if classes[0] == 0:
        return None
    name = CLASSES[int(classes[0]) - 1]
    return Hit(class_name=name, depth=float(depth[0]))


def project_scene_initial(scene: SceneGraph, camera: CameraSpec, seed: int | None = None) -> SemanticView:
    """Quarter-resolution projection with vehicles as plain height-extruded
    cuboids and roads as flat ground; the Stage I preliminary estimate."""
    heights = vehicle_heights(scene, seed)
    lowres = scale_camera(camera, 0.25)
    view, _ = render_scene(scene, lowres, heights, detailed=False, tag="initial_lowres")
    return view


def project_scene_detailed(
    scene: SceneGraph, camera: CameraSpec, seed: int | None = None
) -> SemanticView:
    """Full-resolution ground truth with the detailed vehicle profile."""
    view, _ = render_scene(
        scene, camera, vehicle_heights(scene, seed), detailed=True, tag="groundtruth"
    )
    return view


def render_detailed_with_maps(
    scene: SceneGraph, camera: CameraSpec, seed: int | None = None
) -> tuple[SemanticView, RenderMaps]:
    return render_scene(
        scene, camera, vehicle_heights(scene, seed), detailed=True, tag="groundtruth"
    )
