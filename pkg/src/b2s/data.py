"""Dataset assembly: scenes to (image, semantics, initial projection) frames.

Training scenes use seeds [0, n_train); held-out evaluation scenes use a
disjoint seed block starting at 10000.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import geometry, scene as scene_mod

HELD_OUT_BASE = 10000


@dataclass
class FrameDataset:
    images: np.ndarray  # (N, H, W, 3) float32
    gt_labels: np.ndarray  # (N, H, W) uint8 class maps (0 bg / 1 road / 2 vehicle)
    initial: np.ndarray  # (N, h, w, c) uint8 one-hot low-res projections
    weathers: list[str]
    camera_names: list[str]
    scene_seeds: list[int]

    def __len__(self) -> int:
        return len(self.images)

    def gt_view(self, i: int) -> geometry.SemanticView:
        return geometry.view_from_class_map(self.gt_labels[i], self.camera_names[i], "groundtruth")

    def initial_view(self, i: int) -> geometry.SemanticView:
        return geometry.SemanticView(
            grid=self.initial[i],
            camera_name=self.camera_names[i],
            resolution_tag="initial_lowres",
            classes=list(geometry.CLASSES),
        )

    def save(self, path: str | Path) -> None:
        np.savez_compressed(
            path,
            images=self.images,
            gt_labels=self.gt_labels,
            initial=self.initial,
            weathers=np.array(self.weathers),
            camera_names=np.array(self.camera_names),
            scene_seeds=np.array(self.scene_seeds),
        )

    @classmethod
    def load(cls, path: str | Path) -> "FrameDataset":
        z = np.load(path, allow_pickle=False)
        return cls(
            images=z["images"],
            gt_labels=z["gt_labels"],
            initial=z["initial"],
            weathers=[str(w) for w in z["weathers"]],
            camera_names=[str(c) for c in z["camera_names"]],
            scene_seeds=[int(s) for s in z["scene_seeds"]],
        )


def scene_seeds(split: str, n_train: int, n_held: int) -> list[int]:
    if split == "train":
        return list(range(n_train))
    if split == "held":
        return list(range(HELD_OUT_BASE, HELD_OUT_BASE + n_held))
    raise ValueError(f"unknown split {split!r}")


def build_frames(seeds: list[int], config: scene_mod.SceneConfig) -> FrameDataset:
    """Render every camera of every scene; deterministic per seed list."""
    images, gts, inits, weathers, cams, sseeds = [], [], [], [], [], []
    for seed in seeds:
        sg = scene_mod.sample_scene(seed, config)
        for cam in sg.cameras.cameras:
            frame = scene_mod.render_frame(sg, cam)
            init = geometry.project_scene_initial(sg, cam)
            images.append(frame.image)
            gts.append(frame.semantics.class_map())
            inits.append(init.grid)
            weathers.append(sg.weather)
            cams.append(cam.name)
            sseeds.append(seed)
    return FrameDataset(
        images=np.stack(images).astype(np.float32),
        gt_labels=np.stack(gts),
        initial=np.stack(inits),
        weathers=weathers,
        camera_names=cams,
        scene_seeds=sseeds,
    )


def dataset_cache_key(seeds: list[int], config: scene_mod.SceneConfig) -> str:
    payload = json.dumps(
        {
            "generator": 2,  # bump when scene sampling or rendering changes
            "seeds": [seeds[0], seeds[-1], len(seeds)] if seeds else [],
            "extent": config.extent_m,
            "image_wh": list(config.image_wh),
            "n_roads": list(config.n_roads),
            "n_vehicles": list(config.n_vehicles),
            "ego_clearance": config.ego_clearance_m,
        },
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def cached_frames(seeds: list[int], config: scene_mod.SceneConfig, cache_dir: str | Path) -> FrameDataset:
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    path = cache_dir / f"frames_{dataset_cache_key(seeds, config)}.npz"
    if path.exists():
        return FrameDataset.load(path)
    ds = build_frames(seeds, config)
    ds.save(path)
    return ds
