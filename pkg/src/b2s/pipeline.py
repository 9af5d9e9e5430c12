"""End-to-end orchestration: configuration, training recipes, generation.

The generation path per camera: initial projection -> refinement -> per-view
adapter activation -> conditional sampling -> decode; the stitched panel is
presentation only. Training stages are ordered (autoencoder -> denoiser ->
refiner -> control -> views) and enforced through checkpoint manifests.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import adapt, control, data, diffusion, geometry, metrics, palette, refine, scene as scene_mod



class DependencyError(RuntimeError):
    """A training stage ran before its prerequisites."""


STAGE_ORDER = ["autoencoder", "denoiser", "refiner", "control", "view:<camera>"]


@dataclass
class SamplerSettings:
    steps: int = 30
    mode: str = "deterministic"
    guidance: float = 3.0
    seed: int = 0


@dataclass
class PipelineConfig:
    workdir: str = "runs/desk"
    image_wh: tuple[int, int] = (64, 32)
    extent_m: float = 50.0
    meters_per_cell: float = 0.5
    n_train_scenes: int = 500
    n_held_scenes: int = 150
    n_reg_images: int = 200
    palette_version: str = palette.PALETTE_VERSION
    prompt_template: str = "a photo from {token} of a street, {weather}"
    sampler: SamplerSettings = field(default_factory=SamplerSettings)
    # per-stage training knobs (merged over module defaults)
    train: dict = field(default_factory=dict)

    # paths -------------------------------------------------------------
    @property
    def checkpoints_dir(self) -> Path:
        return Path(self.workdir) / "checkpoints"

    @property
    def base_dir(self) -> Path:
        return self.checkpoints_dir / "base"

    @property
    def refiner_dir(self) -> Path:
        return self.checkpoints_dir / "refiner"

    @property
    def control_dir(self) -> Path:
        return self.checkpoints_dir / "control"

    def adapter_dir(self, camera_name: str) -> Path:
        return self.checkpoints_dir / "adapters" / camera_name

    @property
    def data_dir(self) -> Path:
        return Path(self.workdir) / "data"

    @property
    def latent_hw(self) -> tuple[int, int]:
        return (self.image_wh[1] // 4, self.image_wh[0] // 4)

    def scene_config(self) -> scene_mod.SceneConfig:
        return scene_mod.SceneConfig(extent_m=self.extent_m, image_wh=self.image_wh)

    # serialization -------------------------------------------------------
    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        if "sampler" in d and isinstance(d["sampler"], dict):
            d["sampler"] = SamplerSettings(**d["sampler"])
        if "image_wh" in d:
            d["image_wh"] = tuple(d["image_wh"])
        return cls(**d)

    @classmethod
    def from_json_file(cls, path: str | Path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def write_resolved(self, destination: Path) -> None:
        destination.parent.mkdir(parents=True, exist_ok=True)
        destination.write_text(self.to_json())


@dataclass
class ViewResult:
    camera_name: str
    image: np.ndarray
    condition: geometry.SemanticView
    seed: int
    adapter_id: str | None
    warning: str | None = None


@dataclass
class GenerationResult:
    views: list[ViewResult]
    panel: np.ndarray
    timing: dict
    audit: list[dict]
    config_hash: str


def view_seed(seed: int, camera_index: int) -> int:
    return int(np.random.SeedSequence([int(seed), 0x9EE0, camera_index]).generate_state(1)[0])


def stitch_panel(images: list[np.ndarray]) -> np.ndarray:
    return np.concatenate(images, axis=1)


# ---------------------------------------------------------------------------
# model set


@dataclass
class ModelSet:
    config: PipelineConfig
    bundle: diffusion.DenoiserBundle
    refiner: refine.Refiner | None = None
    branch: control.ControlBranch | None = None

    @classmethod
    def load(cls, config: PipelineConfig, require: tuple[str, ...] = ("base", "refiner", "control")) -> "ModelSet":
        """Load checkpoints and validate the base-hash chain."""
        if not (config.base_dir / "manifest.json").exists():
            raise FileNotFoundError(f"base checkpoint missing at {config.base_dir}")
        bundle = diffusion.DenoiserBundle.load(config.base_dir)
        refiner = None
        if (config.refiner_dir / "manifest.json").exists():
            refiner = refine.Refiner.load(config.refiner_dir)
        elif "refiner" in require:
            raise FileNotFoundError(f"refiner checkpoint missing at {config.refiner_dir}")
        branch = None
        if (config.control_dir / "manifest.json").exists():
            branch = control.ControlBranch.load(config.control_dir, bundle)
        elif "control" in require:
            raise FileNotFoundError(f"control checkpoint missing at {config.control_dir}")
        models = cls(config=config, bundle=bundle, refiner=refiner, branch=branch)
        adapters_root = config.checkpoints_dir / "adapters"
        if adapters_root.exists():
            for adapter_dir in sorted(adapters_root.iterdir()):
                if (adapter_dir / "manifest.json").exists():
                    models.attach_adapter(adapter_dir)
        return models

    def attach_adapter(self, directory: Path) -> None:
        adapter, manifest = adapt.LoraAdapter.load(directory, self.bundle)
        token = manifest["token"]
        embedding = torch.tensor(manifest["token_embedding"], dtype=torch.float32)
        pe = self.bundle.prompt_encoder
        if token not in pe.extra_tokens:
            pe.add_token(token, embedding)
        else:
            with torch.no_grad():
                pe.extra_embeddings[token].copy_(embedding)
        self.bundle.view_tokens[adapter.camera_name] = token
        self.bundle.adapters[adapter.camera_name] = adapter

    # generation ------------------------------------------------------------
    def conditioning_views(
        self, sg: scene_mod.SceneGraph, cameras: list[scene_mod.CameraSpec], bypass_refiner: bool = False
    ) -> list[geometry.SemanticView]:
        views = []
        for cam in cameras:
            initial = geometry.project_scene_initial(sg, cam)
            if bypass_refiner:
                views.append(refine.upsample_nn(initial, 4))
            else:
                if self.refiner is None:
                    raise RuntimeError("no refiner loaded; cannot build refined conditioning")
                views.append(refine.refine(initial, self.refiner, image_wh=cam.image_wh))
        return views

    def generate(
        self,
        sg: scene_mod.SceneGraph,
        seed: int | None = None,
        weather: str | None = None,
        cameras: list[str] | None = None,
        bypass_refiner: bool = False,
        zero_control: bool = False,
        use_adapters: bool = True,
    ) -> GenerationResult:
        """Full Stage I + Stage II pass over the rig (or a camera subset)."""
        t_start = time.time()
        cfg = self.config
        seed = cfg.sampler.seed if seed is None else seed
        weather = weather or sg.weather
        cam_specs = [c for c in sg.cameras.cameras if cameras is None or c.name in cameras]
        conditions = self.conditioning_views(sg, cam_specs, bypass_refiner=bypass_refiner)
        t_project = time.time()

        views: list[ViewResult] = []
        audit: list[dict] = []
        for i, (cam, cond) in enumerate(zip(cam_specs, conditions)):
            adapter = self.bundle.adapters.get(cam.name) if use_adapters else None
            warning = None
            if use_adapters and adapter is None:
                warning = f"no adapter for {cam.name}; sampling without view adaptation"
            token = self.bundle.view_tokens.get(cam.name)
            if adapter is not None and token is not None:
                prompt = diffusion.view_prompt(token, weather)
            else:
                prompt = diffusion.base_prompt(weather)
            vseed = view_seed(seed, sg.cameras.names().index(cam.name))
            image = diffusion.sample(
                self.bundle,
                prompt,
                guidance=cfg.sampler.guidance,
                steps=cfg.sampler.steps,
                seed=vseed,
                mode=cfg.sampler.mode,
                condition=cond if (self.branch and not zero_control) else None,
                control=self.branch if not zero_control else None,
                adapter=adapter,
                latent_hw=cfg.latent_hw,
            )
            views.append(
                ViewResult(
                    camera_name=cam.name,
                    image=image,
                    condition=cond,
                    seed=vseed,
                    adapter_id=f"{adapter.camera_name}:r{adapter.rank}" if adapter else None,
                    warning=warning,
                )
            )
            audit.append({"camera": cam.name, "adapter": views[-1].adapter_id, "prompt": prompt, "seed": vseed})
        panel = stitch_panel([v.image for v in views])
        return GenerationResult(
            views=views,
            panel=panel,
            timing={"project_s": t_project - t_start, "sample_s": time.time() - t_project},
            audit=audit,
            config_hash=cfg.config_hash(),
        )


def generate_views(sg: scene_mod.SceneGraph, config: PipelineConfig, seed: int | None = None, **kwargs) -> GenerationResult:
    return ModelSet.load(config).generate(sg, seed=seed, **kwargs)


# ---------------------------------------------------------------------------
# training recipes


def _write_curve(path: Path, losses: list[float]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "loss"])
        for i, loss in enumerate(losses):
            writer.writerow([i, loss])


def train_frames(config: PipelineConfig) -> data.FrameDataset:
    seeds = data.scene_seeds("train", config.n_train_scenes, config.n_held_scenes)
    return data.cached_frames(seeds, config.scene_config(), config.data_dir)


def held_frames(config: PipelineConfig) -> data.FrameDataset:
    seeds = data.scene_seeds("held", config.n_train_scenes, config.n_held_scenes)
    return data.cached_frames(seeds, config.scene_config(), config.data_dir)


def _normalized_latents(bundle: diffusion.DenoiserBundle, images: np.ndarray) -> torch.Tensor:
    return diffusion.encode_batch(bundle, images) * bundle.latent_scale


def _refined_conditions(frames: data.FrameDataset, refiner: refine.Refiner) -> torch.Tensor:
    conds = []
    for i in range(len(frames)):
        view = refine.refine(frames.initial_view(i), refiner)
        conds.append(view.grid.transpose(2, 0, 1))
    return torch.from_numpy(np.stack(conds).astype(np.float32))


def regularization_latents(
    config: PipelineConfig, bundle: diffusion.DenoiserBundle
) -> tuple[torch.Tensor, list[str]]:
    """Base-model generations cached to disk before any adaptation runs.

    The prompt rotation covers the foundational concept prompts plus the
    tokenless street templates, so adaptation is anchored on every prompt
    family it must not drift on."""
    path = config.data_dir / "reg_images.npz"
    base_pool = list(diffusion.FOUNDATIONAL_PROMPTS) + [
        diffusion.base_prompt(w) for w in ("clear", "rain", "fog", "sunset")
    ]
    prompts = [base_pool[i % len(base_pool)] for i in range(config.n_reg_images)]
    if path.exists():
        z = np.load(path)
        images = z["images"]
    else:
        images = np.stack(
            [
                diffusion.sample(
                    bundle,
                    prompts[i],
                    guidance=config.sampler.guidance,
                    steps=config.sampler.steps,
                    seed=view_seed(0xCAFE, i),
                    mode="deterministic",
                    latent_hw=config.latent_hw,
                )
                for i in range(config.n_reg_images)
            ]
        ).astype(np.float32)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez_compressed(path, images=images)
    return _normalized_latents(bundle, images), prompts


def run_training_recipe(stage: str, config: PipelineConfig, resume: bool = False) -> Path:
    """Run one training stage; enforces stage order via existing manifests.

    Stages: autoencoder, denoiser, refiner, control, view:<camera>. Returns
    the written checkpoint directory.
    """
    config.write_resolved(Path(config.workdir) / "configs" / f"{stage.replace(':', '_')}.json")
    curve_path = Path(config.workdir) / "curves" / f"{stage.replace(':', '_')}.csv"
    stage_cfg = config.train.get(stage.split(":")[0], {})

    if stage == "autoencoder":
        frames = train_frames(config)
        ae, scale, losses = diffusion.train_autoencoder(frames.images, stage_cfg)
        bundle = diffusion.DenoiserBundle.create(seed=int(stage_cfg.get("seed", 0)))
        bundle.ae = ae
        bundle.latent_scale = scale
        bundle.ae_trained = True
        bundle.save(config.base_dir, extra={"train_autoencoder": stage_cfg})
        _write_curve(curve_path, losses)
        return config.base_dir

    if stage == "denoiser":
        if not (config.base_dir / "manifest.json").exists():
            raise DependencyError("denoiser stage requires the autoencoder stage (base checkpoint missing)")
        bundle = diffusion.DenoiserBundle.load(config.base_dir)
        if not bundle.ae_trained:
            raise DependencyError("denoiser stage requires a trained autoencoder")
        frames = train_frames(config)
        latents = _normalized_latents(bundle, frames.images)
        prompts = [diffusion.base_prompt(w) for w in frames.weathers]
        resume_state = None
        resume_path = config.base_dir / "resume.pt"
        if resume and resume_path.exists():
            resume_state = torch.load(resume_path, weights_only=False)
        losses, state = diffusion.train_denoiser(bundle, latents, prompts, stage_cfg, resume_state=resume_state)
        bundle.save(config.base_dir, extra={"train_denoiser": stage_cfg})
        torch.save(state, resume_path)
        _write_curve(curve_path, losses)
        return config.base_dir

    if stage == "refiner":
        frames = train_frames(config)
        dataset = [(frames.initial[i], frames.gt_labels[i]) for i in range(len(frames))]
        refiner, losses = refine.train_refiner(dataset, stage_cfg)
        refiner.save(config.refiner_dir)
        _write_curve(curve_path, losses)
        return config.refiner_dir

    if stage == "control":
        if not (config.base_dir / "manifest.json").exists():
            raise DependencyError("control stage requires the denoiser stage (base checkpoint missing)")
        bundle = diffusion.DenoiserBundle.load(config.base_dir)
        if not bundle.denoiser_trained:
            raise DependencyError("control stage requires a trained denoiser")
        if not (config.refiner_dir / "manifest.json").exists():
            raise DependencyError("control stage requires the refiner stage (refined conditions)")
        refiner = refine.Refiner.load(config.refiner_dir)
        frames = train_frames(config)
        latents = _normalized_latents(bundle, frames.images)
        conditions = _refined_conditions(frames, refiner)
        prompts = [diffusion.base_prompt(w) for w in frames.weathers]
        branch = control.ControlBranch.from_bundle(bundle, seed=int(stage_cfg.get("seed", 0)))
        losses = control.train_control(bundle, branch, latents, conditions, prompts, stage_cfg)
        branch.save(config.control_dir, bundle.content_hash(), extra={"train_control": stage_cfg})
        _write_curve(curve_path, losses)
        return config.control_dir

    if stage.startswith("view:"):
        camera_name = stage.split(":", 1)[1]
        if not (config.control_dir / "manifest.json").exists():
            raise DependencyError("view adaptation requires the control stage")
        bundle = diffusion.DenoiserBundle.load(config.base_dir)
        base_hash = bundle.content_hash()
        frames = train_frames(config)
        idx = [i for i in range(len(frames)) if frames.camera_names[i] == camera_name]
        if not idx:
            raise ValueError(f"no frames for camera {camera_name!r} in the training set")
        view_latents = _normalized_latents(bundle, frames.images[idx])
        view_weathers = [frames.weathers[i] for i in idx]
        reg_latents, reg_prompts = regularization_latents(config, bundle)
        adapt.register_view_token(bundle, camera_name, seed=len(bundle.view_tokens))
        adapter = adapt.train_view_adapter(
            bundle, camera_name, view_latents, view_weathers, reg_latents, reg_prompts, stage_cfg
        )
        token = bundle.view_tokens[camera_name]
        out = adapter.save(
            config.adapter_dir(camera_name),
            base_hash,
            token,
            bundle.prompt_encoder.extra_embeddings[token],
        )
        return out

    raise ValueError(f"unknown stage {stage!r}; expected one of {STAGE_ORDER}")


# ---------------------------------------------------------------------------
# evaluation runs


def adherence_scores(
    models: ModelSet,
    scene_seeds: list[int],
    arm: str = "full",
    seed: int = 0,
) -> dict:
    """Vehicle/road agreement between segmented generations and ground-truth
    camera semantics, aggregated over all views (mirrors the ablation table's
    protocol at desk scale)."""
    arms = {
        "full": {},
        "no_refine": {"bypass_refiner": True},
        "no_control": {"zero_control": True},
    }
    if arm not in arms:
        raise ValueError(f"unknown arm {arm!r}")
    cfg = models.config.scene_config()
    pairs = []
    for s in scene_seeds:
        sg = scene_mod.sample_scene(s, cfg)
        result = models.generate(sg, seed=seed, **arms[arm])
        for view in result.views:
            cam = sg.cameras.by_name(view.camera_name)
            gt = geometry.project_scene_detailed(sg, cam)
            seg = metrics.segment_generated(view.image, view.camera_name)
            pairs.append((seg, gt))
    agg = metrics.miou_aggregate(pairs, list(palette.CLASSES))
    return {"arm": arm, "per_class": agg["per_class"], "mean": agg["mean"], "n_views": len(pairs)}


def condition_ablation(models: ModelSet, scene_seeds: list[int], seed: int = 0) -> dict:
    """Three-arm comparison: full pipeline, refinement bypassed, control
    zeroed."""
    out = {}
    for arm in ("full", "no_refine", "no_control"):
        out[arm] = adherence_scores(models, scene_seeds, arm=arm, seed=seed)
    return out
