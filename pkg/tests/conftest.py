"""Shared fixtures: the desk-scale trained artifact set.

Training is expensive, so checkpoints persist in .artifacts_cache/ at the
repo root and are rebuilt only when missing (stage wall times are recorded
alongside for the runtime-budget criteria). Delete that directory to force
retraining.
"""

from __future__ import annotations

import json
import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from b2s import diffusion, pipeline

REPO_ROOT = Path(__file__).resolve().parent.parent
CACHE_DIR = REPO_ROOT / ".artifacts_cache" / "desk"

DESK_TRAIN = {
    "autoencoder": {"epochs": 8, "batch": 32, "lr": 2e-3, "seed": 0},
    "denoiser": {"steps": 10000, "batch": 32, "lr": 1e-3, "seed": 0},
    "refiner": {"epochs": 30, "batch": 32, "lr": 1e-3, "seed": 0},
    "control": {"steps": 6000, "batch": 32, "lr": 1e-3, "seed": 0},
    "view": {"steps": 500, "batch": 8, "lr": 1e-3, "rank": 4, "seed": 0},
}

RIG_CAMERAS = [f"cam{i}" for i in range(6)]


def desk_config() -> pipeline.PipelineConfig:
    return pipeline.PipelineConfig(
        workdir=str(CACHE_DIR),
        n_train_scenes=500,
        n_held_scenes=150,
        n_reg_images=200,
        sampler=pipeline.SamplerSettings(steps=30, mode="deterministic", guidance=3.0, seed=0),
        train=DESK_TRAIN,
    )


def ensure_stage(config: pipeline.PipelineConfig, stage: str) -> None:
    if stage == "autoencoder":
        done = (config.base_dir / "manifest.json").exists()
    elif stage == "denoiser":
        done = (
            (config.base_dir / "manifest.json").exists()
            and diffusion.DenoiserBundle.load(config.base_dir).denoiser_trained
        )
    elif stage == "refiner":
        done = (config.refiner_dir / "manifest.json").exists()
    elif stage == "control":
        done = (config.control_dir / "manifest.json").exists()
    elif stage.startswith("view:"):
        done = (config.adapter_dir(stage.split(":", 1)[1]) / "manifest.json").exists()
    else:
        raise ValueError(stage)
    if not done:
        t0 = time.time()
        pipeline.run_training_recipe(stage, config)
        _record_timing(config, stage, time.time() - t0)


def _record_timing(config: pipeline.PipelineConfig, stage: str, seconds: float) -> None:
    path = Path(config.workdir) / "timings.json"
    timings = json.loads(path.read_text()) if path.exists() else {}
    timings[stage] = seconds
    path.write_text(json.dumps(timings, indent=1))


def ensure_all_stages(config: pipeline.PipelineConfig) -> None:
    for stage in ["autoencoder", "denoiser", "refiner", "control"]:
        ensure_stage(config, stage)
    for cam in RIG_CAMERAS:
        ensure_stage(config, f"view:{cam}")


@pytest.fixture(scope="session")
def desk_cfg() -> pipeline.PipelineConfig:
    return desk_config()


@pytest.fixture(scope="session")
def trained_base(desk_cfg) -> diffusion.DenoiserBundle:
    ensure_stage(desk_cfg, "autoencoder")
    ensure_stage(desk_cfg, "denoiser")
    return diffusion.DenoiserBundle.load(desk_cfg.base_dir)


@pytest.fixture(scope="session")
def trained_refiner(desk_cfg):
    from b2s import refine

    ensure_stage(desk_cfg, "refiner")
    return refine.Refiner.load(desk_cfg.refiner_dir)


@pytest.fixture(scope="session")
def trained_models(desk_cfg) -> pipeline.ModelSet:
    ensure_all_stages(desk_cfg)
    return pipeline.ModelSet.load(desk_cfg)


@pytest.fixture(scope="session")
def train_frames(desk_cfg):
    return pipeline.train_frames(desk_cfg)


@pytest.fixture(scope="session")
def held_frames_ds(desk_cfg):
    return pipeline.held_frames(desk_cfg)
