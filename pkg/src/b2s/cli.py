"""Command-line interface.

All commands are thin wrappers over the package; `serve` exposes the same
functionality over HTTP for the layout editor.
"""

from __future__ import annotations

import json
from pathlib import Path

import click
import numpy as np

from . import data, geometry, metrics, pipeline, refine, scene as scene_mod


def _save_png(image: np.ndarray, path: Path) -> None:
    from PIL import Image

    arr = (np.clip(image, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def _load_config(workdir: str, config_file: str | None, overrides: tuple[str, ...]) -> pipeline.PipelineConfig:
    if config_file:
        cfg = pipeline.PipelineConfig.from_json_file(config_file)
        cfg.workdir = workdir
    else:
        cfg = pipeline.PipelineConfig(workdir=workdir)
    for item in overrides:
        key, _, value = item.partition("=")
        if not _:
            raise click.BadParameter(f"--set expects key=value, got {item!r}")
        _apply_override(cfg, key, value)
    return cfg


def _apply_override(cfg: pipeline.PipelineConfig, key: str, value: str) -> None:
    parts = key.split(".")
    target = cfg
    if parts[0] == "train":
        stage = parts[1]
        cfg.train.setdefault(stage, {})[parts[2]] = json.loads(value)
        return
    for p in parts[:-1]:
        target = getattr(target, p)
    leaf = parts[-1]
    current = getattr(target, leaf)
    setattr(target, leaf, type(current)(json.loads(value)) if current is not None else json.loads(value))


@click.group()
def main():
    """BEV layout to street-view generation."""


# -- scene ------------------------------------------------------------------


@main.group()
def scene():
    """Scene sampling and inspection."""


@scene.command("gen")
@click.option("--seed", type=int, default=0)
@click.option("--extent", type=float, default=50.0)
@click.option("--out", type=click.Path(), required=True)
def scene_gen(seed: int, extent: float, out: str):
    cfg = scene_mod.SceneConfig(extent_m=extent)
    sg = scene_mod.sample_scene(seed, cfg)
    scene_mod.save_scene(sg, out)
    click.echo(f"wrote {out} ({len(sg.roads)} roads, {len(sg.vehicles)} vehicles, {sg.weather})")


@scene.command("show")
@click.argument("scene_file", type=click.Path(exists=True))
@click.option("--bev-png", type=click.Path(), default=None, help="write a BEV preview image")
@click.option("--meters-per-cell", type=float, default=0.5)
def scene_show(scene_file: str, bev_png: str | None, meters_per_cell: float):
    sg = scene_mod.load_scene(scene_file)
    violations = scene_mod.validate_scene(sg)
    click.echo(json.dumps(scene_mod.scene_to_dict(sg) | {"violations": violations}, indent=1))
    if bev_png:
        from . import palette

        layout = scene_mod.rasterize_bev(sg, meters_per_cell)
        colors = np.array([palette.class_color(i) for i in range(3)])
        cm = np.zeros(layout.grid.shape[:2], dtype=np.uint8)
        cm[layout.grid[:, :, 0] > 0] = 1
        cm[layout.grid[:, :, 1] > 0] = 2
        _save_png(colors[cm], Path(bev_png))
        click.echo(f"wrote {bev_png}")


# -- projection ---------------------------------------------------------------


@main.command()
@click.option("--scene", "scene_file", type=click.Path(exists=True), required=True)
@click.option("--workdir", type=click.Path(), default="runs/desk")
@click.option("--out", type=click.Path(), required=True)
def project(scene_file: str, workdir: str, out: str):
    """Project a scene into per-camera initial and refined semantic views."""
    cfg = pipeline.PipelineConfig(workdir=workdir)
    sg = scene_mod.load_scene(scene_file)
    refiner = None
    if (cfg.refiner_dir / "manifest.json").exists():
        refiner = refine.Refiner.load(cfg.refiner_dir)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for cam in sg.cameras.cameras:
        initial = geometry.project_scene_initial(sg, cam)
        geometry.save_view(initial, out_dir / f"{cam.name}_initial.bvt")
        if refiner is not None:
            refined = refine.refine(initial, refiner, image_wh=cam.image_wh)
            geometry.save_view(refined, out_dir / f"{cam.name}_refined.bvt")
    click.echo(f"wrote views to {out_dir}")


# -- training -------------------------------------------------------------------


@main.command()
@click.argument("stage")
@click.option("--workdir", type=click.Path(), default="runs/desk")
@click.option("--config", "config_file", type=click.Path(exists=True), default=None)
@click.option("--set", "overrides", multiple=True, help="config override, e.g. train.denoiser.steps=2000")
@click.option("--resume", is_flag=True, default=False)
def train(stage: str, workdir: str, config_file: str | None, overrides: tuple[str, ...], resume: bool):
    """Run one training stage (autoencoder | denoiser | refiner | control | view:<cam>)."""
    cfg = _load_config(workdir, config_file, overrides)
    path = pipeline.run_training_recipe(stage, cfg, resume=resume)
    click.echo(f"stage {stage} done -> {path}")


# -- generation -------------------------------------------------------------------


@main.command()
@click.option("--scene", "scene_file", type=click.Path(exists=True), required=True)
@click.option("--workdir", type=click.Path(), default="runs/desk")
@click.option("--seed", type=int, default=0)
@click.option("--weather", type=str, default=None)
@click.option("--out", type=click.Path(), required=True)
def generate(scene_file: str, workdir: str, seed: int, weather: str | None, out: str):
    """Generate street views for a scene; writes panel and per-view images."""
    cfg = pipeline.PipelineConfig(workdir=workdir)
    models = pipeline.ModelSet.load(cfg)
    sg = scene_mod.load_scene(scene_file)
    result = models.generate(sg, seed=seed, weather=weather)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _save_png(result.panel, out_dir / "panel.png")
    for v in result.views:
        _save_png(v.image, out_dir / f"{v.camera_name}.png")
        geometry.save_view(v.condition, out_dir / f"{v.camera_name}_condition.bvt")
    (out_dir / "audit.json").write_text(json.dumps(result.audit, indent=1))
    cfg.write_resolved(out_dir / "config.json")
    warnings = [v.warning for v in result.views if v.warning]
    click.echo(f"wrote {out_dir} (config {result.config_hash[:12]})")
    for w in warnings:
        click.echo(f"warning: {w}", err=True)


# -- evaluation -------------------------------------------------------------------


@main.group(name="eval")
def eval_group():
    """Evaluation reports (JSON + optional CSV row)."""


def _write_report(report: metrics.EvalReport, out: str | None, csv_path: str | None):
    click.echo(report.to_json())
    if out:
        Path(out).write_text(report.to_json())
    if csv_path:
        import csv as csv_mod

        header, row = report.csv_row()
        path = Path(csv_path)
        new = not path.exists()
        with open(path, "a", newline="") as f:
            writer = csv_mod.writer(f)
            if new:
                writer.writerow(header)
            writer.writerow(row)


@eval_group.command("fid")
@click.option("--workdir", type=click.Path(), default="runs/desk")
@click.option("--samples", type=int, default=64)
@click.option("--out", type=click.Path(), default=None)
@click.option("--csv", "csv_path", type=click.Path(), default=None)
def eval_fid(workdir: str, samples: int, out: str | None, csv_path: str | None):
    """Frechet feature distance between generated samples and training frames."""
    cfg = pipeline.PipelineConfig(workdir=workdir)
    models = pipeline.ModelSet.load(cfg)
    frames = pipeline.train_frames(cfg)
    held = data.scene_seeds("held", cfg.n_train_scenes, cfg.n_held_scenes)
    gen_images = []
    i = 0
    while len(gen_images) < samples:
        sg = scene_mod.sample_scene(held[i % len(held)], cfg.scene_config())
        result = models.generate(sg, seed=i)
        gen_images.extend(v.image for v in result.views)
        i += 1
    gen_images = np.stack(gen_images[:samples]).astype(np.float32)
    extractor = metrics.EncoderFeatureExtractor(models.bundle)
    fid = metrics.fid_between(gen_images, frames.images, extractor)
    report = metrics.EvalReport(
        fid=fid,
        per_class_iou={},
        miou=float("nan"),
        config_hash=cfg.config_hash(),
        sample_counts={"generated": samples, "reference": len(frames.images)},
        protocol={"extractor": "autoencoder-encoder, mean-pooled"},
    )
    _write_report(report, out, csv_path)


@eval_group.command("miou")
@click.option("--workdir", type=click.Path(), default="runs/desk")
@click.option("--scenes", type=int, default=20)
@click.option("--out", type=click.Path(), default=None)
@click.option("--csv", "csv_path", type=click.Path(), default=None)
def eval_miou(workdir: str, scenes: int, out: str | None, csv_path: str | None):
    """Condition-adherence mIOU of generated views against ground truth."""
    cfg = pipeline.PipelineConfig(workdir=workdir)
    models = pipeline.ModelSet.load(cfg)
    held = data.scene_seeds("held", cfg.n_train_scenes, cfg.n_held_scenes)[:scenes]
    scores = pipeline.adherence_scores(models, held, arm="full")
    report = metrics.EvalReport(
        fid=float("nan"),
        per_class_iou=scores["per_class"],
        miou=scores["mean"],
        config_hash=cfg.config_hash(),
        sample_counts={"views": scores["n_views"]},
        protocol={"held_scenes": len(held), "views_per_scene": 6, "reference": "ground-truth semantics"},
    )
    _write_report(report, out, csv_path)


@eval_group.command("ablation")
@click.option("--workdir", type=click.Path(), default="runs/desk")
@click.option("--scenes", type=int, default=150)
@click.option("--out", type=click.Path(), default=None)
def eval_ablation(workdir: str, scenes: int, out: str | None):
    """Three-arm ablation: full, refinement bypassed, control zeroed."""
    cfg = pipeline.PipelineConfig(workdir=workdir)
    models = pipeline.ModelSet.load(cfg)
    held = data.scene_seeds("held", cfg.n_train_scenes, cfg.n_held_scenes)[:scenes]
    result = pipeline.condition_ablation(models, held)
    text = json.dumps(result, indent=1)
    click.echo(text)
    if out:
        Path(out).write_text(text)


# -- service ----------------------------------------------------------------------


@main.command()
@click.option("--workdir", type=click.Path(), default="runs/desk")
@click.option("--host", type=str, default="127.0.0.1")
@click.option("--port", type=int, default=8000)
def serve(workdir: str, host: str, port: int):
    """Serve the /v1 HTTP API for the layout editor."""
    import uvicorn

    from .service.app import create_app

    cfg = pipeline.PipelineConfig(workdir=workdir)
    models = pipeline.ModelSet.load(cfg)
    app = create_app(models)
    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
