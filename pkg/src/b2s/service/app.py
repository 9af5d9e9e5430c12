"""FastAPI application: scene validation, projection, generation jobs.

Model state is immutable while serving. Projection requests run concurrently
(pure functions); generation requests are serialized through a FIFO queue
with job ids.
"""

from __future__ import annotations

import base64
import io
import queue
import threading
import uuid

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from .. import geometry, palette, refine, scene as scene_mod
from ..pipeline import ModelSet
from ..tensorio import checkpoint_hash
from . import schemas


def png_b64(image: np.ndarray) -> str:
    """Float [0,1] (H, W, 3) image to base64 PNG."""
    from PIL import Image

    arr = (np.clip(image, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode()


def view_payload(view: geometry.SemanticView) -> schemas.SemanticPayload:
    cm = view.class_map()
    colors = np.array([palette.class_color(i) for i in range(3)])
    return schemas.SemanticPayload(
        width=cm.shape[1],
        height=cm.shape[0],
        classes=list(view.classes),
        resolution_tag=view.resolution_tag,
        png=png_b64(colors[cm]),
        labels=base64.b64encode(cm.tobytes()).decode(),
    )


class JobQueue:
    """Single-worker FIFO generation queue."""

    def __init__(self, models: ModelSet):
        self.models = models
        self.jobs: dict[str, dict] = {}
        self.q: queue.Queue = queue.Queue()
        self.worker = threading.Thread(target=self._run, daemon=True)
        self.worker.start()

    def submit(self, sg: scene_mod.SceneGraph, seed: int, weather: str | None, cameras: list[str] | None) -> str:
        job_id = uuid.uuid4().hex[:12]
        self.jobs[job_id] = {"status": "queued", "result": None, "error": None}
        self.q.put((job_id, sg, seed, weather, cameras))
        return job_id

    def _run(self) -> None:
        while True:
            job_id, sg, seed, weather, cameras = self.q.get()
            self.jobs[job_id]["status"] = "running"
            try:
                result = self.models.generate(sg, seed=seed, weather=weather, cameras=cameras)
                payload = schemas.GenerationPayload(
                    views=[
                        schemas.GeneratedView(
                            camera_name=v.camera_name,
                            image_png=png_b64(v.image),
                            condition=view_payload(v.condition),
                            seed=v.seed,
                            adapter_id=v.adapter_id,
                            warning=v.warning,
                        )
                        for v in result.views
                    ],
                    panel_png=png_b64(result.panel),
                    config_hash=result.config_hash,
                    timing=result.timing,
                )
                self.jobs[job_id].update(status="done", result=payload)
            except Exception as exc:  # surfaced through the job status
                self.jobs[job_id].update(status="failed", error=str(exc))


def scene_from_model(model: schemas.SceneModel) -> scene_mod.SceneGraph:
    return scene_mod.scene_from_dict(model.model_dump())


def create_app(models: ModelSet) -> FastAPI:
    app = FastAPI(title="b2s service", version="1.0")
    jobs = JobQueue(models)
    app.state.models = models
    app.state.jobs = jobs

    @app.exception_handler(RequestValidationError)
    async def validation_handler(request: Request, exc: RequestValidationError):
        first = exc.errors()[0] if exc.errors() else {}
        field = ".".join(str(p) for p in first.get("loc", []) if p != "body") or None
        return JSONResponse(
            status_code=400,
            content=schemas.ErrorBody(
                code="invalid_request", message=first.get("msg", "invalid request"), field=field
            ).model_dump(),
        )

    @app.post("/v1/scene/validate", response_model=schemas.ValidateResponse)
    def validate(scene: schemas.SceneModel):
        sg = scene_from_model(scene)
        violations = scene_mod.validate_scene(sg)
        valid = not any(v["severity"] == "error" for v in violations)
        return schemas.ValidateResponse(
            valid=valid, violations=[schemas.Violation(**v) for v in violations]
        )

    @app.post("/v1/project", response_model=schemas.ProjectResponse)
    def project(req: schemas.ProjectRequest):
        sg = scene_from_model(req.scene)
        views = []
        for cam in sg.cameras.cameras:
            initial = geometry.project_scene_initial(sg, cam)
            if models.refiner is not None:
                refined = refine.refine(initial, models.refiner, image_wh=cam.image_wh)
            else:
                refined = refine.upsample_nn(initial, 4)
            views.append(
                schemas.ProjectedView(
                    camera_name=cam.name,
                    initial=view_payload(initial),
                    refined=view_payload(refined),
                )
            )
        return schemas.ProjectResponse(views=views)

    @app.post("/v1/generate", response_model=schemas.GenerateAccepted)
    def generate(req: schemas.GenerateRequest):
        sg = scene_from_model(req.scene)
        job_id = jobs.submit(sg, req.seed, req.weather, req.cameras)
        return schemas.GenerateAccepted(job_id=job_id)

    @app.get("/v1/jobs/{job_id}", response_model=schemas.JobStatus)
    def job_status(job_id: str):
        job = jobs.jobs.get(job_id)
        if job is None:
            return JSONResponse(
                status_code=404,
                content=schemas.ErrorBody(code="unknown_job", message=f"no job {job_id}").model_dump(),
            )
        return schemas.JobStatus(job_id=job_id, status=job["status"], result=job["result"], error=job["error"])

    @app.get("/v1/rig", response_model=schemas.RigResponse)
    def rig():
        rig = scene_mod.default_rig(models.config.image_wh)
        return schemas.RigResponse(
            cameras=[
                schemas.CameraModel(
                    name=c.name,
                    K=c.K.tolist(),
                    R=c.R.tolist(),
                    t=c.t.tolist(),
                    image_wh=list(c.image_wh),
                )
                for c in rig.cameras
            ]
        )

    @app.get("/v1/health", response_model=schemas.HealthResponse)
    def health():
        cfg = models.config
        hashes = {"base": checkpoint_hash(cfg.base_dir)}
        if (cfg.refiner_dir / "manifest.json").exists():
            hashes["refiner"] = checkpoint_hash(cfg.refiner_dir)
        if (cfg.control_dir / "manifest.json").exists():
            hashes["control"] = checkpoint_hash(cfg.control_dir)
        for cam, _ in sorted(models.bundle.adapters.items()):
            hashes[f"adapter:{cam}"] = checkpoint_hash(cfg.adapter_dir(cam))
        return schemas.HealthResponse(status="ok", checkpoints=hashes)

    return app
