"""HTTP facade over the pipeline: job submission, progress, artifacts, segment.

Desk-scale design: an in-memory job registry guarded by one lock, a bounded
queue, and one pipeline worker thread per concurrency slot. Each job gets its
own artifact directory; artifact endpoints stream exactly the files the
pipeline persisted.
"""
from __future__ import annotations

import json
import queue
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from fastapi import FastAPI, File, Form, HTTPException, UploadFile
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import FileResponse, JSONResponse, Response
from fastapi.staticfiles import StaticFiles

from .errors import ConfigError, ContractError, StageError
from .imgio import image_from_bytes, mask_from_bytes, png_bytes
from .pipeline import EditRequest, PipelineConfig, run_edit
from .segmenter import SEGMENTERS

QUEUED = "queued"
RUNNING = "running"
DONE = "done"
FAILED = "failed"

_TRANSITIONS = {QUEUED: {RUNNING}, RUNNING: {DONE, FAILED}, DONE: set(), FAILED: set()}


@dataclass
class EditJob:
    id: str
    request: EditRequest
    config: PipelineConfig
    state: str = QUEUED
    progress_done: int = 0
    progress_total: int = 0
    error: Optional[dict] = None
    artifact_dir: Optional[Path] = None
    result_manifest: Optional[dict] = None

    def status(self) -> dict:
        body = {
            "id": self.id,
            "state": self.state,
            "progress": {"done": self.progress_done, "total": self.progress_total},
            "target_xy": list(self.request.target_xy),
            "category": self.request.category,
        }
        if self.error is not None:
            body["error"] = self.error
        if self.state == DONE:
            body["artifacts"] = sorted(self.result_manifest["artifacts"])
            body["refined_maps"] = self._refined_names()
        return body

    def _refined_names(self) -> list[str]:
        maps_dir = self.artifact_dir / "refined_maps"
        if not maps_dir.is_dir():
            return []
        series = json.loads((maps_dir / "series.json").read_text())
        return [f"refined_maps/{m['file']}" for m in series["maps"]]


class JobStore:
    """Serialized-access registry; transitions only move forward."""

    def __init__(self):
        self._jobs: dict[str, EditJob] = {}
        self._lock = threading.Lock()

    def add(self, job: EditJob) -> None:
        with self._lock:
            self._jobs[job.id] = job

    def get(self, job_id: str) -> Optional[EditJob]:
        with self._lock:
            return self._jobs.get(job_id)

    def transition(self, job_id: str, state: str) -> None:
        with self._lock:
            job = self._jobs[job_id]
            if state not in _TRANSITIONS[job.state]:
                raise ContractError(f"illegal transition {job.state} -> {state}")
            job.state = state

    def update_progress(self, job_id: str, done: int, total: int) -> None:
        with self._lock:
            job = self._jobs[job_id]
            job.progress_done = max(job.progress_done, done)
            job.progress_total = total


def create_app(config: Optional[PipelineConfig] = None, workers: int = 1,
               queue_size: int = 16, artifact_root: str | Path = "occlumove-jobs",
               segmenter: str = "flood", studio_dir: Optional[str | Path] = None,
               cors_origin: str = "*") -> FastAPI:
    base_config = config or PipelineConfig()
    root = Path(artifact_root)
    store = JobStore()
    work: queue.Queue[str] = queue.Queue(maxsize=queue_size)

    app = FastAPI(title="occlumove edit service", version="1")
    app.add_middleware(
        CORSMiddleware, allow_origins=[cors_origin], allow_methods=["*"],
        allow_headers=["*"])
    app.state.store = store

    def worker_loop():
        while True:
            job_id = work.get()
            if job_id is None:  # shutdown sentinel
                return
            job = store.get(job_id)
            store.transition(job_id, RUNNING)
            try:
                result = run_edit(
                    job.request, job.config,
                    progress_sink=lambda _l, d, t: store.update_progress(job_id, d, t),
                    out_dir=job.artifact_dir)
                job.result_manifest = result.manifest
                store.transition(job_id, DONE)
            except StageError as exc:
                job.error = {"stage": exc.stage, "message": str(exc)}
                store.transition(job_id, FAILED)
            except Exception as exc:  # pragma: no cover - defensive
                job.error = {"stage": "unknown", "message": str(exc)}
                store.transition(job_id, FAILED)

    threads = [threading.Thread(target=worker_loop, daemon=True, name=f"edit-worker-{i}")
               for i in range(workers)]
    for t in threads:
        t.start()

    def _parse_request(image: bytes, mask: bytes, target: str, category: str,
                       config_json: Optional[str]) -> tuple[EditRequest, PipelineConfig]:
        errors = {}
        img = msk = None
        try:
            img = image_from_bytes(image)
        except Exception:
            errors["image"] = "not a decodable image"
        try:
            msk = mask_from_bytes(mask)
        except Exception:
            errors["mask"] = "not a decodable mask PNG"
        try:
            x, y = (int(v) for v in target.split(","))
        except ValueError:
            errors["target"] = "expected X,Y"
            x = y = 0
        if not category.strip():
            errors["category"] = "must be non-empty"
        cfg = base_config
        if config_json:
            try:
                cfg = base_config.merged(json.loads(config_json))
            except (json.JSONDecodeError, ConfigError) as exc:
                errors["config"] = str(exc)
        if img is not None and msk is not None and not errors:
            req = EditRequest(source_image=img, visible_mask=msk.grid,
                              target_xy=(x, y), category=category)
            try:
                req.validate()
            except ContractError as exc:
                errors["request"] = str(exc)
            else:
                return req, cfg
        raise HTTPException(status_code=400, detail={"field_errors": errors})

    @app.post("/v1/edits", status_code=202)
    async def submit_edit(image: UploadFile = File(...), mask: UploadFile = File(...),
                          target: str = Form(...), category: str = Form(...),
                          config: Optional[str] = Form(None)):
        req, cfg = _parse_request(await image.read(), await mask.read(),
                                  target, category, config)
        job = EditJob(id=uuid.uuid4().hex, request=req, config=cfg)
        job.artifact_dir = root / job.id
        store.add(job)
        try:
            work.put_nowait(job.id)
        except queue.Full:
            raise HTTPException(status_code=429, detail="job queue full")
        return {"id": job.id, "state": job.state}

    def _job_or_404(job_id: str) -> EditJob:
        job = store.get(job_id)
        if job is None:
            raise HTTPException(status_code=404, detail=f"unknown job {job_id}")
        return job

    @app.get("/v1/edits/{job_id}")
    def job_status(job_id: str):
        return JSONResponse(_job_or_404(job_id).status())

    @app.get("/v1/edits/{job_id}/result")
    def job_result(job_id: str):
        job = _job_or_404(job_id)
        if job.state != DONE:
            raise HTTPException(status_code=409, detail=f"job is {job.state}")
        return FileResponse(job.artifact_dir / "edited.png", media_type="image/png")

    @app.get("/v1/edits/{job_id}/artifacts/{name:path}")
    def job_artifact(job_id: str, name: str):
        job = _job_or_404(job_id)
        if job.artifact_dir is None:
            raise HTTPException(status_code=404, detail="no artifacts")
        path = (job.artifact_dir / name).resolve()
        if not str(path).startswith(str(job.artifact_dir.resolve())) or not path.is_file():
            raise HTTPException(status_code=404, detail=f"no artifact {name}")
        return FileResponse(path)

    @app.post("/v1/segment")
    async def segment(image: UploadFile = File(...), point: str = Form(...)):
        fn = SEGMENTERS.get(segmenter)
        if fn is None:
            raise HTTPException(
                status_code=503,
                detail="segmenter unavailable; draw and upload a mask instead")
        img = image_from_bytes(await image.read())
        try:
            x, y = (int(v) for v in point.split(","))
        except ValueError:
            raise HTTPException(status_code=400, detail={"field_errors": {"point": "expected X,Y"}})
        try:
            grid = fn(img, (x, y))
        except ContractError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return Response(content=png_bytes(grid.astype(np.float64), mode="L"),
                        media_type="image/png")

    @app.get("/v1/health")
    def health():
        return {"ok": True, "queue_size": work.qsize(), "workers": workers}

    if studio_dir is not None:
        app.mount("/", StaticFiles(directory=studio_dir, html=True), name="studio")

    app.state.shutdown = lambda: [work.put(None) for _ in threads]
    return app
