"""Local HTTP service for interactive segmentation projects.

Concurrency model: reads are handled wherever the framework schedules them;
every mutation of one project serializes through that project's writer lock
and must present the revision it was based on. A stale revision gets 409 and
the current revision back. Long work (featurization, sidecar extraction,
upsampling attached low-res features) runs on a bounded worker pool behind
202 + job id; job status reads are plain dict lookups.

Error mapping: structurally malformed requests 400, unknown ids 404, stale
revisions 409, semantically invalid requests (single-class training, class 0
strokes, mismatched dims) 422.
"""

from __future__ import annotations

import hashlib
import io
import secrets
import shlex
import subprocess
import tempfile
import threading
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from fastapi import Body, FastAPI, Query, Request, Response
from fastapi.exceptions import HTTPException, RequestValidationError
from fastapi.responses import JSONResponse
from PIL import Image

from . import engine
from .classical import FeatureSetConfig, FeatureStack
from .config import WorkbenchConfig
from .deep import load_weight_archive, parse_feature_bytes
from .deep.prep import visualize_pca_rgb
from .deep.upsampler import upsample
from .errors import FormatError, ShapeError, StateError
from .store import ProjectStore

_PLACEHOLDER_DIMS = (8, 8)


class _Handle:
    """One live project: engine state plus service bookkeeping."""

    def __init__(self, project: engine.Project, name: str,
                 revision: int = 0, has_image: bool = False):
        self.project = project
        self.name = name
        self.revision = revision
        self.has_image = has_image
        self.lock = threading.Lock()

    def require_revision(self, given: int):
        if given != self.revision:
            raise HTTPException(
                409, detail={"error": "stale revision", "given": given,
                             "revision": self.revision})

    def info(self, project_id: str) -> dict:
        p = self.project
        image = None
        if self.has_image:
            shape = p.image.shape
            image = {"height": shape[0], "width": shape[1],
                     "channels": 1 if p.image.ndim == 2 else shape[2]}
        return {
            "id": project_id,
            "name": self.name,
            "revision": self.revision,
            "class_count": p.class_count,
            "class_names": list(p.class_names),
            "image": image,
            "labelled_count": int(p.labels.labelled_count()),
            "has_deep": p.deep_stack is not None,
            "deep_k": None if p.deep_stack is None else p.deep_stack.n_channels,
            "has_model": p.model is not None,
        }


def _semantic(exc: Exception) -> HTTPException:
    return HTTPException(422, detail=str(exc))


def _decode_image(body: bytes) -> np.ndarray:
    try:
        raw = np.asarray(Image.open(io.BytesIO(body)))
    except Exception as exc:
        raise HTTPException(400, detail=f"could not decode image: {exc}")
    if np.issubdtype(raw.dtype, np.integer):
        return raw.astype(np.float32) / np.iinfo(raw.dtype).max
    return raw.astype(np.float32)


def _png_response(grid_u8: np.ndarray, mode: str, revision: int) -> Response:
    img = Image.fromarray(grid_u8, mode=mode)
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return Response(content=buf.getvalue(), media_type="image/png",
                    headers={"X-Revision": str(revision)})


def create_app(config: WorkbenchConfig | None = None,
               store: ProjectStore | None = None) -> FastAPI:
    config = config or WorkbenchConfig()
    app = FastAPI(title="microseg workbench")
    state = app.state
    state.config = config
    state.store = store or ProjectStore(config.store_root)
    state.registry: dict[str, _Handle] = {}
    state.jobs: dict[str, dict] = {}
    state.executor = ThreadPoolExecutor(max_workers=max(1, config.workers))
    state.weights = None  # loaded on first use

    @app.exception_handler(RequestValidationError)
    def malformed(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400,
                            content={"detail": f"malformed request: {exc}"})

    def get_handle(project_id: str) -> _Handle:
        handle = state.registry.get(project_id)
        if handle is not None:
            return handle
        if project_id in state.store:
            project, extra = state.store.load_project(project_id)
            handle = _Handle(project,
                             name=extra.get("name", project_id),
                             revision=int(extra.get("revision", 0)),
                             has_image=bool(extra.get("has_image", True)))
            state.registry[project_id] = handle
            return handle
        raise HTTPException(404, detail=f"no project {project_id!r}")

    def submit_job(fn) -> JSONResponse:
        job_id = secrets.token_hex(8)
        record = {"id": job_id, "status": "queued", "result": None,
                  "error": None}
        state.jobs[job_id] = record

        def run():
            record["status"] = "running"
            try:
                record["result"] = fn()
            except Exception as exc:
                record["error"] = str(exc)
                record["status"] = "error"
            else:
                record["status"] = "done"

        state.executor.submit(run)
        return JSONResponse(status_code=202, content={"job": job_id})

    def load_weights():
        if state.weights is None:
            if config.weights is None:
                raise HTTPException(
                    422, detail="low-resolution features need upsampling but "
                                "no weights archive is configured")
            state.weights = load_weight_archive(config.weights)
        return state.weights

    # -- project lifecycle ---------------------------------------------------

    @app.post("/projects")
    def create_project(payload: dict | None = Body(None)):
        payload = payload or {}
        project_id = state.store.new_id()
        try:
            placeholder = np.zeros(_PLACEHOLDER_DIMS, np.float32)
            feature_config = FeatureSetConfig.from_dict(
                payload["feature_config"]) if "feature_config" in payload \
                else None
            project = engine.Project(
                placeholder,
                feature_config=feature_config,
                class_count=int(payload.get("class_count", 2)),
                class_names=payload.get("class_names"))
        except (ValueError, TypeError) as exc:
            raise _semantic(exc)
        handle = _Handle(project, name=str(payload.get("name", project_id)))
        state.registry[project_id] = handle
        return {"id": project_id, "revision": handle.revision,
                "name": handle.name}

    @app.get("/projects")
    def list_projects():
        ids = sorted(set(state.registry) | set(state.store.project_ids))
        return {"projects": [get_handle(i).info(i) for i in ids]}

    @app.get("/projects/{project_id}")
    def project_info(project_id: str):
        return get_handle(project_id).info(project_id)

    @app.post("/projects/{project_id}/save")
    def save_project(project_id: str):
        handle = get_handle(project_id)
        with handle.lock:
            state.store.save_project(
                project_id, handle.project,
                extra={"revision": handle.revision, "name": handle.name,
                       "has_image": handle.has_image})
            return {"saved": True, "revision": handle.revision}

    # -- mutations -------------------------------------------------------------

    @app.post("/projects/{project_id}/image")
    async def upload_image(project_id: str, request: Request,
                           revision: int = Query(...)):
        handle = get_handle(project_id)
        body = await request.body()
        if not body:
            raise HTTPException(400, detail="empty image body")
        image = _decode_image(body)
        with handle.lock:
            handle.require_revision(revision)
            try:
                handle.project.image = image
            except ShapeError as exc:
                raise _semantic(exc)
            handle.has_image = True
            handle.revision += 1
            return {"revision": handle.revision,
                    "height": image.shape[0], "width": image.shape[1]}

    @app.post("/projects/{project_id}/deep-features")
    async def attach_deep_features(project_id: str, request: Request,
                                   revision: int = Query(...)):
        handle = get_handle(project_id)
        if not handle.has_image:
            raise HTTPException(422, detail="upload an image first")
        body = await request.body()

        if body:
            try:
                grid = parse_feature_bytes(body, what="<upload>")
            except FormatError as exc:
                raise HTTPException(400, detail=str(exc))
            key = hashlib.sha256(body).hexdigest()[:16]
            if grid.patch_size == 1:
                stack = FeatureStack(
                    grid.grid,
                    tuple(f"deep_{i}" for i in range(grid.n_channels)),
                    pca_ordered=True)
                with handle.lock:
                    handle.require_revision(revision)
                    try:
                        handle.project.set_deep_stack(stack, key)
                    except ShapeError as exc:
                        raise _semantic(exc)
                    handle.revision += 1
                    return {"revision": handle.revision, "k": grid.n_channels}

            with handle.lock:
                handle.require_revision(revision)
                submitted_at = handle.revision

            def upsample_job():
                stack = upsample(handle.project.image, grid, load_weights())
                with handle.lock:
                    if handle.revision != submitted_at:
                        raise StateError("project changed during upsampling; "
                                         "attach again")
                    handle.project.set_deep_stack(stack, key)
                    handle.revision += 1
                    return {"revision": handle.revision, "k": stack.n_channels}

            load_weights()  # fail fast with 422 if not configured
            return submit_job(upsample_job)

        if not config.sidecar:
            raise HTTPException(
                422, detail="no feature payload and no sidecar extractor "
                            "configured")
        with handle.lock:
            handle.require_revision(revision)
            submitted_at = handle.revision

        def sidecar_job():
            with tempfile.TemporaryDirectory(prefix="microseg-sidecar-") as tmp:
                image_path = Path(tmp) / "image.png"
                out_path = Path(tmp) / "features.fts"
                array = np.clip(handle.project.image, 0.0, 1.0)
                Image.fromarray((array * 255).astype(np.uint8)).save(image_path)
                command = [part.format(image=image_path, out=out_path)
                           for part in shlex.split(config.sidecar)]
                proc = subprocess.run(command, capture_output=True, text=True)
                if proc.returncode != 0:
                    raise StateError(f"sidecar failed ({proc.returncode}): "
                                     f"{proc.stderr.strip()}")
                payload = out_path.read_bytes()
            grid = parse_feature_bytes(payload, what=str(out_path))
            key = hashlib.sha256(payload).hexdigest()[:16]
            if grid.patch_size != 1:
                stack = upsample(handle.project.image, grid, load_weights())
            else:
                stack = FeatureStack(
                    grid.grid,
                    tuple(f"deep_{i}" for i in range(grid.n_channels)),
                    pca_ordered=True)
            with handle.lock:
                if handle.revision != submitted_at:
                    raise StateError("project changed during extraction; "
                                     "attach again")
                handle.project.set_deep_stack(stack, key)
                handle.revision += 1
                return {"revision": handle.revision, "k": stack.n_channels}

        return submit_job(sidecar_job)

    @app.put("/projects/{project_id}/labels")
    def put_labels(project_id: str, payload: dict = Body(...)):
        handle = get_handle(project_id)
        if not handle.has_image:
            raise HTTPException(422, detail="upload an image first")
        if "revision" not in payload or "records" not in payload:
            raise HTTPException(400, detail="body needs revision and records")
        records = payload["records"]
        if not isinstance(records, list):
            raise HTTPException(400, detail="records must be a list")
        for record in records:
            if not isinstance(record, dict) or not {"class", "row", "start",
                                                    "len"} <= set(record):
                raise HTTPException(
                    400, detail="each record needs class/row/start/len")
            if record["class"] == 0:
                raise HTTPException(
                    422, detail="class 0 is reserved for unlabelled pixels")
        with handle.lock:
            handle.require_revision(int(payload["revision"]))
            project = handle.project
            try:
                if payload.get("replace"):
                    project.labels = engine.SparseLabelMap.empty(
                        *project.labels.grid.shape, project.class_count,
                        project.class_names)
                project.paint(records)
            except ValueError as exc:
                raise _semantic(exc)
            handle.revision += 1
            return {"revision": handle.revision,
                    "labelled_count": int(project.labels.labelled_count())}

    @app.get("/projects/{project_id}/labels")
    def get_labels(project_id: str):
        handle = get_handle(project_id)
        if not handle.has_image:
            raise HTTPException(422, detail="upload an image first")
        buf = io.BytesIO()
        engine.save_labels_png(buf, handle.project.labels)
        return Response(content=buf.getvalue(), media_type="image/png",
                        headers={"X-Revision": str(handle.revision)})

    @app.post("/projects/{project_id}/train")
    def train(project_id: str, payload: dict = Body(...)):
        handle = get_handle(project_id)
        if "revision" not in payload:
            raise HTTPException(400, detail="body needs revision")
        kind = payload.get("kind", config.train_kind)
        use_deep = bool(payload.get("use_deep", False))
        j = payload.get("j")
        try:
            train_config = config.train_config(seed=payload.get("seed"))
        except ValueError as exc:
            raise _semantic(exc)
        with handle.lock:
            handle.require_revision(int(payload["revision"]))
            try:
                _, metrics = engine.train_on_labels(
                    handle.project, kind, train_config,
                    use_deep=use_deep, j=j)
            except (ValueError, StateError) as exc:
                raise _semantic(exc)
            handle.revision += 1
            return {"revision": handle.revision, "metrics": metrics}

    # -- long jobs ---------------------------------------------------------------

    @app.post("/projects/{project_id}/featurize")
    def featurize(project_id: str):
        handle = get_handle(project_id)
        if not handle.has_image:
            raise HTTPException(422, detail="upload an image first")

        def featurize_job():
            stack = handle.project.classical_stack()
            return {"n_channels": stack.n_channels}

        return submit_job(featurize_job)

    @app.get("/jobs/{job_id}")
    def job_status(job_id: str):
        record = state.jobs.get(job_id)
        if record is None:
            raise HTTPException(404, detail=f"no job {job_id!r}")
        return record

    # -- read-only views ---------------------------------------------------------

    @app.get("/projects/{project_id}/segmentation")
    def segmentation(project_id: str):
        handle = get_handle(project_id)
        try:
            result = engine.segment(handle.project)
        except StateError as exc:
            status = 409 if "stale" in str(exc) else 404
            raise HTTPException(status, detail=str(exc))
        buf = io.BytesIO()
        engine.save_segmentation_png(buf, result)
        return Response(content=buf.getvalue(), media_type="image/png",
                        headers={"X-Revision": str(handle.revision)})

    @app.get("/projects/{project_id}/feature-viz")
    def feature_viz(project_id: str):
        handle = get_handle(project_id)
        if not handle.has_image:
            raise HTTPException(422, detail="upload an image first")
        project = handle.project
        stack = project.deep_stack or project.classical_stack()
        rgb = visualize_pca_rgb(stack)
        return _png_response((rgb * 255).astype(np.uint8), "RGB",
                             handle.revision)

    @app.get("/projects/{project_id}/metrics")
    def metrics(project_id: str):
        handle = get_handle(project_id)
        history = handle.project.history
        return {"revision": handle.revision,
                "history": history,
                "latest": history[-1]["metrics"] if history else None}

    return app
