"""HTTP service exposing concept training and generation as asynchronous jobs.

Jobs persist as JSON files next to their artifacts (concepts/<id>.dcc,
results/<id>.png) under one storage root; the filesystem is the source of
truth, so restarting the service preserves finished work.
"""

from __future__ import annotations

import base64
import binascii
import json
import os
import queue
import threading
import time
import uuid
from contextlib import asynccontextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, HTTPException, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import FileResponse, JSONResponse

from . import images
from .concepts import load_concept, read_concept_header, save_concept
from .diffusion import SampleConfig, sample
from .text import GENERATION_TEMPLATE_ID, GENERATION_TEMPLATE_ID_STYLE, encode_prompt
from .training import TrainConfig, finetune


@dataclass
class ServiceConfig:
    storage_root: str = "./carigen-data"
    backbone: str = "toy"
    backbone_seed: int = 0
    image_resolution: int = 64
    external_model_path: Optional[str] = None
    external_adapter_path: Optional[str] = None
    host: str = "127.0.0.1"
    port: int = 8373

    @classmethod
    def load(cls, config_file: Optional[str] = None, env: Optional[dict] = None) -> "ServiceConfig":
        """File values first, then CARIGEN_* environment overrides."""
        values: dict = {}
        if config_file:
            with open(config_file, "r", encoding="utf-8") as fh:
                values.update(json.load(fh))
        env = os.environ if env is None else env
        mapping = {
            "CARIGEN_STORAGE": ("storage_root", str),
            "CARIGEN_BACKBONE": ("backbone", str),
            "CARIGEN_BACKBONE_SEED": ("backbone_seed", int),
            "CARIGEN_RESOLUTION": ("image_resolution", int),
            "CARIGEN_MODEL_PATH": ("external_model_path", str),
            "CARIGEN_ADAPTER_PATH": ("external_adapter_path", str),
            "CARIGEN_HOST": ("host", str),
            "CARIGEN_PORT": ("port", int),
        }
        for var, (key, cast) in mapping.items():
            if var in env:
                values[key] = cast(env[var])
        return cls(**values)

    def build_backbone(self):
        if self.backbone == "toy":
            from .backbones import toy_backbone

            return toy_backbone(seed=self.backbone_seed, image_resolution=self.image_resolution)
        if self.backbone == "external":
            from .backbones import external_backbone

            return external_backbone(self.external_model_path, self.external_adapter_path)
        raise ValueError(f"unknown backbone {self.backbone!r}")


@dataclass
class Job:
    id: str
    kind: str  # finetune | generate
    state: str = "queued"  # queued -> running -> done | failed
    payload: dict = field(default_factory=dict)
    result: Optional[str] = None
    error: Optional[str] = None
    progress: float = 0.0
    created_at: float = 0.0
    started_at: Optional[float] = None
    finished_at: Optional[float] = None


class JobStore:
    """Filesystem-backed job records with atomic writes."""

    def __init__(self, root):
        self.root = Path(root)
        for sub in ("jobs", "concepts", "results", "uploads"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def _path(self, job_id: str) -> Path:
        return self.root / "jobs" / f"{job_id}.json"

    def create(self, kind: str, payload: dict) -> Job:
        job = Job(id=uuid.uuid4().hex[:12], kind=kind, payload=payload, created_at=time.time())
        self.write(job)
        return job

    def write(self, job: Job) -> None:
        with self._lock:
            path = self._path(job.id)
            tmp = path.with_suffix(".json.tmp")
            tmp.write_text(json.dumps(asdict(job), sort_keys=True), encoding="utf-8")
            os.replace(tmp, path)

    def get(self, job_id: str) -> Optional[Job]:
        path = self._path(job_id)
        if not path.exists():
            return None
        return Job(**json.loads(path.read_text(encoding="utf-8")))

    def all_jobs(self) -> list[Job]:
        return [
            Job(**json.loads(p.read_text(encoding="utf-8")))
            for p in sorted((self.root / "jobs").glob("*.json"))
        ]

    def concept_path(self, concept_id: str) -> Path:
        return self.root / "concepts" / f"{concept_id}.dcc"

    def result_path(self, job_id: str) -> Path:
        return self.root / "results" / f"{job_id}.png"

    def list_concepts(self) -> list[dict]:
        entries = []
        for path in sorted((self.root / "concepts").glob("*.dcc")):
            header = read_concept_header(path)
            entries.append(
                {
                    "id": path.stem,
                    "kind": header["kind"],
                    "superclass": header["superclass"],
                    "default_scale": header["default_scale"],
                }
            )
        return entries

    def fail_interrupted(self) -> None:
        for job in self.all_jobs():
            if job.state in ("queued", "running"):
                job.state = "failed"
                job.error = "interrupted by service restart"
                job.finished_at = time.time()
                self.write(job)


class Worker:
    """Single thread executing jobs in FIFO order."""

    def __init__(self, store: JobStore, backbone):
        self.store = store
        self.backbone = backbone
        self.queue: "queue.Queue[Optional[str]]" = queue.Queue()
        self.thread = threading.Thread(target=self._run, daemon=True)

    def start(self) -> None:
        self.thread.start()

    def stop(self) -> None:
        self.queue.put(None)
        self.thread.join(timeout=30)

    def submit(self, job: Job) -> None:
        self.queue.put(job.id)

    def _run(self) -> None:
        while True:
            job_id = self.queue.get()
            if job_id is None:
                return
            job = self.store.get(job_id)
            if job is None:
                continue
            job.state = "running"
            job.started_at = time.time()
            self.store.write(job)
            try:
                if job.kind == "finetune":
                    self._run_finetune(job)
                elif job.kind == "generate":
                    self._run_generate(job)
                else:
                    raise ValueError(f"unknown job kind {job.kind!r}")
                job.state = "done"
                job.progress = 1.0
            except Exception as exc:  # noqa: BLE001 - failures land in the job record
                job.state = "failed"
                job.error = f"{type(exc).__name__}: {exc}"
            job.finished_at = time.time()
            self.store.write(job)

    def _progress_cb(self, job: Job):
        def cb(done: int, total: int) -> None:
            job.progress = done / total
            self.store.write(job)

        return cb

    def _run_finetune(self, job: Job) -> None:
        p = job.payload
        region = None
        if p.get("region_mask_path"):
            region = images.load_region_mask(
                p["region_mask_path"], self.backbone.image_resolution
            )
        config = TrainConfig(
            steps=p.get("steps"),
            seed=p.get("seed", 0),
        )
        concept = finetune(
            p["image_path"],
            p["superclass"],
            p["kind"],
            self.backbone,
            config,
            region_mask=region,
            progress_cb=self._progress_cb(job),
        )
        out = self.store.concept_path(job.id)
        save_concept(concept, out)
        job.result = str(out)

    def _run_generate(self, job: Job) -> None:
        p = job.payload
        concepts = {}
        scales = {}
        placeholders = {"identity": "id", "style": "style"}
        for entry in p["concepts"]:
            concept = load_concept(self.store.concept_path(entry["id"]), self.backbone)
            name = placeholders[concept.kind.value]
            concepts[name] = concept
            if entry.get("scale") is not None:
                scales[name] = float(entry["scale"])
        template = GENERATION_TEMPLATE_ID_STYLE if "style" in concepts else GENERATION_TEMPLATE_ID
        cond = encode_prompt(template, concepts, self.backbone)
        uncond = encode_prompt("", {}, self.backbone)
        sketch = None
        if p.get("sketch_path"):
            sketch = images.load_sketch(p["sketch_path"], self.backbone.image_resolution)
        config = SampleConfig(
            steps=p.get("steps", 50),
            cfg_scale=p.get("cfg", 9.0),
            scale_overrides=scales,
        )
        result = sample(
            self.backbone, cond, uncond, sketch, config, p.get("seed", 0),
            progress_cb=self._progress_cb(job),
        )
        out = self.store.result_path(job.id)
        images.save_image(result.image, out)
        job.result = str(out)


def create_app(config: Optional[ServiceConfig] = None) -> FastAPI:
    config = config or ServiceConfig.load()
    store = JobStore(config.storage_root)
    backbone = config.build_backbone()
    worker = Worker(store, backbone)

    @asynccontextmanager
    async def lifespan(_app: FastAPI):
        store.fail_interrupted()
        worker.start()
        yield
        worker.stop()

    app = FastAPI(title="carigen", lifespan=lifespan)
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )
    app.state.store = store
    app.state.backbone = backbone
    app.state.config = config

    @app.get("/config")
    def get_config():
        return {
            "image_resolution": backbone.image_resolution,
            "backbone_signature": backbone.signature,
            "defaults": {"steps": 50, "cfg": 9.0, "scale": 1.2, "scale_marker": 1.4},
        }

    @app.get("/concepts")
    def list_concepts():
        return store.list_concepts()

    @app.post("/concepts")
    async def create_concept(request: Request):
        form = await _read_form(request)
        if "image" not in form or not getattr(form["image"], "filename", None):
            raise HTTPException(400, "multipart field 'image' is required")
        superclass = form.get("superclass")
        kind = form.get("kind")
        if not superclass or kind not in ("identity", "style"):
            raise HTTPException(400, "fields 'superclass' and 'kind' (identity|style) are required")
        job = store.create("finetune", {})
        image_path = store.root / "uploads" / f"{job.id}-image.png"
        image_path.write_bytes(await form["image"].read())
        payload = {
            "superclass": superclass,
            "kind": kind,
            "image_path": str(image_path),
            "steps": _maybe_int(form.get("steps"), "steps"),
            "seed": _maybe_int(form.get("seed"), "seed") or 0,
        }
        region = form.get("region_mask")
        if region is not None and getattr(region, "filename", None):
            region_path = store.root / "uploads" / f"{job.id}-region.png"
            region_path.write_bytes(await region.read())
            payload["region_mask_path"] = str(region_path)
        job.payload = payload
        store.write(job)
        worker.submit(job)
        return {"job_id": job.id}

    @app.post("/generate")
    async def generate(request: Request):
        body = await _read_generate_payload(request, store)
        concept_entries = body.get("concepts")
        if not isinstance(concept_entries, list) or not concept_entries:
            raise HTTPException(400, "'concepts' must be a nonempty list of {id, scale?}")
        kinds = []
        for entry in concept_entries:
            if not isinstance(entry, dict) or "id" not in entry:
                raise HTTPException(400, "each concept entry needs an 'id'")
            kinds.append(_concept_state(store, entry["id"]))
        if kinds.count("identity") != 1 or kinds.count("style") > 1:
            raise HTTPException(
                400, "generation needs exactly one identity concept and at most one style concept"
            )
        sketch_path = None
        sketch_bytes = body.pop("_sketch_bytes", None)
        if sketch_bytes is not None:
            job_sketch = uuid.uuid4().hex[:8]
            sketch_path = store.root / "uploads" / f"{job_sketch}-sketch.png"
            sketch_path.write_bytes(sketch_bytes)
            try:
                images.load_sketch(sketch_path, backbone.image_resolution)
            except ValueError as exc:
                raise HTTPException(422, str(exc)) from exc
            except Exception as exc:
                raise HTTPException(400, f"sketch is not a decodable image: {exc}") from exc
        job = store.create(
            "generate",
            {
                "concepts": concept_entries,
                "steps": _maybe_int(body.get("steps"), "steps") or 50,
                "cfg": _maybe_float(body.get("cfg"), "cfg", default=9.0),
                "seed": _maybe_int(body.get("seed"), "seed") or 0,
                "sketch_path": str(sketch_path) if sketch_path else None,
            },
        )
        worker.submit(job)
        return {"job_id": job.id}

    @app.get("/jobs/{job_id}")
    def get_job(job_id: str):
        job = store.get(job_id)
        if job is None:
            raise HTTPException(404, f"no job {job_id!r}")
        return {
            "id": job.id,
            "kind": job.kind,
            "state": job.state,
            "progress": job.progress,
            "error": job.error,
            "result": job.result,
            "created_at": job.created_at,
            "finished_at": job.finished_at,
        }

    @app.get("/results/{job_id}")
    def get_result(job_id: str):
        job = store.get(job_id)
        if job is None:
            raise HTTPException(404, f"no job {job_id!r}")
        if job.state == "failed":
            raise HTTPException(404, f"job failed: {job.error}")
        if job.state != "done":
            raise HTTPException(404, f"job is {job.state}; no result yet")
        if job.kind == "generate":
            return FileResponse(store.result_path(job.id), media_type="image/png")
        return FileResponse(job.result, media_type="application/octet-stream")

    @app.exception_handler(json.JSONDecodeError)
    async def bad_json(_request, exc):
        return JSONResponse(status_code=400, content={"detail": f"malformed JSON: {exc}"})

    return app


def _concept_state(store: JobStore, concept_id: str) -> str:
    """Kind of a ready concept; 404/409 HTTP errors otherwise."""
    path = store.concept_path(concept_id)
    if path.exists():
        return read_concept_header(path)["kind"]
    job = store.get(concept_id)
    if job is not None and job.kind == "finetune":
        raise HTTPException(409, f"concept {concept_id!r} is not finished (job is {job.state})")
    raise HTTPException(404, f"no concept {concept_id!r}")


async def _read_form(request: Request):
    content_type = request.headers.get("content-type", "")
    if "multipart/form-data" not in content_type:
        raise HTTPException(400, "expected a multipart/form-data request")
    return await request.form()


async def _read_generate_payload(request: Request, store: JobStore) -> dict:
    """JSON body with optional base64 sketch, or multipart with a sketch file."""
    content_type = request.headers.get("content-type", "")
    if "multipart/form-data" in content_type:
        form = await request.form()
        if "payload" not in form:
            raise HTTPException(400, "multipart generate needs a 'payload' JSON field")
        try:
            body = json.loads(form["payload"])
        except json.JSONDecodeError as exc:
            raise HTTPException(400, f"malformed payload JSON: {exc}") from exc
        sketch = form.get("sketch")
        if sketch is not None and getattr(sketch, "filename", None):
            body["_sketch_bytes"] = await sketch.read()
        return body
    try:
        body = json.loads(await request.body())
    except json.JSONDecodeError as exc:
        raise HTTPException(400, f"malformed JSON body: {exc}") from exc
    if not isinstance(body, dict):
        raise HTTPException(400, "JSON body must be an object")
    encoded = body.get("sketch_png_base64")
    if encoded:
        try:
            body["_sketch_bytes"] = base64.b64decode(encoded, validate=True)
        except (binascii.Error, ValueError) as exc:
            raise HTTPException(400, f"sketch_png_base64 is not valid base64: {exc}") from exc
    return body


def _maybe_int(value, name: str):
    if value in (None, ""):
        return None
    try:
        return int(value)
    except (TypeError, ValueError):
        raise HTTPException(400, f"'{name}' must be an integer") from None


def _maybe_float(value, name: str, default=None):
    if value in (None, ""):
        return default
    try:
        return float(value)
    except (TypeError, ValueError):
        raise HTTPException(400, f"'{name}' must be a number") from None


def main() -> None:
    import uvicorn

    config = ServiceConfig.load()
    uvicorn.run(create_app(config), host=config.host, port=config.port)


if __name__ == "__main__":
    main()
