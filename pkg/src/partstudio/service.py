"""HTTP studio over a trained checkpoint.

Catalog browsing, part composition, sampling, interpolation, synchronous
2D generation and queued 3D lifts / inversions, all against one frozen
checkpoint snapshot.  Every generative request carries an explicit seed
and every artifact is content-addressed, so identical requests yield
identical refs and provenance records replay to the same bytes.
"""

import hashlib
import io
import json
import queue
import threading
import time
import uuid
from pathlib import Path
from typing import List, Literal, Optional

import numpy as np
import torch
from fastapi import FastAPI, HTTPException
from fastapi.responses import Response
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel, Field
from PIL import Image

from . import sds, world
from .checkpoint import load_checkpoint
from .generation import generate_from_latents, to_png_bytes
from .latent import compose_latents
from .training import invert_image

TOKENS_FORMAT = "partstudio-tokens"
GENERATE_FORMAT = "partstudio-service-generate"

# catalog display names, cycled with a numeric suffix past the first lap
SPECIES_NAMES = (
    "brindle", "saffron", "cobalt", "verdant", "ember", "dusk",
    "lagoon", "maroon", "thistle", "umber", "frost", "sorrel",
    "citrine", "mallow", "juniper", "onyx",
)


def species_name(sid):
    base = SPECIES_NAMES[sid % len(SPECIES_NAMES)]
    lap = sid // len(SPECIES_NAMES)
    return base if lap == 0 else f"{base}-{lap + 1}"


# --- artifact store ---------------------------------------------------------


class ArtifactStore:
    """Append-only content-addressed blobs with a JSON index."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.index_path = self.root / "index.json"
        self.lock = threading.Lock()
        self.index = {}
        if self.index_path.exists():
            self.index = json.loads(self.index_path.read_text())

    def put(self, data: bytes, media_type, kind):
        ref = hashlib.sha256(data).hexdigest()
        with self.lock:
            path = self.root / ref
            if not path.exists():
                path.write_bytes(data)
            if ref not in self.index:
                self.index[ref] = {
                    "media_type": media_type,
                    "kind": kind,
                    "size": len(data),
                    "created": time.time(),
                }
                self.index_path.write_text(json.dumps(self.index, indent=1))
        return ref

    def put_json(self, obj, kind):
        data = json.dumps(obj, sort_keys=True).encode()
        return self.put(data, "application/json", kind)

    def get(self, ref):
        with self.lock:
            entry = self.index.get(ref)
        if entry is None:
            raise KeyError(ref)
        return (self.root / ref).read_bytes(), entry["media_type"]

    def get_json(self, ref):
        data, media = self.get(ref)
        if media != "application/json":
            raise KeyError(f"{ref} is not a JSON artifact")
        return json.loads(data)


# --- job queue ---------------------------------------------------------------


class Job:
    def __init__(self, kind, request):
        self.job_id = uuid.uuid4().hex
        self.kind = kind
        self.request = request
        self.state = "queued"
        self.artifacts = {}
        self.error = None
        self.created = time.time()
        self.started = None
        self.finished = None

    def to_json(self):
        return {
            "job_id": self.job_id,
            "kind": self.kind,
            "state": self.state,
            "request": self.request,
            "artifacts": self.artifacts,
            "error": self.error,
            "created": self.created,
            "started": self.started,
            "finished": self.finished,
        }


class JobQueue:
    """Single background worker; heavy jobs run strictly one at a time."""

    def __init__(self, runner):
        self.runner = runner
        self.queue = queue.Queue()
        self.jobs = {}
        self.lock = threading.Lock()
        self.worker = None

    def _ensure_worker(self):
        if self.worker is None or not self.worker.is_alive():
            self.worker = threading.Thread(target=self._loop, daemon=True)
            self.worker.start()

    def _loop(self):
        while True:
            job = self.queue.get()
            job.started = time.time()
            job.state = "running"
            try:
                job.artifacts = self.runner(job)
                job.state = "done"
            except Exception as exc:
                job.error = f"{type(exc).__name__}: {exc}"
                job.state = "failed"
            job.finished = time.time()

    def submit(self, kind, request):
        job = Job(kind, request)
        with self.lock:
            self.jobs[job.job_id] = job
            self._ensure_worker()
        self.queue.put(job)
        return job

    def get(self, job_id):
        with self.lock:
            return self.jobs.get(job_id)


# --- request schemas ----------------------------------------------------------


class Selection(BaseModel):
    kind: Literal["species", "sample", "interpolate", "latent"]
    species_id: Optional[int] = None
    species_a: Optional[int] = None
    species_b: Optional[int] = None
    alpha: Optional[float] = Field(None, ge=0.0, le=1.0)
    values: Optional[List[float]] = None

    def to_selection(self):
        out = {"kind": self.kind}
        for key in ("species_id", "species_a", "species_b", "alpha", "values"):
            v = getattr(self, key)
            if v is not None:
                out[key] = v
        return out


class ComposeRequest(BaseModel):
    selections: List[Selection]
    seed: int = 0


class SampleRequest(BaseModel):
    parts: List[int]
    seed: int = 0


class InterpolateRequest(BaseModel):
    species_a: int
    species_b: int
    alpha: float = Field(ge=0.0, le=1.0)
    part: Optional[int] = None  # None interpolates every slot


class GenerateRequest(BaseModel):
    tokens_ref: str
    cameras: List[int] = [0, 1, 2, 3]
    seed: int = 0
    guidance: float = 3.0
    steps: int = Field(50, ge=1, le=1000)
    rescale: float = 0.3
    attention: bool = False

    model_config = {"extra": "ignore"}  # provenance records POST back as-is


class Lift3dConfig(BaseModel):
    steps: int = Field(2000, ge=1, le=20000)
    seed: int = 0
    guidance: float = 7.5
    lr: float = 0.05


class Lift3dRequest(BaseModel):
    tokens_ref: str
    config: Lift3dConfig = Lift3dConfig()


class InvertRequest(BaseModel):
    image_refs: List[str]
    views: List[int]
    steps: int = Field(1000, ge=1, le=20000)
    seed: int = 0
    guidance: float = Field(3.0, ge=0.0, le=30.0)


# --- service ------------------------------------------------------------------


class StudioService:
    def __init__(self, ckpt_path, data_root, artifact_root=None):
        ckpt_path = Path(ckpt_path)
        try:
            self.bundle = load_checkpoint(ckpt_path)
        except Exception as exc:
            raise RuntimeError(f"cannot serve checkpoint {ckpt_path}: {exc}")
        self.manifest = world.load_manifest(data_root)
        self.checkpoint_hash = hashlib.sha256(ckpt_path.read_bytes()).hexdigest()
        root = artifact_root or (ckpt_path.parent / "artifacts")
        self.store = ArtifactStore(root)
        self.infer_lock = threading.Lock()
        self.jobs = JobQueue(self._run_job)
        self._thumbs = None
        self._thumb_lock = threading.Lock()

    @property
    def part_count(self):
        return self.bundle.latent.part_count

    @property
    def species_count(self):
        return self.bundle.latent.species_count

    def _check_species(self, sid):
        if not 0 <= sid < self.species_count:
            raise HTTPException(404, f"species {sid} outside the catalog")

    def preview_png(self, sid, view):
        spec = self.manifest.catalog[sid]
        img = world.render_creature(
            spec, view, image_size=self.manifest.image_size,
            background=self.manifest.background,
            background_texture=self.manifest.background_texture,
        )
        arr = np.round(img.pixels * 255.0).astype(np.uint8)
        buf = io.BytesIO()
        Image.fromarray(arr).save(buf, format="PNG")
        return buf.getvalue()

    def thumbnails(self):
        with self._thumb_lock:
            if self._thumbs is None:
                self._thumbs = [
                    self.store.put(self.preview_png(sid, 0), "image/png",
                                   "thumbnail")
                    for sid in range(self.species_count)
                ]
            return self._thumbs

    def compose(self, req: ComposeRequest):
        if len(req.selections) != self.part_count:
            raise HTTPException(
                422, f"need exactly {self.part_count} selections"
            )
        g = torch.Generator().manual_seed(req.seed)
        sels = [s.to_selection() for s in req.selections]
        try:
            table = compose_latents(self.bundle.latent, sels, generator=g)
        except ValueError as exc:
            raise HTTPException(422, str(exc))
        with torch.no_grad():
            tokens = self.bundle.latent.tokens_from_latents(table[None])[0]
        record = {
            "format": TOKENS_FORMAT,
            "version": 1,
            "selections": sels,
            "seed": req.seed,
            "latents": table.tolist(),
            "checkpoint": self.checkpoint_hash,
        }
        ref = self.store.put_json(record, "tokens")
        return {
            "tokens_ref": ref,
            "url": f"/api/artifacts/{ref}",
            "latents": table.tolist(),
            "tokens_norm": tokens.norm(dim=1).tolist(),
        }

    def sample(self, req: SampleRequest):
        for m in req.parts:
            if not 0 <= m < self.part_count:
                raise HTTPException(422, f"part index {m} outside 0..{self.part_count - 1}")
        g = torch.Generator().manual_seed(req.seed)
        rows = [
            {"part": m, "values": self.bundle.latent.sample_part(m, generator=g).tolist()}
            for m in req.parts
        ]
        return {"latents": rows, "seed": req.seed}

    def interpolate(self, req: InterpolateRequest):
        self._check_species(req.species_a)
        self._check_species(req.species_b)
        if req.part is not None and not 0 <= req.part < self.part_count:
            raise HTTPException(422, f"part index {req.part} outside 0..{self.part_count - 1}")
        table = self.bundle.latent.interpolate(
            req.species_a, req.species_b, req.alpha
        )
        if req.part is None:
            return {"latents": table.tolist(), "alpha": req.alpha}
        return {
            "part": req.part,
            "values": table[req.part].tolist(),
            "alpha": req.alpha,
        }

    def _load_tokens(self, ref):
        try:
            record = self.store.get_json(ref)
        except KeyError:
            raise HTTPException(404, f"unknown tokens_ref {ref}")
        if record.get("format") != TOKENS_FORMAT:
            raise HTTPException(422, f"{ref} is not a tokens artifact")
        return torch.tensor(record["latents"], dtype=torch.float32)

    def generate(self, req: GenerateRequest):
        for v in req.cameras:
            if not 0 <= v < world.VIEW_COUNT:
                raise HTTPException(422, f"camera {v} outside 0..{world.VIEW_COUNT - 1}")
        if not req.cameras:
            raise HTTPException(422, "cameras must not be empty")
        table = self._load_tokens(req.tokens_ref)
        tables = table[None].repeat(len(req.cameras), 1, 1)
        with self.infer_lock:
            result = generate_from_latents(
                self.bundle, tables, req.cameras, seed=req.seed,
                steps=req.steps, guidance=req.guidance, rescale=req.rescale,
                want_attention=req.attention,
            )
        images = []
        for i, cam in enumerate(req.cameras):
            ref = self.store.put(
                to_png_bytes(result.images[i]), "image/png", "generation"
            )
            images.append({
                "camera": cam,
                "view_name": world.VIEW_NAMES[cam],
                "ref": ref,
                "url": f"/api/artifacts/{ref}",
            })
        attention = None
        if req.attention:
            attention = []
            maps = result.attention  # (B, M, 16, 16)
            for i, cam in enumerate(req.cameras):
                for m in range(maps.shape[1]):
                    heat = (maps[i, m] / maps[i, m].max().clamp_min(1e-8))
                    arr = np.round(heat.numpy() * 255.0).astype(np.uint8)
                    buf = io.BytesIO()
                    Image.fromarray(arr, mode="L").resize(
                        (self.manifest.image_size, self.manifest.image_size),
                        Image.BILINEAR,
                    ).save(buf, format="PNG")
                    ref = self.store.put(buf.getvalue(), "image/png", "attention")
                    attention.append({
                        "camera": cam,
                        "part": m,
                        "part_role": world.PART_ROLES[m] if m < len(world.PART_ROLES) else str(m),
                        "ref": ref,
                        "url": f"/api/artifacts/{ref}",
                    })
        provenance = {
            "format": GENERATE_FORMAT,
            "version": 1,
            "tokens_ref": req.tokens_ref,
            "cameras": list(req.cameras),
            "seed": req.seed,
            "guidance": req.guidance,
            "steps": req.steps,
            "rescale": req.rescale,
            "attention": req.attention,
            "checkpoint": self.checkpoint_hash,
            "image_refs": [e["ref"] for e in images],
        }
        prov_ref = self.store.put_json(provenance, "provenance")
        return {
            "images": images,
            "attention": attention,
            "provenance": provenance,
            "provenance_ref": prov_ref,
        }

    # --- jobs ---------------------------------------------------------------

    def _run_job(self, job):
        if job.kind == "lift3d":
            return self._job_lift3d(job.request)
        if job.kind == "invert":
            return self._job_invert(job.request)
        raise ValueError(f"unknown job kind {job.kind}")

    def _job_lift3d(self, request):
        table = torch.tensor(request["latents"], dtype=torch.float32)
        cfg = request["config"]
        with self.infer_lock:
            field, history = sds.optimize_3d(
                self.bundle, table, steps=cfg["steps"], seed=cfg["seed"],
                guidance=cfg["guidance"], lr=cfg["lr"],
                background=self.manifest.background,
            )
        buf = io.BytesIO()
        np.savez_compressed(buf, **field.to_arrays())
        field_ref = self.store.put(buf.getvalue(), "application/octet-stream",
                                   "field")
        turn_refs = []
        for v in range(world.VIEW_COUNT):
            img = sds.render_field(
                field, sds.view_azimuth(v),
                image_size=self.manifest.image_size,
                background=self.manifest.background,
            )
            turn_refs.append(
                self.store.put(to_png_bytes(img), "image/png", "turntable")
            )
        report = {
            "format": "partstudio-lift3d",
            "version": 1,
            "request": request,
            "checkpoint": self.checkpoint_hash,
            "loss_tail": history[-10:],
            "field_ref": field_ref,
            "turntable_refs": turn_refs,
        }
        report_ref = self.store.put_json(report, "lift3d-report")
        return {
            "field": field_ref,
            "turntable": turn_refs,
            "report": report_ref,
        }

    def _job_invert(self, request):
        images = []
        for ref in request["image_refs"]:
            try:
                data, media = self.store.get(ref)
            except KeyError:
                raise ValueError(f"unknown image ref {ref}")
            if media != "image/png":
                raise ValueError(f"{ref} is not an image artifact")
            arr = np.asarray(Image.open(io.BytesIO(data)).convert("RGB"),
                             dtype=np.float32) / 255.0
            images.append(torch.from_numpy(arr).permute(2, 0, 1))
        with self.infer_lock:
            table, history = invert_image(
                self.bundle, torch.stack(images), request["views"],
                steps=request["steps"], seed=request["seed"],
                guidance=request["guidance"],
            )
            redone = generate_from_latents(
                self.bundle, table[None].repeat(len(request["views"]), 1, 1),
                request["views"], seed=request["seed"],
                guidance=request["guidance"],
            )
        recon_refs = [
            self.store.put(to_png_bytes(img), "image/png", "inversion")
            for img in redone.images
        ]
        report = {
            "format": "partstudio-invert",
            "version": 1,
            "request": request,
            "checkpoint": self.checkpoint_hash,
            "latents": table.tolist(),
            "loss_tail": [float(v) for v in history[-10:]],
            "reconstruction_refs": recon_refs,
        }
        ref = self.store.put_json(report, "invert-report")
        return {"report": ref, "latents": ref}


# --- app factory ---------------------------------------------------------------


def create_app(ckpt_path, data_root, artifact_root=None, ui_dir=None):
    svc = StudioService(ckpt_path, data_root, artifact_root=artifact_root)
    app = FastAPI(title="partstudio", version="1.0")
    app.state.service = svc

    @app.get("/api/health")
    def health():
        return {
            "status": "ok",
            "species_count": svc.species_count,
            "part_count": svc.part_count,
            "view_count": world.VIEW_COUNT,
            "checkpoint": svc.checkpoint_hash[:16],
        }

    @app.get("/api/species")
    def species():
        thumbs = svc.thumbnails()
        table = svc.manifest.catalog.descriptor_table()
        return {
            "species": [
                {
                    "id": sid,
                    "name": species_name(sid),
                    "thumbnail": thumbs[sid],
                    "thumbnail_url": f"/api/artifacts/{thumbs[sid]}",
                    "parts": table[sid].tolist(),
                }
                for sid in range(svc.species_count)
            ],
            "part_roles": list(world.PART_ROLES),
            "part_count": svc.part_count,
            "view_names": list(world.VIEW_NAMES),
        }

    @app.get("/api/species/{sid}/preview")
    def preview(sid: int, view: int = 0):
        svc._check_species(sid)
        if not 0 <= view < world.VIEW_COUNT:
            raise HTTPException(422, f"view {view} outside 0..{world.VIEW_COUNT - 1}")
        return Response(svc.preview_png(sid, view), media_type="image/png")

    @app.post("/api/compose")
    def compose(req: ComposeRequest):
        return svc.compose(req)

    @app.post("/api/sample")
    def sample(req: SampleRequest):
        return svc.sample(req)

    @app.post("/api/interpolate")
    def interpolate(req: InterpolateRequest):
        return svc.interpolate(req)

    @app.post("/api/generate")
    def generate(req: GenerateRequest):
        return svc.generate(req)

    @app.post("/api/lift3d")
    def lift3d(req: Lift3dRequest):
        table = svc._load_tokens(req.tokens_ref)
        job = svc.jobs.submit("lift3d", {
            "tokens_ref": req.tokens_ref,
            "latents": table.tolist(),
            "config": req.config.model_dump(),
        })
        return {"job_id": job.job_id, "state": job.state}

    @app.post("/api/invert")
    def invert(req: InvertRequest):
        if len(req.image_refs) != len(req.views):
            raise HTTPException(422, "image_refs and views must align")
        if not req.image_refs:
            raise HTTPException(422, "image_refs must not be empty")
        for v in req.views:
            if not 0 <= v < world.VIEW_COUNT:
                raise HTTPException(422, f"view {v} outside 0..{world.VIEW_COUNT - 1}")
        job = svc.jobs.submit("invert", req.model_dump())
        return {"job_id": job.job_id, "state": job.state}

    @app.get("/api/jobs/{job_id}")
    def get_job(job_id: str):
        job = svc.jobs.get(job_id)
        if job is None:
            raise HTTPException(404, f"unknown job {job_id}")
        return job.to_json()

    @app.get("/api/artifacts/{ref}")
    def get_artifact(ref: str):
        try:
            data, media = svc.store.get(ref)
        except KeyError:
            raise HTTPException(404, f"unknown artifact {ref}")
        return Response(data, media_type=media)

    if ui_dir and Path(ui_dir).is_dir():
        app.mount("/", StaticFiles(directory=ui_dir, html=True), name="ui")

    return app
