"""Studio HTTP API: upload references, crop or auto-extract parts, generate.

Generation is asynchronous: POST /sessions/{id}/generate queues a job on a
single-worker executor (model access is serialized) and GET /jobs/{id} polls
it. Results are cached by (part multiset, chars, steps, seed), so identical
requests, including reordered part lists, return identical bytes.
"""

from __future__ import annotations

import hashlib
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Response, UploadFile
from fastapi.middleware.cors import CORSMiddleware

from ..dataset import ALPHABET, normalize_polarity
from ..diffusion import DiffusionBundle, load_diffusion_checkpoint
from ..errors import PartFontError
from ..parts import (
    BLANK_INK_FRACTION,
    Part,
    VALID_PART_SIZES,
    crop_patch,
    detect_keypoints_in_images,
    kmedoids,
    patch_ink_fraction,
)
from ..util import image_grid, load_grayscale, png_bytes
from .schemas import (
    AutoExtractRequest,
    CropRequest,
    GenerateRequest,
    Health,
    ImageInfo,
    ImageUploaded,
    JobCreated,
    JobStatus,
    PartCreated,
    PartsCreated,
    SessionCreated,
    SessionState,
    TrayPart,
)

MAX_UPLOAD_BYTES = 8 * 1024 * 1024
MAX_IMAGE_SIDE = 1024


@dataclass
class _Session:
    session_id: str
    part_size: int
    images: dict[str, np.ndarray] = field(default_factory=dict)
    parts: dict[str, Part] = field(default_factory=dict)
    tray: dict[str, TrayPart] = field(default_factory=dict)
    last_seen: float = field(default_factory=time.monotonic)

    def touch(self):
        self.last_seen = time.monotonic()


@dataclass
class _Job:
    job_id: str
    status: str = "queued"
    error: str | None = None
    chars: dict[str, bytes] = field(default_factory=dict)
    grid: bytes | None = None


class _State:
    def __init__(self, bundle: DiffusionBundle | None, part_size: int, session_ttl: float):
        self.bundle = bundle
        self.part_size = part_size
        self.session_ttl = session_ttl
        self.sessions: dict[str, _Session] = {}
        self.jobs: dict[str, _Job] = {}
        self.job_by_key: dict[str, str] = {}
        self.lock = threading.Lock()
        # model access is exclusive: one worker drains the queue
        self.executor = ThreadPoolExecutor(max_workers=1)

    def purge_expired(self):
        now = time.monotonic()
        dead = [k for k, s in self.sessions.items() if now - s.last_seen > self.session_ttl]
        for k in dead:
            del self.sessions[k]

    def session(self, session_id: str) -> _Session:
        self.purge_expired()
        s = self.sessions.get(session_id)
        if s is None:
            raise HTTPException(404, f"unknown session {session_id}")
        s.touch()
        return s


def create_app(
    checkpoint_path: str | Path | None = None,
    part_size: int | None = None,
    session_ttl: float = 3600.0,
    studio_dir: str | Path | None = None,
) -> FastAPI:
    bundle = load_diffusion_checkpoint(checkpoint_path) if checkpoint_path else None
    if part_size is None:
        part_size = bundle.encoder.config.part_size if bundle else 32
    if part_size not in VALID_PART_SIZES:
        raise ValueError(f"part size {part_size} not in {VALID_PART_SIZES}")
    state = _State(bundle, part_size, session_ttl)

    app = FastAPI(title="partfont studio API")
    app.state.partfont = state
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )

    @app.get("/healthz", response_model=Health)
    def healthz():
        return Health(
            status="ok",
            checkpoint=state.bundle.checkpoint_id if state.bundle else None,
        )

    @app.post("/sessions", response_model=SessionCreated, status_code=201)
    def create_session():
        state.purge_expired()
        sid = uuid.uuid4().hex[:12]
        state.sessions[sid] = _Session(sid, state.part_size)
        return SessionCreated(session_id=sid, part_size=state.part_size)

    @app.get("/sessions/{sid}", response_model=SessionState)
    def session_state(sid: str):
        s = state.session(sid)
        return SessionState(
            session_id=sid,
            part_size=s.part_size,
            images=[
                ImageInfo(image_id=i, width=img.shape[1], height=img.shape[0])
                for i, img in s.images.items()
            ],
            parts=list(s.tray.values()),
        )

    @app.post("/sessions/{sid}/images", response_model=ImageUploaded, status_code=201)
    async def upload_image(sid: str, file: UploadFile):
        s = state.session(sid)
        data = await file.read()
        if len(data) > MAX_UPLOAD_BYTES:
            raise HTTPException(413, "image too large")
        try:
            pixels = load_grayscale(data)
        except Exception:
            raise HTTPException(400, "not a decodable image")
        h, w = pixels.shape
        if min(h, w) < s.part_size:
            raise HTTPException(400, f"image must be at least {s.part_size}px per side")
        if max(h, w) > MAX_IMAGE_SIDE:
            raise HTTPException(413, f"image exceeds {MAX_IMAGE_SIDE}px per side")
        pixels = normalize_polarity(pixels)
        image_id = uuid.uuid4().hex[:12]
        s.images[image_id] = pixels
        return ImageUploaded(image_id=image_id, width=w, height=h)

    @app.get("/sessions/{sid}/images/{image_id}.png")
    def image_png(sid: str, image_id: str):
        s = state.session(sid)
        if image_id not in s.images:
            raise HTTPException(404, f"unknown image {image_id}")
        return Response(png_bytes(s.images[image_id]), media_type="image/png")

    def _add_part(s: _Session, patch: np.ndarray, meta: TrayPart) -> str:
        part_id = uuid.uuid4().hex[:12]
        s.parts[part_id] = Part(
            patch=patch, center=(meta.x, meta.y), source_char=None, font_id=f"session-{s.session_id}"
        )
        meta.part_id = part_id
        s.tray[part_id] = meta
        return part_id

    @app.post("/sessions/{sid}/parts", response_model=PartCreated, status_code=201)
    def crop_part(sid: str, req: CropRequest):
        s = state.session(sid)
        if req.image_id not in s.images:
            raise HTTPException(404, f"unknown image {req.image_id}")
        if req.size != s.part_size:
            raise HTTPException(422, f"tray part size is {s.part_size}, got {req.size}")
        patch = crop_patch(s.images[req.image_id], req.x, req.y, req.size)
        if patch_ink_fraction(patch) < BLANK_INK_FRACTION:
            raise HTTPException(422, "blank patch: the crop contains no ink")
        part_id = _add_part(
            s, patch, TrayPart(part_id="", image_id=req.image_id, x=req.x, y=req.y, size=req.size)
        )
        return PartCreated(part_id=part_id)

    @app.post("/sessions/{sid}/parts/auto", response_model=PartsCreated, status_code=201)
    def auto_parts(sid: str, req: AutoExtractRequest):
        s = state.session(sid)
        unknown = [i for i in req.image_ids if i not in s.images]
        if unknown:
            raise HTTPException(404, f"unknown images {unknown}")
        if not req.image_ids:
            raise HTTPException(422, "image_ids must be non-empty")
        images = [s.images[i] for i in req.image_ids]
        # keypoints are tagged with the owning image id via the chars field
        kps = detect_keypoints_in_images(images, chars=req.image_ids, patch_size=s.part_size)
        if not kps:
            raise HTTPException(422, "no usable keypoints in the supplied images")
        k_eff = min(req.k, len(kps))
        descriptors = np.stack([kp.descriptor for kp in kps]).astype(np.float64)
        medoids, _ = kmedoids(descriptors, k_eff, seed=0)
        ids = []
        for m in medoids:
            kp = kps[m]
            img_id = kp.source_char
            cx, cy = int(round(kp.x)), int(round(kp.y))
            patch = crop_patch(s.images[img_id], cx, cy, s.part_size)
            ids.append(
                _add_part(
                    s,
                    patch,
                    TrayPart(part_id="", image_id=img_id, x=cx, y=cy, size=s.part_size, auto=True),
                )
            )
        return PartsCreated(part_ids=ids)

    @app.get("/sessions/{sid}/parts/{part_id}/thumbnail.png")
    def part_thumbnail(sid: str, part_id: str):
        s = state.session(sid)
        if part_id not in s.parts:
            raise HTTPException(404, f"unknown part {part_id}")
        return Response(png_bytes(s.parts[part_id].patch), media_type="image/png")

    @app.delete("/sessions/{sid}/parts/{part_id}", status_code=204)
    def delete_part(sid: str, part_id: str):
        s = state.session(sid)
        if part_id not in s.parts:
            raise HTTPException(404, f"unknown part {part_id}")
        del s.parts[part_id]
        del s.tray[part_id]
        return Response(status_code=204)

    def _run_job(job: _Job, parts: list[Part], chars: str, steps: int | None, seed: int):
        job.status = "running"
        try:
            style = state.bundle.encoder.encode_set(parts)
            generated = state.bundle.generate_alphabet(style, steps=steps, seed=seed, chars=chars)
            job.chars = {c: png_bytes(generated[c].pixels) for c in chars}
            imgs = [generated[c].pixels for c in chars]
            job.grid = png_bytes(1.0 - image_grid([1.0 - im for im in imgs]))
            job.status = "done"
        except Exception as e:  # surfaced through job polling
            job.status = "error"
            job.error = str(e)

    @app.post("/sessions/{sid}/generate", response_model=JobCreated, status_code=202)
    def generate(sid: str, req: GenerateRequest):
        s = state.session(sid)
        if state.bundle is None:
            raise HTTPException(409, "no checkpoint loaded; start the server with --checkpoint")
        if not req.part_ids:
            raise HTTPException(422, "part_ids must be non-empty")
        unknown = [p for p in req.part_ids if p not in s.parts]
        if unknown:
            raise HTTPException(404, f"unknown parts {unknown}")
        chars = "".join(dict.fromkeys(req.chars.upper()))
        bad = [c for c in chars if c not in ALPHABET]
        if bad or not chars:
            raise HTTPException(422, f"chars must be non-empty, uppercase A..Z; got {req.chars!r}")
        steps = req.steps
        if steps is not None and steps > state.bundle.schedule.T:
            raise HTTPException(422, f"steps must be <= {state.bundle.schedule.T}")

        parts = [s.parts[p] for p in req.part_ids]
        digest = hashlib.sha256()
        for d in sorted(p.digest() for p in parts):  # order-free key
            digest.update(d.encode())
        digest.update(f"|{chars}|{steps}|{req.seed}|{state.bundle.checkpoint_id}".encode())
        key = digest.hexdigest()

        with state.lock:
            if key in state.job_by_key:
                return JobCreated(job_id=state.job_by_key[key], cached=True)
            job_id = uuid.uuid4().hex[:12]
            job = _Job(job_id)
            state.jobs[job_id] = job
            state.job_by_key[key] = job_id
        state.executor.submit(_run_job, job, parts, chars, steps, req.seed)
        return JobCreated(job_id=job_id, cached=False)

    def _job(job_id: str) -> _Job:
        job = state.jobs.get(job_id)
        if job is None:
            raise HTTPException(404, f"unknown job {job_id}")
        return job

    @app.get("/jobs/{job_id}", response_model=JobStatus)
    def job_status(job_id: str):
        job = _job(job_id)
        return JobStatus(
            job_id=job_id,
            status=job.status,
            error=job.error,
            chars={c: f"/jobs/{job_id}/chars/{c}.png" for c in job.chars},
            grid=f"/jobs/{job_id}/grid.png" if job.grid else None,
        )

    @app.get("/jobs/{job_id}/chars/{char}.png")
    def job_char(job_id: str, char: str):
        job = _job(job_id)
        if char not in job.chars:
            raise HTTPException(404, f"no result for {char}")
        return Response(job.chars[char], media_type="image/png")

    @app.get("/jobs/{job_id}/grid.png")
    def job_grid(job_id: str):
        job = _job(job_id)
        if job.grid is None:
            raise HTTPException(404, "grid not ready")
        return Response(job.grid, media_type="image/png")

    if studio_dir is None:
        candidate = Path(__file__).resolve().parents[3] / "frontend" / "dist"
        studio_dir = candidate if candidate.exists() else None
    if studio_dir is not None and Path(studio_dir).exists():
        from fastapi.staticfiles import StaticFiles

        app.mount("/studio", StaticFiles(directory=str(studio_dir), html=True), name="studio")

    return app
