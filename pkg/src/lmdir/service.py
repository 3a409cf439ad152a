"""HTTP service for chainable restoration sessions.

Sessions live in memory behind a single lock (LRU cap plus TTL); each step's
input is the previous step's output, so issuing instructions one at a time
walks the image through successive removals. The model is shared read-only
across requests; the prior bundle is built once at upload and reused for
every step (the reference image is not regenerated between steps).
"""

from __future__ import annotations

import io
import secrets
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np
from fastapi import FastAPI, Request, UploadFile
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, Response
from PIL import Image

from .bundles import BundleStore, PriorBuilder, PriorBundle
from .errors import InvalidText, LmdirError, ProviderUnavailable
from .images import encode_png, from_uint8, image_id, quantized
from .network import RestorationNetwork
from .providers import ProviderSet

SESSION_CAP = 64
SESSION_TTL_SECONDS = 3600.0
MAX_UPLOAD_BYTES = 16 * 1024 * 1024
IMAGE_CACHE_CAP = 256
ACCEPTED_FORMATS = ("PNG", "JPEG")


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


def guided_restore(
    image: np.ndarray,
    instruction: str,
    bundle: PriorBundle,
    model: RestorationNetwork,
    providers: ProviderSet,
) -> np.ndarray:
    """Replace the degradation embedding with the encoded instruction; the
    content prior and reference image stay as built."""
    if not instruction or not instruction.strip():
        raise InvalidText("guided restore requires a non-empty instruction")
    tokens = providers.encode_text(instruction).tokens
    return model.restore(image, bundle, degradation_text=tokens)


@dataclass
class SessionStep:
    input_image_id: str
    instruction: str | None
    mode: str
    output_image_id: str
    timestamp: str

    def to_dict(self) -> dict:
        return {
            "input_image_id": self.input_image_id,
            "instruction": self.instruction,
            "mode": self.mode,
            "output_image_id": self.output_image_id,
            "timestamp": self.timestamp,
        }


@dataclass
class Session:
    session_id: str
    current_image: np.ndarray
    bundle: PriorBundle
    last_used: float
    steps: list[SessionStep] = field(default_factory=list)
    lock: threading.Lock = field(default_factory=threading.Lock)


class SessionMap:
    """LRU session table with TTL, guarded by one lock."""

    def __init__(self, cap: int = SESSION_CAP, ttl: float = SESSION_TTL_SECONDS, clock=time.monotonic):
        self.cap = cap
        self.ttl = ttl
        self.clock = clock
        self._lock = threading.Lock()
        self._sessions: OrderedDict[str, Session] = OrderedDict()

    def put(self, session: Session) -> None:
        with self._lock:
            self._sessions[session.session_id] = session
            self._sessions.move_to_end(session.session_id)
            while len(self._sessions) > self.cap:
                self._sessions.popitem(last=False)

    def get(self, session_id: str) -> Session:
        with self._lock:
            session = self._sessions.get(session_id)
            if session is not None and self.clock() - session.last_used > self.ttl:
                del self._sessions[session_id]
                session = None
            if session is None:
                raise ApiError(404, "session_not_found", f"unknown session {session_id}")
            session.last_used = self.clock()
            self._sessions.move_to_end(session_id)
            return session

    def __len__(self) -> int:
        with self._lock:
            return len(self._sessions)


class ImageCache:
    """PNG bytes by image id, LRU-capped."""

    def __init__(self, cap: int = IMAGE_CACHE_CAP):
        self.cap = cap
        self._lock = threading.Lock()
        self._images: OrderedDict[str, bytes] = OrderedDict()

    def put(self, key: str, png: bytes) -> None:
        with self._lock:
            self._images[key] = png
            self._images.move_to_end(key)
            while len(self._images) > self.cap:
                self._images.popitem(last=False)

    def get(self, key: str) -> bytes:
        with self._lock:
            if key not in self._images:
                raise ApiError(404, "image_not_found", f"unknown image {key}")
            self._images.move_to_end(key)
            return self._images[key]


def _decode_upload(data: bytes) -> np.ndarray:
    if len(data) > MAX_UPLOAD_BYTES:
        raise ApiError(
            422, "invalid_image", f"upload exceeds {MAX_UPLOAD_BYTES} bytes"
        )
    try:
        with Image.open(io.BytesIO(data)) as im:
            if im.format not in ACCEPTED_FORMATS:
                raise ApiError(
                    422, "invalid_image", f"accepted formats: {ACCEPTED_FORMATS}"
                )
            rgb = np.asarray(im.convert("RGB"))
    except ApiError:
        raise
    except Exception:
        raise ApiError(422, "invalid_image", "upload is not a decodable image") from None
    return from_uint8(rgb)


def _timestamp() -> str:
    return datetime.now(timezone.utc).isoformat()


def create_app(
    model: RestorationNetwork,
    providers: ProviderSet,
    store: BundleStore,
    session_cap: int = SESSION_CAP,
    ttl_seconds: float = SESSION_TTL_SECONDS,
    clock=time.monotonic,
) -> FastAPI:
    app = FastAPI(title="lmdir", docs_url=None, redoc_url=None)
    sessions = SessionMap(cap=session_cap, ttl=ttl_seconds, clock=clock)
    images = ImageCache()
    builder = PriorBuilder(store, providers)
    app.state.sessions = sessions
    app.state.images = images

    def error_body(code: str, message: str) -> dict:
        return {"error": {"code": code, "message": message}}

    @app.exception_handler(ApiError)
    async def on_api_error(request: Request, exc: ApiError):
        return JSONResponse(status_code=exc.status, content=error_body(exc.code, exc.message))

    @app.exception_handler(RequestValidationError)
    async def on_validation_error(request: Request, exc: RequestValidationError):
        return JSONResponse(
            status_code=422, content=error_body("invalid_body", str(exc.errors()))
        )

    @app.exception_handler(LmdirError)
    async def on_domain_error(request: Request, exc: LmdirError):
        if isinstance(exc, ProviderUnavailable):
            return JSONResponse(
                status_code=503, content=error_body("provider_unavailable", str(exc))
            )
        return JSONResponse(status_code=422, content=error_body("invalid_request", str(exc)))

    @app.get("/healthz")
    async def healthz():
        return {"status": "ok"}

    @app.post("/api/sessions", status_code=201)
    async def create_session(file: UploadFile):
        image = _decode_upload(await file.read())
        image = quantized(image)
        try:
            bundle = builder.build(image)
        except ProviderUnavailable as exc:
            raise ApiError(503, "provider_unavailable", str(exc)) from exc
        iid = image_id(image)
        images.put(iid, encode_png(image))
        session = Session(
            session_id=secrets.token_hex(16),
            current_image=image,
            bundle=bundle,
            last_used=clock(),
        )
        sessions.put(session)
        return {
            "session_id": session.session_id,
            "image_id": iid,
            "priors": {
                "degradation_text": bundle.texts.degradation_text,
                "content_text": bundle.texts.content_text,
            },
        }

    @app.post("/api/sessions/{session_id}/restore")
    async def restore_step(session_id: str, body: dict):
        mode = body.get("mode")
        if mode not in ("auto", "guided"):
            raise ApiError(422, "invalid_body", 'mode must be "auto" or "guided"')
        instruction = body.get("instruction")
        if mode == "guided" and (not instruction or not str(instruction).strip()):
            raise ApiError(422, "invalid_body", "guided mode requires an instruction")
        session = sessions.get(session_id)
        with session.lock:
            input_image = session.current_image
            try:
                if mode == "guided":
                    output = guided_restore(
                        input_image, str(instruction), session.bundle, model, providers
                    )
                else:
                    output = model.restore(input_image, session.bundle)
            except ProviderUnavailable as exc:
                raise ApiError(503, "provider_unavailable", str(exc)) from exc
            output = quantized(output)
            output_id = image_id(output)
            images.put(output_id, encode_png(output))
            step = SessionStep(
                input_image_id=image_id(input_image),
                instruction=str(instruction) if mode == "guided" else None,
                mode=mode,
                output_image_id=output_id,
                timestamp=_timestamp(),
            )
            session.steps.append(step)
            session.current_image = output
        used_degradation = (
            str(instruction) if mode == "guided" else session.bundle.texts.degradation_text
        )
        return {
            "output_image_id": output_id,
            "psnr": None,
            "priors_used": {
                "degradation_text": used_degradation,
                "content_text": session.bundle.texts.content_text,
            },
        }

    @app.get("/api/sessions/{session_id}/history")
    async def history(session_id: str):
        session = sessions.get(session_id)
        with session.lock:
            return [step.to_dict() for step in session.steps]

    @app.get("/api/images/{iid}")
    async def get_image(iid: str):
        return Response(content=images.get(iid), media_type="image/png")

    return app
