"""Stateful HTTP session layer over a frozen backbone and a trained
guide: upload an image, get a prediction, refine it with text or pixel
hints, inspect history, reset, delete.

Wire format: JSON everywhere.  Images travel base64-encoded; label maps
travel as flat row-major run-length pairs [value, count, value, count,
...] plus width/height; heatmaps as base64 PNG.  Every response carries
schema_version, errors are {"error": {"code", "message"}}.
"""

from __future__ import annotations

import base64
import io
import json
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from .backbone import BackboneModel
from .backprop import (DEFAULT_HINT_MODE, GuideOptConfig, PixelHint,
                       optimize_guidance, select_query_pixel)
from .dataset import CLASS_COLORS
from .evaluation import accumulate, guidance_heatmap, miou, new_confusion
from .guiding import GuidingParams, apply_guidance
from .language import EmbeddingTable, GuideModel, tokenize

SCHEMA_VERSION = 1
MAX_UPLOAD_BYTES = 4 * 1024 * 1024


def rle_encode(labels: np.ndarray) -> list[int]:
    """Flat row-major [value, count, ...] pairs."""
    flat = np.asarray(labels).ravel()
    if flat.size == 0:
        return []
    edges = np.flatnonzero(np.diff(flat)) + 1
    starts = np.concatenate([[0], edges])
    ends = np.concatenate([edges, [flat.size]])
    out = []
    for s, e in zip(starts, ends):
        out.extend((int(flat[s]), int(e - s)))
    return out


def rle_decode(rle: list[int], shape: tuple[int, int]) -> np.ndarray:
    if len(rle) % 2 != 0:
        raise ValueError("run-length data must be value/count pairs")
    values = np.array(rle[0::2], dtype=np.int64)
    counts = np.array(rle[1::2], dtype=np.int64)
    if counts.sum() != shape[0] * shape[1]:
        raise ValueError(f"run lengths sum to {counts.sum()}, "
                         f"expected {shape[0] * shape[1]}")
    return np.repeat(values, counts).reshape(shape)


def _png_b64(array: np.ndarray, mode: str) -> str:
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(array, mode).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def class_legend(names: list[str]) -> list[dict]:
    legend = []
    for class_id, name in enumerate(names):
        color = CLASS_COLORS.get(name)
        if color is None:
            rng = np.random.default_rng(abs(hash(("legend", class_id))) % 2**32)
            color = tuple(int(v) for v in rng.integers(40, 220, size=3))
        legend.append({"class_id": class_id, "name": name,
                       "color": list(color)})
    return legend


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


@dataclass
class Session:
    id: str
    x: torch.Tensor
    a_base: torch.Tensor
    initial_labels: np.ndarray
    gt: np.ndarray | None
    created_at: float
    image_b64: str
    labels_b64: str | None
    current_params: GuidingParams | None = None
    current_labels: np.ndarray = None
    current_posteriors: np.ndarray = None
    hints: PixelHint = field(default_factory=PixelHint.empty)
    turns: list[dict] = field(default_factory=list)
    lock: threading.Lock = field(default_factory=threading.Lock)


class SessionStore:
    """In-memory sessions with per-session locks and optional
    directory-backed persistence of the replayable history."""

    def __init__(self, persist_dir: str | Path | None = None):
        self._sessions: dict[str, Session] = {}
        self._lock = threading.Lock()
        self.persist_dir = Path(persist_dir) if persist_dir else None
        if self.persist_dir:
            self.persist_dir.mkdir(parents=True, exist_ok=True)

    def add(self, session: Session) -> None:
        with self._lock:
            self._sessions[session.id] = session

    def get(self, session_id: str) -> Session:
        with self._lock:
            session = self._sessions.get(session_id)
        if session is None:
            raise ApiError(404, "not_found", f"no session {session_id!r}")
        return session

    def remove(self, session_id: str) -> None:
        with self._lock:
            if self._sessions.pop(session_id, None) is None:
                raise ApiError(404, "not_found", f"no session {session_id!r}")
        if self.persist_dir:
            path = self.persist_dir / f"{session_id}.json"
            if path.exists():
                path.unlink()

    def persist(self, session: Session) -> None:
        if not self.persist_dir:
            return
        record = {
            "session_id": session.id,
            "created_at": session.created_at,
            "image_b64": session.image_b64,
            "labels_b64": session.labels_b64,
            "turns": [{"kind": t["kind"], "payload": t["payload"]}
                      for t in session.turns],
        }
        path = self.persist_dir / f"{session.id}.json"
        path.write_text(json.dumps(record))


class CreateBody(BaseModel):
    image_b64: str
    labels_b64: str | None = None


class TextHintBody(BaseModel):
    text: str


class PixelHintBody(BaseModel):
    x: int
    y: int
    class_id: int


@dataclass
class ServiceState:
    backbone: BackboneModel
    guide: GuideModel | None
    table: EmbeddingTable | None
    opt_cfg: GuideOptConfig
    split: str
    store: SessionStore
    max_upload_bytes: int


def _decode_image(state: ServiceState, image_b64: str) -> torch.Tensor:
    from PIL import Image

    try:
        raw = base64.b64decode(image_b64, validate=True)
    except Exception:
        raise ApiError(400, "bad_image", "image_b64 is not valid base64")
    if len(raw) > state.max_upload_bytes:
        raise ApiError(413, "too_large",
                       f"upload exceeds {state.max_upload_bytes} bytes")
    try:
        img = Image.open(io.BytesIO(raw)).convert("RGB")
    except Exception:
        raise ApiError(400, "bad_image", "could not decode image")
    h, w = state.backbone.config.input_size
    if img.size != (w, h):
        img = img.resize((w, h), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def _decode_labels(state: ServiceState, labels_b64: str) -> np.ndarray:
    from PIL import Image

    try:
        raw = base64.b64decode(labels_b64, validate=True)
        img = Image.open(io.BytesIO(raw))
    except Exception:
        raise ApiError(400, "bad_image", "could not decode label image")
    h, w = state.backbone.config.input_size
    if img.size != (w, h):
        img = img.resize((w, h), Image.NEAREST)
    return np.asarray(img.convert("L"), dtype=np.int64)


def _labels_payload(state: ServiceState, labels: np.ndarray) -> dict:
    h, w = labels.shape
    return {"labels_rle": rle_encode(labels), "width": w, "height": h}


def _session_miou(state: ServiceState, session: Session,
                  labels: np.ndarray) -> float | None:
    if session.gt is None:
        return None
    cm = new_confusion(state.backbone.config.num_classes)
    accumulate(cm, labels, session.gt)
    return miou(cm)


def _recompute(state: ServiceState, session: Session):
    """Prediction from the session's current params on the cached base
    features (params swap per turn, never stack)."""
    with torch.no_grad():
        if session.current_params is None:
            a = session.a_base
        else:
            mode = state.guide.mode if state.guide else DEFAULT_HINT_MODE
            block = state.guide.block if state.guide else None
            a = apply_guidance(session.a_base, session.current_params,
                               mode, block)
        logits = state.backbone.forward_tail(a, state.split)
        post = torch.softmax(logits, dim=-3)
    session.current_labels = post.argmax(dim=-3).numpy()
    session.current_posteriors = post.numpy()
    return a


def create_app(backbone: BackboneModel, guide: GuideModel | None = None,
               table: EmbeddingTable | None = None,
               opt_cfg: GuideOptConfig | None = None,
               split: str | None = None,
               persist_dir: str | Path | None = None,
               max_upload_bytes: int = MAX_UPLOAD_BYTES,
               cors_origin: str | None = None) -> FastAPI:
    """Build the app.  Without a guide, text hints answer 409; pixel
    hints need only the backbone.  split defaults to the guide's split,
    else the deepest split point."""
    if guide is not None and table is None:
        raise ValueError("a guide needs its embedding table")
    if split is None:
        split = guide.split if guide else backbone.config.split_points[-1]
    state = ServiceState(
        backbone=backbone, guide=guide, table=table,
        opt_cfg=opt_cfg or GuideOptConfig(), split=split,
        store=SessionStore(persist_dir), max_upload_bytes=max_upload_bytes)

    app = FastAPI(title="segguide service")
    app.state.service = state

    if cors_origin:
        from fastapi.middleware.cors import CORSMiddleware

        app.add_middleware(CORSMiddleware, allow_origins=[cors_origin],
                           allow_methods=["*"], allow_headers=["*"])

    @app.exception_handler(ApiError)
    def _api_error(request: Request, exc: ApiError):
        return JSONResponse(status_code=exc.status, content={
            "schema_version": SCHEMA_VERSION,
            "error": {"code": exc.code, "message": exc.message}})

    @app.exception_handler(RequestValidationError)
    def _validation_error(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=422, content={
            "schema_version": SCHEMA_VERSION,
            "error": {"code": "validation_error", "message": str(exc.errors())}})

    def ok(payload: dict, status: int = 200) -> JSONResponse:
        return JSONResponse(status_code=status,
                            content={"schema_version": SCHEMA_VERSION, **payload})

    @app.post("/session")
    def create_session(body: CreateBody):
        x = _decode_image(state, body.image_b64)
        gt = _decode_labels(state, body.labels_b64) if body.labels_b64 else None
        with torch.no_grad():
            a_base = state.backbone.forward_head(x, state.split)
        session = Session(
            id=uuid.uuid4().hex, x=x, a_base=a_base,
            initial_labels=None, gt=gt, created_at=time.time(),
            image_b64=body.image_b64, labels_b64=body.labels_b64)
        _recompute(state, session)
        session.initial_labels = session.current_labels.copy()
        state.store.add(session)
        state.store.persist(session)
        return ok({
            "session_id": session.id,
            "created_at": session.created_at,
            "legend": class_legend(state.backbone.class_names),
            "miou": _session_miou(state, session, session.current_labels),
            **_labels_payload(state, session.current_labels),
        })

    @app.get("/session/{session_id}")
    def get_session(session_id: str):
        session = state.store.get(session_id)
        with session.lock:
            return ok({
                "session_id": session.id,
                "created_at": session.created_at,
                "legend": class_legend(state.backbone.class_names),
                "num_turns": len(session.turns),
                "miou": _session_miou(state, session, session.current_labels),
                **_labels_payload(state, session.current_labels),
            })

    @app.post("/session/{session_id}/hint/text")
    def text_hint(session_id: str, body: TextHintBody):
        if state.guide is None:
            raise ApiError(409, "no_guide", "service started without a guide")
        session = state.store.get(session_id)
        with session.lock:
            before = session.current_labels.copy()
            noop = not tokenize(body.text)
            if noop:
                a_guided = None
                heatmap_b64 = None
            else:
                with torch.no_grad():
                    params = state.guide.params_from_text(body.text, state.table)
                session.current_params = params
                a_guided = _recompute(state, session)
                hm = guidance_heatmap(session.a_base, a_guided,
                                      state.backbone.config.input_size)
                heatmap_b64 = _png_b64((hm * 255).astype(np.uint8), "L")
            changed = int((before != session.current_labels).sum())
            score = _session_miou(state, session, session.current_labels)
            turn = {"kind": "text", "payload": {"text": body.text},
                    "noop": noop, "changed_pixels": changed, "miou": score,
                    "heatmap_b64": heatmap_b64}
            session.turns.append(turn)
            state.store.persist(session)
            summary = (session.current_params.norms()
                       if session.current_params is not None else None)
            return ok({
                "changed_pixels": changed, "noop": noop, "miou": score,
                "params_summary": summary, "heatmap_b64": heatmap_b64,
                **_labels_payload(state, session.current_labels),
            })

    @app.post("/session/{session_id}/hint/pixel")
    def pixel_hint(session_id: str, body: PixelHintBody):
        session = state.store.get(session_id)
        h, w = state.backbone.config.input_size
        if not (0 <= body.x < w and 0 <= body.y < h):
            raise ApiError(422, "out_of_bounds",
                           f"pixel ({body.x}, {body.y}) outside {w}x{h}")
        if not 0 <= body.class_id < state.backbone.config.num_classes:
            raise ApiError(422, "bad_class",
                           f"class_id {body.class_id} outside "
                           f"[0, {state.backbone.config.num_classes})")
        with session.lock:
            before = session.current_labels.copy()
            session.hints = session.hints.merged(PixelHint(
                np.array([[body.y, body.x]]), np.array([body.class_id])))
            result = optimize_guidance(
                state.backbone, state.split, session.x, session.hints,
                state.opt_cfg, mode=state.guide.mode if state.guide else None,
                block=state.guide.block if state.guide else None,
                init=session.current_params)
            session.current_params = result.params
            _recompute(state, session)
            changed = int((before != session.current_labels).sum())
            score = _session_miou(state, session, session.current_labels)
            turn = {"kind": "pixel",
                    "payload": {"x": body.x, "y": body.y,
                                "class_id": body.class_id},
                    "noop": False, "changed_pixels": changed, "miou": score,
                    "heatmap_b64": None}
            session.turns.append(turn)
            state.store.persist(session)
            return ok({
                "changed_pixels": changed, "miou": score,
                "loss_trace": result.loss_trace,
                "iterations": result.iterations,
                "converged": result.converged,
                "params_summary": session.current_params.norms(),
                **_labels_payload(state, session.current_labels),
            })

    @app.get("/session/{session_id}/suggest-pixel")
    def suggest_pixel(session_id: str):
        session = state.store.get(session_id)
        with session.lock:
            asked = {(int(r), int(c)) for r, c in session.hints.positions}
            try:
                row, col = select_query_pixel(session.current_posteriors, asked)
            except ValueError:
                raise ApiError(409, "all_pixels_hinted",
                               "every pixel already has a hint")
            post = session.current_posteriors[:, row, col]
            top = np.sort(post)[::-1]
            return ok({"x": col, "y": row,
                       "margin": float(top[0] - top[1])})

    @app.get("/session/{session_id}/history")
    def history(session_id: str):
        session = state.store.get(session_id)
        with session.lock:
            return ok({"session_id": session.id, "turns": session.turns})

    @app.post("/session/{session_id}/reset")
    def reset(session_id: str):
        session = state.store.get(session_id)
        with session.lock:
            session.current_params = None
            session.hints = PixelHint.empty()
            session.turns = []
            _recompute(state, session)
            state.store.persist(session)
            return ok({
                "miou": _session_miou(state, session, session.current_labels),
                **_labels_payload(state, session.current_labels),
            })

    @app.delete("/session/{session_id}")
    def delete(session_id: str):
        state.store.get(session_id)
        state.store.remove(session_id)
        return ok({"deleted": True})

    return app


def replay_record(backbone: BackboneModel, record: dict,
                  guide: GuideModel | None = None,
                  table: EmbeddingTable | None = None,
                  opt_cfg: GuideOptConfig | None = None,
                  split: str | None = None) -> np.ndarray:
    """Re-run a persisted session history against checkpoints; returns
    the final label map.  Same checkpoints give a bit-identical map."""
    from fastapi.testclient import TestClient

    app = create_app(backbone, guide, table, opt_cfg, split)
    with TestClient(app) as client:
        created = client.post("/session", json={
            "image_b64": record["image_b64"],
            "labels_b64": record.get("labels_b64"),
        }).json()
        sid = created["session_id"]
        last = created
        for turn in record["turns"]:
            if turn["kind"] == "text":
                resp = client.post(f"/session/{sid}/hint/text",
                                   json=turn["payload"])
            else:
                resp = client.post(f"/session/{sid}/hint/pixel",
                                   json=turn["payload"])
            resp.raise_for_status()
            last = resp.json()
        return rle_decode(last["labels_rle"], (last["height"], last["width"]))
