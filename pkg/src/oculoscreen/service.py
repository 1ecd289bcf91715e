"""HTTP screening service with filesystem session persistence.

Desk-scale triage platform: operators create a consented session, upload the
five gaze-angle photos (each gated by the quality policy at upload time),
then trigger screening against the loaded model. Every acknowledged write
lands on disk via atomic rename before the response goes out, so a process
restart reproduces the exact same session state.

Session state machine: OPEN -> COMPLETE -> SCREENED, with REJECTED reachable
only from OPEN (operator abandon). No other transitions exist.
"""

from __future__ import annotations

import asyncio
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from uuid import uuid4

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, Response

from .capture_protocol import (
    CaptureSession,
    CohortLabel,
    GazeAngle,
    ImageRecord,
    PROTOCOL_ORDER,
    QualityPolicy,
    validate_image,
)
from .classifier import ModelBundle, attribution_from_cells, load_bundle, prepare_session_cells
from .errors import OculoscreenError, UnreadableImageError
from .imgio import decode_image
from .preprocess import GridMode

_CONTENT_TYPES = {"image/png": ".png", "image/jpeg": ".jpg"}


@dataclass
class ServiceSettings:
    data_dir: Path
    model_dir: Path | None = None
    policy: QualityPolicy = field(default_factory=QualityPolicy)
    risk_low: float = 0.2
    risk_high: float = 0.6


def risk_tier(covid_probability: float, low: float, high: float) -> str:
    if covid_probability < low:
        return "LOW"
    if covid_probability < high:
        return "ELEVATED"
    return "HIGH"


def _now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


class SessionStore:
    """Directory-per-session persistence with atomic record writes."""

    def __init__(self, data_dir: Path):
        self.root = Path(data_dir) / "sessions"
        self.root.mkdir(parents=True, exist_ok=True)

    def _dir(self, session_id: str) -> Path:
        return self.root / session_id

    def _record_path(self, session_id: str) -> Path:
        return self._dir(session_id) / "record.json"

    def exists(self, session_id: str) -> bool:
        return self._record_path(session_id).is_file()

    def list_ids(self) -> list[str]:
        return sorted(p.name for p in self.root.iterdir() if (p / "record.json").is_file())

    def create(self, consent: bool, operator: dict) -> dict:
        session_id = uuid4().hex[:16]
        record = {
            "session_id": session_id,
            "state": "OPEN",
            "consent": consent,
            "operator": operator,
            "created_at": _now(),
            "slots": {
                angle.value: {"state": "EMPTY", "messages": [], "file": None}
                for angle in PROTOCOL_ORDER
            },
            "violations": [],
            "result": None,
        }
        self._dir(session_id).mkdir(parents=True)
        self.write(record)
        return record

    def read(self, session_id: str) -> dict:
        return json.loads(self._record_path(session_id).read_text())

    def write(self, record: dict) -> None:
        path = self._record_path(record["session_id"])
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
        tmp.replace(path)

    def image_path(self, session_id: str, angle: GazeAngle, ext: str) -> Path:
        return self._dir(session_id) / f"{angle.value}{ext}"

    def store_image(self, session_id: str, angle: GazeAngle, data: bytes, ext: str) -> Path:
        path = self.image_path(session_id, angle, ext)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(data)
        tmp.replace(path)
        return path


def _capture_session(record: dict, store: SessionStore) -> CaptureSession:
    images: dict[GazeAngle, ImageRecord] = {}
    for angle_name, slot in record["slots"].items():
        if slot["state"] != "UPLOADED_OK":
            continue
        angle = GazeAngle(angle_name)
        images[angle] = ImageRecord(
            path=str(store._dir(record["session_id"]) / slot["file"]),
            angle=angle,
            width=slot["width"],
            height=slot["height"],
        )
    return CaptureSession(
        session_id=record["session_id"],
        identity_id=record["session_id"],
        consent=record["consent"],
        images=images,
        created_at=record["created_at"],
    )


def _error(status: int, code: str, message: str = "", **extra) -> JSONResponse:
    return JSONResponse(
        status_code=status, content={"error": code, "message": message, **extra}
    )


def _status_payload(record: dict) -> dict:
    return {
        "session_id": record["session_id"],
        "state": record["state"],
        "created_at": record["created_at"],
        "slots": record["slots"],
        "violations": record["violations"],
        "result": record["result"],
    }


def create_app(settings: ServiceSettings, bundle: ModelBundle | None = None) -> FastAPI:
    """Build the service; loads the model from settings.model_dir unless a
    bundle is injected directly (tests)."""
    store = SessionStore(settings.data_dir)
    if bundle is None and settings.model_dir is not None:
        bundle = load_bundle(settings.model_dir)

    app = FastAPI(title="oculoscreen", version="1")
    app.state.bundle = bundle
    app.state.store = store
    app.state.settings = settings
    locks: dict[str, asyncio.Lock] = {}

    def lock_for(session_id: str) -> asyncio.Lock:
        return locks.setdefault(session_id, asyncio.Lock())

    @app.post("/v1/sessions", status_code=201)
    async def create_session(request: Request):
        try:
            body = json.loads(await request.body() or b"{}")
        except json.JSONDecodeError:
            return _error(400, "PARSE_ERROR", "request body must be JSON")
        if body.get("consent") is not True:
            return _error(400, "CONSENT_MISSING", "consent must be true before capture")
        record = store.create(consent=True, operator=dict(body.get("operator", {})))
        return JSONResponse(status_code=201, content=_status_payload(record))

    @app.put("/v1/sessions/{session_id}/images/{angle_name}")
    async def upload_image(session_id: str, angle_name: str, request: Request):
        if not store.exists(session_id):
            return _error(404, "UNKNOWN_SESSION", session_id)
        try:
            angle = GazeAngle(angle_name)
        except ValueError:
            return _error(404, "UNKNOWN_ANGLE", f"'{angle_name}' is not a protocol gaze angle")
        content_type = request.headers.get("content-type", "").split(";")[0].strip()
        ext = _CONTENT_TYPES.get(content_type)
        if ext is None:
            return _error(415, "UNSUPPORTED_MEDIA_TYPE", "upload PNG or JPEG bytes")
        data = await request.body()

        async with lock_for(session_id):
            record = store.read(session_id)
            if record["state"] not in ("OPEN",):
                return _error(409, "SESSION_NOT_OPEN", f"state is {record['state']}")
            slot = record["slots"][angle.value]
            if slot["state"] == "UPLOADED_OK":
                return _error(409, "ANGLE_ALREADY_UPLOADED", angle.value)
            try:
                image = decode_image(data)
            except UnreadableImageError as exc:
                return _error(400, "UNREADABLE_IMAGE", exc.message)

            path = store.store_image(session_id, angle, data, ext)
            height, width = image.shape[:2]
            probe = ImageRecord(
                path=str(path), angle=angle, width=width, height=height
            )
            report = validate_image(probe, settings.policy)
            if not report.passes:
                slot.update(
                    {"state": "UPLOADED_FAIL", "messages": list(report.messages), "file": None}
                )
                store.write(record)
                return JSONResponse(status_code=422, content=report.to_dict())

            slot.update(
                {
                    "state": "UPLOADED_OK",
                    "messages": [],
                    "file": path.name,
                    "width": width,
                    "height": height,
                }
            )
            if all(s["state"] == "UPLOADED_OK" for s in record["slots"].values()):
                record["state"] = "COMPLETE"
            store.write(record)
            return JSONResponse(status_code=200, content=report.to_dict())

    @app.post("/v1/sessions/{session_id}/screen")
    async def screen(session_id: str, force: bool = False):
        if not store.exists(session_id):
            return _error(404, "UNKNOWN_SESSION", session_id)
        if app.state.bundle is None:
            return _error(503, "NO_MODEL_LOADED", "load a model bundle before screening")
        model: ModelBundle = app.state.bundle

        async with lock_for(session_id):
            record = store.read(session_id)
            if record["state"] == "SCREENED" and not force:
                return JSONResponse(status_code=200, content=record["result"])
            if record["state"] not in ("COMPLETE", "SCREENED"):
                return _error(409, "SESSION_NOT_COMPLETE", f"state is {record['state']}")

            session = _capture_session(record, store)
            try:
                cells = prepare_session_cells(
                    session,
                    root=None,
                    grid=model.grid,
                    crop_h=model.crop_h,
                    crop_w=model.crop_w,
                    cell_size=model.cell_size,
                )
                attribution = attribution_from_cells(model, cells)
            except OculoscreenError as exc:
                return _error(422, exc.code, exc.message)
            result = _result_payload(record, model, attribution, settings)
            record["result"] = result
            record["state"] = "SCREENED"
            store.write(record)
            return JSONResponse(status_code=200, content=result)

    @app.post("/v1/sessions/{session_id}/reject")
    async def reject(session_id: str, request: Request):
        if not store.exists(session_id):
            return _error(404, "UNKNOWN_SESSION", session_id)
        try:
            body = json.loads(await request.body() or b"{}")
        except json.JSONDecodeError:
            return _error(400, "PARSE_ERROR", "request body must be JSON")
        reasons = [str(r) for r in body.get("reasons", [])] or ["operator rejected"]
        async with lock_for(session_id):
            record = store.read(session_id)
            if record["state"] != "OPEN":
                return _error(409, "SESSION_NOT_OPEN", f"state is {record['state']}")
            record["state"] = "REJECTED"
            record["violations"] = [
                {"code": "OPERATOR_REJECTED", "angle": None, "message": r} for r in reasons
            ]
            store.write(record)
            return JSONResponse(status_code=200, content=_status_payload(record))

    @app.get("/v1/sessions/{session_id}")
    async def get_session(session_id: str):
        if not store.exists(session_id):
            return _error(404, "UNKNOWN_SESSION", session_id)
        return _status_payload(store.read(session_id))

    @app.get("/v1/sessions")
    async def list_sessions():
        rows = []
        for sid in store.list_ids():
            record = store.read(sid)
            row = {
                "session_id": sid,
                "state": record["state"],
                "created_at": record["created_at"],
            }
            if record["result"]:
                row["risk_tier"] = record["result"]["risk_tier"]
                row["covid_probability"] = record["result"]["covid_probability"]
                row["screened_at"] = record["result"]["created_at"]
            rows.append(row)
        return {"sessions": rows}

    @app.get("/v1/sessions/{session_id}/images/{angle_name}")
    async def get_image(session_id: str, angle_name: str):
        if not store.exists(session_id):
            return _error(404, "UNKNOWN_SESSION", session_id)
        try:
            angle = GazeAngle(angle_name)
        except ValueError:
            return _error(404, "UNKNOWN_ANGLE", angle_name)
        record = store.read(session_id)
        slot = record["slots"][angle.value]
        if slot["state"] != "UPLOADED_OK":
            return _error(404, "IMAGE_NOT_UPLOADED", angle.value)
        path = store._dir(session_id) / slot["file"]
        media = "image/png" if path.suffix == ".png" else "image/jpeg"
        return Response(content=path.read_bytes(), media_type=media)

    @app.get("/v1/models")
    async def models():
        if app.state.bundle is None:
            return {"models": []}
        model: ModelBundle = app.state.bundle
        return {
            "models": [
                {
                    "version": model.version,
                    "class_order": [c.value for c in model.class_order],
                    "grid": model.grid.to_dict(),
                    "embed_dim": model.encoder_cfg.embed_dim,
                    "crop": {"h": model.crop_h, "w": model.crop_w, "cell": model.cell_size},
                    "training_meta": {
                        k: v
                        for k, v in model.training_meta.items()
                        if k != "val_loss_history"
                    },
                }
            ]
        }

    return app


def _result_payload(record, model, attribution, settings) -> dict:
    prediction = attribution.prediction
    covid_prob = float(prediction.prob_of(CohortLabel.COVID))
    grid = model.grid
    per_angle = []
    for vi, angle in enumerate(PROTOCOL_ORDER):
        cells = []
        for idx in attribution.top_cells(vi, k=3):
            cell = {"index": idx, "score": float(attribution.scores[vi, idx])}
            if grid.mode is GridMode.RECT:
                cell["row"] = idx // grid.cols
                cell["col"] = idx % grid.cols
            cells.append(cell)
        per_angle.append({"angle": angle.value, "cells": cells})
    return {
        "session_id": record["session_id"],
        "probs": prediction.to_dict()["probs"],
        "predicted_cohort": prediction.predicted_cohort.value,
        "taxonomy": prediction.taxonomy.value,
        "covid_probability": covid_prob,
        "risk_tier": risk_tier(covid_prob, settings.risk_low, settings.risk_high),
        "attribution": per_angle,
        "grid": grid.to_dict(),
        "model_version": model.version,
        "created_at": _now(),
    }



def run_server(settings: ServiceSettings, host: str = "127.0.0.1", port: int = 8000):
    import uvicorn

    app = create_app(settings)
    uvicorn.run(app, host=host, port=port, log_level="warning")
