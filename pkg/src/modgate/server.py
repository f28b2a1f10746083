"""HTTP surface: catalog ingest and lookup, run report, review workflow.

Thin JSON layer over PipelineContext and ReviewBoard; all state mutation
happens in those objects, so every endpoint stays restart-safe.
"""
from __future__ import annotations

import base64
import binascii
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, Response
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from .catalog import decode_png, encode_png
from .errors import (
    DecodeError,
    DuplicateDecision,
    FormatError,
    IllegalTransition,
    InvalidConfig,
    InvalidSpec,
    NotFound,
)
from .pipeline import PipelineContext, build_report
from .review import ReviewBoard, ReviewVerdict, TaskStatus


class IngestRequest(BaseModel):
    image_id: str
    category: str = ""
    png_base64: str


class DecisionRequest(BaseModel):
    verdict: str
    reviewer_id: str = ""


_STATUS_FOR = {
    NotFound: 404,
    DuplicateDecision: 409,
    IllegalTransition: 409,
    InvalidSpec: 409,       # duplicate image_id on ingest
    InvalidConfig: 400,
    FormatError: 400,
    DecodeError: 400,
}


def create_app(ctx: PipelineContext, board: ReviewBoard,
               static_dir: str | Path | None = None) -> FastAPI:
    app = FastAPI(title="modgate", docs_url=None, redoc_url=None)

    for exc_type, code in _STATUS_FOR.items():
        def handler(request: Request, exc: Exception, code: int = code) -> JSONResponse:
            return JSONResponse({"detail": str(exc)}, status_code=code)
        app.add_exception_handler(exc_type, handler)

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok", "images": len(ctx.store)}

    @app.post("/images", status_code=201)
    def ingest(req: IngestRequest) -> dict:
        try:
            data = base64.b64decode(req.png_base64, validate=True)
        except (binascii.Error, ValueError) as exc:
            raise DecodeError(f"png_base64 is not valid base64: {exc}") from exc
        image = decode_png(data, req.image_id, req.category, source=req.image_id)
        ctx.store.add(image)
        return {"image_id": image.image_id, "state": image.state.value}

    @app.get("/images/{image_id}")
    def image_detail(image_id: str) -> dict:
        image = ctx.store.get(image_id)
        verdicts = ctx.verdicts.for_image(image_id)
        return {
            "image_id": image.image_id,
            "category": image.category,
            "state": image.state.value,
            "width": image.width,
            "height": image.height,
            "verdicts": [
                {
                    "detector_id": det,
                    "confidence": v.confidence,
                    "decision": v.decision.value,
                    "boxes": [{"box": list(b), "class": c, "score": s}
                              for b, c, s in v.boxes],
                }
                for det, v in sorted(verdicts.items())
            ],
        }

    @app.get("/images/{image_id}/raw")
    def image_raw(image_id: str) -> Response:
        image = ctx.store.get(image_id)
        return Response(content=encode_png(image), media_type="image/png")

    @app.get("/report")
    def report() -> dict:
        return build_report(ctx.events.snapshot()).to_dict()

    @app.get("/review/tasks")
    def review_tasks(status: str = "open", offset: int = 0, limit: int = 20) -> dict:
        if status == "all":
            wanted = None
        else:
            try:
                wanted = TaskStatus(status.capitalize())
            except ValueError:
                raise InvalidConfig(f"unknown status {status!r}") from None
        if offset < 0 or limit < 1:
            raise InvalidConfig("offset must be >= 0 and limit >= 1")
        tasks = board.tasks(wanted)
        page = tasks[offset:offset + limit]
        items = []
        for t in page:
            image = ctx.store.get(t.image_id)
            v = ctx.verdicts.get(t.image_id, t.detector_id)
            items.append({
                **t.to_dict(),
                "category": image.category,
                "image_url": f"/images/{t.image_id}/raw",
                "boxes": [{"box": list(b), "class": c, "score": s}
                          for b, c, s in (v.boxes if v else ())],
            })
        return {"tasks": items, "total": len(tasks), "offset": offset, "limit": limit}

    @app.post("/review/tasks/{task_id}/decision")
    def decide(task_id: str, req: DecisionRequest) -> dict:
        try:
            verdict = ReviewVerdict(req.verdict)
        except ValueError:
            raise InvalidConfig(f"unknown verdict {req.verdict!r}") from None
        decision = board.submit_decision(task_id, verdict, req.reviewer_id)
        task = board.get(task_id)
        return {
            "task_id": task_id,
            "verdict": decision.verdict.value,
            "reviewer_id": decision.reviewer_id,
            "image_id": task.image_id,
            "image_state": ctx.store.get(task.image_id).state.value,
        }

    @app.get("/review/stats")
    def stats() -> dict:
        return board.stats()

    if static_dir is not None and Path(static_dir).is_dir():
        app.mount("/", StaticFiles(directory=static_dir, html=True), name="console")

    return app


def serve(ctx: PipelineContext, board: ReviewBoard, host: str = "127.0.0.1",
          port: int = 8080, static_dir: str | Path | None = None) -> None:
    """Run the app under uvicorn until interrupted."""
    import uvicorn

    app = create_app(ctx, board, static_dir=static_dir)
    uvicorn.run(app, host=host, port=port, log_level="warning")
