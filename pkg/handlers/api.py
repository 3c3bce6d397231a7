#!/usr/bin/env python3
"""
HTTP surface

GET  /v1/carousel?user=<id>&policy=<p>   slate document (up to 12 albums)
GET  /v1/view-all?user=<id>&policy=<p>   slate document (up to 100 albums)
POST /v1/feedback {slate_id, click_position?}   204
GET  /v1/health                          versions of the live snapshots
"""

import logging
import time
from contextlib import asynccontextmanager
from typing import Callable, Optional

from fastapi import FastAPI, Query, Response
from pydantic import BaseModel, Field

from config import APP_NAME, APP_VERSION
from handlers.errors import register_error_handlers
from services.scheduler import SchedulerService
from services.slate_service import SlateService

logger = logging.getLogger(__name__)

DEFAULT_POLICY = "ColdStart"


class FeedbackBody(BaseModel):
    slate_id: str = Field(min_length=1)
    click_position: Optional[int] = Field(default=None, ge=1)


def create_app(
    service: SlateService,
    scheduler: Optional[SchedulerService] = None,
    clock: Callable[[], float] = time.time,
) -> FastAPI:
    """Build the FastAPI app around a service; the scheduler loop follows the app lifespan."""

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        if scheduler is not None:
            await scheduler.start(clock)
        logger.info("%s API ready", APP_NAME)
        yield
        if scheduler is not None:
            await scheduler.stop()
        logger.info("%s API stopped", APP_NAME)

    app = FastAPI(title=APP_NAME, version=APP_VERSION, lifespan=lifespan)
    register_error_handlers(app)

    @app.get("/v1/carousel")
    def carousel(user: str = Query(min_length=1), policy: str = DEFAULT_POLICY) -> dict:
        return service.build_carousel(user, int(clock()), policy).to_document()

    @app.get("/v1/view-all")
    def view_all(user: str = Query(min_length=1), policy: str = DEFAULT_POLICY) -> dict:
        return service.view_all(user, int(clock()), policy).to_document()

    @app.post("/v1/feedback", status_code=204)
    def feedback(body: FeedbackBody) -> Response:
        service.record_display(body.slate_id, body.click_position, int(clock()))
        return Response(status_code=204)

    @app.get("/v1/health")
    def health() -> dict:
        return {
            "name": APP_NAME,
            "version": APP_VERSION,
            **service.health(),
            "jobs": scheduler.get_all_jobs() if scheduler is not None else {},
        }

    return app
