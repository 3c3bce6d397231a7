import logging

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from errors import (
    FreshrecError,
    NoSnapshotError,
    StaleSnapshotError,
    UnknownSlateError,
    ValidationError,
)

logger = logging.getLogger(__name__)

# most specific first
STATUS_BY_ERROR: tuple[tuple[type, int], ...] = (
    (UnknownSlateError, 404),
    (StaleSnapshotError, 409),
    (NoSnapshotError, 503),
    (ValidationError, 400),
)


def status_for(error: Exception) -> int:
    for error_type, status in STATUS_BY_ERROR:
        if isinstance(error, error_type):
            return status
    return 500


async def freshrec_error_handler(request: Request, exc: FreshrecError) -> JSONResponse:
    """Map domain errors to HTTP status codes with a small JSON body."""
    status = status_for(exc)
    if status >= 500:
        logger.error("%s %s failed: %s", request.method, request.url.path, exc, exc_info=exc)
    else:
        logger.warning("%s %s rejected (%d): %s", request.method, request.url.path, status, exc)
    return JSONResponse(status_code=status, content={"error": type(exc).__name__, "detail": str(exc)})


async def unexpected_error_handler(request: Request, exc: Exception) -> JSONResponse:
    logger.error("Unexpected error on %s %s: %s", request.method, request.url.path, exc, exc_info=exc)
    return JSONResponse(status_code=500, content={"error": "InternalError", "detail": "internal error"})


def register_error_handlers(app: FastAPI) -> None:
    app.add_exception_handler(FreshrecError, freshrec_error_handler)
    app.add_exception_handler(Exception, unexpected_error_handler)
