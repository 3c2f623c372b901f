"""API models module."""

from api.models.requests import DynamicJobRequest, ScoreRequest, StaticJobRequest
from api.models.responses import ErrorResponse, HealthResponse, JobResponse, JobStatus, JobStatusResponse

__all__ = [
    # Requests
    "StaticJobRequest",
    "DynamicJobRequest",
    "ScoreRequest",
    # Responses
    "JobStatus",
    "JobResponse",
    "JobStatusResponse",
    "ErrorResponse",
    "HealthResponse",
]
