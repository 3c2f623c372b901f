"""API routes module."""

from api.routes.jobs import router as jobs_router
from api.routes.scoring import router as scoring_router

__all__ = ["jobs_router", "scoring_router"]
