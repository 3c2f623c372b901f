"""Synchronous scoring endpoint."""

from fastapi import APIRouter, Depends

from api.middleware.auth import verify_api_key
from api.models import ScoreRequest
from core import evaluation
from core.schemas import ScoreReport

router = APIRouter(tags=["scoring"])


@router.post("/score", response_model=ScoreReport)
async def score_values(
    request: ScoreRequest,
    _: str = Depends(verify_api_key),
) -> ScoreReport:
    """RMSE, MAE and R^2 of the posted estimates against the posted truth."""
    return evaluation.score(request.estimates, request.truth, request.scope)
