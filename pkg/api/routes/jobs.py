"""Experiment job endpoints."""

import uuid
from datetime import datetime, timezone
from typing import Any, Union

from fastapi import APIRouter, BackgroundTasks, Depends, HTTPException, status
from pydantic import ValidationError

from api.middleware.auth import verify_api_key
from api.models import DynamicJobRequest, JobResponse, JobStatus, JobStatusResponse, StaticJobRequest
from config import get_logger
from core import evaluation
from core.schemas import ExperimentSpec

logger = get_logger(__name__)

router = APIRouter(prefix="/jobs", tags=["jobs"])

# In-memory job storage; jobs do not survive a restart.
_jobs: dict[str, dict[str, Any]] = {}


def _now() -> datetime:
    return datetime.now(timezone.utc)


def run_job(job_id: str, spec: ExperimentSpec) -> None:
    """Run one experiment and record its scores on the job entry."""
    job = _jobs[job_id]
    job["status"] = JobStatus.RUNNING
    job["started_at"] = _now()
    logger.info("job_started", job_id=job_id, kind=spec.mode, output_dir=str(spec.output_dir))

    try:
        if spec.mode == "static":
            outcome = evaluation.run_static(spec)
            job["result"] = {name: report.model_dump() for name, report in outcome.reports.items()}
        else:
            dynamic = evaluation.run_dynamic(spec)
            job["result"] = {method: agg.model_dump() for method, agg in dynamic.summary.items()}
        job["status"] = JobStatus.COMPLETED
        logger.info("job_completed", job_id=job_id)
    except Exception as e:
        logger.exception("job_failed", job_id=job_id, error=str(e))
        job["status"] = JobStatus.FAILED
        job["error"] = str(e)
    finally:
        job["completed_at"] = _now()


def _submit(request: Union[StaticJobRequest, DynamicJobRequest], background_tasks: BackgroundTasks) -> JobResponse:
    job_id = str(uuid.uuid4())
    try:
        spec = request.to_spec(job_id)
    except ValidationError as e:
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=str(e))

    _jobs[job_id] = {
        "status": JobStatus.PENDING,
        "kind": spec.mode,
        "output_dir": str(spec.output_dir),
        "result": {},
        "error": None,
        "started_at": None,
        "completed_at": None,
    }
    background_tasks.add_task(run_job, job_id, spec)

    return JobResponse(
        job_id=job_id,
        status=JobStatus.PENDING,
        kind=spec.mode,
        output_dir=str(spec.output_dir),
        message=f"{spec.mode.capitalize()} evaluation queued",
    )


@router.post("/static", response_model=JobResponse, status_code=status.HTTP_202_ACCEPTED)
async def start_static_job(
    request: StaticJobRequest,
    background_tasks: BackgroundTasks,
    _: str = Depends(verify_api_key),
) -> JobResponse:
    """Run Naive, MTC and unregularized MTC on one dataset and score the withheld GDs."""
    return _submit(request, background_tasks)


@router.post("/dynamic", response_model=JobResponse, status_code=status.HTTP_202_ACCEPTED)
async def start_dynamic_job(
    request: DynamicJobRequest,
    background_tasks: BackgroundTasks,
    _: str = Depends(verify_api_key),
) -> JobResponse:
    """Batch fit at ``replay_start`` and replay the remaining loading dates online."""
    return _submit(request, background_tasks)


@router.get("/{job_id}", response_model=JobStatusResponse)
async def get_job_status(
    job_id: str,
    _: str = Depends(verify_api_key),
) -> JobStatusResponse:
    """Get the status of a job."""
    if job_id not in _jobs:
        raise HTTPException(
            status_code=status.HTTP_404_NOT_FOUND,
            detail=f"Job {job_id} not found",
        )

    job = _jobs[job_id]
    return JobStatusResponse(job_id=job_id, **job)
