from fastapi import APIRouter, HTTPException

from src.backgroundworker.job_worker import job_worker
from src.config.logging_config import get_logger
from src.models.job import JobList, JobRecord, RefineRequest, TrainTemplateRequest

logger = get_logger(__name__)

router = APIRouter()


@router.post("/jobs/train-template", response_model=JobRecord, status_code=202)
def start_train_template(request: TrainTemplateRequest):
    """Queue stage-1 training of the shared template over all training identities"""
    return job_worker.submit_train_template(request)


@router.post("/jobs/refine", response_model=JobRecord, status_code=202)
def start_refine(request: RefineRequest):
    """Queue stage-2 refinement of one identity from a stage-1 checkpoint"""
    if not request.identity:
        raise HTTPException(status_code=400, detail="identity is required")
    return job_worker.submit_refine(request)


@router.get("/jobs", response_model=JobList)
def list_jobs():
    jobs = job_worker.list_jobs()
    return JobList(jobs=jobs, total=len(jobs))


@router.get("/jobs/{job_id}", response_model=JobRecord)
def get_job(job_id: str):
    job = job_worker.get_job(job_id)
    if job is None:
        raise HTTPException(status_code=404, detail=f"Job {job_id} not found")
    return job
