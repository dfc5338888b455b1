import threading
import uuid
from concurrent.futures import Future, ThreadPoolExecutor
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional

from src.backgroundworker.trainer import Trainer
from src.config.logging_config import get_logger
from src.config.settings import settings
from src.models.config import Config, load_config
from src.models.job import JobKind, JobRecord, JobStatus, RefineRequest, TrainTemplateRequest
from src.services.dataset_service import load_dataset
from src.utils.env_utils import configure_torch

logger = get_logger(__name__)


class JobWorker:
    """Runs training jobs one at a time on a background thread.

    Flow:
    - A request is recorded as a pending job and queued on a single worker
      thread (parameter updates are single-writer).
    - The job resolves its config and dataset, trains, and records the
      resulting checkpoint.
    - Step progress and failures are written back to the job record.
    """

    def __init__(self, max_workers: int = 1):
        self._executor = ThreadPoolExecutor(max_workers=max_workers, thread_name_prefix="train-job")
        self._jobs: Dict[str, JobRecord] = {}
        self._futures: Dict[str, Future] = {}
        self._lock = threading.Lock()

    def list_jobs(self) -> List[JobRecord]:
        with self._lock:
            return [job.model_copy() for job in self._jobs.values()]

    def get_job(self, job_id: str) -> Optional[JobRecord]:
        with self._lock:
            job = self._jobs.get(job_id)
            return job.model_copy() if job else None

    def wait(self, job_id: str, timeout: Optional[float] = None) -> Optional[JobRecord]:
        future = self._futures.get(job_id)
        if future is not None:
            future.result(timeout=timeout)
        return self.get_job(job_id)

    def submit_train_template(self, request: TrainTemplateRequest) -> JobRecord:
        return self._submit(JobKind.TRAIN_TEMPLATE, lambda job_id: self._run_train_template(job_id, request))

    def submit_refine(self, request: RefineRequest) -> JobRecord:
        return self._submit(JobKind.REFINE, lambda job_id: self._run_refine(job_id, request))

    def shutdown(self, wait: bool = False) -> None:
        self._executor.shutdown(wait=wait, cancel_futures=True)

    def _submit(self, kind: JobKind, runner) -> JobRecord:
        job = JobRecord(id=str(uuid.uuid4()), kind=kind)
        with self._lock:
            self._jobs[job.id] = job
        self._futures[job.id] = self._executor.submit(self._execute, job.id, runner)
        logger.info(f"Queued {kind.value} job {job.id}")
        return job.model_copy()

    def _update(self, job_id: str, **changes) -> None:
        with self._lock:
            job = self._jobs[job_id]
            for key, value in changes.items():
                setattr(job, key, value)
            job.updated_at = datetime.now()

    def _execute(self, job_id: str, runner) -> None:
        self._update(job_id, status=JobStatus.RUNNING)
        try:
            checkpoint = runner(job_id)
            self._update(job_id, status=JobStatus.COMPLETED, output_checkpoint=str(checkpoint))
            logger.info(f"Job {job_id} completed: {checkpoint}")
        except Exception as e:
            logger.error(f"Job {job_id} failed: {e}")
            self._update(job_id, status=JobStatus.FAILED, error_message=str(e))

    def _trainer(self, job_id: str, config: Config, output_dir: str) -> Trainer:
        def on_step(stage: int, step: int, loss: float) -> None:
            self._update(job_id, stage=stage, step=step, last_loss=loss)

        return Trainer(config, output_dir, progress=False, on_step=on_step)

    @staticmethod
    def _config(config_path: Optional[str], seed: Optional[int], views: Optional[int] = None) -> Config:
        config = load_config(config_path or settings.config_path)
        updates = {}
        if seed is not None:
            updates["seed"] = seed
        if views is not None:
            updates["views_per_identity"] = views
        if updates:
            config = config.model_copy(update={"train": config.train.model_copy(update=updates)})
        return config

    def _run_train_template(self, job_id: str, request: TrainTemplateRequest) -> Path:
        configure_torch(settings.torch_threads)
        config = self._config(request.config_path, request.seed, request.views)
        manifest = load_dataset(request.data_dir or settings.data_dir)
        trainer = self._trainer(job_id, config, request.output_dir or settings.output_dir)
        return trainer.train_stage1(manifest).checkpoint

    def _run_refine(self, job_id: str, request: RefineRequest) -> Path:
        configure_torch(settings.torch_threads)
        config = self._config(request.config_path, request.seed)
        output_dir = request.output_dir or settings.output_dir
        manifest = load_dataset(request.data_dir or settings.data_dir)
        checkpoint = request.checkpoint or str(Path(output_dir) / "checkpoints" / "stage1.ckpt")
        trainer = self._trainer(job_id, config, output_dir)
        return trainer.train_stage2(request.identity, checkpoint, manifest).checkpoint


job_worker = JobWorker()
