"""
Job management service for experiment runs and the shared worker pool
"""
import logging
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, Iterable, List, Optional

from app.config import settings

logger = logging.getLogger(__name__)


class JobStatus(Enum):
    PENDING = "pending"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"


@dataclass
class JobResult:
    """Result of one experiment job"""
    job_id: str
    experiment: str
    status: JobStatus
    message: str
    output_files: List[str] = field(default_factory=list)
    passed: Optional[bool] = None
    error: Optional[str] = None
    created_at: float = None
    completed_at: Optional[float] = None

    def __post_init__(self):
        if self.created_at is None:
            self.created_at = time.time()


class JobRegistry:
    """In-memory job registry"""

    def __init__(self):
        self.jobs: Dict[str, JobResult] = {}
        self._lock = threading.Lock()

    def create_job(self, experiment: str, job_id: str = None) -> str:
        """Create a new job and return its ID"""
        if job_id is None:
            job_id = str(uuid.uuid4())
        job = JobResult(job_id=job_id, experiment=experiment, status=JobStatus.PENDING, message="Job created")
        with self._lock:
            self.jobs[job_id] = job
        return job_id

    def get_job(self, job_id: str) -> Optional[JobResult]:
        return self.jobs.get(job_id)

    def update_job(self, job_id: str, **kwargs):
        """Update job properties"""
        with self._lock:
            job = self.jobs.get(job_id)
            if job is None:
                return
            for key, value in kwargs.items():
                if hasattr(job, key):
                    setattr(job, key, value)

    def pop_finished(self, job_id: str) -> Optional[JobResult]:
        """Remove a completed or failed job and hand it back; running jobs stay"""
        with self._lock:
            job = self.jobs.get(job_id)
            if job is None or job.status not in (JobStatus.COMPLETED, JobStatus.FAILED):
                return job
            return self.jobs.pop(job_id)


# Global job registry
job_registry = JobRegistry()


class ExperimentJobService:
    """Service for running experiments and fanning work across a thread pool"""

    def __init__(self):
        self.registry = job_registry
        self.threads = settings.DEFAULT_THREADS

    def configure(self, threads: int) -> None:
        if threads < 1:
            raise ValueError(f"--threads must be >= 1, got {threads}")
        self.threads = int(threads)

    def map_ordered(self, fn: Callable[[Any], Any], items: Iterable[Any], threads: Optional[int] = None) -> List[Any]:
        """fn over items on the pool; results come back in input order"""
        items = list(items)
        threads = self.threads if threads is None else threads
        if threads <= 1 or len(items) <= 1:
            return [fn(item) for item in items]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))

    def run_job(self, experiment: str, handler: Callable[[], Any],
                on_failure: Optional[Callable[[Exception], List[str]]] = None,
                job_id: str = None) -> JobResult:
        """
        Run one experiment handler.

        The handler returns an outcome with ``passed`` and ``files``; an
        exception marks the job FAILED and ``on_failure`` may still write a
        flagged partial report.
        """
        job_id = self.registry.create_job(experiment, job_id)
        logger.info(f"Starting experiment job {job_id} ({experiment})")
        self.registry.update_job(job_id, status=JobStatus.RUNNING, message=f"Running {experiment}...")
        try:
            outcome = handler()
            self.registry.update_job(
                job_id,
                status=JobStatus.COMPLETED,
                message="Experiment completed" if outcome.passed else "Experiment completed with failed checks",
                passed=bool(outcome.passed),
                output_files=list(outcome.files),
                completed_at=time.time(),
            )
            logger.info(f"Job {job_id} completed, passed={outcome.passed}")
        except Exception as e:
            logger.error(f"Job {job_id} failed: {str(e)}", exc_info=True)
            files: List[str] = []
            if on_failure is not None:
                try:
                    files = on_failure(e)
                except Exception:
                    logger.error(f"Could not write the partial report of job {job_id}", exc_info=True)
            self.registry.update_job(
                job_id,
                status=JobStatus.FAILED,
                message=f"Experiment failed: {str(e)}",
                passed=False,
                error=str(e),
                output_files=files,
                completed_at=time.time(),
            )
        # the caller owns the finished result; the registry only tracks live jobs
        return self.registry.pop_finished(job_id)


# Global service instance
job_service = ExperimentJobService()
