"""
Tests for the experiment job runner and the ordered worker pool
"""
from dataclasses import dataclass, field
from typing import List

import pytest

from app.services.job_service import ExperimentJobService, JobRegistry, JobStatus


@dataclass
class Outcome:
    passed: bool
    files: List[str] = field(default_factory=list)


@pytest.fixture
def service():
    svc = ExperimentJobService()
    svc.registry = JobRegistry()
    return svc


class TestRunJob:
    def test_completed_job_leaves_the_registry(self, service):
        job = service.run_job("trace", lambda: Outcome(passed=True, files=["a.json"]))
        assert job.status == JobStatus.COMPLETED
        assert job.passed
        assert job.output_files == ["a.json"]
        assert service.registry.jobs == {}

    def test_failed_job_leaves_the_registry(self, service):
        def boom():
            raise RuntimeError("flow diverged")

        job = service.run_job("solve", boom, on_failure=lambda e: [f"partial: {e}"])
        assert job.status == JobStatus.FAILED
        assert job.error == "flow diverged"
        assert job.output_files == ["partial: flow diverged"]
        assert service.registry.jobs == {}

    def test_many_runs_do_not_accumulate(self, service):
        for i in range(50):
            service.run_job("qv", lambda: Outcome(passed=i % 2 == 0))
        assert len(service.registry.jobs) == 0

    def test_running_job_is_kept(self):
        registry = JobRegistry()
        job_id = registry.create_job("tail")
        registry.update_job(job_id, status=JobStatus.RUNNING)
        assert registry.pop_finished(job_id).status == JobStatus.RUNNING
        assert job_id in registry.jobs


class TestMapOrdered:
    def test_results_keep_input_order(self, service):
        assert service.map_ordered(lambda x: x * x, range(20), threads=4) == [x * x for x in range(20)]

    def test_bad_thread_count(self, service):
        with pytest.raises(ValueError):
            service.configure(0)
