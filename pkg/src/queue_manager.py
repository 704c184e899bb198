"""
Module: queue_manager
Description: FIFO queue of named jobs. Each job is a callable returning an
             exit status; the queue records per-job status and elapsed time,
             turns exceptions into failed results and reports the worst
             status across the run.
"""

import collections
import time
from dataclasses import dataclass
from typing import Callable, List, Optional

import structlog

logger = structlog.get_logger(__name__)

EXIT_OK = 0
EXIT_ACCEPTANCE = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


@dataclass
class JobResult:
    name: str
    status: int
    elapsed: float
    message: str = ""

    @property
    def success(self) -> bool:
        return self.status == EXIT_OK


class JobQueue:
    """
    Runs queued jobs in order. ``classify`` maps an exception to an exit
    status; by default every exception counts as a numerical failure.
    """

    def __init__(self, classify: Optional[Callable[[BaseException], int]] = None):
        self.queue = collections.deque()
        self.results: List[JobResult] = []
        self.classify = classify or (lambda exc: EXIT_NUMERICAL)

    def __len__(self) -> int:
        return len(self.queue)

    def add_job(self, name: str, job: Callable[[], int]):
        """Adds a job to the end of the queue."""
        logger.info("[JOB_QUEUE] job added", job=name, pending=len(self.queue) + 1)
        self.queue.append((name, job))

    def process_next_in_queue(self) -> Optional[JobResult]:
        """Runs the next job; returns None when the queue is empty."""
        if not self.queue:
            logger.warning("[JOB_QUEUE] queue is empty, nothing to process")
            return None
        name, job = self.queue.popleft()
        logger.info("[JOB_QUEUE] job started", job=name)
        start_time = time.perf_counter()
        try:
            status = int(job())
            message = "ok" if status == EXIT_OK else f"exit status {status}"
        except Exception as e:
            status = self.classify(e)
            message = f"{type(e).__name__}: {e}"
            logger.error("[JOB_QUEUE] job raised", job=name, error=message, exc_info=True)
        result = JobResult(name, status, time.perf_counter() - start_time, message)
        self.results.append(result)
        logger.info("[JOB_QUEUE] job finished", job=name, status=status, elapsed=round(result.elapsed, 3))
        return result

    def process_all(self) -> int:
        """Drains the queue and returns the worst exit status seen."""
        while self.queue:
            self.process_next_in_queue()
        return self.worst_status()

    def worst_status(self) -> int:
        return max((r.status for r in self.results), default=EXIT_OK)
