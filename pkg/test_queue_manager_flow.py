#!/usr/bin/env python3
"""
Tests the job queue flow: ordering, exception classification and the worst
status of a run.
"""

import logging

from src.queue_manager import EXIT_ACCEPTANCE, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, JobQueue

logger = logging.getLogger(__name__)


def test_jobs_run_in_order():
    seen = []
    queue = JobQueue()
    queue.add_job("first", lambda: seen.append("first") or EXIT_OK)
    queue.add_job("second", lambda: seen.append("second") or EXIT_ACCEPTANCE)
    assert len(queue) == 2
    assert queue.process_all() == EXIT_ACCEPTANCE
    assert seen == ["first", "second"]
    assert [r.success for r in queue.results] == [True, False]
    assert queue.results[1].message == "exit status 1"
    assert len(queue) == 0


def test_exceptions_are_classified():
    def broken():
        raise ValueError("bad parameter")

    queue = JobQueue(classify=lambda exc: EXIT_CONFIG if isinstance(exc, ValueError) else EXIT_NUMERICAL)
    queue.add_job("broken", broken)
    queue.add_job("fine", lambda: EXIT_OK)
    assert queue.process_all() == EXIT_CONFIG
    assert queue.results[0].message == "ValueError: bad parameter"
    assert queue.results[1].success


def test_default_classification_and_empty_queue():
    queue = JobQueue()
    assert queue.process_next_in_queue() is None
    assert queue.worst_status() == EXIT_OK
    queue.add_job("explodes", lambda: 1 / 0)
    result = queue.process_next_in_queue()
    assert result.status == EXIT_NUMERICAL
    assert result.elapsed >= 0.0
