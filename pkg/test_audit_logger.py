#!/usr/bin/env python3
"""
Tests for the JSON/TXT run reports.
"""

import hashlib
import json
import logging
import re

from src.audit_logger import AuditLogger

logger = logging.getLogger(__name__)


def test_report_pair_is_written(tmp_path):
    table = tmp_path / "table.csv"
    table.write_bytes(b"# units: x=-; config_sha256: abc\nx\n1\n")
    audit = AuditLogger(str(tmp_path / "reports"))
    event_id = audit.log_event({
        "subcommand": "cva",
        "config_sha256": "abc",
        "checks": [{"name": "cva.linear_case", "verdict": "PASS", "detail": "h=0"}],
        "outputs": [table, tmp_path / "missing.csv"],
        "runtime_seconds": 1.5,
        "status": "PASS",
    })
    assert re.fullmatch(r"RUN-\d{8}-\d{9}", event_id)

    report = json.loads((tmp_path / "reports" / f"{event_id}.json").read_text(encoding="utf-8"))
    assert report["subcommand"] == "cva"
    assert report["outputs"][0]["sha256"] == hashlib.sha256(table.read_bytes()).hexdigest()
    assert report["outputs"][0]["size_bytes"] == table.stat().st_size
    assert report["outputs"][1] == {"path": str(tmp_path / "missing.csv"), "sha256": "N/A", "size_bytes": 0}

    text = (tmp_path / "reports" / f"{event_id}.txt").read_text(encoding="utf-8")
    assert "FBSDE PERTURBATION RUN REPORT" in text
    assert "[PASS] cva.linear_case" in text
    assert "RUN STATUS: PASS" in text
    assert "Runtime: 1.500 s" in text


def test_report_without_checks_records_the_error(tmp_path):
    audit = AuditLogger(str(tmp_path))
    event_id = audit.log_event({"subcommand": "coupled", "status": "EXIT 3", "error_message": "coupled: blew up"})
    text = (tmp_path / f"{event_id}.txt").read_text(encoding="utf-8")
    assert "CHECKS: None" in text
    assert "ERROR: coupled: blew up" in text
    assert not (tmp_path / ".audit_writetest").exists()
