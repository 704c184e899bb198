#!/usr/bin/env python3
"""
Tests for the CSV tables and the logging setup they report through.
"""

import json
import logging

import numpy as np
import pytest
import structlog

from src.logging_setup import configure_logging
from src.result_tables import cell_value, write_table

logger = logging.getLogger(__name__)


@pytest.fixture
def restore_root_logger():
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    yield
    for handler in root.handlers:
        if handler not in handlers:
            handler.close()
    root.handlers[:] = handlers
    root.setLevel(level)
    structlog.reset_defaults()


def test_cell_value():
    assert cell_value(True) == "true"
    assert cell_value(np.bool_(False)) == "false"
    assert cell_value(np.int64(3)) == 3 and isinstance(cell_value(np.int64(3)), int)
    assert cell_value(np.array(2.5)) == 2.5 and isinstance(cell_value(np.array(2.5)), float)
    assert np.isnan(cell_value(float("nan")))
    assert cell_value("PASS") == "PASS"


def test_table_layout(tmp_path):
    path = write_table(tmp_path / "out" / "t.csv", ["T", "V1", "verdict"], {"T": "years", "V1": "currency"},
                       [{"T": 1.0, "V1": -0.25, "verdict": "PASS", "extra": 9}], "cafe")
    raw = path.read_bytes()
    assert b"\r" not in raw
    assert raw.decode("utf-8").splitlines() == [
        "# units: T=years, V1=currency, verdict=-; config_sha256: cafe",
        "T,V1,verdict",
        "1,-0.25,PASS",
    ]
    assert [p.name for p in path.parent.iterdir()] == ["t.csv"]


def test_failed_write_leaves_nothing(tmp_path):
    with pytest.raises(KeyError):
        write_table(tmp_path / "t.csv", ["missing"], {}, [{"present": 1.0}], "cafe")
    assert list(tmp_path.iterdir()) == []


def test_json_log_file(tmp_path, restore_root_logger):
    log_file = tmp_path / "run.jsonl"
    configure_logging("DEBUG", str(log_file))
    structlog.get_logger("fbsde.test").info("[TEST] event logged", value=3)
    for handler in logging.getLogger().handlers:
        handler.flush()
    records = [json.loads(line) for line in log_file.read_text(encoding="utf-8").splitlines()]
    event = next(r for r in records if r.get("event") == "[TEST] event logged")
    assert event["value"] == 3
    assert event["levelname"] == "INFO"


def test_mixed_columns_and_float_format(tmp_path):
    rows = [{"order": 0, "value": 1.0 / 3.0, "ratio": float("nan")},
            {"order": "sum", "value": np.float64(2.5), "ratio": 4.0}]
    path = write_table(tmp_path / "mixed.csv", ["order", "value", "ratio"], {}, rows, "beef")
    assert path.read_text(encoding="utf-8").splitlines()[1:] == [
        "order,value,ratio",
        "0,0.3333333333,nan",
        "sum,2.5,4",
    ]


def test_empty_table_has_header_only(tmp_path):
    path = write_table(tmp_path / "empty.csv", ["a", "b"], {"a": "-"}, [], "f00d")
    assert path.read_text(encoding="utf-8") == "# units: a=-, b=-; config_sha256: f00d\na,b\n"
