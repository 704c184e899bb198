#!/usr/bin/env python3
"""
End-to-end tests of the command line: exit statuses, tables and run reports.
Resolutions are kept small; the benchmark-quality runs use the defaults.
"""

import json
import logging

import pytest
import structlog

from src.cli import RunContext, _guarded, exit_status_for, main, parse_grid
from src.config_manager import ConfigError, ConfigManager
from src.numerics import SingularPivotError

logger = logging.getLogger(__name__)


@pytest.fixture(autouse=True)
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


def _params(tmp_path, text: str) -> str:
    path = tmp_path / "params.txt"
    path.write_text(text, encoding="utf-8")
    return str(path)


def _reports(out):
    return sorted((out / "run_reports").glob("*.json"))


def test_parse_grid():
    assert parse_grid("400x1000") == (400, 1000)
    assert parse_grid(" 40 X 20 ") == (40, 20)
    with pytest.raises(ConfigError):
        parse_grid("400by1000")


def test_exit_status_mapping():
    assert exit_status_for(SingularPivotError("pivot")) == 3
    assert exit_status_for(ValueError("bad")) == 2
    assert exit_status_for(RuntimeError("other")) == 3


@pytest.mark.parametrize("text", ["cva.sigma = -0.2\n", "cva.gamma = 1\n", "cva.h = none\n"])
def test_bad_parameters_exit_with_config_status(tmp_path, text, capsys):
    out = tmp_path / "results"
    assert main(["cva", "--config", _params(tmp_path, text), "--out", str(out)]) == 2
    assert "configuration error" in capsys.readouterr().err
    assert not out.exists()


def test_bad_flags_exit_with_config_status(tmp_path):
    out = str(tmp_path / "results")
    assert main(["cva", "--grid", "40by20", "--out", out]) == 2
    assert main(["cva", "--grid", "41x20", "--out", out]) == 2
    assert main(["cva", "--config", str(tmp_path / "absent.txt"), "--out", out]) == 2


def test_cva_linear_case_end_to_end(tmp_path):
    out = tmp_path / "results"
    config = _params(tmp_path, "cva.h = 0\ncva.T = 3\n")
    status = main(["cva", "--config", config, "--out", str(out), "--grid", "40x20", "--nodes", "16"])
    assert status == 0
    lines = (out / "cva_term_structure.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0].startswith("# units: T=years")
    assert lines[1] == "T,K,V1,V1plusV2,Vpde"
    assert len(lines) == 2 + 3
    assert lines[2].split(",")[2] == "0"

    effective = ConfigManager(config)
    effective.set("run.grid_x", 40)
    effective.set("run.grid_t", 20)
    effective.set("nodes", 16)
    assert lines[0].endswith(f"config_sha256: {effective.hash()}")

    report = json.loads(_reports(out)[0].read_text(encoding="utf-8"))
    assert report["status"] == "PASS"
    assert {c["name"] for c in report["checks"]} == {"cva.monotone_improvement", "cva.linear_case"}
    assert report["outputs"][0]["path"].endswith("cva_term_structure.csv")


def test_asymptotic_end_to_end(tmp_path):
    out = tmp_path / "results"
    assert main(["asymptotic", "--out", str(out), "--log-file", str(tmp_path / "run.jsonl")]) == 0
    lines = (out / "asymptotic_scaling.csv").read_text(encoding="utf-8").splitlines()
    assert lines[1] == "delta,exact,expansion,residual,ratio,verdict"
    verdicts = [line.split(",")[-1] for line in lines[2:]]
    assert verdicts == ["BASELINE", "PASS", "PASS"]
    assert (tmp_path / "run.jsonl").stat().st_size > 0


def test_failed_command_removes_partial_tables(tmp_path):
    ctx = RunContext(config=ConfigManager(), out_dir=tmp_path)

    def half_done(run: RunContext) -> int:
        run.table("partial.csv", ["a"], {}, [{"a": 1.0}])
        raise SingularPivotError("zero pivot")

    with pytest.raises(SingularPivotError):
        _guarded(half_done, ctx)
    assert not (tmp_path / "partial.csv").exists()
    assert ctx.outputs == []


def test_run_context_status():
    ctx = RunContext(config=ConfigManager(), out_dir=None)
    ctx.check("a", "PASS")
    ctx.check("b", "FAIL")
    ctx.check("c", "INCONCLUSIVE")
    assert ctx.status(0) == 1
    assert ctx.status(2) == 0


@pytest.mark.slow
def test_coupled_end_to_end(tmp_path):
    out = tmp_path / "results"
    status = main(["coupled", "--out", str(out), "--grid", "400x400", "--paths", "20000"])
    lines = (out / "coupled_consistency.csv").read_text(encoding="utf-8").splitlines()
    logger.info("coupled consistency:\n%s", "\n".join(lines))
    assert lines[1] == "epsilon,iterate,expansion,residual,noise,ratio,verdict"
    assert [line.rsplit(",", 1)[1] for line in lines[2:]] == ["BASELINE", "PASS", "PASS"]
    assert status == 0
    orders = (out / "coupled_orders.csv").read_text(encoding="utf-8").splitlines()
    assert orders[1] == "order,pde_value,stacked_value,stacked_stderr,iterate"
    assert len(orders) == 2 + 3


def test_coupled_at_zero_epsilon(tmp_path):
    out = tmp_path / "results"
    config = _params(tmp_path, "coupled.epsilon = 0\ncoupled.order = 1\n")
    status = main(["coupled", "--config", config, "--out", str(out), "--grid", "60x30", "--paths", "2000"])
    assert status == 0
    lines = (out / "coupled_consistency.csv").read_text(encoding="utf-8").splitlines()
    assert len(lines) == 3
    assert lines[2].split(",")[0] == "0"
    assert lines[2].endswith(",PASS")


def test_diffrates_table_layout(tmp_path):
    out = tmp_path / "results"
    main(["diffrates", "--out", str(out), "--paths", "2000"])
    lines = (out / "diffrates.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0].startswith("# units: ")
    assert lines[1] == "order,value,target,tolerance,stderr,verdict"
    assert [line.split(",")[0] for line in lines[2:]] == ["0", "1", "2", "sum", "regression_mc"]
    assert lines[2].endswith(",PASS")
    # the default parameters carry targets for every order
    assert all(line.rsplit(",", 1)[1] in ("PASS", "FAIL") for line in lines[3:6])


def test_fixed_seed_runs_write_identical_tables(tmp_path):
    config = _params(tmp_path, "diffrates.steps = 20\n")
    tables = []
    for name in ("first", "second"):
        out = tmp_path / name
        main(["diffrates", "--config", config, "--out", str(out), "--paths", "3000", "--seed", "19"])
        tables.append((out / "diffrates.csv").read_bytes())
    assert tables[0] == tables[1]
    mc_row = tables[0].decode("utf-8").splitlines()[-1]
    assert mc_row.startswith("regression_mc,")
