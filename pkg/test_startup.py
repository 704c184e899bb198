#!/usr/bin/env python3
"""
Quick test to verify all core components can be imported and initialized.
Runs under pytest or directly as a script.
"""

import sys
import logging

logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)


def test_imports():
    """Test that all required modules can be imported."""
    logger.info("Testing module imports...")
    from src.numerics import gauss_rules, solve_tridiagonal
    from src.models import ModelSpec, OrderResult
    from src.cva_forward import term_structure
    from src.diff_rates import benchmark_orders
    from src.pde_engine import cascade_orders
    from src.decoupled_core import regression_mc
    from src.asymptotic import delta_scaling_study
    from src.coupled import consistency_table
    from src.cli import COMMANDS
    assert all(callable(f) for f in (gauss_rules, solve_tridiagonal, term_structure, benchmark_orders,
                                     cascade_orders, regression_mc, delta_scaling_study, consistency_table))
    assert ModelSpec and OrderResult
    assert set(COMMANDS) == {"cva", "diffrates", "asymptotic", "coupled"}
    logger.info("✓ all modules imported")


def test_config_manager():
    """Test ConfigManager initialization."""
    from src.config_manager import ConfigManager
    config = ConfigManager()
    logger.info(f"  - Seed: {config.get('run.seed')}")
    logger.info(f"  - PDE grid: {config.get_int('run.grid_x')}x{config.get_int('run.grid_t')}")
    logger.info(f"  - Config hash: {config.hash()}")
    assert config.validate_config()


def test_audit_logger(tmp_path):
    """Test AuditLogger initialization."""
    from src.audit_logger import AuditLogger
    audit = AuditLogger(log_directory=str(tmp_path / "logs"))
    logger.info(f"  - Log directory: {audit.log_dir}")
    assert audit.log_dir.is_dir()


def test_job_queue():
    """Test JobQueue initialization."""
    from src.queue_manager import JobQueue
    queue = JobQueue()
    logger.info(f"  - Queue length: {len(queue)}")
    assert len(queue) == 0


def main():
    """Run all checks outside pytest."""
    import tempfile
    from pathlib import Path

    logger.info("=" * 70)
    logger.info("FBSDE PERTURBATION - COMPONENT STARTUP TEST")
    logger.info("=" * 70)

    checks = [("Module Imports", test_imports), ("ConfigManager", test_config_manager),
              ("JobQueue", test_job_queue)]
    results = []
    for name, check in checks:
        try:
            check()
            results.append((name, True))
        except Exception as e:
            logger.error(f"✗ {name} failed: {e}")
            results.append((name, False))
    with tempfile.TemporaryDirectory() as tmp:
        try:
            test_audit_logger(Path(tmp))
            results.append(("AuditLogger", True))
        except Exception as e:
            logger.error(f"✗ AuditLogger failed: {e}")
            results.append(("AuditLogger", False))

    passed = sum(1 for _, result in results if result)
    for name, result in results:
        logger.info(f"{'✓ PASS' if result else '✗ FAIL'}: {name}")
    logger.info("=" * 70)
    logger.info(f"Total: {passed}/{len(results)} tests passed")
    logger.info("=" * 70)
    return 0 if passed == len(results) else 1


if __name__ == "__main__":
    sys.exit(main())
