"""
Module: logging_setup
Description: Routes structlog events through the standard logging module:
             a plain console layout and, optionally, a JSON-lines log file.
"""

import logging
from typing import Optional

import structlog
from pythonjsonlogger import jsonlogger

CONSOLE_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"
JSON_FIELDS = "%(asctime)s %(levelname)s %(name)s %(message)s"


def configure_logging(level: str = "INFO", log_file: Optional[str] = None):
    """
    Configures structlog and the root logger.

    Args:
        level (str): Root log level name.
        log_file (str): Optional path of a JSON log, one object per record.
    """
    shared = [
        structlog.contextvars.merge_contextvars,
        structlog.stdlib.add_log_level,
        structlog.stdlib.add_logger_name,
    ]
    structlog.configure(
        processors=shared + [structlog.stdlib.ProcessorFormatter.wrap_for_formatter],
        logger_factory=structlog.stdlib.LoggerFactory(),
        wrapper_class=structlog.stdlib.BoundLogger,
        cache_logger_on_first_use=True,
    )
    console = logging.StreamHandler()
    console.setFormatter(structlog.stdlib.ProcessorFormatter(
        fmt=CONSOLE_FORMAT,
        foreign_pre_chain=shared,
        processors=[
            structlog.stdlib.ProcessorFormatter.remove_processors_meta,
            structlog.processors.KeyValueRenderer(key_order=["event"], drop_missing=True),
        ],
    ))
    root = logging.getLogger()
    root.handlers.clear()
    root.addHandler(console)
    if log_file:
        handler = logging.FileHandler(log_file, encoding="utf-8")
        # structlog hands the event dict over as record.msg; the JSON formatter merges it
        handler.setFormatter(jsonlogger.JsonFormatter(JSON_FIELDS, json_default=str))
        root.addHandler(handler)
    root.setLevel(level.upper())
