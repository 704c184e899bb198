"""
Module: result_tables
Description: Plot-ready CSV tables with a provenance comment line. Output is
             byte-stable: fixed float formatting, '.' decimals, LF endings
             and no timestamps.
"""

import os
import tempfile
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd
import structlog

logger = structlog.get_logger(__name__)

FLOAT_FORMAT = "%.10g"


def cell_value(value):
    """
    Normalises a table cell: booleans to ``true``/``false``, integers and
    numeric scalars (including numpy 0-d arrays) to int or float, anything
    else to its text.
    """
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return int(value)
    try:
        return float(value)
    except (TypeError, ValueError):
        return str(value)


def write_table(path, columns: Sequence[str], units: Mapping[str, str], rows: Iterable[Mapping],
                config_hash: str) -> Path:
    """
    Writes ``rows`` (mappings keyed by column name) as CSV.

    The first line is ``# units: col=unit, ...; config_sha256: <hash>``,
    the second the header. The file is written to a temporary sibling and
    renamed, so a failed write leaves no partial table.

    Returns:
        Path: The written file.
    """
    path = Path(path)
    records = [[cell_value(row[c]) for c in columns] for row in rows]
    frame = pd.DataFrame(records, columns=list(columns))
    unit_text = ", ".join(f"{c}={units.get(c, '-')}" for c in columns)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(f"# units: {unit_text}; config_sha256: {config_hash}\n")
            frame.to_csv(f, index=False, float_format=FLOAT_FORMAT, na_rep="nan", lineterminator="\n")
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    logger.info("[TABLE] table written", path=str(path), rows=len(frame))
    return path
