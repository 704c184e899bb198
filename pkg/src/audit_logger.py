"""
Module: audit_logger
Description: Writes a dual-format run report (structured JSON plus a
             human-readable TXT) for every CLI run: the effective
             configuration and its hash, per-check verdicts, runtime and a
             SHA-256 fingerprint of each result table produced.
"""

import hashlib
import json
import socket
from datetime import datetime
from pathlib import Path

import structlog

logger = structlog.get_logger(__name__)


class AuditLogger:
    """
    Creates one JSON and one TXT report per run in a log directory.
    """

    def __init__(self, log_directory: str):
        """
        Initializes the logger with a directory to store the reports.

        Args:
            log_directory (str): The path to the directory where reports will be saved.

        Raises:
            OSError: If the directory cannot be created or written.
        """
        self.log_dir = Path(log_directory)
        try:
            self.log_dir.mkdir(parents=True, exist_ok=True)
            test_file = self.log_dir / ".audit_writetest"
            test_file.touch()
            test_file.unlink()
            logger.debug("[RUN_AUDIT] log directory is writable", path=str(self.log_dir))
        except OSError as e:
            logger.error("[RUN_AUDIT] failed to initialize log directory", path=str(log_directory), error=str(e))
            raise

    def _generate_hashes(self, file_path: Path) -> tuple[str, int]:
        """Calculates the SHA-256 hash and size of a file."""
        if not file_path.exists():
            return "N/A", 0
        hasher = hashlib.sha256()
        size = 0
        with open(file_path, "rb") as f:
            while chunk := f.read(8192):
                hasher.update(chunk)
                size += len(chunk)
        return hasher.hexdigest(), size

    def log_event(self, event_data: dict) -> str:
        """
        Writes a run report in both TXT and JSON formats.

        Args:
            event_data (dict): Run details; ``outputs`` (list of paths) are
                fingerprinted, everything else is reported verbatim.

        Returns:
            str: The event id, also the report file stem.
        """
        timestamp = datetime.now()
        event_id = f"RUN-{timestamp.strftime('%Y%m%d')}-{timestamp.strftime('%H%M%S%f')[:-3]}"
        full_event = {
            "event_id": event_id,
            "timestamp": timestamp.isoformat(),
            "workstation_id": socket.gethostname(),
            **event_data,
        }
        outputs = []
        for path in event_data.get("outputs", []):
            h, s = self._generate_hashes(Path(path))
            outputs.append({"path": str(path), "sha256": h, "size_bytes": s})
        full_event["outputs"] = outputs
        self._write_json_log(full_event, event_id)
        self._write_txt_log(full_event, event_id)
        logger.info("[RUN_AUDIT] run report written", event_id=event_id, status=full_event.get("status"))
        return event_id

    def _write_json_log(self, event: dict, event_id: str):
        """Writes the structured JSON report."""
        log_file = self.log_dir / f"{event_id}.json"
        try:
            json_safe_event = json.loads(json.dumps(event, default=str))
            with open(log_file, "w", encoding="utf-8") as f:
                json.dump(json_safe_event, f, indent=2)
        except (OSError, TypeError, ValueError) as e:
            logger.error("[RUN_AUDIT] failed to write JSON report", path=str(log_file), error=str(e))

    def _write_txt_log(self, event: dict, event_id: str):
        """Writes the human-readable report."""
        log_file = self.log_dir / f"{event_id}.txt"
        try:
            with open(log_file, "w", encoding="utf-8") as f:
                f.write("-" * 75 + "\n")
                f.write("FBSDE PERTURBATION RUN REPORT\n")
                f.write(f"Date: {event['timestamp']}\n")
                f.write("-" * 75 + "\n")
                f.write(f"Subcommand: {event.get('subcommand', 'N/A')}\n")
                f.write(f"Config SHA-256: {event.get('config_sha256', 'N/A')}\n")
                f.write(f"Runtime: {event.get('runtime_seconds', 0):.3f} s\n\n")

                checks = event.get("checks", [])
                if checks:
                    f.write(f"CHECKS: {len(checks)} total\n")
                    for check in checks:
                        f.write(f"  [{check.get('verdict', 'N/A')}] {check.get('name', 'N/A')}\n")
                        if check.get("detail"):
                            f.write(f"    {check['detail']}\n")
                else:
                    f.write("CHECKS: None\n")

                f.write("\nOUTPUTS:\n")
                for output in event.get("outputs", []):
                    f.write(f"  {output['path']} ({output['size_bytes']} bytes)\n")
                    f.write(f"    SHA-256: {output['sha256']}\n")
                if event.get("error_message"):
                    f.write(f"\nERROR: {event['error_message']}\n")
                f.write(f"\nRUN STATUS: {event.get('status', 'N/A')}\n")
                f.write("-" * 75 + "\n")
                f.write(f"Workstation: {event.get('workstation_id', 'N/A')}\n")
        except OSError as e:
            logger.error("[RUN_AUDIT] failed to write TXT report", path=str(log_file), error=str(e))
