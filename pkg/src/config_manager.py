"""
Module: config_manager
Description: Loads run parameters from flat key=value files, validates them
             and fingerprints the effective configuration with SHA-256 so
             every result table and run report can name the inputs it came from.
"""

import copy
import json
from pathlib import Path
from typing import Any, Dict, Optional

import structlog
from cryptography.hazmat.primitives import hashes

logger = structlog.get_logger(__name__)


# One block per subcommand plus the shared resolution defaults
DEFAULT_CONFIG = {
    "cva": {
        "r": 0.02,
        "lambda": 0.01,
        "h": 0.03,
        "sigma": 0.2,
        "S0": 100.0,
        "T": 10.0,
    },
    "diffrates": {
        "mu": 0.05,
        "sigma": 0.2,
        "r": 0.01,
        "R": 0.06,
        "T": 0.25,
        "S0": 100.0,
        "K1": 95.0,
        "K2": 105.0,
        "steps": 50.0,
        "degree": 5.0,
    },
    "asymptotic": {
        "kappa": 0.05,
        "beta": 0.5,
        "nu": 1.0,
        "c": 0.02,
        "S0": 1.0,
        "T": 1.0,
        "delta": 0.2,
        "levels": 3.0,
        "nodes": 200.0,
    },
    "coupled": {
        "r": 0.02,
        "sigma": 0.2,
        "beta": 0.25,
        "K": 100.0,
        "S0": 100.0,
        "T": 1.0,
        "epsilon": 1.0,
        "levels": 3.0,
        "order": 2.0,
        "paths": 20000.0,
    },
    "run": {
        "seed": 7.0,
        "paths": 100000.0,
        "grid_x": 400.0,
        "grid_t": 2000.0,
        "nodes": 64.0,
    },
}

INTEGER_KEYS = {"steps", "degree", "levels", "order", "seed", "paths", "grid_x", "grid_t", "nodes"}


class ConfigError(ValueError):
    """Invalid configuration input; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def get_default_config() -> Dict[str, Dict[str, float]]:
    """
    Returns the default configuration.

    Returns:
        dict: A deep copy of DEFAULT_CONFIG.
    """
    return copy.deepcopy(DEFAULT_CONFIG)


def parse_config_text(text: str, source: str = "<text>") -> Dict[str, float]:
    """
    Parses key=value lines. ``#`` starts a comment; blank lines are skipped.

    Returns:
        dict: Raw keys (possibly block-scoped, e.g. ``cva.h``) to float values.

    Raises:
        ConfigError: On a malformed line or a non-numeric value.
    """
    entries = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(line, f"{source}:{lineno}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError("<empty>", f"{source}:{lineno}: missing key")
        try:
            entries[key] = float(value)
        except ValueError:
            raise ConfigError(key, f"{source}:{lineno}: value {value!r} is not a number") from None
    return entries


def config_hash(config: Dict[str, Any]) -> str:
    """SHA-256 of the canonical JSON form of a configuration, hex-encoded."""
    canonical_json = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    digest = hashes.Hash(hashes.SHA256())
    digest.update(canonical_json)
    return digest.finalize().hex()


class ConfigManager:
    """
    Effective run configuration: defaults overlaid with a parameter file.
    """

    def __init__(self, config_path: Optional[str] = None):
        """
        Args:
            config_path (str): Optional key=value parameter file.

        Raises:
            ConfigError: If the file is missing or contains a bad entry.
        """
        self.config = get_default_config()
        self.source = config_path
        if config_path is not None:
            path = Path(config_path)
            if not path.is_file():
                raise ConfigError("config", f"parameter file not found: {path}")
            self.apply(parse_config_text(path.read_text(encoding="utf-8"), str(path)))
            logger.info("[CONFIG] parameter file loaded", path=str(path))

    def apply(self, entries: Dict[str, float]):
        """Overlays parsed entries; unscoped keys hit every block that defines them."""
        for key, value in entries.items():
            self.set(key, value)

    def _targets(self, key: str):
        if "." in key:
            block, name = key.split(".", 1)
            if block not in self.config or name not in self.config[block]:
                raise ConfigError(key, "unknown parameter")
            return [(block, name)]
        targets = [(block, key) for block, values in self.config.items() if key in values]
        if not targets:
            raise ConfigError(key, "unknown parameter")
        return targets

    def get(self, key: str, default: Any = None) -> Any:
        """
        Gets a value by ``block.name`` or a whole block by name.

        Args:
            key (str): ``"cva.h"`` or ``"cva"``.
            default: Returned when the key is absent.
        """
        if "." not in key:
            block = self.config.get(key)
            return default if block is None else dict(block)
        block, name = key.split(".", 1)
        return self.config.get(block, {}).get(name, default)

    def get_int(self, key: str) -> int:
        return int(round(self.get(key)))

    def set(self, key: str, value: Any):
        """
        Sets a value.

        Raises:
            ConfigError: On an unknown key or a non-numeric value.
        """
        try:
            value = float(value)
        except (TypeError, ValueError):
            raise ConfigError(key, f"value {value!r} is not a number") from None
        for block, name in self._targets(key):
            self.config[block][name] = value
            logger.debug("[CONFIG] value updated", key=f"{block}.{name}", value=value)

    def validate_config(self) -> bool:
        """
        Range checks on every block.

        Returns:
            bool: True if the configuration is valid.
        """
        try:
            self.require_valid()
        except ConfigError as exc:
            logger.error("[CONFIG] invalid configuration", key=exc.key, reason=str(exc))
            return False
        return True

    def require_valid(self):
        """
        Raises:
            ConfigError: On the first violated range check.
        """
        c = self.config
        positive = {
            "cva": ("r", "sigma", "S0", "T"),
            "diffrates": ("sigma", "T", "S0", "K1", "K2", "steps", "degree"),
            "asymptotic": ("nu", "S0", "T", "delta", "levels", "nodes"),
            "coupled": ("sigma", "K", "S0", "T", "levels", "order", "paths"),
            "run": ("paths", "grid_x", "grid_t", "nodes"),
        }
        for block, names in positive.items():
            for name in names:
                if not c[block][name] > 0.0:
                    raise ConfigError(f"{block}.{name}", f"must be positive, got {c[block][name]}")
        for block, name in (("cva", "h"), ("cva", "lambda"), ("coupled", "epsilon"), ("run", "seed")):
            if c[block][name] < 0.0:
                raise ConfigError(f"{block}.{name}", f"must be nonnegative, got {c[block][name]}")
        for block, values in c.items():
            for name in INTEGER_KEYS & set(values):
                if values[name] != round(values[name]):
                    raise ConfigError(f"{block}.{name}", f"must be an integer, got {values[name]}")
        if c["asymptotic"]["levels"] < 2:
            raise ConfigError("asymptotic.levels", "a residual ratio needs at least two delta levels")
        if c["run"]["grid_x"] % 2:
            # S0 must be a node of the log-spaced grid
            raise ConfigError("run.grid_x", f"must be even, got {c['run']['grid_x']}")
        if c["diffrates"]["R"] < c["diffrates"]["r"]:
            raise ConfigError("diffrates.R", "borrowing rate must not be below the lending rate")
        if c["diffrates"]["K2"] <= c["diffrates"]["K1"]:
            raise ConfigError("diffrates.K2", "must exceed K1")
        if c["cva"]["T"] < 1.0:
            raise ConfigError("cva.T", "the term structure needs at least one yearly maturity")
        if not 1 <= c["coupled"]["order"] <= 2:
            raise ConfigError("coupled.order", "consistency is checked for orders 1 and 2")

    def get_all(self) -> Dict[str, Dict[str, float]]:
        """
        Gets the entire configuration.

        Returns:
            dict: A deep copy of the current configuration.
        """
        return copy.deepcopy(self.config)

    def hash(self) -> str:
        return config_hash(self.config)

    def reset_to_defaults(self):
        """Resets configuration to DEFAULT_CONFIG."""
        self.config = get_default_config()
        logger.info("[CONFIG] configuration reset to defaults")
