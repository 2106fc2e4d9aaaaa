import hashlib
import logging
import os
from collections.abc import Iterable
from pathlib import Path
from typing import Any

from dotenv import load_dotenv
from rich.logging import RichHandler

from semantic_smoothing.errors import ConfigurationError

PROJECT_ROOT = Path(__file__).parent.parent
load_dotenv(PROJECT_ROOT / ".env")

MIN_MAX_TRIALS = 100_000
SEED_MASK = (1 << 64) - 1
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


class Config:
    """Simple application configuration."""

    @property
    def LOG_LEVEL(self) -> str:  # noqa: N802
        """Get log level from environment."""
        return os.getenv("LOG_LEVEL", "INFO").upper()

    @property
    def SMOOTHING_SEED(self) -> int:  # noqa: N802
        """Get the root seed used when no --seed flag is given."""
        return self._int_setting("SMOOTHING_SEED", 0)

    @property
    def SMOOTHING_JOBS(self) -> int:  # noqa: N802
        """Get default per-example parallelism."""
        return self._int_setting("SMOOTHING_JOBS", 1)

    @property
    def SMOOTHING_OUTPUT_DIR(self) -> Path:  # noqa: N802
        """Get the directory under which run directories are created."""
        return Path(os.getenv("SMOOTHING_OUTPUT_DIR", "runs"))

    @property
    def SMOOTHING_MAX_TRIALS(self) -> int:  # noqa: N802
        """Get the largest binomial trial count supported by the exact tests."""
        return max(self._int_setting("SMOOTHING_MAX_TRIALS", 200_000), MIN_MAX_TRIALS)

    def _int_setting(self, name: str, default: int) -> int:
        raw = os.getenv(name)
        if raw is None or not raw.strip():
            return default
        try:
            return int(raw)
        except ValueError as e:
            raise ConfigurationError(f"{name} must be an integer, got {raw!r}") from e

    def validate(self) -> None:
        """Validate configuration values."""
        if self.LOG_LEVEL not in LOG_LEVELS:
            raise ConfigurationError(f"LOG_LEVEL {self.LOG_LEVEL!r} is not a logging level")
        if self.SMOOTHING_JOBS < 1:
            raise ConfigurationError("SMOOTHING_JOBS must be at least 1")
        if self.SMOOTHING_SEED < 0:
            raise ConfigurationError("SMOOTHING_SEED must be nonnegative")

    def get_all_settings(self) -> dict[str, Any]:
        """Get all configuration settings for debugging."""
        return {
            "LOG_LEVEL": self.LOG_LEVEL,
            "SMOOTHING_SEED": self.SMOOTHING_SEED,
            "SMOOTHING_JOBS": self.SMOOTHING_JOBS,
            "SMOOTHING_OUTPUT_DIR": str(self.SMOOTHING_OUTPUT_DIR),
            "SMOOTHING_MAX_TRIALS": self.SMOOTHING_MAX_TRIALS,
        }


def configure_logging(level: str | None = None) -> None:
    """Route package logs through a rich handler."""
    logging.basicConfig(
        level=getattr(logging, (level or config.LOG_LEVEL).upper(), logging.INFO),
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(rich_tracebacks=True, show_path=False)],
        force=True,
    )


def load_config_file(path: Path, allowed_keys: Iterable[str] | None = None) -> dict[str, str]:
    """
    Read a key=value configuration file.

    Keys are normalized to flag spelling with underscores ("t2", "log_level").
    Blank lines and lines starting with '#' are skipped. When allowed_keys is
    given, any other key is rejected with its line number.
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigurationError(f"Cannot read config file {path}: {e}") from e

    allowed = set(allowed_keys) if allowed_keys is not None else None
    values: dict[str, str] = {}
    for line_number, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigurationError(
                f"{path}:{line_number}: expected key=value, got {raw_line!r}"
            )
        key, value = line.split("=", 1)
        key = key.strip().lstrip("-").replace("-", "_").lower()
        if not key:
            raise ConfigurationError(f"{path}:{line_number}: empty key")
        if allowed is not None and key not in allowed:
            raise ConfigurationError(f"{path}:{line_number}: unknown key {key!r}")
        values[key] = value.strip()
    return values


def derive_seed(seed: int, *tags: str | int) -> int:
    """Derive a 64-bit component seed from the root seed and a tag path."""
    material = ":".join([str(seed & SEED_MASK), *(str(tag) for tag in tags)])
    digest = hashlib.blake2b(material.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big")


# Global config instance
config = Config()
