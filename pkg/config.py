"""Centralized Configuration Module for plrnn-ssm.

This module provides one place to resolve environment-level settings
(output directory, log level, worker count, default seed) with support
for multiple sources (explicit arguments, environment variables, .env
files and built-in defaults).

Resolution order for every setting:
1. Explicit value passed by the caller (e.g. a CLI flag)
2. Environment variable PLRNN_SSM_<NAME> (from .env or the process)
3. Built-in default

Usage:
    from config import Config

    Config.configure_logging()
    out_dir = Config.get_output_dir()
    workers = Config.get_workers(override=args.workers)
    show_bars = Config.progress_enabled()  # False in production
"""

import logging
import os
import sys
from pathlib import Path
from typing import Any, Callable, Optional, TypeVar

from dotenv import load_dotenv

logger = logging.getLogger(__name__)

T = TypeVar("T")

ENV_PREFIX = "PLRNN_SSM_"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

DEFAULTS = {
    "OUTPUT_DIR": "runs",
    "LOG_LEVEL": "INFO",
    "WORKERS": "1",
    "ENVIRONMENT": "development",
    "SEED": "0",
}


class Config:
    """Centralized management of environment-level settings.

    All methods are static or class methods so the configuration can be
    reached from anywhere without passing an object around.
    """

    _env_loaded = False
    _logging_configured = False

    @classmethod
    def _ensure_env_loaded(cls) -> None:
        """Ensure .env file is loaded exactly once."""
        if not cls._env_loaded:
            load_dotenv()
            cls._env_loaded = True
            logger.debug("Environment variables loaded")

    @classmethod
    def get_setting(
        cls,
        name: str,
        override: Optional[Any] = None,
        cast: Callable[[str], T] = str,
    ) -> T:
        """Resolve a setting by priority order.

        Args:
            name: Setting name without prefix (e.g. 'OUTPUT_DIR')
            override: Explicit value; wins when not None
            cast: Conversion applied to string values

        Returns:
            The resolved, cast value

        Raises:
            ValueError: If the name is unknown or the value cannot be cast

        Example:
            >>> Config.get_setting("WORKERS", cast=int)
            1
        """
        if name not in DEFAULTS:
            raise ValueError(
                f"Unknown setting '{name}'. Valid options: {', '.join(DEFAULTS)}"
            )
        if override is not None:
            return cast(override) if isinstance(override, str) else override

        cls._ensure_env_loaded()
        raw = os.getenv(ENV_PREFIX + name)
        if raw is None or raw == "":
            raw = DEFAULTS[name]
        try:
            return cast(raw)
        except (TypeError, ValueError) as e:
            raise ValueError(f"Setting {ENV_PREFIX}{name}={raw!r} is invalid: {e}")

    @classmethod
    def is_production(cls) -> bool:
        """Check if running in production environment.

        Returns:
            True if PLRNN_SSM_ENVIRONMENT is 'production', False otherwise
        """
        return cls.get_setting("ENVIRONMENT").lower() == "production"

    @classmethod
    def get_output_dir(cls, override: Optional[str] = None) -> Path:
        """Directory under which run artifacts are written."""
        return Path(cls.get_setting("OUTPUT_DIR", override))

    @classmethod
    def get_workers(cls, override: Optional[int] = None) -> int:
        """Number of worker processes for the fit pool (at least 1)."""
        return max(1, cls.get_setting("WORKERS", override, int))

    @classmethod
    def get_seed(cls, override: Optional[int] = None) -> int:
        """Default experiment seed."""
        return cls.get_setting("SEED", override, int)

    @classmethod
    def get_log_level(cls, override: Optional[str] = None) -> str:
        level = cls.get_setting("LOG_LEVEL", override).upper()
        if level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            raise ValueError(
                f"Invalid log level '{level}'. "
                "Valid options: DEBUG, INFO, WARNING, ERROR, CRITICAL"
            )
        return level

    @classmethod
    def progress_enabled(cls) -> bool:
        """Progress bars only on interactive, non-production runs."""
        return not cls.is_production() and sys.stderr.isatty()

    @classmethod
    def configure_logging(cls, level: Optional[str] = None) -> None:
        """Install a single stream handler on the root logger.

        Calling it again only updates the level.

        Args:
            level: Optional override of PLRNN_SSM_LOG_LEVEL
        """
        resolved = cls.get_log_level(level)
        root = logging.getLogger()
        if not cls._logging_configured:
            handler = logging.StreamHandler()
            handler.setFormatter(logging.Formatter(LOG_FORMAT))
            root.addHandler(handler)
            cls._logging_configured = True
        root.setLevel(resolved)

    @classmethod
    def validate_config(cls, output_dir: Optional[str] = None) -> dict:
        """Validate the environment-level configuration.

        Returns:
            Dictionary with validation results:
            {
                'output_dir': str,
                'output_dir_writable': bool,
                'workers': int,
                'log_level': str,
                'environment': str
            }
        """
        cls._ensure_env_loaded()
        out = cls.get_output_dir(output_dir)
        writable = False
        try:
            out.mkdir(parents=True, exist_ok=True)
            writable = os.access(out, os.W_OK)
        except OSError as e:
            logger.warning(f"Output directory {out} is not usable: {e}")

        return {
            "output_dir": str(out),
            "output_dir_writable": writable,
            "workers": cls.get_workers(),
            "log_level": cls.get_log_level(),
            "environment": "production" if cls.is_production() else "development",
        }
