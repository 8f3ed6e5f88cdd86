"""
Configuration utilities for DroopSim.

Settings come from ``DROOPSIM_*`` environment variables (a ``.env`` file is
honoured through python-dotenv) with JSON overrides from ``config.json`` in
the data directory.  Outside production the JSON file wins over the
defaults; environment variables always win in :func:`get_config_value`.
"""

from __future__ import annotations

import os
import sys
import json
import logging
from logging.handlers import RotatingFileHandler

from dotenv import load_dotenv


# ----------------------------------------------------------------------
# Paths and constants
# ----------------------------------------------------------------------
load_dotenv()

APP_NAME = "DroopSim"

DEFAULT_DATA_DIR = os.getenv(
    "DROOPSIM_DATA_DIR",
    os.path.join(os.getenv("LOCALAPPDATA", os.path.expanduser("~")), APP_NAME),
)
CONFIG_PATH = os.path.join(DEFAULT_DATA_DIR, "config.json")
DEFAULT_LOG_FILE = os.path.join(DEFAULT_DATA_DIR, "droopsim.log")

LOG_FORMAT = "%(asctime)s [%(levelname)s] %(message)s"

# key -> (type, default)
CONFIG_DEFAULTS: dict[str, tuple[type, object]] = {
    "LOG_LEVEL": (str, "INFO"),
    "LOG_FILE": (str, DEFAULT_LOG_FILE),
    "OUT_DIR": (str, "results"),
    "DT_S": (float, 0.001),
    "SWEEP_WORKERS": (int, 1),
    "ROCOF_WINDOW_S": (float, 0.1),
    "PENCIL_MAX_SAMPLES": (int, 1000),
}


# ----------------------------------------------------------------------
# Logger setup
# ----------------------------------------------------------------------
logger = logging.getLogger(__name__)

_logging_configured = False


def configure_logging(log_file: str | None = None, level: str | None = None) -> None:
    """Attach a rotating file handler and a stdout handler to the root logger.

    Safe to call more than once; only the first call installs handlers.
    """
    global _logging_configured
    if _logging_configured:
        return

    level_name = (level or os.getenv("DROOPSIM_LOG_LEVEL", "INFO")).upper()
    numeric_level = getattr(logging, level_name, logging.INFO)
    formatter = logging.Formatter(LOG_FORMAT)

    handlers: list[logging.Handler] = []
    stream_handler = logging.StreamHandler(sys.stdout)
    stream_handler.setLevel(numeric_level)
    stream_handler.setFormatter(formatter)
    handlers.append(stream_handler)

    if log_file:
        try:
            os.makedirs(os.path.dirname(os.path.abspath(log_file)), exist_ok=True)
            file_handler = RotatingFileHandler(
                log_file, maxBytes=10 * 1024 * 1024, backupCount=5
            )
            file_handler.setLevel(numeric_level)
            file_handler.setFormatter(formatter)
            handlers.append(file_handler)
        except OSError as e:
            logger.warning(f"Could not open log file {log_file}: {e}")

    root = logging.getLogger()
    root.setLevel(numeric_level)
    for handler in handlers:
        root.addHandler(handler)
    _logging_configured = True


# ----------------------------------------------------------------------
# Config loading and saving
# ----------------------------------------------------------------------
def ensure_data_dir() -> None:
    """Create the default data directory if it does not already exist."""
    os.makedirs(DEFAULT_DATA_DIR, exist_ok=True)


def _coerce(key: str, raw, kind: type):
    try:
        return kind(raw)
    except (TypeError, ValueError) as e:
        raise RuntimeError(f"Invalid value for {key}: {raw!r} ({e})") from e


def load_config() -> dict:
    """Build the configuration from environment defaults and JSON overrides."""
    env = os.getenv("DROOPSIM_ENV", "development").lower()
    config: dict = {"ENV": env}
    for key, (kind, default) in CONFIG_DEFAULTS.items():
        config[key] = _coerce(key, os.getenv(f"DROOPSIM_{key}", default), kind)

    if os.path.exists(CONFIG_PATH) and env != "production":
        try:
            with open(CONFIG_PATH, "r", encoding="utf-8") as f:
                file_config = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            logger.warning(f"Failed to load config.json overrides: {e}")
        else:
            for key, value in file_config.items():
                if key in CONFIG_DEFAULTS:
                    value = _coerce(key, value, CONFIG_DEFAULTS[key][0])
                config[key] = value
            logger.debug(f"Loaded config overrides from {CONFIG_PATH}")

    return config


def save_config(config_dict: dict) -> None:
    """Persist configuration overrides to disk."""
    try:
        ensure_data_dir()
        with open(CONFIG_PATH, "w", encoding="utf-8") as f:
            json.dump(config_dict, f, indent=4)
        logger.info(f"Saved config to {CONFIG_PATH}")
    except OSError as e:
        logger.error(f"Failed to save config: {e}")
        raise


# ----------------------------------------------------------------------
# Caching helpers
# ----------------------------------------------------------------------
_app_config_cache: dict | None = None


def get_config_value(key: str, default=None):
    """Retrieve a configuration value, preferring environment variables."""
    env_key = f"DROOPSIM_{key}"
    if env_key in os.environ:
        kind = CONFIG_DEFAULTS.get(key, (str, None))[0]
        return _coerce(key, os.environ[env_key], kind)
    global _app_config_cache
    if _app_config_cache is None:
        _app_config_cache = load_config()
    return _app_config_cache.get(key, default)


def reload_config_cache() -> None:
    """Force a fresh reload of the configuration."""
    global _app_config_cache
    _app_config_cache = load_config()


# ----------------------------------------------------------------------
# Resource path helper
# ----------------------------------------------------------------------
def get_resource_path(relative_path: str) -> str:
    """Return the absolute path to a resource shipped with the application.

    In a frozen bundle ``sys._MEIPASS`` points at the unpacked resources;
    from source, resources live next to this module.
    """
    try:
        base_path = sys._MEIPASS  # type: ignore[attr-defined]
    except AttributeError:
        base_path = os.path.dirname(os.path.abspath(__file__))
    return os.path.join(base_path, relative_path)


CASES_DIR = get_resource_path("cases")


__all__ = [
    "APP_NAME",
    "CASES_DIR",
    "CONFIG_PATH",
    "DEFAULT_DATA_DIR",
    "configure_logging",
    "load_config",
    "save_config",
    "get_config_value",
    "reload_config_cache",
    "get_resource_path",
]
