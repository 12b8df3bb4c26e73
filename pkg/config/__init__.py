"""Configuration package."""

from config.settings import Settings, settings
from config.logging_config import setup_logging, get_stage_logger

__all__ = ["Settings", "settings", "setup_logging", "get_stage_logger"]
