from .settings import settings
from .logging_config import setup_logging, get_logger

__all__ = ["settings", "setup_logging", "get_logger"]
